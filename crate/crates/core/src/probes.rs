//! Statistical tamper-evidence probes and the metrics used to score them.
//!
//! Every probe maps an image to a [`Heatmap`]; [`detection_metrics`] turns a
//! heatmap and the true hole mask into pixel AUC, F1 and a sample verdict.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, Graph, Mode, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::nn::{Conv, ConvOpts};
use crate::raster::{stack_images, Heatmap, Image};

pub const DEFAULT_BINS: usize = 64;
pub const DEFAULT_SMOOTHING: f64 = 1e-8;
pub const DEFAULT_PATCH: usize = 5;
pub const DEFAULT_STRIDE: usize = 2;
pub const DEFAULT_TAU: f64 = 1e-3;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_COVERAGE: f64 = 0.25;

/// Smoothed intensity histogram of one region, all channels pooled.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionHistogram {
    pub bins: Vec<f64>,
}

impl RegionHistogram {
    /// Histogram of the pixels where `mask == hole`. Normalized frequencies get
    /// `smoothing` added per bin and are renormalized.
    pub fn of_region(img: &Image, mask: &Mask, hole: bool, bins: usize, smoothing: f64) -> Result<Self> {
        mask.check_image(img)?;
        if bins == 0 {
            return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
        }
        let mut counts = vec![0usize; bins];
        let mut total = 0usize;
        for c in 0..img.channels() {
            for (v, &m) in img.plane(c).iter().zip(mask.data()) {
                if (m == 1) == hole {
                    counts[bin_of(*v, bins)] += 1;
                    total += 1;
                }
            }
        }
        if total == 0 {
            return Err(Error::EmptyRegion(if hole { "hole region" } else { "known region" }));
        }
        let norm = 1.0 + smoothing * bins as f64;
        let bins = counts
            .iter()
            .map(|&k| (k as f64 / total as f64 + smoothing) / norm)
            .collect();
        Ok(Self { bins })
    }

    /// `D_KL(self ‖ other)`.
    pub fn kl(&self, other: &RegionHistogram) -> f64 {
        self.bins
            .iter()
            .zip(&other.bins)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, q)| p * (p / q).ln())
            .sum::<f64>()
            .max(0.0)
    }
}

fn bin_of(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// `D_KL(P(X_Φ) ‖ P(X_Ω))` over smoothed histograms with the default smoothing.
pub fn kl_domain_gap(img: &Image, mask: &Mask, bins: usize) -> Result<f64> {
    kl_domain_gap_with(img, mask, bins, DEFAULT_SMOOTHING)
}

pub fn kl_domain_gap_with(img: &Image, mask: &Mask, bins: usize, smoothing: f64) -> Result<f64> {
    let known = RegionHistogram::of_region(img, mask, false, bins, smoothing)?;
    let hole = RegionHistogram::of_region(img, mask, true, bins, smoothing)?;
    Ok(known.kl(&hole))
}

/// Per-pixel heat from the histogram log-ratio of the pixel's bin between the
/// two regions, min-max normalized.
pub fn kl_heatmap(img: &Image, mask: &Mask, bins: usize) -> Result<Heatmap> {
    let known = RegionHistogram::of_region(img, mask, false, bins, DEFAULT_SMOOTHING)?;
    let hole = RegionHistogram::of_region(img, mask, true, bins, DEFAULT_SMOOTHING)?;
    let (h, w) = img.dims();
    let mut raw = vec![0.0; h * w];
    for c in 0..img.channels() {
        for (o, v) in raw.iter_mut().zip(img.plane(c)) {
            let b = bin_of(*v, bins);
            *o += (hole.bins[b] / known.bins[b]).ln().abs();
        }
    }
    Ok(Heatmap::normalized(h, w, &raw))
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!("window must be odd and positive, got {window}")));
    }
    Ok(())
}

/// Raw windowed variance with replicate padding, averaged over channels.
pub fn local_variance(img: &Image, window: usize) -> Result<Vec<f64>> {
    check_window(window)?;
    let (h, w) = img.dims();
    let half = (window / 2) as isize;
    let n = (window * window) as f64;
    let mut out = vec![0.0; h * w];
    let mut vals = Vec::with_capacity(window * window);
    for c in 0..img.channels() {
        let p = img.plane(c);
        for r in 0..h {
            for x in 0..w {
                vals.clear();
                for dy in -half..=half {
                    let rr = (r as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -half..=half {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        vals.push(p[rr * w + xx]);
                    }
                }
                let mean = vals.iter().sum::<f64>() / n;
                out[r * w + x] += vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            }
        }
    }
    let k = img.channels() as f64;
    out.iter_mut().for_each(|v| *v /= k);
    Ok(out)
}

/// [`local_variance`] min-max normalized to a heatmap.
pub fn local_variance_map(img: &Image, window: usize) -> Result<Heatmap> {
    let raw = local_variance(img, window)?;
    let (h, w) = img.dims();
    Ok(Heatmap::normalized(h, w, &raw))
}

/// Window origins along one axis: every `stride` steps, plus the last one.
fn grid(n: usize, k: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=n - k).step_by(stride).collect();
    if *out.last().unwrap() != n - k {
        out.push(n - k);
    }
    out
}

/// SSD between the `k×k` windows at `a` and `b`, abandoning once it exceeds `bound`.
fn window_ssd(img: &Image, k: usize, a: (usize, usize), b: (usize, usize), bound: f64) -> f64 {
    let w = img.width();
    let mut s = 0.0;
    for c in 0..img.channels() {
        let p = img.plane(c);
        for dy in 0..k {
            let ra = &p[(a.0 + dy) * w + a.1..][..k];
            let rb = &p[(b.0 + dy) * w + b.1..][..k];
            s += ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            if s > bound {
                return s;
            }
        }
    }
    s
}

/// Abnormal-similarity heatmap. Windows of side `patch` on a `stride` grid are
/// compared (SSD over all channels) with every non-overlapping window; the
/// nearest neighbour gives heat 1 below `tau`, `exp(-ssd/tau)` otherwise, and
/// heat is splatted onto covered pixels by maximum.
pub fn patch_similarity_map(img: &Image, patch: usize, stride: usize, tau: f64) -> Result<Heatmap> {
    check_window(patch)?;
    let (h, w) = img.dims();
    if patch > h || patch > w {
        return Err(Error::InvalidArgument(format!("patch {patch} larger than image {h}x{w}")));
    }
    if stride == 0 || !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("stride {stride} / tau {tau} must be positive")));
    }
    let mut heat = vec![0.0f64; h * w];
    for &y in &grid(h, patch, stride) {
        for &x in &grid(w, patch, stride) {
            let mut best = f64::INFINITY;
            'search: for cy in 0..=h - patch {
                let rows_apart = cy.abs_diff(y) >= patch;
                for cx in 0..=w - patch {
                    if !rows_apart && cx.abs_diff(x) < patch {
                        continue;
                    }
                    let d = window_ssd(img, patch, (y, x), (cy, cx), best);
                    if d < best {
                        best = d;
                        if best < tau {
                            break 'search;
                        }
                    }
                }
            }
            let v = if best < tau { 1.0 } else { (-best / tau).exp() };
            for r in y..y + patch {
                for o in &mut heat[r * w + x..r * w + x + patch] {
                    *o = o.max(v);
                }
            }
        }
    }
    Heatmap::new(h, w, heat)
}

/// Pixel-level scores of one heatmap against the true hole mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub auc: f64,
    pub f1: f64,
    /// Sample-level "forged" verdict.
    pub flagged: bool,
}

/// Probability that a random positive outranks a random negative, ties 0.5.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(labels.len(), scores.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::EmptyRegion("AUC needs both tampered and pristine pixels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUC, F1 at `threshold` (strictly greater counts as detected) and the
/// coverage verdict: flagged iff detections cover more than `coverage_rule` of
/// the true hole.
pub fn detection_metrics(h: &Heatmap, gt: &Mask, threshold: f64, coverage_rule: f64) -> Result<DetectionReport> {
    if (h.height(), h.width()) != gt.dims() {
        return Err(Error::shape(
            format!("{}x{}", gt.height(), gt.width()),
            format!("{}x{}", h.height(), h.width()),
        ));
    }
    if gt.count() == 0 {
        return Err(Error::EmptyRegion("ground-truth mask has no tampered pixel"));
    }
    let labels: Vec<bool> = gt.data().iter().map(|&m| m == 1).collect();
    let auc = if gt.count() == labels.len() {
        // No pristine pixel to rank against.
        0.5
    } else {
        auc(h.data(), &labels)?
    };
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&v, &l) in h.data().iter().zip(&labels) {
        match (v > threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    let f1 = 2.0 * tp as f64 / (2 * tp + fp + fne) as f64;
    let flagged = tp as f64 / gt.count() as f64 > coverage_rule;
    Ok(DetectionReport { auc, f1, flagged })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDetection {
    pub name: String,
    #[serde(flatten)]
    pub report: DetectionReport,
}

/// Per-image reports with their means; `acc` is the fraction flagged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub per_image: Vec<ImageDetection>,
    pub auc_mean: f64,
    pub f1_mean: f64,
    pub acc: f64,
}

impl CorpusReport {
    pub fn from_images(per_image: Vec<ImageDetection>) -> Self {
        let n = per_image.len().max(1) as f64;
        let auc_mean = per_image.iter().map(|d| d.report.auc).sum::<f64>() / n;
        let f1_mean = per_image.iter().map(|d| d.report.f1).sum::<f64>() / n;
        let acc = per_image.iter().filter(|d| d.report.flagged).count() as f64 / n;
        Self {
            per_image,
            auc_mean,
            f1_mean,
            acc,
        }
    }
}

/// Crude tamper used to train the learned detector: every hole pixel copies
/// the nearest known pixel in its row (left wins ties), else in its column,
/// else the mean of the known region.
pub fn naive_copy_fill(img: &Image, mask: &Mask) -> Result<Image> {
    mask.check_image(img)?;
    let (h, w) = img.dims();
    let known = mask.complement();
    if known.count() == 0 {
        return Err(Error::EmptyRegion("known region"));
    }
    let nearest = |line: &mut dyn Iterator<Item = (usize, usize)>, at: usize| -> Option<(usize, usize)> {
        line.filter(|&(r, x)| !mask.get(r, x))
            .map(|(r, x)| (if r == at / w { x.abs_diff(at % w) } else { r.abs_diff(at / w) }, (r, x)))
            .min_by_key(|&(d, (r, x))| (d, r, x))
            .map(|(_, p)| p)
    };
    let mut out = img.clone();
    for r in 0..h {
        for x in 0..w {
            if !mask.get(r, x) {
                continue;
            }
            let at = r * w + x;
            let src = nearest(&mut (0..w).map(|xx| (r, xx)), at).or_else(|| nearest(&mut (0..h).map(|rr| (rr, x)), at));
            for c in 0..img.channels() {
                let v = match src {
                    Some((sr, sx)) => img.get(c, sr, sx),
                    None => {
                        let p = img.plane(c);
                        known.data().iter().zip(p).filter(|(m, _)| **m == 1).map(|(_, v)| v).sum::<f64>()
                            / known.count() as f64
                    }
                };
                out.set(c, r, x, v);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Side of the random training crops.
    pub crop: usize,
    pub width: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 3e-3,
            batch: 4,
            crop: 32,
            width: 8,
        }
    }
}

/// Fully convolutional patch classifier (7×7 receptive field) emitting a
/// per-pixel tamper probability.
#[derive(Clone, Debug)]
pub struct PatchDetector {
    params: ParamSet,
    layers: Vec<Conv>,
}

impl PatchDetector {
    /// Untrained detector. The head starts at zero, so every pixel scores 0.5.
    pub fn new(seed: u64, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut layers = vec![
            Conv::new(&mut params, "det.conv1", 3, width, 3, ConvOpts::same(3), &mut rng),
            Conv::new(&mut params, "det.conv2", width, width, 3, ConvOpts::same(3), &mut rng),
            Conv::new(&mut params, "det.conv3", width, width, 3, ConvOpts::same(3), &mut rng),
        ];
        let head = Conv::new(&mut params, "det.head", width, 1, 1, ConvOpts::same(1), &mut rng);
        params.param_mut(head.weight_id()).data.fill(0.0);
        layers.push(head);
        Self { params, layers }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn logits(&self, g: &mut Graph, x: &Tensor, trainable: bool) -> (crate::autograd::Var, crate::autograd::Bound) {
        let b = self.params.bind(g, trainable);
        let mut ps = self.params.clone();
        let mut y = g.constant(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            y = layer.forward(g, &mut ps, &b, Mode::EVAL, y);
            if i + 1 < self.layers.len() {
                y = g.leaky_relu(y, 0.2);
            }
        }
        (y, b)
    }

    /// Per-pixel tamper probabilities (not min-max normalized).
    pub fn heatmap(&self, img: &Image) -> Heatmap {
        let rgb = img.to_rgb();
        let mut g = Graph::new();
        let (y, _) = self.logits(&mut g, &stack_images(&[&rgb]), false);
        let data = g
            .value(y)
            .data
            .iter()
            .map(|z| 1.0 / (1.0 + (-z).exp()))
            .collect();
        let (h, w) = img.dims();
        Heatmap::new(h, w, data).expect("sigmoid output lies in [0, 1]")
    }

    /// Image-level score: mean of the top 5% pixel probabilities.
    pub fn score(heat: &Heatmap) -> f64 {
        let mut v = heat.data().to_vec();
        v.sort_by(|a, b| b.total_cmp(a));
        let k = v.len().div_ceil(20).max(1);
        v[..k].iter().sum::<f64>() / k as f64
    }

    /// Pixel metrics at the 0.5 threshold; the sample verdict uses the
    /// image score against 0.5 rather than the coverage rule.
    pub fn detect(&self, img: &Image, gt: &Mask) -> Result<(Heatmap, DetectionReport)> {
        let heat = self.heatmap(img);
        let mut report = detection_metrics(&heat, gt, DEFAULT_THRESHOLD, DEFAULT_COVERAGE)?;
        report.flagged = Self::score(&heat) > DEFAULT_THRESHOLD;
        Ok((heat, report))
    }
}

/// Trains a [`PatchDetector`] with per-pixel logistic loss on random crops of
/// `(tampered image, tamper mask)` pairs.
pub fn train_patch_detector(corpus: &[(Image, Mask)], seed: u64, cfg: &DetectorConfig) -> Result<PatchDetector> {
    if corpus.is_empty() {
        return Err(Error::EmptyRegion("detector training corpus"));
    }
    let mut has = (false, false);
    for (img, m) in corpus {
        m.check_image(img)?;
        if img.height() < cfg.crop || img.width() < cfg.crop {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} smaller than crop {}",
                img.height(),
                img.width(),
                cfg.crop
            )));
        }
        has.0 |= m.count() > 0;
        has.1 |= m.count() < m.data().len();
    }
    if !(has.0 && has.1) {
        return Err(Error::InvalidArgument("detector corpus needs both tampered and pristine pixels".into()));
    }
    let mut det = PatchDetector::new(seed, cfg.width);
    let mut opt = Adam::new(&det.params, cfg.lr, (0.9, 0.999));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6465_7465_6374);
    let k = cfg.crop;
    for _ in 0..cfg.steps {
        let mut xs = Vec::with_capacity(cfg.batch);
        let mut ys = Vec::with_capacity(cfg.batch * k * k);
        for _ in 0..cfg.batch {
            let (img, m) = &corpus[rng.random_range(0..corpus.len())];
            let r0 = rng.random_range(0..=img.height() - k);
            let x0 = rng.random_range(0..=img.width() - k);
            let rgb = img.to_rgb();
            xs.push(Image::from_fn(k, k, 3, |c, r, x| rgb.get(c, r0 + r, x0 + x)));
            ys.extend((0..k * k).map(|i| if m.get(r0 + i / k, x0 + i % k) { 1.0 } else { 0.0 }));
        }
        let refs: Vec<&Image> = xs.iter().collect();
        let mut g = Graph::new();
        let (z, b) = det.logits(&mut g, &stack_images(&refs), true);
        // Logistic loss softplus(z) - y·z.
        let sp = g.softplus(z);
        let yz = g.mul_const(z, Tensor::new(vec![cfg.batch, 1, k, k], ys));
        let l = g.sub(sp, yz);
        let loss = g.mean(l);
        let grads = g.backward(loss);
        opt.step(&mut det.params, &b.grads(&grads, &g));
    }
    Ok(det)
}

/// Random corpus-independent helper for tests and tools: a seeded uniform noise image.
pub fn noise_image(seed: u64, h: usize, w: usize, c: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, c, |_, _, _| rng.random::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Image {
        Image::from_fn(h, w, 1, |_, r, x| f(r, x))
    }

    #[test]
    fn kl_identical_regions_is_zero() {
        let img = gray(8, 8, |_, x| if x % 2 == 0 { 0.1 } else { 0.9 });
        let mask = Mask::from_fn(8, 8, |r, _| r < 4);
        assert!(kl_domain_gap(&img, &mask, 64).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_two_bin_closed_form() {
        let mask = Mask::from_fn(4, 4, |r, _| r < 2);
        let img = gray(4, 4, |r, _| if r < 2 { 0.0 } else { 1.0 });
        let eps: f64 = 1e-3;
        let e = eps / (1.0 + 2.0 * eps);
        let expect = (1.0 - e) * ((1.0 - e) / e).ln() + e * (e / (1.0 - e)).ln();
        let got = kl_domain_gap_with(&img, &mask, 2, eps).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn kl_same_distribution_noise_is_small() {
        let img = noise_image(7, 128, 64, 1);
        let mask = Mask::from_fn(128, 64, |r, _| r < 64);
        let gap = kl_domain_gap(&img, &mask, 64).unwrap();
        assert!(gap < 0.05, "{gap}");
    }

    #[test]
    fn kl_rejects_empty_regions() {
        let img = noise_image(1, 8, 8, 3);
        assert!(matches!(kl_domain_gap(&img, &Mask::zeros(8, 8), 64), Err(Error::EmptyRegion(_))));
        assert!(matches!(kl_domain_gap(&img, &Mask::ones(8, 8), 64), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn histogram_sums_to_one() {
        let img = noise_image(3, 16, 16, 3);
        let m = Mask::from_fn(16, 16, |r, x| r + x < 10);
        let hgram = RegionHistogram::of_region(&img, &m, true, 64, DEFAULT_SMOOTHING).unwrap();
        assert!((hgram.bins.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(hgram.bins.iter().all(|&b| b >= DEFAULT_SMOOTHING / (1.0 + 64.0 * DEFAULT_SMOOTHING)));
    }

    fn brute_variance(img: &Image, window: usize) -> Vec<f64> {
        let (h, w) = img.dims();
        let half = window as isize / 2;
        let mut out = vec![0.0; h * w];
        for c in 0..img.channels() {
            for r in 0..h {
                for x in 0..w {
                    let mut vals = Vec::new();
                    for dy in -half..=half {
                        for dx in -half..=half {
                            let rr = (r as isize + dy).max(0).min(h as isize - 1) as usize;
                            let xx = (x as isize + dx).max(0).min(w as isize - 1) as usize;
                            vals.push(img.get(c, rr, xx));
                        }
                    }
                    let n = vals.len() as f64;
                    let m = vals.iter().sum::<f64>() / n;
                    out[r * w + x] += vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                }
            }
        }
        out.iter().map(|v| v / img.channels() as f64).collect()
    }

    #[test]
    fn variance_examples() {
        let flat = Image::filled(9, 9, 3, 0.3);
        assert!(local_variance_map(&flat, 5).unwrap().data().iter().all(|&v| v == 0.0));
        let img = noise_image(2, 9, 9, 1);
        assert!(local_variance_map(&img, 1).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(local_variance_map(&img, 4).is_err());
        // 2×2-cell checkerboard: interior 3×3 windows hold 4 or 5 ones of 9.
        let checker = gray(12, 12, |r, x| ((r / 2 + x / 2) % 2) as f64);
        let raw = local_variance(&checker, 3).unwrap();
        assert_eq!(raw, brute_variance(&checker, 3));
        for v in &raw[12 * 5 + 5..12 * 5 + 7] {
            let p = [4.0 / 9.0, 5.0 / 9.0];
            assert!(p.iter().any(|p| (v - p * (1.0 - p)).abs() < 1e-15), "{v}");
        }
    }

    #[test]
    fn similarity_constant_image_all_hot() {
        let img = Image::filled(16, 16, 3, 0.5);
        let h = patch_similarity_map(&img, 5, 2, DEFAULT_TAU).unwrap();
        assert!(h.data().iter().all(|&v| v == 1.0));
    }

    fn copied_block(src: (usize, usize), dst: (usize, usize)) -> Image {
        let mut img = noise_image(11, 48, 48, 1);
        for r in 0..16 {
            for x in 0..16 {
                let v = img.get(0, src.0 + r, src.1 + x);
                img.set(0, dst.0 + r, dst.1 + x, v);
            }
        }
        img
    }

    #[test]
    fn similarity_flags_both_copies() {
        // At stride 1 every block pixel is covered by a window fully inside
        // the block; at stride 2 only the interior is guaranteed to be.
        for (src, dst, stride, border) in [((3, 5), (27, 29), 1, 0), ((2, 4), (28, 26), 2, 1)] {
            let img = copied_block(src, dst);
            let h = patch_similarity_map(&img, 5, stride, DEFAULT_TAU).unwrap();
            for (r0, x0) in [src, dst] {
                for r in r0 + border..r0 + 16 - border {
                    for x in x0 + border..x0 + 16 - border {
                        assert_eq!(h.get(r, x), 1.0, "({r},{x}) stride {stride}");
                    }
                }
            }
            assert!(h.get(0, 47) < 1.0 && h.get(47, 0) < 1.0);
        }
    }

    #[test]
    fn similarity_noise_stays_cold() {
        let img = noise_image(5, 32, 32, 3);
        let h = patch_similarity_map(&img, 5, 2, DEFAULT_TAU).unwrap();
        assert!(h.data().iter().cloned().fold(0.0, f64::max) < 0.5);
        assert!(patch_similarity_map(&img, 33, 2, DEFAULT_TAU).is_err());
    }

    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut s = 0.0;
        let mut n = 0.0;
        for (i, &a) in scores.iter().enumerate() {
            for (j, &b) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    n += 1.0;
                    s += if a > b {
                        1.0
                    } else if a == b {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        s / n
    }

    #[test]
    fn metrics_examples() {
        let gt = Mask::from_fn(6, 6, |r, x| r < 3 && x < 4);
        let perfect = Heatmap::new(6, 6, gt.to_f64()).unwrap();
        let rep = detection_metrics(&perfect, &gt, 0.5, 0.25).unwrap();
        assert_eq!(rep, DetectionReport { auc: 1.0, f1: 1.0, flagged: true });
        let rep = detection_metrics(&Heatmap::zeros(6, 6), &gt, 0.5, 0.25).unwrap();
        assert_eq!(rep, DetectionReport { auc: 0.5, f1: 0.0, flagged: false });
        assert!(detection_metrics(&perfect, &Mask::zeros(6, 6), 0.5, 0.25).is_err());
    }

    #[test]
    fn coverage_rule_boundary() {
        let gt = Mask::from_fn(4, 4, |r, _| r < 2);
        // Detect exactly 2 of 8 hole pixels: 25% is not "more than 25%".
        let h = Heatmap::new(4, 4, (0..16).map(|i| if i < 2 { 1.0 } else { 0.0 }).collect()).unwrap();
        let rep = detection_metrics(&h, &gt, 0.5, 0.25).unwrap();
        assert!(!rep.flagged);
        assert!((rep.f1 - 2.0 * 2.0 / (4.0 + 0.0 + 6.0)).abs() < 1e-15);
        let h = Heatmap::new(4, 4, (0..16).map(|i| if i < 3 { 1.0 } else { 0.0 }).collect()).unwrap();
        assert!(detection_metrics(&h, &gt, 0.5, 0.25).unwrap().flagged);
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Coarse quantization forces ties.
            let scores: Vec<f64> = (0..100).map(|_| (rng.random::<f64>() * 8.0).floor() / 8.0).collect();
            let mut labels: Vec<bool> = (0..100).map(|_| rng.random_bool(0.3)).collect();
            labels[0] = true;
            labels[1] = false;
            let a = auc(&scores, &labels).unwrap();
            prop_assert!((a - pairwise_auc(&scores, &labels)).abs() < 1e-9);
            let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).exp()).collect();
            prop_assert!((auc(&squashed, &labels).unwrap() - a).abs() < 1e-12);
        }

        #[test]
        fn kl_non_negative(seed in any::<u64>(), bins in 2usize..80) {
            let img = noise_image(seed, 12, 12, 3);
            let mask = Mask::from_fn(12, 12, |r, x| (r * 7 + x * 3) % 5 == 0);
            prop_assert!(kl_domain_gap(&img, &mask, bins).unwrap() >= 0.0);
        }
    }

    #[test]
    fn copy_fill_rules() {
        let img = gray(3, 4, |r, x| (r * 4 + x) as f64 / 12.0);
        let mask = Mask::from_fn(3, 4, |r, x| (r == 1 && x >= 1) || x == 3);
        let out = naive_copy_fill(&img, &mask).unwrap();
        assert_eq!(out.get(0, 1, 1), img.get(0, 1, 0));
        assert_eq!(out.get(0, 1, 3), img.get(0, 1, 0));
        assert_eq!(out.get(0, 0, 3), img.get(0, 0, 2));
        // Left wins ties.
        let mask = Mask::from_fn(1, 3, |_, x| x == 1);
        let row = gray(1, 3, |_, x| x as f64 * 0.5);
        assert_eq!(naive_copy_fill(&row, &mask).unwrap().get(0, 0, 1), 0.0);
        // A fully masked row falls back to its column.
        let mask = Mask::from_fn(3, 2, |r, _| r == 1);
        let col = gray(3, 2, |r, x| (r * 2 + x) as f64 / 6.0);
        let out = naive_copy_fill(&col, &mask).unwrap();
        assert_eq!(out.get(0, 1, 1), col.get(0, 0, 1));
    }

    #[test]
    fn untrained_detector_is_uninformative() {
        let det = PatchDetector::new(3, 8);
        let img = noise_image(4, 16, 16, 3);
        let gt = Mask::from_fn(16, 16, |r, _| r < 6);
        let (heat, rep) = det.detect(&img, &gt).unwrap();
        assert!(heat.data().iter().all(|&v| v == 0.5));
        assert_eq!(rep.auc, 0.5);
        assert!(!rep.flagged);
    }

    #[test]
    fn detector_training_is_deterministic() {
        let corpus: Vec<(Image, Mask)> = (0..3)
            .map(|i| {
                let img = noise_image(i, 32, 32, 3);
                let m = Mask::from_fn(32, 32, |r, x| (8..20).contains(&r) && (4..14 + i as usize).contains(&x));
                (naive_copy_fill(&img, &m).unwrap(), m)
            })
            .collect();
        let cfg = DetectorConfig {
            steps: 5,
            crop: 16,
            ..Default::default()
        };
        let a = train_patch_detector(&corpus, 9, &cfg).unwrap();
        let b = train_patch_detector(&corpus, 9, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.heatmap(&corpus[0].0), b.heatmap(&corpus[0].0));
        assert!(train_patch_detector(&[], 9, &cfg).is_err());
        let pristine = vec![(noise_image(1, 32, 32, 3), Mask::zeros(32, 32))];
        assert!(train_patch_detector(&pristine, 9, &cfg).is_err());
    }
}
