//! Quality metrics, JPEG post-processing and the anti-forensic comparison
//! across inpainting methods.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Cursor;
use std::path::Path;
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, ImageEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::classical::{diffuse_inpaint, exemplar_inpaint, DiffusionConfig};
use crate::corpus::NamedImage;
use crate::error::{Error, Result};
use crate::losses::FeaturePyramid;
use crate::masks::{generate_irregular, Mask, MaskBucket};
use crate::models::{Networks, Stage};
use crate::probes::{
    self, detection_metrics, kl_domain_gap, local_variance_map, naive_copy_fill, patch_similarity_map,
    train_patch_detector, CorpusReport, DetectionReport, DetectorConfig, ImageDetection, PatchDetector,
};
use crate::raster::{stack_images, Image};

/// PSNR in dB for images in `[0, 1]`; identical images give 100.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64;
    Ok(if mse == 0.0 { 100.0 } else { (10.0 * (1.0 / mse).log10()).min(100.0) })
}

/// Baseline JPEG encode and decode at quality `qf`.
pub fn jpeg_roundtrip(img: &Image, qf: u8) -> Result<Image> {
    if !(1..=100).contains(&qf) {
        return Err(Error::InvalidArgument(format!("JPEG quality must be in 1..=100, got {qf}")));
    }
    let mut buf = Vec::new();
    let enc = JpegEncoder::new_with_quality(Cursor::new(&mut buf), qf);
    let (w, h) = (img.width() as u32, img.height() as u32);
    if img.channels() == 1 {
        let gray: Vec<u8> = img.plane(0).iter().map(|&v| crate::raster::quantize(v)).collect();
        enc.write_image(&gray, w, h, image::ExtendedColorType::L8)?;
        let dec = image::load_from_memory(&buf)?.to_luma8();
        return Image::new(img.height(), img.width(), 1, dec.iter().map(|&v| v as f64 / 255.0).collect());
    }
    enc.write_image(img.to_rgb8().as_raw(), w, h, image::ExtendedColorType::Rgb8)?;
    let dec: DynamicImage = image::load_from_memory(&buf)?;
    Ok(Image::from_dynamic(&dec))
}

/// Mean squared distance between channel-normalized pyramid features,
/// averaged over scales.
pub fn proxy_lpips(pyr: &FeaturePyramid, a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let mut g = Graph::new();
    let bound = pyr.bind(&mut g);
    let xa = g.constant(stack_images(&[&a.to_rgb()]));
    let xb = g.constant(stack_images(&[&b.to_rgb()]));
    let fa = pyr.features(&mut g, &bound, xa);
    let fb = pyr.features(&mut g, &bound, xb);
    let mut total = 0.0;
    for (va, vb) in fa.iter().zip(&fb) {
        let (ta, tb) = (g.value(*va), g.value(*vb));
        let (_, c, h, w) = ta.dims4();
        let hw = h * w;
        let mut s = 0.0;
        for p in 0..hw {
            let na = (0..c).map(|k| ta.data[k * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
            let nb = (0..c).map(|k| tb.data[k * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
            s += (0..c)
                .map(|k| (ta.data[k * hw + p] / na - tb.data[k * hw + p] / nb).powi(2))
                .sum::<f64>();
        }
        total += s / hw as f64;
    }
    Ok(total / fa.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Stage1,
    SafePaint,
    Diffusion,
    Exemplar,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Stage1, Method::SafePaint, Method::Diffusion, Method::Exemplar];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Stage1 => "stage1",
            Method::SafePaint => "safepaint",
            Method::Diffusion => "diffusion",
            Method::Exemplar => "exemplar",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        matches!(self, Method::Stage1 | Method::SafePaint)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

pub const EXEMPLAR_PATCH: usize = 5;

/// Inpaints with one method. The learned methods need `nets`.
pub fn inpaint_with(method: Method, nets: Option<&mut Networks>, img: &Image, mask: &Mask) -> Result<Image> {
    match method {
        Method::Diffusion => diffuse_inpaint(img, mask, &DiffusionConfig::default()),
        Method::Exemplar => exemplar_inpaint(img, mask, EXEMPLAR_PATCH),
        Method::Stage1 | Method::SafePaint => {
            let nets = nets.ok_or_else(|| Error::Checkpoint(format!("method {method} needs a checkpoint")))?;
            let stage = if method == Method::Stage1 { Stage::Coarse } else { Stage::Full };
            nets.inpaint(img, mask, stage)
        }
    }
}

/// Evaluation mask for one image and bucket, seeded by the image name.
pub fn eval_mask(seed: u64, name: &str, bucket: MaskBucket, h: usize, w: usize) -> Result<Mask> {
    let salt = name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    generate_irregular(seed ^ salt ^ bucket.lower() as u64, bucket, h, w)
}

/// Trains the learned probe on naive copy-fill tampering of `images`.
pub fn train_copy_fill_detector(images: &[Image], seed: u64, cfg: &DetectorConfig) -> Result<PatchDetector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = images
        .iter()
        .map(|img| {
            let bucket = MaskBucket::new(10 * rng.random_range(1..5))?;
            let m = generate_irregular(rng.random(), bucket, img.height(), img.width())?;
            Ok((naive_copy_fill(img, &m)?, m))
        })
        .collect::<Result<Vec<_>>>()?;
    train_patch_detector(&corpus, seed, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub buckets: Vec<MaskBucket>,
    pub methods: Vec<Method>,
    /// JPEG quality applied to every output before scoring.
    pub jpeg_qf: Option<u8>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            buckets: vec![MaskBucket::new(10).unwrap(), MaskBucket::new(30).unwrap()],
            methods: Method::ALL.to_vec(),
            jpeg_qf: None,
            seed: 0,
        }
    }
}

pub const PROBE_NAMES: [&str; 3] = ["variance", "similarity", "learned"];

/// Scores of one method's output on one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub name: String,
    pub method: Method,
    pub bucket: String,
    pub psnr: f64,
    pub proxy_lpips: f64,
    pub kl_gap: f64,
    /// Mean patch-similarity heat over the hole.
    pub similarity_heat: f64,
    pub detection: BTreeMap<String, DetectionReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub count: usize,
    pub psnr_mean: f64,
    pub proxy_lpips_mean: f64,
    pub kl_gap_mean: f64,
    pub similarity_heat_mean: f64,
    pub probes: BTreeMap<String, CorpusReport>,
}

/// Corpus report: every record plus summaries keyed by method, then bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub jpeg_qf: Option<u8>,
    pub records: Vec<EvalRecord>,
    pub summary: BTreeMap<String, BTreeMap<String, MethodSummary>>,
}

impl EvalReport {
    pub fn records_for(&self, method: Method) -> impl Iterator<Item = &EvalRecord> {
        self.records.iter().filter(move |r| r.method == method)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn summarize(records: &[&EvalRecord]) -> MethodSummary {
    let n = records.len().max(1) as f64;
    let mean = |f: &dyn Fn(&EvalRecord) -> f64| records.iter().map(|r| f(r)).sum::<f64>() / n;
    let probes = PROBE_NAMES
        .iter()
        .map(|&p| {
            let per_image = records
                .iter()
                .map(|r| ImageDetection {
                    name: r.name.clone(),
                    report: r.detection[p],
                })
                .collect();
            (p.to_string(), CorpusReport::from_images(per_image))
        })
        .collect();
    MethodSummary {
        count: records.len(),
        psnr_mean: mean(&|r| r.psnr),
        proxy_lpips_mean: mean(&|r| r.proxy_lpips),
        kl_gap_mean: mean(&|r| r.kl_gap),
        similarity_heat_mean: mean(&|r| r.similarity_heat),
        probes,
    }
}

fn check_background(out: &Image, img: &Image, mask: &Mask, method: Method) -> Result<()> {
    for c in 0..img.channels() {
        for (i, (a, b)) in out.plane(c).iter().zip(img.plane(c)).enumerate() {
            if mask.data()[i] == 0 && a != b {
                return Err(Error::InvalidArgument(format!("{method} modified a known pixel")));
            }
        }
    }
    Ok(())
}

/// Inpaints every held-out image under every bucket with every method, then
/// scores the (optionally JPEG-compressed) outputs with the statistical and
/// learned probes.
pub fn antiforensic_eval(
    mut nets: Option<&mut Networks>,
    pyr: &FeaturePyramid,
    detector: &PatchDetector,
    held_out: &[NamedImage],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if held_out.is_empty() {
        return Err(Error::EmptyRegion("evaluation corpus"));
    }
    let mut records = Vec::new();
    for item in held_out {
        let img = &item.image;
        for &bucket in &cfg.buckets {
            let mask = eval_mask(cfg.seed, &item.name, bucket, img.height(), img.width())?;
            for &method in &cfg.methods {
                let out = inpaint_with(method, nets.as_deref_mut(), img, &mask)?;
                check_background(&out, img, &mask, method)?;
                let scored = match cfg.jpeg_qf {
                    Some(qf) => jpeg_roundtrip(&out, qf)?,
                    None => out,
                };
                let variance = local_variance_map(&scored, 5)?;
                let similarity =
                    patch_similarity_map(&scored, probes::DEFAULT_PATCH, probes::DEFAULT_STRIDE, probes::DEFAULT_TAU)?;
                let (_, learned) = detector.detect(&scored, &mask)?;
                let hole_heat = similarity
                    .data()
                    .iter()
                    .zip(mask.data())
                    .filter(|(_, &m)| m == 1)
                    .map(|(v, _)| v)
                    .sum::<f64>()
                    / mask.count() as f64;
                let detection = [
                    ("variance", detection_metrics(&variance, &mask, probes::DEFAULT_THRESHOLD, probes::DEFAULT_COVERAGE)?),
                    (
                        "similarity",
                        detection_metrics(&similarity, &mask, probes::DEFAULT_THRESHOLD, probes::DEFAULT_COVERAGE)?,
                    ),
                    ("learned", learned),
                ]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
                records.push(EvalRecord {
                    name: item.name.clone(),
                    method,
                    bucket: bucket.to_string(),
                    psnr: psnr(&scored, img)?,
                    proxy_lpips: proxy_lpips(pyr, &scored, img)?,
                    kl_gap: kl_domain_gap(&scored, &mask, probes::DEFAULT_BINS)?,
                    similarity_heat: hole_heat,
                    detection,
                });
            }
        }
    }
    let mut summary: BTreeMap<String, BTreeMap<String, MethodSummary>> = BTreeMap::new();
    for &method in &cfg.methods {
        let mine: Vec<&EvalRecord> = records.iter().filter(|r| r.method == method).collect();
        let entry = summary.entry(method.to_string()).or_default();
        for &bucket in &cfg.buckets {
            let key = bucket.to_string();
            let sel: Vec<&EvalRecord> = mine.iter().copied().filter(|r| r.bucket == key).collect();
            entry.insert(key, summarize(&sel));
        }
        entry.insert("all".to_string(), summarize(&mine));
    }
    Ok(EvalReport {
        jpeg_qf: cfg.jpeg_qf,
        records,
        summary,
    })
}
