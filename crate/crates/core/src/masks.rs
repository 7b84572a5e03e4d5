//! Binary hole masks, ratio buckets, brush-stroke synthesis and hole/background
//! compositing.
//!
//! A mask value of `1` marks a pixel to inpaint, `0` a known pixel.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(height * width, data.len()));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for x in 0..width {
                data.push(f(r, x) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, x: usize) -> bool {
        self.data[r * self.width + x] == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, x: usize, hole: bool) {
        self.data[r * self.width + x] = hole as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn ratio(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// `1 - M`.
    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Nearest-neighbour resampling; keeps the mask binary.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |r, x| {
            let sr = (r * self.height) / height;
            let sx = (x * self.width) / width;
            self.get(sr, sx)
        })
    }

    pub fn check_image(&self, img: &Image) -> Result<()> {
        if img.dims() != self.dims() {
            return Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", img.height(), img.width()),
            ));
        }
        Ok(())
    }

    /// Loads a 1-channel PNG (any format is converted to luma); values ≥ 128 are holes.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Mask> {
        let luma = image::open(path.as_ref())?.to_luma8();
        let (w, h) = luma.dimensions();
        Ok(Mask::from_fn(h as usize, w as usize, |r, x| {
            luma.get_pixel(x as u32, r as u32)[0] >= 128
        }))
    }

    pub fn to_gray8(&self) -> GrayImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, r| {
            Luma([if self.get(r as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Saves as 1-channel PNG: 0 = known, 255 = hole.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray8().save(path.as_ref())?;
        Ok(())
    }
}

/// A 10%-wide hole-ratio range `[lower, upper)`, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MaskBucket {
    lower: u32,
}

impl MaskBucket {
    pub const WIDTH: u32 = 10;

    pub fn new(lower: u32) -> Result<Self> {
        if lower % Self::WIDTH != 0 || lower >= 100 {
            return Err(Error::InvalidArgument(format!(
                "bucket lower bound must be a multiple of 10 below 100, got {lower}"
            )));
        }
        Ok(Self { lower })
    }

    pub fn all() -> impl Iterator<Item = MaskBucket> {
        (0..10).map(|i| MaskBucket { lower: i * 10 })
    }

    pub fn lower(&self) -> u32 {
        self.lower
    }

    pub fn upper(&self) -> u32 {
        self.lower + Self::WIDTH
    }

    pub fn contains(&self, ratio: f64) -> bool {
        let lo = self.lower as f64 / 100.0;
        let hi = self.upper() as f64 / 100.0;
        // the last bucket also owns ratio 1.0
        ratio >= lo && (ratio < hi || (self.upper() == 100 && ratio <= 1.0))
    }
}

impl fmt::Display for MaskBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.lower, self.upper())
    }
}

impl FromStr for MaskBucket {
    type Err = Error;

    /// Parses `"30-40"` (optionally with `%` signs).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("invalid bucket `{s}`, expected e.g. 30-40"));
        let cleaned = s.replace('%', "");
        let (lo, hi) = cleaned.split_once('-').ok_or_else(bad)?;
        let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u32 = hi.trim().parse().map_err(|_| bad())?;
        if hi != lo + Self::WIDTH {
            return Err(bad());
        }
        MaskBucket::new(lo).map_err(|_| bad())
    }
}

/// `I_gt ⊙ (1 − M) + M`: known pixels kept, holes set to exactly 1.0.
pub fn make_input(gt: &Image, mask: &Mask) -> Result<Image> {
    mask.check_image(gt)?;
    let mut out = gt.clone();
    let n = mask.data.len();
    for c in 0..gt.channels() {
        let plane = out.plane_mut(c);
        for i in 0..n {
            if mask.data[i] == 1 {
                plane[i] = 1.0;
            }
        }
    }
    Ok(out)
}

/// `I_gt ⊙ (1 − M) + G ⊙ M`, realised as a per-pixel selection so known pixels are
/// bit-identical to `gt`.
pub fn composite(gt: &Image, mask: &Mask, generated: &Image) -> Result<Image> {
    mask.check_image(gt)?;
    gt.check_same_shape(generated)?;
    let mut out = gt.clone();
    let n = mask.data.len();
    for c in 0..gt.channels() {
        let src = generated.plane(c);
        let plane = out.plane_mut(c);
        for i in 0..n {
            if mask.data[i] == 1 {
                plane[i] = src[i];
            }
        }
    }
    Ok(out)
}

pub fn ratio_bucket(mask: &Mask) -> MaskBucket {
    let count = mask.count();
    let total = mask.data.len();
    // integer arithmetic avoids float rounding exactly at boundaries
    let lower = ((count * 10) / total).min(9) as u32 * 10;
    MaskBucket { lower }
}

const MAX_ATTEMPTS: u32 = 256;

/// Seeded free-form mask: a union of random-walk brush strokes with radius 2–8 px,
/// rejection-sampled until its hole ratio lands in `target`.
pub fn generate_irregular(seed: u64, target: MaskBucket, height: usize, width: usize) -> Result<Mask> {
    if height < 16 || width < 16 {
        return Err(Error::InvalidArgument(format!(
            "mask must be at least 16x16, got {height}x{width}"
        )));
    }
    let lo = target.lower() as f64 / 100.0;
    let total = (height * width) as f64;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        let mut mask = Mask::zeros(height, width);
        // at least one stroke, then keep adding until the lower bound is met
        loop {
            let mut candidate = mask.clone();
            draw_stroke(&mut candidate, &mut rng);
            let ratio = candidate.count() as f64 / total;
            if ratio >= lo {
                if target.contains(ratio) {
                    return Ok(candidate);
                }
                // overshot: keep the previous state if it already qualifies
                if mask.count() > 0 && target.contains(mask.ratio()) {
                    return Ok(mask);
                }
                break;
            }
            mask = candidate;
        }
    }
    Err(Error::BucketUnreachable {
        lower: target.lower(),
        upper: target.upper(),
        attempts: MAX_ATTEMPTS,
    })
}

fn draw_stroke(mask: &mut Mask, rng: &mut impl Rng) {
    let (h, w) = (mask.height as f64, mask.width as f64);
    let mut y = rng.random_range(0.0..h);
    let mut x = rng.random_range(0.0..w);
    let radius = rng.random_range(2..=8) as f64;
    let vertices = rng.random_range(1..=6);
    let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
    stamp_disc(mask, y, x, radius);
    for _ in 0..vertices {
        angle += rng.random_range(-1.2..1.2);
        let length = rng.random_range(4.0..(h.min(w) / 3.0).max(5.0));
        let steps = (length / (radius * 0.5)).ceil().max(1.0) as usize;
        let (dy, dx) = (angle.sin() * length / steps as f64, angle.cos() * length / steps as f64);
        for _ in 0..steps {
            y = (y + dy).clamp(0.0, h - 1.0);
            x = (x + dx).clamp(0.0, w - 1.0);
            stamp_disc(mask, y, x, radius);
        }
    }
}

fn stamp_disc(mask: &mut Mask, cy: f64, cx: f64, radius: f64) {
    let r0 = (cy - radius).floor().max(0.0) as usize;
    let r1 = ((cy + radius).ceil() as usize).min(mask.height - 1);
    let x0 = (cx - radius).floor().max(0.0) as usize;
    let x1 = ((cx + radius).ceil() as usize).min(mask.width - 1);
    let r2 = radius * radius;
    for r in r0..=r1 {
        for x in x0..=x1 {
            let (dy, dx) = (r as f64 - cy, x as f64 - cx);
            if dy * dy + dx * dx <= r2 {
                mask.set(r, x, true);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, v: f64) -> Image {
        Image::filled(h, w, 1, v)
    }

    #[test]
    fn make_input_identity_and_full() {
        let img = Image::from_fn(4, 4, 3, |c, r, x| (c + r + x) as f64 / 10.0);
        assert_eq!(make_input(&img, &Mask::zeros(4, 4)).unwrap(), img);
        let full = make_input(&img, &Mask::ones(4, 4)).unwrap();
        assert!(full.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn make_input_hand_example() {
        let img = gray(2, 2, 0.25);
        let m = Mask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let out = make_input(&img, &m).unwrap();
        assert_eq!(out.data(), &[1.0, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let img = gray(4, 4, 0.0);
        assert!(matches!(
            make_input(&img, &Mask::zeros(4, 5)),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(composite(&img, &Mask::zeros(4, 4), &gray(3, 4, 0.0)).is_err());
    }

    #[test]
    fn composite_examples() {
        let gt = gray(8, 8, 0.2);
        let g = gray(8, 8, 0.8);
        assert_eq!(composite(&gt, &Mask::zeros(8, 8), &g).unwrap(), gt);
        assert_eq!(composite(&gt, &Mask::ones(8, 8), &g).unwrap(), g);
        let half = Mask::from_fn(8, 8, |r, _| r < 4);
        let out = composite(&gt, &half, &g).unwrap();
        let mean = out.data().iter().sum::<f64>() / 64.0;
        assert!((mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(ratio_bucket(&Mask::zeros(64, 64)).lower(), 0);
        let mut n = 0;
        let m = Mask::from_fn(64, 64, |_, _| {
            n += 1;
            n <= 1434
        });
        assert_eq!(m.count(), 1434);
        assert_eq!(ratio_bucket(&m).to_string(), "30-40");
        let m = Mask::from_fn(20, 20, |r, x| r * 20 + x < 60);
        assert_eq!(ratio_bucket(&m).to_string(), "10-20");
        assert_eq!(ratio_bucket(&Mask::ones(8, 8)).to_string(), "90-100");
        // boundary convention [lower, upper)
        let m = Mask::from_fn(10, 10, |r, _| r < 4);
        assert_eq!(ratio_bucket(&m).lower(), 40);
    }

    #[test]
    fn bucket_parsing() {
        assert_eq!("30-40".parse::<MaskBucket>().unwrap().lower(), 30);
        assert_eq!("30%-40%".parse::<MaskBucket>().unwrap().lower(), 30);
        for bad in ["30-45", "abc", "35-45", "100-110", "30"] {
            assert!(bad.parse::<MaskBucket>().is_err(), "{bad}");
        }
    }

    #[test]
    fn irregular_is_deterministic_and_hits_bucket() {
        let b = MaskBucket::new(30).unwrap();
        let a = generate_irregular(1, b, 64, 64).unwrap();
        assert_eq!(a, generate_irregular(1, b, 64, 64).unwrap());
        assert!((0.30..0.40).contains(&a.ratio()), "{}", a.ratio());
        let small = generate_irregular(7, MaskBucket::new(0).unwrap(), 64, 64).unwrap();
        assert!(small.ratio() < 0.10 && small.count() > 0);
    }

    #[test]
    fn irregular_rejects_tiny_canvas() {
        assert!(generate_irregular(0, MaskBucket::new(0).unwrap(), 8, 64).is_err());
    }

    #[test]
    fn every_bucket_reachable() {
        for b in MaskBucket::all() {
            let m = generate_irregular(3, b, 64, 64).unwrap();
            assert!(b.contains(m.ratio()), "{b}: {}", m.ratio());
        }
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = generate_irregular(5, MaskBucket::new(20).unwrap(), 32, 32).unwrap();
        m.save_png(&p).unwrap();
        assert_eq!(Mask::load_png(&p).unwrap(), m);
    }

    fn arb_case() -> impl Strategy<Value = (Image, Mask, Image)> {
        (1usize..12, 1usize..12, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(h, w, c)| {
            (
                proptest::collection::vec(0.0f64..1.0, h * w * c),
                proptest::collection::vec(0u8..2, h * w),
                proptest::collection::vec(-2.0f64..2.0, h * w * c),
            )
                .prop_map(move |(a, m, g)| {
                    (
                        Image::new(h, w, c, a).unwrap(),
                        Mask::new(h, w, m).unwrap(),
                        Image::new(h, w, c, g).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn composite_preserves_background((gt, m, g) in arb_case()) {
            let out = composite(&gt, &m, &g).unwrap();
            for c in 0..gt.channels() {
                for r in 0..gt.height() {
                    for x in 0..gt.width() {
                        let want = if m.get(r, x) { g.get(c, r, x) } else { gt.get(c, r, x) };
                        prop_assert_eq!(out.get(c, r, x).to_bits(), want.to_bits());
                    }
                }
            }
            prop_assert_eq!(composite(&gt, &m, &gt).unwrap(), gt.clone());
            prop_assert_eq!(m.complement().complement(), m.clone());
        }

        #[test]
        fn bucket_matches_pixel_count(m in (1usize..20, 1usize..20).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0u8..2, h * w).prop_map(move |d| Mask::new(h, w, d).unwrap())
        })) {
            let ones = m.data().iter().filter(|&&v| v == 1).count();
            let ratio = ones as f64 / (m.height() * m.width()) as f64;
            let b = ratio_bucket(&m);
            prop_assert!(b.contains(ratio));
        }
    }
}
