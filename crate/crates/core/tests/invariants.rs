use proptest::prelude::*;

use safepaint::classical::{diffuse_inpaint, exemplar_inpaint, DiffusionConfig};
use safepaint::masks::{composite, generate_irregular, make_input, ratio_bucket};
use safepaint::probes::{auc, detection_metrics, kl_domain_gap, DEFAULT_BINS};
use safepaint::{Heatmap, Image, Mask, MaskBucket};

fn image(h: usize, w: usize, vals: &[f64]) -> Image {
    Image::from_fn(h, w, 3, |c, r, x| vals[(c * h * w + r * w + x) % vals.len()])
}

/// A random mask with at least one hole and one known pixel.
fn mask(h: usize, w: usize, bits: &[bool]) -> Mask {
    let mut m = Mask::from_fn(h, w, |r, x| bits[(r * w + x) % bits.len()]);
    m.set(0, 0, true);
    m.set(h - 1, w - 1, false);
    m
}

fn known_same(a: &Image, b: &Image, m: &Mask) -> bool {
    let (h, w) = m.dims();
    (0..3).all(|c| (0..h).all(|r| (0..w).all(|x| m.get(r, x) || a.get(c, r, x) == b.get(c, r, x))))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composite_selects_per_pixel(
        vals in prop::collection::vec(0.0f64..1.0, 7..40),
        gen in prop::collection::vec(0.0f64..1.0, 5..30),
        bits in prop::collection::vec(any::<bool>(), 3..50),
    ) {
        let (gt, g, m) = (image(9, 11, &vals), image(9, 11, &gen), mask(9, 11, &bits));
        let out = composite(&gt, &m, &g).unwrap();
        let input = make_input(&gt, &m).unwrap();
        for c in 0..3 {
            for r in 0..9 {
                for x in 0..11 {
                    let hole = m.get(r, x);
                    let want = if hole { g.get(c, r, x) } else { gt.get(c, r, x) };
                    prop_assert_eq!(out.get(c, r, x).to_bits(), want.to_bits());
                    prop_assert_eq!(input.get(c, r, x), if hole { 1.0 } else { gt.get(c, r, x) });
                }
            }
        }
    }

    #[test]
    fn ratio_bucket_contains_ratio(bits in prop::collection::vec(any::<bool>(), 1..80), h in 2usize..20, w in 2usize..20) {
        let m = mask(h, w, &bits);
        prop_assert!(ratio_bucket(&m).contains(m.ratio()));
    }

    #[test]
    fn bucket_text_round_trips(lower in (0u32..10).prop_map(|d| d * 10)) {
        let b: MaskBucket = format!("{}-{}", lower, lower + 10).parse().unwrap();
        prop_assert_eq!(b.lower(), lower);
        let wide = format!("{}-{}", lower, lower + 20).parse::<MaskBucket>();
        prop_assert!(wide.is_err());
    }

    #[test]
    fn auc_is_antisymmetric_and_rank_based(
        scores in prop::collection::vec(-5.0f64..5.0, 4..60),
        bits in prop::collection::vec(any::<bool>(), 4..60),
    ) {
        let n = scores.len().min(bits.len());
        let (s, mut l) = (&scores[..n], bits[..n].to_vec());
        l[0] = true;
        l[1] = false;
        let a = auc(s, &l).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((a + auc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
        let squashed: Vec<f64> = s.iter().map(|v| v.exp()).collect();
        prop_assert!((a - auc(&squashed, &l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn detection_scores_are_bounded(
        heat in prop::collection::vec(0.0f64..1.0, 5..60),
        bits in prop::collection::vec(any::<bool>(), 3..50),
        threshold in 0.0f64..1.0,
    ) {
        let m = mask(8, 8, &bits);
        let h = Heatmap::new(8, 8, (0..64).map(|i| heat[i % heat.len()]).collect()).unwrap();
        let rep = detection_metrics(&h, &m, threshold, 0.25).unwrap();
        prop_assert!((0.0..=1.0).contains(&rep.auc));
        prop_assert!((0.0..=1.0).contains(&rep.f1));
    }

    #[test]
    fn kl_gap_is_non_negative(vals in prop::collection::vec(0.0f64..1.0, 7..40), bits in prop::collection::vec(any::<bool>(), 3..50)) {
        let gap = kl_domain_gap(&image(12, 12, &vals), &mask(12, 12, &bits), DEFAULT_BINS).unwrap();
        prop_assert!(gap >= 0.0 && gap.is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_masks_land_in_their_bucket(seed in any::<u64>(), lower in (1u32..5).prop_map(|d| d * 10)) {
        let bucket = MaskBucket::new(lower).unwrap();
        let m = generate_irregular(seed, bucket, 32, 32).unwrap();
        prop_assert!(bucket.contains(m.ratio()), "{}", m.ratio());
        prop_assert_eq!(m, generate_irregular(seed, bucket, 32, 32).unwrap());
    }

    #[test]
    fn diffusion_keeps_background(vals in prop::collection::vec(0.0f64..1.0, 7..40), bits in prop::collection::vec(any::<bool>(), 3..20)) {
        let (img, m) = (image(12, 12, &vals), mask(12, 12, &bits));
        let out = diffuse_inpaint(&img, &m, &DiffusionConfig::default()).unwrap();
        prop_assert!(known_same(&img, &out, &m));
        prop_assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn exemplar_copies_known_values(seed in any::<u64>(), vals in prop::collection::vec(0.0f64..1.0, 7..40)) {
        let img = image(20, 20, &vals);
        let m = generate_irregular(seed, MaskBucket::new(10).unwrap(), 20, 20).unwrap();
        let out = exemplar_inpaint(&img, &m, 5).unwrap();
        prop_assert!(known_same(&img, &out, &m));
        let known: std::collections::HashSet<u64> = (0..3)
            .flat_map(|c| (0..400).filter(|&i| !m.get(i / 20, i % 20)).map(move |i| (c, i)))
            .map(|(c, i)| img.get(c, i / 20, i % 20).to_bits())
            .collect();
        prop_assert!(out.data().iter().all(|v| known.contains(&v.to_bits())));
    }
}

#[test]
fn mask_png_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_irregular(9, MaskBucket::new(20).unwrap(), 24, 40).unwrap();
    let path = dir.path().join("m.png");
    m.save_png(&path).unwrap();
    assert_eq!(Mask::load_png(&path).unwrap(), m);
}
