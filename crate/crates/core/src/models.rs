//! Generators, discriminator and domain pattern extractor, plus the two-stage
//! forward pass with background compositing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Graph, Mode, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::nn::{BatchNorm, Conv, ConvOpts, Linear, PartialConv, Rwsa, RwsaConfig};
use crate::raster::{stack_images, stack_masks, unstack_image, Image};

/// Length of a domain pattern vector.
pub const DOMAIN_DIM: usize = 16;

const SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub base_width: usize,
    pub res_blocks: usize,
    /// Number of stride-2 downsamples, mirrored by as many upsamples.
    pub stages: usize,
    /// Region-wise separated attention after every upsample.
    pub rwsa: bool,
}

impl GeneratorSpec {
    /// Stage one: image plus mask.
    pub fn coarse(base_width: usize) -> Self {
        Self {
            in_channels: 4,
            base_width,
            res_blocks: 4,
            stages: 2,
            rwsa: false,
        }
    }

    /// Stage two: coarse image, mask and the domain pattern map.
    pub fn refine(base_width: usize) -> Self {
        Self {
            in_channels: 4 + DOMAIN_DIM,
            base_width,
            res_blocks: 4,
            stages: 2,
            rwsa: true,
        }
    }
}

/// Residual encoder-decoder with spectrally normalized convolutions, batch
/// norm after every hidden convolution and a `tanh` output rescaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub params: ParamSet,
    head: (Conv, BatchNorm),
    downs: Vec<(Conv, BatchNorm)>,
    res: Vec<[(Conv, BatchNorm); 2]>,
    ups: Vec<(Conv, BatchNorm)>,
    attn: Vec<Rwsa>,
    tail: Conv,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let w = spec.base_width;
        let mut block = |ps: &mut ParamSet, name: &str, cin: usize, cout: usize, opts: ConvOpts| {
            let conv = Conv::new(ps, name, cin, cout, 3, opts.sn(), &mut rng);
            (conv, BatchNorm::new(ps, &format!("{name}.bn"), cout))
        };
        let head = block(&mut ps, "head", spec.in_channels, w, ConvOpts::same(3));
        let downs = (0..spec.stages)
            .map(|i| {
                let c = w << i;
                block(&mut ps, &format!("down{i}"), c, 2 * c, ConvOpts::strided(2, 1))
            })
            .collect();
        let deep = w << spec.stages;
        let res = (0..spec.res_blocks)
            .map(|i| {
                [
                    block(&mut ps, &format!("res{i}.a"), deep, deep, ConvOpts::same(3)),
                    block(&mut ps, &format!("res{i}.b"), deep, deep, ConvOpts::same(3)),
                ]
            })
            .collect();
        let mut ups = Vec::new();
        for i in 0..spec.stages {
            let c = deep >> i;
            ups.push(block(&mut ps, &format!("up{i}"), c, c / 2, ConvOpts::same(3)));
        }
        let mut attn = Vec::new();
        for i in 0..spec.stages {
            let c = (deep >> i) / 2;
            if spec.rwsa {
                attn.push(Rwsa::new(&mut ps, &format!("rwsa{i}"), RwsaConfig::new(c), true, &mut rng));
            }
        }
        let tail = Conv::new(&mut ps, "tail", w, 3, 3, ConvOpts::same(3).sn(), &mut rng);
        Self {
            spec,
            params: ps,
            head,
            downs,
            res,
            ups,
            attn,
            tail,
        }
    }

    /// Spatial size multiple required of inputs.
    pub fn granularity(&self) -> usize {
        1 << self.spec.stages
    }

    /// Raw generator output in `[0, 1]`; `mask` feeds the attention modules.
    pub fn forward(&mut self, g: &mut Graph, b: &Bound, mode: Mode, x: Var, mask: &Tensor) -> Var {
        let ps = &mut self.params;
        let unit = |g: &mut Graph, ps: &mut ParamSet, (conv, bn): &(Conv, BatchNorm), x: Var| {
            let y = conv.forward(g, ps, b, mode, x);
            bn.forward(g, ps, b, mode, y)
        };
        let mut y = unit(g, ps, &self.head, x);
        y = g.leaky_relu(y, SLOPE);
        for d in &self.downs {
            y = unit(g, ps, d, y);
            y = g.leaky_relu(y, SLOPE);
        }
        for [a, c] in &self.res {
            let r = unit(g, ps, a, y);
            let r = g.leaky_relu(r, SLOPE);
            let r = unit(g, ps, c, r);
            y = g.add(y, r);
        }
        for (i, up) in self.ups.iter().enumerate() {
            y = g.upsample2(y);
            y = unit(g, ps, up, y);
            y = g.leaky_relu(y, SLOPE);
            if let Some(a) = self.attn.get(i) {
                y = a.forward(g, ps, b, mode, y, mask).out;
            }
        }
        y = self.tail.forward(g, ps, b, mode, y);
        let t = g.tanh(y);
        g.affine(t, 0.5, 0.5)
    }
}

/// Patch discriminator: three 4×4 stride-2 convolutions and a 3×3 logit head,
/// all spectrally normalized. Output is `H/8 × W/8`.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamSet,
    layers: Vec<Conv>,
}

impl Discriminator {
    pub const STRIDE: usize = 8;

    pub fn new(base_width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let w = base_width;
        let opts = ConvOpts::strided(2, 1).sn();
        let layers = vec![
            Conv::new(&mut ps, "d0", 3, w, 4, opts, &mut rng),
            Conv::new(&mut ps, "d1", w, 2 * w, 4, opts, &mut rng),
            Conv::new(&mut ps, "d2", 2 * w, 4 * w, 4, opts, &mut rng),
            Conv::new(&mut ps, "logit", 4 * w, 1, 3, ConvOpts::same(3).sn(), &mut rng),
        ];
        Self { params: ps, layers }
    }

    /// Patch logits `[n, 1, H/8, W/8]`.
    pub fn forward(&mut self, g: &mut Graph, b: &Bound, mode: Mode, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut y = x;
        for (i, l) in self.layers.iter().enumerate() {
            y = l.forward(g, &mut self.params, b, mode, y);
            if i < last {
                y = g.leaky_relu(y, SLOPE);
            }
        }
        y
    }
}

/// Partial-convolution encoder producing a [`DOMAIN_DIM`] vector from the
/// pixels of one region only.
#[derive(Clone, Debug)]
pub struct DomainExtractor {
    pub params: ParamSet,
    layers: Vec<PartialConv>,
    head: Linear,
}

impl DomainExtractor {
    pub fn new(base_width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let w = base_width;
        let layers = vec![
            PartialConv::new(&mut ps, "p0", 3, w, 3, 2, &mut rng),
            PartialConv::new(&mut ps, "p1", w, 2 * w, 3, 2, &mut rng),
            PartialConv::new(&mut ps, "p2", 2 * w, 2 * w, 3, 2, &mut rng),
        ];
        let head = Linear::new(&mut ps, "head", 2 * w, DOMAIN_DIM, &mut rng);
        Self { params: ps, layers, head }
    }

    /// `[n, DOMAIN_DIM]` vectors; `region` is `[n, 1, h, w]` with 1 marking the
    /// pixels to read.
    pub fn forward(&mut self, g: &mut Graph, b: &Bound, x: Var, region: &Tensor) -> Result<Var> {
        let (n, _, h, w) = region.dims4();
        for i in 0..n {
            if region.data[i * h * w..(i + 1) * h * w].iter().all(|&v| v == 0.0) {
                return Err(Error::EmptyRegion("domain extraction region"));
            }
        }
        let mut y = x;
        let mut valid = region.clone();
        for l in &self.layers {
            let (o, m) = l.forward(g, &mut self.params, b, Mode::EVAL, y, &valid);
            y = g.leaky_relu(o, SLOPE);
            valid = m;
        }
        let pooled = g.masked_avg_pool(y, valid);
        Ok(self.head.forward(g, b, pooled))
    }

    pub fn extract(&mut self, img: &Image, region: &Mask) -> Result<DomainVector> {
        region.check_image(img)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(stack_images(&[&img.to_rgb()]));
        let z = self.forward(&mut g, &b, x, &stack_masks(&[region]))?;
        DomainVector::new(g.value(z).data.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainVector {
    values: Vec<f64>,
}

impl DomainVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != DOMAIN_DIM {
            return Err(Error::shape(DOMAIN_DIM, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("domain vector has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pattern_map(&self, height: usize, width: usize) -> DomainPatternMap {
        DomainPatternMap {
            height,
            width,
            values: self.values.clone(),
        }
    }
}

/// A domain vector tiled over an `H×W` grid, one constant channel per entry.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainPatternMap {
    pub height: usize,
    pub width: usize,
    values: Vec<f64>,
}

impl DomainPatternMap {
    pub fn get(&self, channel: usize, _r: usize, _x: usize) -> f64 {
        self.values[channel]
    }

    pub fn to_tensor(&self) -> Tensor {
        let hw = self.height * self.width;
        let data = self.values.iter().flat_map(|&v| std::iter::repeat_n(v, hw)).collect();
        Tensor::new(vec![1, DOMAIN_DIM, self.height, self.width], data)
    }
}

fn ones_minus(m: &Tensor) -> Tensor {
    Tensor::new(m.shape.clone(), m.data.iter().map(|v| 1.0 - v).collect())
}

/// Stage one on the graph: `I_c = I_in·(1−M) + G1(I_in, M)·M`. `input` is the
/// `[n, 3, h, w]` masked image, whose background equals the ground truth.
pub fn coarse_forward(g: &mut Graph, g1: &mut Generator, b: &Bound, mode: Mode, input: &Tensor, mask: &Tensor) -> Var {
    let x = g.constant(input.clone());
    let m = g.constant(mask.clone());
    let cat = g.concat(&[x, m]);
    let raw = g1.forward(g, b, mode, cat, mask);
    g.blend(input, raw, mask.clone())
}

/// `V = tile(Z_b)` with `Z_b = P(I_c, M̄)`; returns `(V, Z_b)`.
pub fn domain_pattern(g: &mut Graph, p: &mut DomainExtractor, b: &Bound, i_c: Var, mask: &Tensor) -> Result<(Var, Var)> {
    let (_, _, h, w) = mask.dims4();
    let z_b = p.forward(g, b, i_c, &ones_minus(mask))?;
    Ok((g.tile(z_b, h, w), z_b))
}

/// Stage two on the graph: `I_out = I_in·(1−M) + G2(I_c, M, V)·M`.
#[allow(clippy::too_many_arguments)]
pub fn refine_forward(
    g: &mut Graph,
    g2: &mut Generator,
    b: &Bound,
    mode: Mode,
    i_c: Var,
    v: Var,
    input: &Tensor,
    mask: &Tensor,
) -> Var {
    let m = g.constant(mask.clone());
    let cat = g.concat(&[i_c, m, v]);
    let raw = g2.forward(g, b, mode, cat, mask);
    g.blend(input, raw, mask.clone())
}

/// Which output an inference pass stops at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Coarse,
    Full,
}

/// The trainable networks of the pipeline.
#[derive(Clone, Debug)]
pub struct Networks {
    pub g1: Generator,
    pub g2: Generator,
    pub d: Discriminator,
    pub p: DomainExtractor,
}

impl Networks {
    /// Every network gets its own seed derived from `seed`.
    pub fn new(base_width: usize, seed: u64) -> Self {
        Self {
            g1: Generator::new(GeneratorSpec::coarse(base_width), seed.wrapping_mul(4).wrapping_add(1)),
            g2: Generator::new(GeneratorSpec::refine(base_width), seed.wrapping_mul(4).wrapping_add(2)),
            d: Discriminator::new(base_width, seed.wrapping_mul(4).wrapping_add(3)),
            p: DomainExtractor::new(base_width, seed.wrapping_mul(4).wrapping_add(4)),
        }
    }

    fn check(&self, img: &Image, mask: &Mask) -> Result<()> {
        mask.check_image(img)?;
        let k = self.g1.granularity();
        if img.height() % k != 0 || img.width() % k != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} is not a multiple of {k}",
                img.height(),
                img.width()
            )));
        }
        if mask.count() == mask.data().len() {
            return Err(Error::EmptyRegion("known region"));
        }
        Ok(())
    }

    /// Inpaints `mask` in `img` with frozen weights. Pixels outside the hole are
    /// returned unchanged.
    pub fn inpaint(&mut self, img: &Image, mask: &Mask, stage: Stage) -> Result<Image> {
        let rgb = img.to_rgb();
        self.check(&rgb, mask)?;
        let input = stack_images(&[&crate::masks::make_input(&rgb, mask)?]);
        let m = stack_masks(&[mask]);
        let mut g = Graph::new();
        let b1 = self.g1.params.bind(&mut g, false);
        let i_c = coarse_forward(&mut g, &mut self.g1, &b1, Mode::EVAL, &input, &m);
        let out = match stage {
            Stage::Coarse => i_c,
            Stage::Full => {
                let bp = self.p.params.bind(&mut g, false);
                let (v, _) = domain_pattern(&mut g, &mut self.p, &bp, i_c, &m)?;
                let b2 = self.g2.params.bind(&mut g, false);
                refine_forward(&mut g, &mut self.g2, &b2, Mode::EVAL, i_c, v, &input, &m)
            }
        };
        let generated = unstack_image(g.value(out), 0);
        // Restore the exact background, including channels of a gray input.
        let generated = if img.channels() == 1 {
            Image::from_fn(img.height(), img.width(), 1, |_, r, x| {
                (0..3).map(|c| generated.get(c, r, x)).sum::<f64>() / 3.0
            })
        } else {
            generated
        };
        crate::masks::composite(img, mask, &generated)
    }

    /// Patch logits of the discriminator for one image.
    pub fn discriminate(&mut self, img: &Image) -> Tensor {
        let mut g = Graph::new();
        let b = self.d.params.bind(&mut g, false);
        let x = g.constant(stack_images(&[&img.to_rgb()]));
        let y = self.d.forward(&mut g, &b, Mode::EVAL, x);
        g.value(y).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{composite, make_input};
    use crate::probes::noise_image;

    fn hole(n: usize) -> Mask {
        Mask::from_fn(n, n, |r, x| (n / 4..n / 2 + 3).contains(&r) && (n / 3..n - 5).contains(&x))
    }

    /// FNV-1a over the bit patterns of every value.
    fn fingerprint(data: &[f64]) -> u64 {
        data.iter().flat_map(|v| v.to_bits().to_le_bytes()).fold(0xcbf2_9ce4_8422_2325, |h, byte| {
            (h ^ byte as u64).wrapping_mul(0x0100_0000_01b3)
        })
    }

    #[test]
    fn stage_outputs_keep_background() {
        let img = noise_image(1, 32, 32, 3);
        let m = hole(32);
        let mut nets = Networks::new(4, 5);
        for stage in [Stage::Coarse, Stage::Full] {
            let out = nets.inpaint(&img, &m, stage).unwrap();
            assert_eq!((out.height(), out.width(), out.channels()), (32, 32, 3));
            for c in 0..3 {
                for (i, (&a, &b)) in out.plane(c).iter().zip(img.plane(c)).enumerate() {
                    if m.data()[i] == 0 {
                        assert_eq!(a, b);
                    } else {
                        assert!((0.0..=1.0).contains(&a));
                    }
                }
            }
        }
    }

    #[test]
    fn inpaint_rejects_bad_shapes() {
        let mut nets = Networks::new(4, 5);
        let img = noise_image(1, 30, 30, 3);
        assert!(nets.inpaint(&img, &Mask::zeros(30, 30), Stage::Full).is_err());
        let img = noise_image(1, 32, 32, 3);
        assert!(nets.inpaint(&img, &Mask::zeros(16, 16), Stage::Full).is_err());
        assert!(nets.inpaint(&img, &Mask::ones(32, 32), Stage::Full).is_err());
    }

    #[test]
    fn golden_outputs_are_stable() {
        let img = noise_image(2, 32, 32, 3);
        let m = hole(32);
        let run = || {
            let mut nets = Networks::new(4, 7);
            (
                nets.inpaint(&img, &m, Stage::Coarse).unwrap(),
                nets.inpaint(&img, &m, Stage::Full).unwrap(),
            )
        };
        let (c1, f1) = run();
        let (c2, f2) = run();
        assert_eq!(fingerprint(c1.data()), fingerprint(c2.data()));
        assert_eq!(fingerprint(f1.data()), fingerprint(f2.data()));
        // Sums recorded at first build; they absorb summation-order noise
        // from SIMD kernel selection on other machines.
        let sum = |im: &Image| im.data().iter().sum::<f64>();
        assert!((sum(&c1) - GOLDEN_COARSE_SUM).abs() < 1e-9, "{}", sum(&c1));
        assert!((sum(&f1) - GOLDEN_FULL_SUM).abs() < 1e-9, "{}", sum(&f1));
    }

    const GOLDEN_COARSE_SUM: f64 = 1521.1117940537276;
    const GOLDEN_FULL_SUM: f64 = 1523.7215574919135;

    #[test]
    fn domain_vector_ignores_outside_pixels() {
        let mut p = DomainExtractor::new(8, 3);
        let img = noise_image(4, 32, 32, 3);
        let region = hole(32);
        let z = p.extract(&img, &region).unwrap();
        assert_eq!(z.values().len(), DOMAIN_DIM);
        let mut perturbed = img.clone();
        for c in 0..3 {
            for r in 0..32 {
                for x in 0..32 {
                    if !region.get(r, x) {
                        perturbed.set(c, r, x, 1.0 - img.get(c, r, x));
                    }
                }
            }
        }
        let z2 = p.extract(&perturbed, &region).unwrap();
        let diff = z.values().iter().zip(z2.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
        assert_eq!(p.extract(&img, &region).unwrap(), z);
        assert!(matches!(p.extract(&img, &Mask::zeros(32, 32)), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn pattern_map_is_constant_per_channel() {
        let z = DomainVector::new((0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        let v = z.pattern_map(4, 6);
        let t = v.to_tensor();
        for c in 0..DOMAIN_DIM {
            assert!(t.data[c * 24..(c + 1) * 24].iter().all(|&x| x == z.values()[c]));
            assert_eq!(v.get(c, 3, 5), z.values()[c]);
        }
        assert!(DomainVector::new(vec![0.0; 15]).is_err());
    }

    #[test]
    fn pattern_map_only_changes_the_hole() {
        let mut nets = Networks::new(4, 11);
        let gt = noise_image(6, 32, 32, 3);
        let m = hole(32);
        let input = stack_images(&[&make_input(&gt, &m).unwrap()]);
        let mt = stack_masks(&[&m]);
        let run = |nets: &mut Networks, zval: f64| {
            let mut g = Graph::new();
            let b1 = nets.g1.params.bind(&mut g, false);
            let i_c = coarse_forward(&mut g, &mut nets.g1, &b1, Mode::EVAL, &input, &mt);
            let v = g.constant(DomainVector::new(vec![zval; 16]).unwrap().pattern_map(32, 32).to_tensor());
            let b2 = nets.g2.params.bind(&mut g, false);
            let out = refine_forward(&mut g, &mut nets.g2, &b2, Mode::EVAL, i_c, v, &input, &mt);
            unstack_image(g.value(out), 0)
        };
        let a = run(&mut nets, 0.0);
        let b = run(&mut nets, 3.0);
        let mut changed = 0;
        for c in 0..3 {
            for i in 0..32 * 32 {
                let (va, vb) = (a.plane(c)[i], b.plane(c)[i]);
                if m.data()[i] == 0 {
                    assert_eq!(va, gt.plane(c)[i]);
                    assert_eq!(vb, gt.plane(c)[i]);
                } else if va != vb {
                    changed += 1;
                }
            }
        }
        assert!(changed > 0);
        assert_eq!(composite(&gt, &m, &a).unwrap(), a);
    }

    #[test]
    fn discriminator_shape_and_shift() {
        let mut nets = Networks::new(4, 2);
        let img = noise_image(8, 96, 80, 3);
        let s = nets.discriminate(&img);
        assert_eq!(s.shape, vec![1, 1, 12, 10]);
        // Shifting by one output stride shifts interior cells by one. Cell `k`
        // reads input rows `8k-15 ..= 8k+22`; interior cells avoid both the
        // zero padding of every layer and the wrap-around.
        let shifted = Image::from_fn(96, 80, 3, |c, r, x| img.get(c, (r + 8) % 96, (x + 8) % 80));
        let t = nets.discriminate(&shifted);
        for r in 2..=(96 - 31) / 8 - 1 {
            for x in 2..=(80 - 31) / 8 - 1 {
                let a = s.data[(r + 1) * 10 + x + 1];
                let b = t.data[r * 10 + x];
                assert!((a - b).abs() < 1e-9, "({r},{x}) {a} {b}");
            }
        }
        assert_eq!(nets.discriminate(&img), s);
    }

    #[test]
    fn gradients_reach_both_generators() {
        let mut nets = Networks::new(4, 13);
        let gt = noise_image(9, 16, 16, 3);
        let m = hole(16);
        let input = stack_images(&[&make_input(&gt, &m).unwrap()]);
        let mt = stack_masks(&[&m]);
        let mut g = Graph::new();
        let b1 = nets.g1.params.bind(&mut g, true);
        let bp = nets.p.params.bind(&mut g, true);
        let b2 = nets.g2.params.bind(&mut g, true);
        let i_c = coarse_forward(&mut g, &mut nets.g1, &b1, Mode::FROZEN_TRAIN, &input, &mt);
        let (v, _) = domain_pattern(&mut g, &mut nets.p, &bp, i_c, &mt).unwrap();
        let out = refine_forward(&mut g, &mut nets.g2, &b2, Mode::FROZEN_TRAIN, i_c, v, &input, &mt);
        let loss = g.mean(out);
        let grads = g.backward(loss);
        let norm = |b: &Bound| b.grads(&grads, &g).iter().flatten().map(|v| v * v).sum::<f64>();
        assert!(norm(&b1) > 0.0);
        assert!(norm(&b2) > 0.0);
        assert!(norm(&bp) > 0.0);
    }
}
