//! Training objectives: reconstruction, perceptual and style terms over a
//! frozen feature pyramid, the adversarial pair, and the domain distance.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvOpts};

/// Weights of the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub per: f64,
    pub sty: f64,
    pub adv: f64,
    pub dom: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            per: 0.1,
            sty: 250.0,
            adv: 0.1,
            dom: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.per, self.sty, self.adv, self.dom];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Scalar loss values of one step. `adv_d` is the discriminator objective,
/// `adv_g` the generator's adversarial term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub per: f64,
    pub sty: f64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub dom: f64,
    pub total: f64,
}

impl LossReport {
    pub const COMPONENTS: [&'static str; 5] = ["l1", "per", "sty", "adv_g", "dom"];

    /// Builds a report from named components and fills in `total`.
    pub fn from_components(map: &BTreeMap<String, f64>, w: &LossWeights) -> Result<Self> {
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("missing loss component `{k}`")))
        };
        let mut r = LossReport {
            l1: get("l1")?,
            per: get("per")?,
            sty: get("sty")?,
            adv_d: map.get("adv_d").copied().unwrap_or(0.0),
            adv_g: get("adv_g")?,
            dom: get("dom")?,
            total: 0.0,
        };
        r.total = total_loss(&r, w);
        Ok(r)
    }

    /// The first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("l1", self.l1),
            ("per", self.per),
            ("sty", self.sty),
            ("adv_d", self.adv_d),
            ("adv_g", self.adv_g),
            ("dom", self.dom),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(k, _)| k)
    }
}

/// Weighted generator objective; the discriminator term is not part of it.
pub fn total_loss(r: &LossReport, w: &LossWeights) -> f64 {
    w.l1 * r.l1 + w.per * r.per + w.sty * r.sty + w.adv * r.adv_g + w.dom * r.dom
}

/// Frozen three-scale convolutional feature extractor.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    params: ParamSet,
    layers: Vec<Conv>,
}

impl FeaturePyramid {
    pub const SCALES: usize = 3;
    /// Output gain `sqrt(C / C_wide)` with `C_wide = 16·C`, so Gram entries
    /// (normalized by `C·H·W`) have the magnitude of a 16× wider extractor.
    pub const FEATURE_GAIN: f64 = 0.25;

    /// Seed-fixed random weights.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let layers = vec![
            Conv::new(&mut ps, "phi0", 3, 8, 3, ConvOpts::same(3), &mut rng),
            Conv::new(&mut ps, "phi1", 8, 16, 3, ConvOpts::strided(2, 1), &mut rng),
            Conv::new(&mut ps, "phi2", 16, 32, 3, ConvOpts::strided(2, 1), &mut rng),
        ];
        Self { params: ps, layers }
    }

    /// Replaces the weights with a JSON parameter file of the same layout.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let other: ParamSet = serde_json::from_str(&text)?;
        self.params
            .load_from(&other)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.params)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Binds the frozen weights onto `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind(g, false)
    }

    /// Feature maps at every scale, each after an ELU and the output gain.
    pub fn features(&self, g: &mut Graph, b: &Bound, x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut y = x;
        for l in &self.layers {
            let c = g.conv2d(y, b.var(l.weight_id()), l.stride, l.pad);
            let c = match l.bias_id() {
                Some(bias) => g.add_bias(c, b.var(bias)),
                None => c,
            };
            y = g.elu(c);
            out.push(g.scale(y, Self::FEATURE_GAIN));
        }
        out
    }
}

fn mean_abs_diff(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean(d)
}

fn sum_vars(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    acc
}

/// `mean|I_c − I_gt| + mean|I_out − I_gt|`.
pub fn l1_loss(g: &mut Graph, i_c: Var, i_out: Var, gt: Var) -> Var {
    let a = mean_abs_diff(g, i_c, gt);
    let b = mean_abs_diff(g, i_out, gt);
    g.add(a, b)
}

/// Precomputed features of the three images of a step.
pub struct FeatureTriple {
    pub coarse: Vec<Var>,
    pub out: Vec<Var>,
    pub gt: Vec<Var>,
}

impl FeatureTriple {
    pub fn new(g: &mut Graph, pyr: &FeaturePyramid, b: &Bound, i_c: Var, i_out: Var, gt: Var) -> Self {
        Self {
            coarse: pyr.features(g, b, i_c),
            out: pyr.features(g, b, i_out),
            gt: pyr.features(g, b, gt),
        }
    }
}

/// `Σ_i mean|φ_i(I_c) − φ_i(I_gt)| + mean|φ_i(I_out) − φ_i(I_gt)|`.
pub fn perceptual_loss(g: &mut Graph, f: &FeatureTriple) -> Var {
    let mut terms = Vec::new();
    for i in 0..f.gt.len() {
        terms.push(mean_abs_diff(g, f.coarse[i], f.gt[i]));
        terms.push(mean_abs_diff(g, f.out[i], f.gt[i]));
    }
    sum_vars(g, &terms)
}

/// As [`perceptual_loss`] on Gram matrices normalized by `C·H·W`.
pub fn style_loss(g: &mut Graph, f: &FeatureTriple) -> Var {
    let mut terms = Vec::new();
    for i in 0..f.gt.len() {
        let gg = g.gram(f.gt[i]);
        let gc = g.gram(f.coarse[i]);
        let go = g.gram(f.out[i]);
        terms.push(mean_abs_diff(g, gc, gg));
        terms.push(mean_abs_diff(g, go, gg));
    }
    sum_vars(g, &terms)
}

/// Discriminator objective: logistic loss driving real logits to 1 and fake
/// logits to 0, each averaged over patches and summed.
pub fn discriminator_loss(g: &mut Graph, real: Var, fake: Var) -> Var {
    let nr = g.scale(real, -1.0);
    let lr = g.softplus(nr);
    let lr = g.mean(lr);
    let lf = g.softplus(fake);
    let lf = g.mean(lf);
    g.add(lr, lf)
}

/// Non-saturating generator term `−mean log σ(D(I_out))`.
pub fn generator_adversarial_loss(g: &mut Graph, fake: Var) -> Var {
    let nf = g.scale(fake, -1.0);
    let l = g.softplus(nf);
    g.mean(l)
}

/// `‖Z_out − Z_b‖ + ‖Z_out − Z_gt‖`, averaged over the batch.
pub fn domain_distance_loss(g: &mut Graph, z_out: Var, z_b: Var, z_gt: Var) -> Var {
    let a = g.sub(z_out, z_b);
    let a = g.row_norm(a);
    let b = g.sub(z_out, z_gt);
    let b = g.row_norm(b);
    let s = g.add(a, b);
    g.mean(s)
}

/// The weighted generator objective on the graph.
pub fn weighted_total(g: &mut Graph, w: &LossWeights, l1: Var, per: Var, sty: Var, adv_g: Var, dom: Var) -> Var {
    let terms = [(w.l1, l1), (w.per, per), (w.sty, sty), (w.adv, adv_g), (w.dom, dom)];
    let scaled: Vec<Var> = terms.iter().map(|&(k, v)| g.scale(v, k)).collect();
    sum_vars(g, &scaled)
}

/// Scalar adversarial losses `(d_loss, g_loss)` from logit slices.
pub fn adversarial_losses(real: &[f64], fake: &[f64]) -> (f64, f64) {
    let sp = |z: f64| z.max(0.0) + (-z.abs()).exp().ln_1p();
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&z| f(z)).sum::<f64>() / v.len() as f64;
    let d = mean(real, &|z| sp(-z)) + mean(fake, &sp);
    let gl = mean(fake, &|z| sp(-z));
    (d, gl)
}
