//! Differentiable building blocks: convolutions with optional spectral
//! normalization, partial convolution, the max-augmented squeeze-excitation
//! gate, the conv-BN-ELU learnable block and region-wise separated attention.

use rand::Rng;

use crate::autograd::{BatchStats, Bound, BufferId, Graph, Mode, ParamId, ParamSet, Tensor, Var};

fn kaiming_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

fn unit_vector(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Persistent power-iteration vectors for one weight viewed as `[rows, rest]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl SpectralState {
    pub fn new(rng: &mut impl Rng, rows: usize, rest: usize) -> Self {
        Self {
            u: unit_vector(rng, rows),
            v: unit_vector(rng, rest),
        }
    }

    /// One power-iteration step: `v ← Wᵀu/‖·‖`, `u ← Wv/‖·‖`.
    pub fn iterate(&mut self, w: &Tensor) {
        let rows = self.u.len();
        let rest = self.v.len();
        assert_eq!(rows * rest, w.len(), "spectral state does not match weight");
        let mut v = vec![0.0; rest];
        for r in 0..rows {
            let row = &w.data[r * rest..(r + 1) * rest];
            for c in 0..rest {
                v[c] += row[c] * self.u[r];
            }
        }
        if normalize(&mut v) > 1e-12 {
            self.v = v;
        }
        let mut u: Vec<f64> = (0..rows)
            .map(|r| w.data[r * rest..(r + 1) * rest].iter().zip(&self.v).map(|(a, b)| a * b).sum())
            .collect();
        if normalize(&mut u) > 1e-12 {
            self.u = u;
        }
    }

    /// `uᵀ W v`, clamped below at `1e-12`.
    pub fn sigma(&self, w: &Tensor) -> f64 {
        let rest = self.v.len();
        let s: f64 = self
            .u
            .iter()
            .enumerate()
            .map(|(r, ur)| ur * w.data[r * rest..(r + 1) * rest].iter().zip(&self.v).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        s.max(1e-12)
    }
}

/// Divides `w` by its largest singular value as estimated by one power
/// iteration on the persistent `state`.
pub fn spectral_normalize(w: &Tensor, state: &mut SpectralState) -> Tensor {
    state.iterate(w);
    let sigma = state.sigma(w);
    Tensor::new(w.shape.clone(), w.data.iter().map(|x| x / sigma).collect())
}

const WARM_ITERATIONS: usize = 30;

/// 2-D convolution with optional bias and spectral normalization.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: Option<ParamId>,
    spectral: Option<(BufferId, BufferId)>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvOpts {
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
    pub spectral: bool,
}

impl ConvOpts {
    pub const fn same(k: usize) -> Self {
        Self {
            stride: 1,
            pad: k / 2,
            bias: true,
            spectral: false,
        }
    }

    pub const fn strided(stride: usize, pad: usize) -> Self {
        Self {
            stride,
            pad,
            bias: true,
            spectral: false,
        }
    }

    pub const fn sn(mut self) -> Self {
        self.spectral = true;
        self
    }

    pub const fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        opts: ConvOpts,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = ps.add_param(
            format!("{name}.weight"),
            kaiming_uniform(rng, &[out_channels, in_channels, kernel, kernel], fan_in),
        );
        let bias = opts
            .bias
            .then(|| ps.add_param(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        let spectral = opts.spectral.then(|| {
            // Start from converged vectors so evaluation before any training
            // step already sees a sensible sigma.
            let mut st = SpectralState::new(rng, out_channels, fan_in);
            for _ in 0..WARM_ITERATIONS {
                st.iterate(ps.param(weight));
            }
            (
                ps.add_buffer(format!("{name}.sn_u"), Tensor::new(vec![out_channels], st.u)),
                ps.add_buffer(format!("{name}.sn_v"), Tensor::new(vec![fan_in], st.v)),
            )
        });
        Self {
            weight,
            bias,
            spectral,
            in_channels,
            out_channels,
            kernel,
            stride: opts.stride,
            pad: opts.pad,
        }
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> Option<ParamId> {
        self.bias
    }

    /// The effective (possibly spectrally normalized) weight on the graph.
    pub fn weight(&self, g: &mut Graph, ps: &mut ParamSet, b: &Bound, mode: Mode) -> Var {
        let w = b.var(self.weight);
        match self.spectral {
            None => w,
            Some((ui, vi)) => {
                let mut st = SpectralState {
                    u: ps.buffer(ui).data.clone(),
                    v: ps.buffer(vi).data.clone(),
                };
                if mode.update_buffers {
                    st.iterate(ps.param(self.weight));
                    ps.buffer_mut(ui).data.clone_from(&st.u);
                    ps.buffer_mut(vi).data.clone_from(&st.v);
                }
                g.spectral_norm(w, &st.u, &st.v)
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &mut ParamSet, b: &Bound, mode: Mode, x: Var) -> Var {
        let w = self.weight(g, ps, b, mode);
        let y = g.conv2d(x, w, self.stride, self.pad);
        match self.bias {
            Some(bias) => g.add_bias(y, b.var(bias)),
            None => y,
        }
    }
}

/// Window sums of a `[n, 1, h, w]` validity mask, as a `[n, 1, ho, wo]` tensor.
fn window_counts(mask: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let (n, _, h, w) = mask.dims4();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * ho * wo];
    for ni in 0..n {
        let m = &mask.data[ni * h * w..(ni + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            s += m[iy as usize * w + ix as usize];
                        }
                    }
                }
                out[(ni * ho + oy) * wo + ox] = s;
            }
        }
    }
    Tensor::new(vec![n, 1, ho, wo], out)
}

/// Partial convolution on graph values: `W·(x⊙m)·(k²/Σm) + b` where the window
/// holds at least one valid pixel, `0` elsewhere. Returns the output and the
/// updated `[n, 1, ho, wo]` validity mask.
pub fn partial_conv(
    g: &mut Graph,
    x: Var,
    valid: &Tensor,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
) -> (Var, Tensor) {
    let k = g.value(weight).shape[2];
    let xm = g.mul_const(x, valid.clone());
    let y = g.conv2d(xm, weight, stride, pad);
    let counts = window_counts(valid, k, stride, pad);
    let full = (k * k) as f64;
    let ratio = Tensor::new(
        counts.shape.clone(),
        counts.data.iter().map(|&c| if c > 0.0 { full / c } else { 0.0 }).collect(),
    );
    let updated = Tensor::new(
        counts.shape.clone(),
        counts.data.iter().map(|&c| if c > 0.0 { 1.0 } else { 0.0 }).collect(),
    );
    let y = g.mul_const(y, ratio);
    let y = match bias {
        Some(b) => {
            let yb = g.add_bias(y, b);
            g.mul_const(yb, updated.clone())
        }
        None => y,
    };
    (y, updated)
}

/// Partial convolution layer (no spectral normalization).
#[derive(Clone, Debug)]
pub struct PartialConv {
    conv: Conv,
}

impl PartialConv {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv::new(
                ps,
                name,
                in_channels,
                out_channels,
                kernel,
                ConvOpts::strided(stride, kernel / 2),
                rng,
            ),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &mut ParamSet,
        b: &Bound,
        mode: Mode,
        x: Var,
        valid: &Tensor,
    ) -> (Var, Tensor) {
        let w = self.conv.weight(g, ps, b, mode);
        let bias = self.conv.bias.map(|id| b.var(id));
        partial_conv(g, x, valid, w, bias, self.conv.stride, self.conv.pad)
    }
}

/// Fully connected layer `y = x Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: ps.add_param(format!("{name}.weight"), kaiming_uniform(rng, &[outputs, inputs], inputs)),
            bias: ps.add_param(format!("{name}.bias"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let y = g.linear(x, b.var(self.weight));
        g.add_bias(y, b.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize) -> Self {
        Self {
            gamma: ps.add_param(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: ps.add_param(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: ps.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: ps.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn gamma_id(&self) -> ParamId {
        self.gamma
    }

    pub fn beta_id(&self) -> ParamId {
        self.beta
    }

    pub fn forward(&self, g: &mut Graph, ps: &mut ParamSet, b: &Bound, mode: Mode, x: Var) -> Var {
        let (gamma, beta) = (b.var(self.gamma), b.var(self.beta));
        if !mode.train {
            let stats = BatchStats {
                mean: ps.buffer(self.running_mean).data.clone(),
                var: ps.buffer(self.running_var).data.clone(),
            };
            return g.batch_norm(x, gamma, beta, Some(&stats), self.eps).0;
        }
        let (y, stats) = g.batch_norm(x, gamma, beta, None, self.eps);
        if mode.update_buffers {
            let mom = self.momentum;
            for (r, s) in ps.buffer_mut(self.running_mean).data.iter_mut().zip(&stats.mean) {
                *r = (1.0 - mom) * *r + mom * s;
            }
            for (r, s) in ps.buffer_mut(self.running_var).data.iter_mut().zip(&stats.var) {
                *r = (1.0 - mom) * *r + mom * s;
            }
        }
        y
    }
}

/// Hidden width of the squeeze-excitation bottleneck: `C / reduction`, but at
/// least `min(C, 4)`.
pub fn se_hidden(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(channels.min(4)).max(1)
}

/// Squeeze-excitation gate whose descriptor is `avgpool(x) + maxpool(x)`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

impl ChannelAttention {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let hidden = se_hidden(channels, reduction);
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), channels, hidden, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, channels, rng),
            channels,
        }
    }

    /// The `[n, c]` gate in `(0, 1)`.
    pub fn gate(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let avg = g.avg_pool(x);
        let max = g.max_pool(x);
        let d = g.add(avg, max);
        let h = self.fc1.forward(g, b, d);
        let h = g.relu(h);
        let z = self.fc2.forward(g, b, h);
        g.sigmoid(z)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        assert_eq!(g.value(x).dims4().1, self.channels, "channel attention width");
        let gate = self.gate(g, b, x);
        g.scale_channels(x, gate)
    }
}

/// Two shape-preserving `3×3 conv → BN → ELU` stages.
#[derive(Clone, Debug)]
pub struct LearnableBlock {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
}

impl LearnableBlock {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, hidden: usize, spectral: bool, rng: &mut impl Rng) -> Self {
        let mut opts = ConvOpts::same(3).no_bias();
        opts.spectral = spectral;
        Self {
            conv1: Conv::new(ps, &format!("{name}.conv1"), channels, hidden, 3, opts, rng),
            bn1: BatchNorm::new(ps, &format!("{name}.bn1"), hidden),
            conv2: Conv::new(ps, &format!("{name}.conv2"), hidden, channels, 3, opts, rng),
            bn2: BatchNorm::new(ps, &format!("{name}.bn2"), channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &mut ParamSet, b: &Bound, mode: Mode, x: Var) -> Var {
        let y = self.conv1.forward(g, ps, b, mode, x);
        let y = self.bn1.forward(g, ps, b, mode, y);
        let y = g.elu(y);
        let y = self.conv2.forward(g, ps, b, mode, y);
        let y = self.bn2.forward(g, ps, b, mode, y);
        g.elu(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RwsaConfig {
    pub channels: usize,
    pub reduction: usize,
    pub lb_channels: usize,
}

impl RwsaConfig {
    pub const REDUCTION_FLOOR: usize = 4;

    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            reduction: 16,
            lb_channels: channels,
        }
    }
}

/// Region-wise separated attention.
#[derive(Clone, Debug)]
pub struct Rwsa {
    pub cfg: RwsaConfig,
    pub gate_back: ChannelAttention,
    pub gate_fore: ChannelAttention,
    pub gate_keep: ChannelAttention,
    pub lb: LearnableBlock,
    pub fuse: Conv,
}

/// Output of [`Rwsa::forward`] with the pre-fusion region features exposed.
#[derive(Clone, Copy, Debug)]
pub struct RwsaOutput {
    pub out: Var,
    pub fore: Var,
    pub back: Var,
}

impl Rwsa {
    pub fn new(ps: &mut ParamSet, name: &str, cfg: RwsaConfig, spectral: bool, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let mut fuse_opts = ConvOpts::same(1);
        fuse_opts.spectral = spectral;
        Self {
            cfg,
            gate_back: ChannelAttention::new(ps, &format!("{name}.gb"), c, cfg.reduction, rng),
            gate_fore: ChannelAttention::new(ps, &format!("{name}.gf1"), c, cfg.reduction, rng),
            gate_keep: ChannelAttention::new(ps, &format!("{name}.gf2"), c, cfg.reduction, rng),
            lb: LearnableBlock::new(ps, &format!("{name}.lb"), c, cfg.lb_channels, spectral, rng),
            fuse: Conv::new(ps, &format!("{name}.ffb"), 2 * c, c, 1, fuse_opts, rng),
        }
    }

    /// `F_f = M·[LB(G_f1(x)) + G_f2(x)]`, `F_b = (1−M)·G_b(x)`,
    /// `out = FFB(concat(F_f + F_b, x))`. `mask` is the hole mask at any
    /// resolution; it is resampled (nearest) to the feature grid.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &mut ParamSet,
        b: &Bound,
        mode: Mode,
        x: Var,
        mask: &Tensor,
    ) -> RwsaOutput {
        let (n, c, h, w) = g.value(x).dims4();
        assert_eq!(c, self.cfg.channels, "rwsa channel count");
        let m = resize_mask_nearest(mask, h, w);
        assert_eq!(m.shape[0], n, "rwsa mask batch");
        let inv = Tensor::new(m.shape.clone(), m.data.iter().map(|v| 1.0 - v).collect());

        let f1 = self.gate_fore.forward(g, b, x);
        let adapted = self.lb.forward(g, ps, b, mode, f1);
        let keep = self.gate_keep.forward(g, b, x);
        let fore = g.add(adapted, keep);
        let fore = g.mul_const(fore, m);

        let back = self.gate_back.forward(g, b, x);
        let back = g.mul_const(back, inv);

        let sum = g.add(fore, back);
        let cat = g.concat(&[sum, x]);
        let out = self.fuse.forward(g, ps, b, mode, cat);
        RwsaOutput { out, fore, back }
    }
}

/// Nearest-neighbour resampling of a `[n, 1, h, w]` mask tensor.
pub fn resize_mask_nearest(mask: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, _, mh, mw) = mask.dims4();
    if (mh, mw) == (h, w) {
        return mask.clone();
    }
    let mut out = Vec::with_capacity(n * h * w);
    for ni in 0..n {
        for r in 0..h {
            for c in 0..w {
                out.push(mask.data[ni * mh * mw + (r * mh / h) * mw + c * mw / w]);
            }
        }
    }
    Tensor::new(vec![n, 1, h, w], out)
}
