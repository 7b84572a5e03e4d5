use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Abs(Var),
    Mean(Var),
    Sum(Var),
    /// Multiplies by a constant that is either same-shaped or `[n, 1, h, w]`.
    MulConst(Var, Tensor),
    /// Takes `g` where the `[n, 1, h, w]` mask is 1 and a constant elsewhere.
    Blend(Var, Tensor),
    AddBias(Var, Var),
    ScaleChannels(Var, Var),
    Tile(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Linear(Var, Var),
    Concat(Vec<Var>),
    Upsample2(Var),
    AvgPool(Var),
    MaxPool(Var, Vec<usize>),
    MaskedAvgPool(Var, Tensor),
    Gram(Var),
    RowNorm(Var),
    Reshape(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SpectralNorm {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Statistics produced by a batch-norm forward pass, for running-average updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A reverse-mode tape. Nodes are appended in evaluation order, so the tape is a
/// topological order and backward is one reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Grads(Vec<Option<Vec<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zeros when the node did not influence the output.
    pub fn tensor(&self, v: Var, g: &Graph) -> Tensor {
        let shape = g.value(v).shape.clone();
        match self.get(v) {
            Some(d) => Tensor::new(shape, d.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn bcast_index(c_shape: &[usize], x_shape: &[usize]) -> bool {
    // true when the constant is [n,1,h,w] against [n,c,h,w]
    if c_shape == x_shape {
        return false;
    }
    assert!(
        c_shape.len() == 4 && x_shape.len() == 4 && c_shape[1] == 1 && c_shape[0] == x_shape[0]
            && c_shape[2..] == x_shape[2..],
        "cannot broadcast {c_shape:?} to {x_shape:?}"
    );
    true
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "elementwise shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape.clone(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape.clone(), va.data.iter().map(|x| f(*x)).collect());
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.map(a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let m = va.data.iter().sum::<f64>() / va.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum::<f64>();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Elementwise product with a constant; `c` may be `[n, 1, h, w]` against a
    /// `[n, c, h, w]` input.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let va = self.value(a);
        let bc = bcast_index(&c.shape, &va.shape);
        let mut out = va.data.clone();
        if bc {
            let (n, ch, h, w) = va.dims4();
            let hw = h * w;
            for ni in 0..n {
                let m = &c.data[ni * hw..(ni + 1) * hw];
                for ci in 0..ch {
                    let o = &mut out[(ni * ch + ci) * hw..(ni * ch + ci + 1) * hw];
                    o.iter_mut().zip(m).for_each(|(v, mv)| *v *= mv);
                }
            }
        } else {
            out.iter_mut().zip(&c.data).for_each(|(v, cv)| *v *= cv);
        }
        let t = Tensor::new(va.shape.clone(), out);
        let ng = self.ng(a);
        self.push(t, Op::MulConst(a, c), ng)
    }

    /// Per-pixel selection: `g` where `mask == 1`, `base` elsewhere. `mask` is
    /// `[n, 1, h, w]`, `base` has the shape of `g`.
    pub fn blend(&mut self, base: &Tensor, g: Var, mask: Tensor) -> Var {
        let vg = self.value(g);
        assert_eq!(base.shape, vg.shape, "blend shape mismatch");
        let (n, ch, h, w) = vg.dims4();
        assert_eq!(mask.shape, vec![n, 1, h, w], "blend mask shape");
        let hw = h * w;
        let mut out = base.data.clone();
        for ni in 0..n {
            let m = &mask.data[ni * hw..(ni + 1) * hw];
            for ci in 0..ch {
                let off = (ni * ch + ci) * hw;
                for i in 0..hw {
                    if m[i] != 0.0 {
                        out[off + i] = vg.data[off + i];
                    }
                }
            }
        }
        let t = Tensor::new(vg.shape.clone(), out);
        let ng = self.ng(g);
        self.push(t, Op::Blend(g, mask), ng)
    }

    /// Adds a per-channel bias (dimension 1).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let vb = self.value(b);
        assert_eq!(vb.len(), c, "bias length");
        let hw = h * w;
        let mut out = vx.data.clone();
        for ni in 0..n {
            for ci in 0..c {
                let bv = vb.data[ci];
                out[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
        let t = Tensor::new(vx.shape.clone(), out);
        let ng = self.ng(x) || self.ng(b);
        self.push(t, Op::AddBias(x, b), ng)
    }

    /// `x[n, c, :, :] * g[n, c]`.
    pub fn scale_channels(&mut self, x: Var, g: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let vg = self.value(g);
        assert_eq!(vg.shape, vec![n, c], "gate shape");
        let hw = h * w;
        let mut out = vx.data.clone();
        for i in 0..n * c {
            let gv = vg.data[i];
            out[i * hw..(i + 1) * hw].iter_mut().for_each(|v| *v *= gv);
        }
        let t = Tensor::new(vx.shape.clone(), out);
        let ng = self.ng(x) || self.ng(g);
        self.push(t, Op::ScaleChannels(x, g), ng)
    }

    /// Broadcasts `[n, c]` to `[n, c, h, w]`.
    pub fn tile(&mut self, z: Var, h: usize, w: usize) -> Var {
        let vz = self.value(z);
        let (n, c) = (vz.shape[0], vz.shape[1]);
        let mut out = Vec::with_capacity(n * c * h * w);
        for &v in &vz.data {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        let t = Tensor::new(vec![n, c, h, w], out);
        let ng = self.ng(z);
        self.push(t, Op::Tile(z), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Zero-padded cross-correlation, `x: [n, c, h, w]`, `w: [o, c, k, k]`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let (n, c, h, wd) = vx.dims4();
        let (o, wc, k) = (vw.shape[0], vw.shape[1], vw.shape[2]);
        assert_eq!(wc, c, "conv input channels");
        let g = ConvGeom::new(c, h, wd, k, stride, pad);
        let (rows, p) = (g.rows(), g.cols());
        let mut cols = vec![0.0; rows * p];
        let mut out = vec![0.0; n * o * p];
        for ni in 0..n {
            im2col(&vx.data[ni * c * h * wd..(ni + 1) * c * h * wd], &g, &mut cols);
            gemm(
                o,
                rows,
                p,
                &vw.data,
                rows,
                1,
                &cols,
                p,
                1,
                0.0,
                &mut out[ni * o * p..(ni + 1) * o * p],
                p,
                1,
            );
        }
        let t = Tensor::new(vec![n, o, g.ho, g.wo], out);
        let ng = self.ng(x) || self.ng(w);
        self.push(t, Op::Conv2d { x, w, stride, pad }, ng)
    }

    /// `x: [n, i]`, `w: [o, i]` → `x wᵀ: [n, o]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let (n, i) = (vx.shape[0], vx.shape[1]);
        let o = vw.shape[0];
        assert_eq!(vw.shape[1], i, "linear input width");
        let mut out = vec![0.0; n * o];
        gemm(n, i, o, &vx.data, i, 1, &vw.data, 1, i, 0.0, &mut out, o, 1);
        let ng = self.ng(x) || self.ng(w);
        self.push(Tensor::new(vec![n, o], out), Op::Linear(x, w), ng)
    }

    /// Concatenates along dimension 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]);
        let (n, _, h, w) = first.dims4();
        let four_d = first.shape.len() == 4;
        let hw = h * w;
        let total_c: usize = parts.iter().map(|p| self.value(*p).dims4().1).sum();
        let mut out = vec![0.0; n * total_c * hw];
        for ni in 0..n {
            let mut off = ni * total_c * hw;
            for p in parts {
                let vp = self.value(*p);
                let (pn, pc, ph, pw) = vp.dims4();
                assert!(pn == n && ph == h && pw == w, "concat shape mismatch");
                let src = &vp.data[ni * pc * hw..(ni + 1) * pc * hw];
                out[off..off + pc * hw].copy_from_slice(src);
                off += pc * hw;
            }
        }
        let shape = if four_d { vec![n, total_c, h, w] } else { vec![n, total_c] };
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::new(shape, out), Op::Concat(parts.to_vec()), ng)
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for i in 0..n * c {
            let src = &vx.data[i * h * w..(i + 1) * h * w];
            let dst = &mut out[i * h2 * w2..(i + 1) * h2 * w2];
            for r in 0..h2 {
                for col in 0..w2 {
                    dst[r * w2 + col] = src[(r / 2) * w + col / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, c, h2, w2], out), Op::Upsample2(x), ng)
    }

    /// Global average pool → `[n, c]`.
    pub fn avg_pool(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let hw = h * w;
        let out = (0..n * c)
            .map(|i| vx.data[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, c], out), Op::AvgPool(x), ng)
    }

    /// Global max pool → `[n, c]`; ties resolve to the first maximum.
    pub fn max_pool(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let hw = h * w;
        let mut arg = Vec::with_capacity(n * c);
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n * c {
            let s = &vx.data[i * hw..(i + 1) * hw];
            let (mut bi, mut bv) = (0, s[0]);
            for (j, &v) in s.iter().enumerate().skip(1) {
                if v > bv {
                    bi = j;
                    bv = v;
                }
            }
            arg.push(bi);
            out.push(bv);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, c], out), Op::MaxPool(x, arg), ng)
    }

    /// Mean over positions where the `[n, 1, h, w]` mask is non-zero → `[n, c]`.
    /// Samples with an empty mask produce zeros.
    pub fn masked_avg_pool(&mut self, x: Var, mask: Tensor) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        assert_eq!(mask.shape, vec![n, 1, h, w], "pool mask shape");
        let hw = h * w;
        let mut out = vec![0.0; n * c];
        for ni in 0..n {
            let m = &mask.data[ni * hw..(ni + 1) * hw];
            let cnt: f64 = m.iter().sum();
            if cnt == 0.0 {
                continue;
            }
            for ci in 0..c {
                let s = &vx.data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                out[ni * c + ci] = s.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() / cnt;
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, c], out), Op::MaskedAvgPool(x, mask), ng)
    }

    /// Normalized Gram matrix `φ φᵀ / (c·h·w)` per sample → `[n, c, c]`.
    pub fn gram(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let hw = h * w;
        let norm = 1.0 / (c * hw) as f64;
        let mut out = vec![0.0; n * c * c];
        for ni in 0..n {
            let f = &vx.data[ni * c * hw..(ni + 1) * c * hw];
            gemm(c, hw, c, f, hw, 1, f, 1, hw, 0.0, &mut out[ni * c * c..(ni + 1) * c * c], c, 1);
        }
        out.iter_mut().for_each(|v| *v *= norm);
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, c, c], out), Op::Gram(x), ng)
    }

    /// Euclidean norm of each row of `[n, d]` → `[n]`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, d) = (vx.shape[0], vx.shape[1]);
        let out = (0..n)
            .map(|i| vx.data[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n], out), Op::RowNorm(x), ng)
    }

    /// Batch normalization over `(n, h, w)` per channel. With `fixed` statistics
    /// (eval mode) those are used instead of batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        fixed: Option<&BatchStats>,
        eps: f64,
    ) -> (Var, BatchStats) {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let hw = h * w;
        let m = (n * hw) as f64;
        let (mean, var) = match fixed {
            Some(s) => (s.mean.clone(), s.var.clone()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for ni in 0..n {
                        s += vx.data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut q = 0.0;
                    for ni in 0..n {
                        q += vx.data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ci] = mu;
                    var[ci] = q / m;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let vg = &self.value(gamma).data;
        let vb = &self.value(beta).data;
        let mut xhat = vec![0.0; vx.len()];
        let mut out = vec![0.0; vx.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for i in off..off + hw {
                    let xh = (vx.data[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = vg[ci] * xh + vb[ci];
                }
            }
        }
        let t = Tensor::new(vx.shape.clone(), out);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: fixed.is_none(),
            },
            ng,
        );
        (v, BatchStats { mean, var })
    }

    /// `w / σ` with `σ = uᵀ W v` for a weight reshaped to `[rows, rest]`; `u` and `v`
    /// are treated as constants.
    pub fn spectral_norm(&mut self, w: Var, u: &[f64], v: &[f64]) -> Var {
        let vw = self.value(w);
        let rows = vw.shape[0];
        let rest = vw.len() / rows;
        assert!(u.len() == rows && v.len() == rest, "power-iteration vector sizes");
        let mut sigma = 0.0;
        for r in 0..rows {
            let row = &vw.data[r * rest..(r + 1) * rest];
            sigma += u[r] * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        }
        let sigma = sigma.max(1e-12);
        let t = Tensor::new(vw.shape.clone(), vw.data.iter().map(|x| x / sigma).collect());
        let ng = self.ng(w);
        self.push(
            t,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.value(out).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Grads(grads)
    }

    fn backprop(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value.data;
        // accumulate helper
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * vb[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * va[i];
                    }
                });
            }
            Op::Affine(a, s) => acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += s * d)),
            Op::Relu(a) => {
                let x = &self.value(*a).data;
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            g[i] += dy[i];
                        }
                    }
                });
            }
            Op::LeakyRelu(a, s) => {
                let x = &self.value(*a).data;
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += if x[i] > 0.0 { dy[i] } else { s * dy[i] };
                    }
                });
            }
            Op::Elu(a) => {
                let x = &self.value(*a).data;
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += if x[i] > 0.0 { dy[i] } else { dy[i] * (y[i] + 1.0) };
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Softplus(a) => {
                let x = &self.value(*a).data;
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * sigmoid(x[i]);
                    }
                });
            }
            Op::Abs(a) => {
                let x = &self.value(*a).data;
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * if x[i] > 0.0 { 1.0 } else if x[i] < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0] / n));
            }
            Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::MulConst(a, c) => {
                let xs = &self.value(*a).shape;
                let bc = bcast_index(&c.shape, xs);
                acc(*a, &mut |g| {
                    if bc {
                        let (n, ch, h, w) = self.value(*a).dims4();
                        let hw = h * w;
                        for ni in 0..n {
                            let m = &c.data[ni * hw..(ni + 1) * hw];
                            for ci in 0..ch {
                                let off = (ni * ch + ci) * hw;
                                for i in 0..hw {
                                    g[off + i] += dy[off + i] * m[i];
                                }
                            }
                        }
                    } else {
                        for i in 0..g.len() {
                            g[i] += dy[i] * c.data[i];
                        }
                    }
                });
            }
            Op::Blend(gv, mask) => {
                let (n, ch, h, w) = self.value(*gv).dims4();
                let hw = h * w;
                acc(*gv, &mut |g| {
                    for ni in 0..n {
                        let m = &mask.data[ni * hw..(ni + 1) * hw];
                        for ci in 0..ch {
                            let off = (ni * ch + ci) * hw;
                            for i in 0..hw {
                                if m[i] != 0.0 {
                                    g[off + i] += dy[off + i];
                                }
                            }
                        }
                    }
                });
            }
            Op::AddBias(x, b) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                acc(*x, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| {
                    for ni in 0..n {
                        for ci in 0..c {
                            g[ci] += dy[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::ScaleChannels(x, gate) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let vx = &self.value(*x).data;
                let vg = &self.value(*gate).data;
                acc(*x, &mut |g| {
                    for i in 0..n * c {
                        for j in i * hw..(i + 1) * hw {
                            g[j] += dy[j] * vg[i];
                        }
                    }
                });
                acc(*gate, &mut |g| {
                    for i in 0..n * c {
                        g[i] += (i * hw..(i + 1) * hw).map(|j| dy[j] * vx[j]).sum::<f64>();
                    }
                });
            }
            Op::Tile(z) => {
                let hw = node.value.shape[2] * node.value.shape[3];
                acc(*z, &mut |g| {
                    for (i, gi) in g.iter_mut().enumerate() {
                        *gi += dy[i * hw..(i + 1) * hw].iter().sum::<f64>();
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d)),
            Op::Conv2d { x, w, stride, pad } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (n, c, h, wd) = vx.dims4();
                let (o, k) = (vw.shape[0], vw.shape[2]);
                let geo = ConvGeom::new(c, h, wd, k, *stride, *pad);
                let (rows, p) = (geo.rows(), geo.cols());
                let mut cols = vec![0.0; rows * p];
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![0.0; o * rows];
                    for ni in 0..n {
                        im2col(&vx.data[ni * c * h * wd..(ni + 1) * c * h * wd], &geo, &mut cols);
                        // dW += dY · colsᵀ
                        gemm(o, p, rows, &dy[ni * o * p..(ni + 1) * o * p], p, 1, &cols, 1, p, 1.0, &mut dw, rows, 1);
                    }
                    acc(*w, &mut |g| g.iter_mut().zip(&dw).for_each(|(g, d)| *g += d));
                }
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; vx.len()];
                    for ni in 0..n {
                        // dcols = Wᵀ · dY
                        gemm(rows, o, p, &vw.data, 1, rows, &dy[ni * o * p..(ni + 1) * o * p], p, 1, 0.0, &mut cols, p, 1);
                        col2im(&cols, &geo, &mut dx[ni * c * h * wd..(ni + 1) * c * h * wd]);
                    }
                    acc(*x, &mut |g| g.iter_mut().zip(&dx).for_each(|(g, d)| *g += d));
                }
            }
            Op::Linear(x, w) => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (n, i) = (vx.shape[0], vx.shape[1]);
                let o = vw.shape[0];
                // dx = dy · W, dW = dyᵀ · x
                acc(*x, &mut |g| gemm(n, o, i, dy, o, 1, &vw.data, i, 1, 1.0, g, i, 1));
                acc(*w, &mut |g| gemm(o, n, i, dy, 1, o, &vx.data, i, 1, 1.0, g, i, 1));
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = node.value.dims4();
                let hw = h * w;
                let mut c_off = 0;
                for p in parts {
                    let pc = self.value(*p).dims4().1;
                    acc(*p, &mut |g| {
                        for ni in 0..n {
                            let src = &dy[(ni * total_c + c_off) * hw..(ni * total_c + c_off + pc) * hw];
                            g[ni * pc * hw..(ni + 1) * pc * hw]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(g, d)| *g += d);
                        }
                    });
                    c_off += pc;
                }
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let w2 = 2 * w;
                acc(*x, &mut |g| {
                    for i in 0..n * c {
                        let src = &dy[i * 4 * h * w..(i + 1) * 4 * h * w];
                        let dst = &mut g[i * h * w..(i + 1) * h * w];
                        for r in 0..2 * h {
                            for col in 0..w2 {
                                dst[(r / 2) * w + col / 2] += src[r * w2 + col];
                            }
                        }
                    }
                });
            }
            Op::AvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                acc(*x, &mut |g| {
                    for i in 0..n * c {
                        let d = dy[i] / hw as f64;
                        g[i * hw..(i + 1) * hw].iter_mut().for_each(|g| *g += d);
                    }
                });
            }
            Op::MaxPool(x, arg) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                acc(*x, &mut |g| {
                    for i in 0..n * c {
                        g[i * hw + arg[i]] += dy[i];
                    }
                });
            }
            Op::MaskedAvgPool(x, mask) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                acc(*x, &mut |g| {
                    for ni in 0..n {
                        let m = &mask.data[ni * hw..(ni + 1) * hw];
                        let cnt: f64 = m.iter().sum();
                        if cnt == 0.0 {
                            continue;
                        }
                        for ci in 0..c {
                            let d = dy[ni * c + ci] / cnt;
                            let off = (ni * c + ci) * hw;
                            for i in 0..hw {
                                g[off + i] += d * m[i];
                            }
                        }
                    }
                });
            }
            Op::Gram(x) => {
                let vx = self.value(*x);
                let (n, c, h, w) = vx.dims4();
                let hw = h * w;
                let norm = 1.0 / (c * hw) as f64;
                acc(*x, &mut |g| {
                    for ni in 0..n {
                        let dg = &dy[ni * c * c..(ni + 1) * c * c];
                        // (dG + dGᵀ) · F
                        let sym: Vec<f64> = (0..c * c)
                            .map(|ij| {
                                let (i, j) = (ij / c, ij % c);
                                (dg[i * c + j] + dg[j * c + i]) * norm
                            })
                            .collect();
                        let f = &vx.data[ni * c * hw..(ni + 1) * c * hw];
                        gemm(c, c, hw, &sym, c, 1, f, hw, 1, 1.0, &mut g[ni * c * hw..(ni + 1) * c * hw], hw, 1);
                    }
                });
            }
            Op::RowNorm(x) => {
                let vx = &self.value(*x);
                let d = vx.shape[1];
                acc(*x, &mut |g| {
                    for (i, &nrm) in y.iter().enumerate() {
                        if nrm > 0.0 {
                            for j in i * d..(i + 1) * d {
                                g[j] += dy[i] * vx.data[j] / nrm;
                            }
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let m = (n * hw) as f64;
                let vg = &self.value(*gamma).data;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * hw;
                        for i in off..off + hw {
                            sum_dy[ci] += dy[i];
                            sum_dy_xhat[ci] += dy[i] * xhat[i];
                        }
                    }
                }
                acc(*gamma, &mut |g| g.iter_mut().zip(&sum_dy_xhat).for_each(|(g, d)| *g += d));
                acc(*beta, &mut |g| g.iter_mut().zip(&sum_dy).for_each(|(g, d)| *g += d));
                acc(*x, &mut |g| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * hw;
                            let k = vg[ci] * inv_std[ci];
                            for i in off..off + hw {
                                g[i] += if *batch_stats {
                                    k * (dy[i] - sum_dy[ci] / m - xhat[i] * sum_dy_xhat[ci] / m)
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let vw = &self.value(*w).data;
                let rest = v.len();
                let inner: f64 = dy.iter().zip(vw).map(|(a, b)| a * b).sum();
                let coef = inner / (sigma * sigma);
                acc(*w, &mut |g| {
                    for (r, ur) in u.iter().enumerate() {
                        for (c, vc) in v.iter().enumerate() {
                            let i = r * rest + c;
                            g[i] += dy[i] / sigma - coef * ur * vc;
                        }
                    }
                });
            }
        }
    }
}
