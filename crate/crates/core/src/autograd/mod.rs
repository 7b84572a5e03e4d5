//! A small tape-based reverse-mode autodiff engine over dense `f64` tensors.
//!
//! Networks register their weights in a [`ParamSet`]; each forward pass binds
//! them onto a fresh [`Graph`] and reads gradients back by handle.

mod graph;
mod kernels;
mod tensor;

pub use graph::{BatchStats, Grads, Graph, Var};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Named {
    pub name: String,
    pub tensor: Tensor,
}

/// Trainable parameters plus non-trainable buffers (running statistics,
/// power-iteration vectors) of one network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Named>,
    buffers: Vec<Named>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.params.push(Named {
            name: name.into(),
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> BufferId {
        self.buffers.push(Named {
            name: name.into(),
            tensor,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].tensor
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].tensor
    }

    pub fn params(&self) -> &[Named] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|n| &mut n.tensor)
    }

    pub fn buffers(&self) -> &[Named] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.buffers.iter_mut().map(|b| &mut b.tensor)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Adds every parameter to `g` as a leaf; `trainable = false` binds them as
    /// constants (gradients still flow *through* them to other inputs).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        g.leaf(p.tensor.clone())
                    } else {
                        g.constant(p.tensor.clone())
                    }
                })
                .collect(),
        )
    }

    /// Replaces parameter values from another set with identical layout.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<(), String> {
        if self.params.len() != other.params.len() || self.buffers.len() != other.buffers.len() {
            return Err("parameter layout differs".into());
        }
        for (a, b) in self.params.iter().zip(&other.params).chain(self.buffers.iter().zip(&other.buffers)) {
            if a.name != b.name || a.tensor.shape != b.tensor.shape {
                return Err(format!("parameter `{}` does not match `{}`", a.name, b.name));
            }
        }
        *self = other.clone();
        Ok(())
    }
}

/// Graph handles of a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients for every parameter, zeros where none flowed.
    pub fn grads(&self, grads: &Grads, g: &Graph) -> Vec<Vec<f64>> {
        self.0.iter().map(|v| grads.tensor(*v, g).data).collect()
    }
}

/// How a forward pass treats normalization layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Batch statistics in batch norm (else running statistics).
    pub train: bool,
    /// Update running statistics and power-iteration vectors.
    pub update_buffers: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        train: true,
        update_buffers: true,
    };
    pub const EVAL: Mode = Mode {
        train: false,
        update_buffers: false,
    };
    /// Batch statistics without touching buffers, e.g. for gradient checks.
    pub const FROZEN_TRAIN: Mode = Mode {
        train: true,
        update_buffers: false,
    };
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, betas: (f64, f64)) -> Self {
        let zeros: Vec<Vec<f64>> = params.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moment estimates, one vector per parameter.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores the step counter and moments saved from an optimizer over the
    /// same parameter layout.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<(), String> {
        let same = |a: &[Vec<f64>], b: &[Vec<f64>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err("optimizer state layout differs".into());
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p.tensor.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    /// Checks d(sum(op(x) * probe))/dx against finite differences.
    fn check_unary(shape: &[usize], seed: u64, op: impl Fn(&mut Graph, Var) -> Var) {
        let x = seeded(shape, seed);
        let eval = |t: &Tensor| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let xv = g.leaf(t.clone());
            let y = op(&mut g, xv);
            let probe = seeded(&g.value(y).shape.clone(), seed + 1);
            let pv = g.constant(probe);
            let prod = g.mul(y, pv);
            let s = g.sum(prod);
            let grads = g.backward(s);
            (g.value(s).item(), grads.tensor(xv, &g).data)
        };
        let (_, analytic) = eval(&x);
        let numeric = numeric_grad(&x, 1e-5, |t| eval(t).0);
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn elementwise_grads() {
        check_unary(&[2, 3, 4, 4], 1, |g, x| g.elu(x));
        check_unary(&[2, 3, 4, 4], 2, |g, x| g.tanh(x));
        check_unary(&[2, 3, 4, 4], 3, |g, x| g.sigmoid(x));
        check_unary(&[2, 3, 4, 4], 4, |g, x| g.softplus(x));
        check_unary(&[2, 3, 4, 4], 5, |g, x| g.leaky_relu(x, 0.2));
        check_unary(&[2, 3, 4, 4], 6, |g, x| {
            let y = g.affine(x, 0.5, 0.5);
            g.abs(y)
        });
    }

    #[test]
    fn structural_grads() {
        check_unary(&[2, 3, 4, 4], 10, |g, x| g.upsample2(x));
        check_unary(&[2, 3, 4, 4], 11, |g, x| g.avg_pool(x));
        check_unary(&[2, 3, 4, 4], 12, |g, x| g.max_pool(x));
        check_unary(&[2, 3, 4, 4], 13, |g, x| g.gram(x));
        check_unary(&[3, 5], 14, |g, x| g.row_norm(x));
        check_unary(&[2, 3], 15, |g, x| g.tile(x, 2, 3));
        check_unary(&[2, 3, 4, 4], 16, |g, x| {
            let m = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|i| (i % 3 == 0) as u8 as f64).collect());
            g.masked_avg_pool(x, m)
        });
        check_unary(&[2, 3, 4, 4], 17, |g, x| {
            let y = g.elu(x);
            g.concat(&[x, y])
        });
        check_unary(&[2, 3, 4, 4], 18, |g, x| {
            let m = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|i| (i % 2) as f64).collect());
            let base = Tensor::full(&[2, 3, 4, 4], 0.3);
            g.blend(&base, x, m)
        });
    }

    #[test]
    fn conv_and_linear_grads() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 1, 4), (1, 0, 1)] {
            let w = seeded(&[4, 3, k, k], 20);
            check_unary(&[2, 3, 6, 6], 21, |g, x| {
                let wv = g.constant(w.clone());
                g.conv2d(x, wv, stride, pad)
            });
            let x = seeded(&[2, 3, 6, 6], 22);
            check_unary(&[4, 3, k, k], 23, |g, w| {
                let xv = g.constant(x.clone());
                g.conv2d(xv, w, stride, pad)
            });
        }
        let w = seeded(&[4, 5], 24);
        check_unary(&[3, 5], 25, |g, x| {
            let wv = g.constant(w.clone());
            g.linear(x, wv)
        });
        let x = seeded(&[3, 5], 26);
        check_unary(&[4, 5], 27, |g, w| {
            let xv = g.constant(x.clone());
            g.linear(xv, w)
        });
    }

    #[test]
    fn norm_grads() {
        let gamma = seeded(&[3], 30);
        let beta = seeded(&[3], 31);
        check_unary(&[2, 3, 4, 4], 32, |g, x| {
            let (gv, bv) = (g.constant(gamma.clone()), g.constant(beta.clone()));
            g.batch_norm(x, gv, bv, None, 1e-5).0
        });
        let stats = BatchStats {
            mean: vec![0.1, -0.2, 0.3],
            var: vec![1.5, 0.5, 2.0],
        };
        check_unary(&[2, 3, 4, 4], 33, |g, x| {
            let (gv, bv) = (g.constant(gamma.clone()), g.constant(beta.clone()));
            g.batch_norm(x, gv, bv, Some(&stats), 1e-5).0
        });
        let u = [0.6, 0.8];
        // v aligned with Wᵀu so σ = uᵀWv is positive, as after power iteration
        let w0 = seeded(&[2, 2, 1, 2], 34);
        let mut v: Vec<f64> = (0..4).map(|c| u[0] * w0.data[c] + u[1] * w0.data[4 + c]).collect();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= nv);
        check_unary(&[2, 2, 1, 2], 34, |g, w| g.spectral_norm(w, &u, &v));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = seeded(&[1, 2, 5, 5], 40);
        let w = seeded(&[3, 2, 3, 3], 41);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, 2, 1);
        let out = g.value(y);
        assert_eq!(out.shape, vec![1, 3, 3, 3]);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += x.data[(c * 5 + iy as usize) * 5 + ix as usize]
                                        * w.data[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    assert!((out.data[(o * 3 + oy) * 3 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adam_zero_lr_is_noop_and_moves_otherwise() {
        let mut ps = ParamSet::new();
        ps.add_param("w", Tensor::new(vec![2], vec![1.0, -1.0]));
        let before = ps.clone();
        let mut opt = Adam::new(&ps, 0.0, (0.5, 0.999));
        opt.step(&mut ps, &[vec![0.3, -0.2]]);
        assert_eq!(ps, before);
        let mut opt = Adam::new(&ps, 0.1, (0.5, 0.999));
        opt.step(&mut ps, &[vec![0.3, -0.2]]);
        // first Adam step moves each coordinate by ~lr against the gradient sign
        assert!((ps.params()[0].tensor.data[0] - 0.9).abs() < 1e-6);
        assert!((ps.params()[0].tensor.data[1] + 0.9).abs() < 1e-6);
    }
}
