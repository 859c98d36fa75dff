//! Parameterised layers built on the gradient engine. Each layer owns the
//! ids of its parameters in a shared [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::gradcore::params::uniform;
use crate::gradcore::{BufferId, Graph, ParamId, ParamStore, StatUpdate, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-8;

/// Registers parameters under a name prefix.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_, R>) -> Result<T>) -> Result<T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut inner = Builder { store: &mut *self.store, rng: &mut *self.rng, prefix };
        f(&mut inner)
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn param(&mut self, leaf: &str, t: Tensor) -> Result<ParamId> {
        let n = self.name(leaf);
        self.store.add(n, t)
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let t = uniform(self.rng, shape, bound);
        self.param(leaf, t)
    }

    pub fn buffer(&mut self, leaf: &str, t: Tensor) -> Result<BufferId> {
        let n = self.name(leaf);
        self.store.add_buffer(n, t)
    }
}

/// One forward pass: the graph being recorded, the parameters it reads and
/// whether batch norms use batch statistics.
pub struct Fwd<'a> {
    pub g: &'a mut Graph,
    pub store: &'a ParamStore,
    pub train: bool,
}

impl Fwd<'_> {
    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, din: usize, dout: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        let w = b.uniform("w", &[dout, din], bound)?;
        let bias = if bias { Some(b.uniform("b", &[dout], bound)?) } else { None };
        Ok(Self { w, b: bias })
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let w = f.p(self.w);
        let b = self.b.map(|b| f.p(b));
        f.g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * k) as f64).sqrt();
        let w = b.uniform("w", &[cout, cin, k], bound)?;
        let bias = if bias { Some(b.uniform("b", &[cout], bound)?) } else { None };
        Ok(Self { w, b: bias, stride, pad })
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let w = f.p(self.w);
        let b = self.b.map(|b| f.p(b));
        f.g.conv1d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: BufferId,
    pub var: BufferId,
}

impl BatchNorm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, ch: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("gamma", Tensor::full(&[ch], 1.0))?,
            beta: b.param("beta", Tensor::zeros(&[ch]))?,
            mean: b.buffer("running_mean", Tensor::zeros(&[ch]))?,
            var: b.buffer("running_var", Tensor::full(&[ch], 1.0))?,
        })
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let gamma = f.p(self.gamma);
        let beta = f.p(self.beta);
        if f.train {
            let (y, stats) = f.g.batch_norm_train(x, gamma, beta, BN_EPS)?;
            f.g.record_stat_update(StatUpdate {
                mean_buffer: self.mean,
                var_buffer: self.var,
                batch_mean: stats.mean,
                batch_var_unbiased: stats.var_unbiased,
            });
            Ok(y)
        } else {
            let rm = f.store.buffer(self.mean).tensor.data();
            let rv = f.store.buffer(self.var).tensor.data();
            f.g.batch_norm_eval(x, gamma, beta, rm, rv, BN_EPS)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize) -> Result<Self> {
        Ok(Self { gamma: b.param("gamma", Tensor::full(&[dim], 1.0))?, beta: b.param("beta", Tensor::zeros(&[dim]))? })
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let gamma = f.p(self.gamma);
        let beta = f.p(self.beta);
        f.g.layer_norm_last(x, gamma, beta, NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct Prelu {
    pub slope: ParamId,
}

impl Prelu {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, ch: usize) -> Result<Self> {
        Ok(Self { slope: b.param("slope", Tensor::full(&[ch], 0.25))? })
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let s = f.p(self.slope);
        f.g.prelu(x, s)
    }
}

/// Bidirectional LSTM over `[n, frames, din]`, output `[n, frames, 2*hidden]`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    fwd: [ParamId; 3],
    bwd: [ParamId; 3],
}

impl BiLstm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, din: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut dir = |name: &str| -> Result<[ParamId; 3]> {
            b.scope(name, |b| {
                Ok([
                    b.uniform("w_ih", &[4 * hidden, din], bound)?,
                    b.uniform("w_hh", &[4 * hidden, hidden], bound)?,
                    b.uniform("b", &[4 * hidden], bound)?,
                ])
            })
        };
        Ok(Self { fwd: dir("fwd")?, bwd: dir("bwd")? })
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let fw = self.fwd.map(|id| f.p(id));
        let bw = self.bwd.map(|id| f.p(id));
        f.g.bilstm(x, (fw[0], fw[1], fw[2]), (bw[0], bw[1], bw[2]))
    }
}
