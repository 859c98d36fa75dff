//! Batch, instance and feature-axis layer normalisation.

use super::graph::{rank3, GradSink, Graph, Op, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub(crate) enum NormLayout {
    /// `[batch, ch, time]`, statistics per channel over batch and time.
    BatchChannel { ch: usize, time: usize },
    /// Statistics per contiguous row of `len` values.
    Rows { len: usize },
}

impl NormLayout {
    #[inline]
    fn group(&self, i: usize) -> usize {
        match *self {
            NormLayout::BatchChannel { ch, time } => (i / time) % ch,
            NormLayout::Rows { len } => i / len,
        }
    }

    /// Index of the scale/shift parameter for flat position `i`.
    #[inline]
    fn param(&self, i: usize) -> usize {
        match *self {
            NormLayout::BatchChannel { ch, time } => (i / time) % ch,
            NormLayout::Rows { len } => i % len,
        }
    }
}

pub(crate) struct NormSaved {
    x: Var,
    gamma: Option<Var>,
    beta: Option<Var>,
    layout: NormLayout,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    group_size: usize,
    /// Statistics were computed from `x` itself (as opposed to running stats).
    batch_stats: bool,
}

/// Per-channel statistics observed by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity tracked by running statistics.
    pub var_unbiased: Vec<f64>,
}

fn group_stats(x: &[f64], layout: NormLayout, groups: usize, group_size: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; groups];
    for (i, v) in x.iter().enumerate() {
        mean[layout.group(i)] += v;
    }
    mean.iter_mut().for_each(|m| *m /= group_size as f64);
    let mut var = vec![0.0; groups];
    for (i, v) in x.iter().enumerate() {
        let g = layout.group(i);
        let d = v - mean[g];
        var[g] += d * d;
    }
    var.iter_mut().for_each(|v| *v /= group_size as f64);
    (mean, var)
}

impl Graph {
    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        layout: NormLayout,
        groups: usize,
        group_size: usize,
        fixed: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xd = self.data(x);
        let (mean, var) = match fixed {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => group_stats(xd, layout, groups, group_size),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Vec<f64> = xd
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let g = layout.group(i);
                (v - mean[g]) * inv_std[g]
            })
            .collect();
        let gd = gamma.map(|v| self.data(v));
        let bd = beta.map(|v| self.data(v));
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let p = layout.param(i);
                let s = gd.map_or(1.0, |g| g[p]);
                let o = bd.map_or(0.0, |b| b[p]);
                s * h + o
            })
            .collect();
        let tensor = Tensor::new(out, self.shape(x))?;
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        let saved = NormSaved { x, gamma, beta, layout, xhat, inv_std, group_size, batch_stats: fixed.is_none() };
        Ok((self.push_op(tensor, Op::Norm(Box::new(saved)), &inputs), mean, var))
    }

    fn check_affine(&self, op: &'static str, n: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape(
                op,
                format!("scale {:?} / shift {:?} for {n} features", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok(())
    }

    /// Train-mode batch norm over `[batch, ch, time]`; returns the batch
    /// statistics so the caller can update its running estimates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let [b, c, t] = rank3("batch_norm", self.shape(x))?;
        self.check_affine("batch_norm", c, gamma, beta)?;
        let n = b * t;
        if n < 2 {
            return Err(Error::invalid(format!(
                "batch_norm in train mode needs at least 2 values per feature map, got batch {b} x time {t}"
            )));
        }
        let layout = NormLayout::BatchChannel { ch: c, time: t };
        let (y, mean, var) = self.normalize(x, Some(gamma), Some(beta), layout, c, n, None, eps)?;
        let corr = n as f64 / (n - 1) as f64;
        let var_unbiased = var.iter().map(|v| v * corr).collect();
        Ok((y, BatchStats { mean, var_unbiased }))
    }

    /// Eval-mode batch norm using running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let [_, c, t] = rank3("batch_norm", self.shape(x))?;
        self.check_affine("batch_norm", c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", format!("running stats for {c} channels")));
        }
        let layout = NormLayout::BatchChannel { ch: c, time: t };
        let (y, _, _) = self.normalize(x, Some(gamma), Some(beta), layout, c, 0, Some((running_mean, running_var)), eps)?;
        Ok(y)
    }

    /// Per-sample, per-feature-map normalisation over time; no affine terms.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let [b, c, t] = rank3("instance_norm", self.shape(x))?;
        if t == 1 {
            return Err(Error::invalid("instance_norm needs more than one time step"));
        }
        let (y, _, _) = self.normalize(x, None, None, NormLayout::Rows { len: t }, b * c, t, None, eps)?;
        Ok(y)
    }

    /// Normalisation over the trailing axis with learnable scale and shift.
    pub fn layer_norm_last(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        self.check_affine("layer_norm", d, gamma, beta)?;
        let rows = self.value(x).numel() / d;
        let (y, _, _) = self.normalize(x, Some(gamma), Some(beta), NormLayout::Rows { len: d }, rows, d, None, eps)?;
        Ok(y)
    }
}

pub(crate) fn norm_backward(s: &mut GradSink<'_>, saved: &NormSaved, g: &[f64]) {
    let graph = s.graph;
    let layout = saved.layout;
    let gd = saved.gamma.map(|v| graph.data(v));
    if let Some(beta) = saved.beta {
        s.with(beta, |db| {
            for (i, gi) in g.iter().enumerate() {
                db[layout.param(i)] += gi;
            }
        });
    }
    if let Some(gamma) = saved.gamma {
        s.with(gamma, |dg| {
            for (i, gi) in g.iter().enumerate() {
                dg[layout.param(i)] += gi * saved.xhat[i];
            }
        });
    }
    if !s.wants(saved.x) {
        return;
    }
    let dxhat: Vec<f64> = g
        .iter()
        .enumerate()
        .map(|(i, gi)| gi * gd.map_or(1.0, |gm| gm[layout.param(i)]))
        .collect();
    let groups = saved.inv_std.len();
    if saved.batch_stats {
        let n = saved.group_size as f64;
        let mut sum_d = vec![0.0; groups];
        let mut sum_dx = vec![0.0; groups];
        for (i, d) in dxhat.iter().enumerate() {
            let gr = layout.group(i);
            sum_d[gr] += d;
            sum_dx[gr] += d * saved.xhat[i];
        }
        s.with(saved.x, |dx| {
            for (i, d) in dxhat.iter().enumerate() {
                let gr = layout.group(i);
                dx[i] += saved.inv_std[gr] * (d - sum_d[gr] / n - saved.xhat[i] * sum_dx[gr] / n);
            }
        });
    } else {
        s.with(saved.x, |dx| {
            for (i, d) in dxhat.iter().enumerate() {
                dx[i] += d * saved.inv_std[layout.group(i)];
            }
        });
    }
}
