//! Graph ops for the training objectives: pairwise SI-SNR and softmax
//! cross-entropy.

use std::rc::Rc;

use super::graph::{GradSink, Graph, Op, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const SI_SNR_EPS: f64 = 1e-8;
pub const SI_SNR_CAP_DB: f64 = 60.0;

/// Scalars of one SI-SNR evaluation on zero-mean signals.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SiSnrParts {
    /// `<est, tgt>`
    dot: f64,
    /// `||tgt||^2`
    tgt_energy: f64,
    /// `||s_target||^2`
    proj_energy: f64,
    /// `||e_noise||^2 + eps * ||est||^2`
    denom: f64,
    value: f64,
    clamped: bool,
}

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

pub(crate) fn si_snr_parts(est: &[f64], tgt: &[f64]) -> Result<SiSnrParts> {
    if est.len() != tgt.len() || est.is_empty() {
        return Err(Error::shape("si_snr", format!("estimate has {} samples, target {}", est.len(), tgt.len())));
    }
    let e = zero_mean(est);
    let s = zero_mean(tgt);
    let tgt_energy: f64 = s.iter().map(|v| v * v).sum();
    if tgt_energy <= 1e-20 {
        return Err(Error::invalid("si_snr target has zero energy"));
    }
    let dot: f64 = e.iter().zip(&s).map(|(a, b)| a * b).sum();
    let alpha = dot / tgt_energy;
    let proj_energy = alpha * alpha * tgt_energy;
    let noise_energy: f64 = e.iter().zip(&s).map(|(a, b)| (a - alpha * b).powi(2)).sum();
    let est_energy: f64 = e.iter().map(|v| v * v).sum();
    // The guard scales with the estimate so the value stays scale invariant.
    let denom = noise_energy + SI_SNR_EPS * est_energy;
    let raw = if est_energy > 0.0 { 10.0 * (proj_energy / denom).log10() } else { f64::NEG_INFINITY };
    let value = raw.clamp(-SI_SNR_CAP_DB, SI_SNR_CAP_DB);
    let clamped = !(raw > -SI_SNR_CAP_DB && raw < SI_SNR_CAP_DB);
    Ok(SiSnrParts { dot, tgt_energy, proj_energy, denom, value, clamped })
}

/// SI-SNR in dB, capped to `[-60, 60]`.
pub fn si_snr_db(est: &[f64], tgt: &[f64]) -> Result<f64> {
    Ok(si_snr_parts(est, tgt)?.value)
}

pub(crate) struct SiSnrSaved {
    est: Var,
    tgt: Var,
    batch: usize,
    n: usize,
    len: usize,
    parts: Vec<SiSnrParts>,
}

impl Graph {
    /// All-pairs SI-SNR: `est, tgt: [batch, n, len]` to `[batch, n, n]` with
    /// entry `[b, i, j] = si_snr(est[b, i], tgt[b, j])`.
    pub fn si_snr_pairs(&mut self, est: Var, tgt: Var) -> Result<Var> {
        let se = self.shape(est).to_vec();
        if se.len() != 3 || self.shape(tgt) != se.as_slice() {
            return Err(Error::shape(
                "si_snr_pairs",
                format!("estimates {se:?} vs targets {:?}", self.shape(tgt)),
            ));
        }
        let [b, n, len] = [se[0], se[1], se[2]];
        let ed = self.data(est);
        let td = self.data(tgt);
        let mut parts = Vec::with_capacity(b * n * n);
        for bi in 0..b {
            for i in 0..n {
                let e = &ed[(bi * n + i) * len..(bi * n + i + 1) * len];
                for j in 0..n {
                    let t = &td[(bi * n + j) * len..(bi * n + j + 1) * len];
                    parts.push(si_snr_parts(e, t)?);
                }
            }
        }
        let out = Tensor::new(parts.iter().map(|p| p.value).collect(), &[b, n, n])?;
        let saved = SiSnrSaved { est, tgt, batch: b, n, len, parts };
        Ok(self.push_op(out, Op::SiSnrPairs(Box::new(saved)), &[est, tgt]))
    }

    /// Mean softmax cross-entropy of `logits: [m, classes]` against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", format!("logits {s:?} for {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("channel label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(s[0] * k);
        let mut loss = 0.0;
        for (row, &l) in self.data(logits).chunks(k).zip(labels) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            loss += -(row[l] - mx - z.ln());
            probs.extend(row.iter().map(|v| (v - mx).exp() / z));
        }
        let out = Tensor::scalar(loss / s[0] as f64);
        let op = Op::CrossEntropy { logits, labels: Rc::new(labels.to_vec()), probs };
        Ok(self.push_op(out, op, &[logits]))
    }
}

pub(crate) fn si_snr_pairs_backward(s: &mut GradSink<'_>, sv: &SiSnrSaved, g: &[f64]) {
    let graph = s.graph;
    let (n, len) = (sv.n, sv.len);
    let ed = graph.data(sv.est);
    let td = graph.data(sv.tgt);
    let k = 10.0 / std::f64::consts::LN_10;
    let mut de = vec![0.0; ed.len()];
    let mut dt = vec![0.0; td.len()];
    let want_t = s.wants(sv.tgt);
    for bi in 0..sv.batch {
        for i in 0..n {
            let er = (bi * n + i) * len..(bi * n + i + 1) * len;
            let e = zero_mean(&ed[er.clone()]);
            for j in 0..n {
                let idx = (bi * n + i) * n + j;
                let p = sv.parts[idx];
                if p.clamped || g[idx] == 0.0 {
                    continue;
                }
                let tr = (bi * n + j) * len..(bi * n + j + 1) * len;
                let t = zero_mean(&td[tr.clone()]);
                // denom = (1 + eps) ||e||^2 - proj_energy
                let d_proj = g[idx] * k * (1.0 / p.proj_energy + 1.0 / p.denom);
                let d_energy = -g[idx] * k * (1.0 + SI_SNR_EPS) / p.denom;
                let (dot, q) = (p.dot, p.tgt_energy);
                let mut ge: Vec<f64> =
                    e.iter().zip(&t).map(|(ev, tv)| d_proj * 2.0 * dot / q * tv + d_energy * 2.0 * ev).collect();
                center(&mut ge);
                de[er.clone()].iter_mut().zip(&ge).for_each(|(a, b)| *a += b);
                if want_t {
                    let mut gt: Vec<f64> = e
                        .iter()
                        .zip(&t)
                        .map(|(ev, tv)| d_proj * (2.0 * dot / q * ev - 2.0 * dot * dot / (q * q) * tv))
                        .collect();
                    center(&mut gt);
                    dt[tr].iter_mut().zip(&gt).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    s.with(sv.est, |buf| buf.iter_mut().zip(&de).for_each(|(a, b)| *a += b));
    s.with(sv.tgt, |buf| buf.iter_mut().zip(&dt).for_each(|(a, b)| *a += b));
}

fn center(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

pub(crate) fn cross_entropy_backward(s: &mut GradSink<'_>, logits: Var, labels: &[usize], probs: &[f64], g: &[f64]) {
    let k = s.graph.shape(logits)[1];
    let m = labels.len() as f64;
    s.with(logits, |dl| {
        for (r, (dst, pr)) in dl.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
            for (c, (o, p)) in dst.iter_mut().zip(pr).enumerate() {
                let y = if c == labels[r] { 1.0 } else { 0.0 };
                *o += g[0] * (p - y) / m;
            }
        }
    });
}
