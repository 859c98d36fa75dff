//! Training objectives: SI-SNR, permutation-invariant reconstruction loss,
//! channel-identification cross-entropy and their weighted sum.

use serde::Serialize;

use crate::corpus::Waveform;
use crate::error::{Error, Result};
use crate::gradcore::lossops::si_snr_db;
use crate::gradcore::{Graph, Var};

/// SI-SNR in dB of `estimate` against `target`, capped to `[-60, 60]`.
pub fn si_snr(estimate: &Waveform, target: &Waveform) -> Result<f64> {
    si_snr_db(&estimate.samples, &target.samples)
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        // Next lexicographic permutation.
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else { break };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
    out
}

/// Picks the assignment with the highest mean score from an `n x n` table
/// where `scores[i * n + j]` rates estimate `i` against target `j`.
/// Returns `(best mean, perm)` with `perm[i]` the target of estimate `i`.
/// Ties go to the lexicographically first permutation.
pub fn best_permutation(scores: &[f64], n: usize) -> (f64, Vec<usize>) {
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for p in permutations(n) {
        let m = p.iter().enumerate().map(|(i, &j)| scores[i * n + j]).sum::<f64>() / n as f64;
        if m > best.0 {
            best = (m, p);
        }
    }
    best
}

/// Negative mean SI-SNR under the best assignment, and that assignment.
pub fn pit_loss(estimates: &[Waveform], targets: &[Waveform]) -> Result<(f64, Vec<usize>)> {
    let n = estimates.len();
    if n == 0 || targets.len() != n {
        return Err(Error::invalid(format!("pit_loss needs matching non-empty sets, got {n} and {}", targets.len())));
    }
    let mut scores = Vec::with_capacity(n * n);
    for e in estimates {
        for t in targets {
            scores.push(si_snr(e, t)?);
        }
    }
    let (m, p) = best_permutation(&scores, n);
    Ok((-m, p))
}

/// Graph version over batches: `est, tgt: [B, n, T]`. Returns the scalar
/// loss (mean over the batch of the per-item PIT loss) and each item's
/// chosen permutation.
pub fn pit_loss_graph(g: &mut Graph, est: Var, tgt: Var) -> Result<(Var, Vec<Vec<usize>>)> {
    let pairs = g.si_snr_pairs(est, tgt)?;
    let [b, n, _] = <[usize; 3]>::try_from(g.shape(pairs)).expect("pairs are rank 3");
    let mut idx = Vec::with_capacity(b * n);
    let mut perms = Vec::with_capacity(b);
    for bi in 0..b {
        let (_, p) = best_permutation(&g.data(pairs)[bi * n * n..(bi + 1) * n * n], n);
        idx.extend(p.iter().enumerate().map(|(i, &j)| bi * n * n + i * n + j));
        perms.push(p);
    }
    let picked = g.gather(pairs, idx)?;
    let m = g.mean(picked);
    Ok((g.scale(m, -1.0), perms))
}

/// Mean softmax cross-entropy of channel logits `[M, K]`, in nats.
pub fn channel_id_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_rc: f64,
    pub l_ci: f64,
    pub gamma: f64,
    pub l_total: f64,
}

/// `l_total = l_rc + gamma * l_ci`.
pub fn total_loss(l_rc: f64, l_ci: f64, gamma: f64) -> Result<LossBreakdown> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(LossBreakdown { l_rc, l_ci, gamma, l_total: l_rc + gamma * l_ci })
}

/// Graph version. With `gamma == 0` the cross-entropy term is left out of
/// the graph entirely, so nothing upstream of it receives gradient.
pub fn total_loss_graph(g: &mut Graph, l_rc: Var, l_ci: Option<Var>, gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma must be >= 0, got {gamma}")));
    }
    match l_ci {
        Some(ci) if gamma > 0.0 => {
            let w = g.scale(ci, gamma);
            g.add(l_rc, w)
        }
        _ => Ok(l_rc),
    }
}
