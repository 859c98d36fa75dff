//! The finite-difference suite behind `casnet grad-check`: every primitive
//! op plus composite paths through the channel encoder, the modulation
//! layer and the full training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chanenc::{ChannelEncoder, ChannelEncoderConfig, EmbeddingSource};
use crate::error::Result;
use crate::film::{Film, Model, ModelConfig};
use crate::gradcore::{grad_check, grad_check_params, GradCheckConfig, GradCheckReport, Graph, ParamStore, Tensor, Var};
use crate::nn::{Builder, Fwd};
use crate::objectives::{channel_id_loss, pit_loss_graph, total_loss_graph};
use crate::separator::SeparatorConfig;

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub composite: bool,
    pub tol: f64,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tol)
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(0.2..1.5))
}

struct Suite {
    cfg: GradCheckConfig,
    out: Vec<CheckOutcome>,
}

impl Suite {
    fn prim<F>(&mut self, name: &str, inputs: &[Tensor], f: F) -> Result<()>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let report = grad_check(f, inputs, &self.cfg)?;
        self.out.push(CheckOutcome { name: name.into(), composite: false, tol: PRIMITIVE_TOL, report });
        Ok(())
    }
}

fn primitives(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let x = rand_t(rng, &[2, 3, 19], 1.0);
    let w = rand_t(rng, &[4, 3, 5], 0.5);
    let b = rand_t(rng, &[4], 0.5);
    s.prim("conv1d", &[x.clone(), w.clone(), b], |g, v| g.conv1d(v[0], v[1], Some(v[2]), 2, 1))?;
    s.prim("conv1d no bias", &[x, w], |g, v| g.conv1d(v[0], v[1], None, 3, 0))?;
    let x = rand_t(rng, &[2, 4, 7], 1.0);
    let w = rand_t(rng, &[4, 2, 6], 0.5);
    s.prim("conv_transpose1d", &[x, w], |g, v| g.conv_transpose1d(v[0], v[1], 3))?;
    let x = rand_t(rng, &[2, 3, 5], 1.0);
    let w = rand_t(rng, &[4, 5], 0.5);
    let b = rand_t(rng, &[4], 0.5);
    s.prim("linear", &[x, w, b], |g, v| g.linear(v[0], v[1], Some(v[2])))?;

    let x = rand_t(rng, &[3, 4, 6], 2.0);
    let slope = rand_t(rng, &[4], 0.5);
    s.prim("relu", std::slice::from_ref(&x), |g, v| Ok(g.relu(v[0])))?;
    s.prim("sigmoid", std::slice::from_ref(&x), |g, v| Ok(g.sigmoid(v[0])))?;
    s.prim("tanh", std::slice::from_ref(&x), |g, v| Ok(g.tanh(v[0])))?;
    s.prim("prelu", &[x.clone(), slope], |g, v| g.prelu(v[0], v[1]))?;

    let gamma = positive(rng, &[4]);
    let beta = rand_t(rng, &[4], 0.5);
    s.prim("batch_norm train", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
    })?;
    s.prim("batch_norm eval", &[x.clone(), gamma, beta], |g, v| {
        g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3, 0.0], &[1.5, 0.7, 1.0, 2.0], 1e-5)
    })?;
    s.prim("instance_norm", std::slice::from_ref(&x), |g, v| g.instance_norm(v[0], 1e-5))?;
    let lg = positive(rng, &[6]);
    let lb = rand_t(rng, &[6], 0.5);
    s.prim("layer_norm_last", &[x, lg, lb], |g, v| g.layer_norm_last(v[0], v[1], v[2], 1e-5))?;

    let x = rand_t(rng, &[2, 3, 5], 1.0);
    let w = positive(rng, &[2, 5]);
    s.prim("avg_pool_time", std::slice::from_ref(&x), |g, v| g.avg_pool_time(v[0]))?;
    s.prim("weighted_pool_time", &[x.clone(), w.clone()], |g, v| g.weighted_pool_time(v[0], v[1]))?;
    s.prim("normalize_rows", &[w], |g, v| g.normalize_rows(v[0]))?;
    let sc = rand_t(rng, &[2, 3], 1.0);
    let sh = rand_t(rng, &[2, 3], 1.0);
    s.prim("scale_shift_time", &[x, sc, sh], |g, v| g.scale_shift_time(v[0], v[1], Some(v[2])))?;

    let x = rand_t(rng, &[2, 3, 4], 1.0);
    let wih = rand_t(rng, &[12, 4], 0.6);
    let whh = rand_t(rng, &[12, 3], 0.6);
    let b = rand_t(rng, &[12], 0.3);
    let wih2 = rand_t(rng, &[12, 4], 0.6);
    s.prim("lstm", &[x.clone(), wih.clone(), whh.clone(), b.clone()], |g, v| g.lstm(v[0], v[1], v[2], v[3], false))?;
    s.prim("lstm reverse", &[x.clone(), wih.clone(), whh.clone(), b.clone()], |g, v| {
        g.lstm(v[0], v[1], v[2], v[3], true)
    })?;
    s.prim("bilstm", &[x, wih, whh, b, wih2], |g, v| g.bilstm(v[0], (v[1], v[2], v[3]), (v[4], v[2], v[3])))?;

    let x = rand_t(rng, &[2, 3, 11], 1.0);
    s.prim("permute", std::slice::from_ref(&x), |g, v| g.permute(v[0], &[2, 0, 1]))?;
    s.prim("reshape", std::slice::from_ref(&x), |g, v| {
        let r = g.reshape(v[0], &[6, 11])?;
        Ok(g.tanh(r))
    })?;
    s.prim("fit_last crop", std::slice::from_ref(&x), |g, v| g.fit_last(v[0], 7))?;
    s.prim("fit_last pad", std::slice::from_ref(&x), |g, v| g.fit_last(v[0], 14))?;
    s.prim("segment", std::slice::from_ref(&x), |g, v| Ok(g.segment(v[0], 4)?.0))?;
    s.prim("overlap_add", std::slice::from_ref(&x), |g, v| {
        let (sg, geom) = g.segment(v[0], 4)?;
        let t = g.tanh(sg);
        g.overlap_add(t, &geom)
    })?;
    let y = rand_t(rng, &[2, 3, 5], 1.0);
    s.prim("concat_last", &[x, y], |g, v| g.concat_last(v[0], v[1]))?;
    let m = rand_t(rng, &[2, 2, 3, 5], 1.0);
    let f = rand_t(rng, &[2, 3, 5], 1.0);
    s.prim("mask_apply", &[m, f], |g, v| g.mask_apply(v[0], v[1]))?;

    let est = rand_t(rng, &[2, 2, 40], 1.0);
    let tgt = rand_t(rng, &[2, 2, 40], 1.0);
    s.prim("si_snr_pairs", &[est, tgt], |g, v| g.si_snr_pairs(v[0], v[1]))?;
    let logits = rand_t(rng, &[5, 4], 2.0);
    s.prim("cross_entropy", &[logits], |g, v| g.cross_entropy(v[0], &[0, 3, 1, 1, 2]))?;

    let a = rand_t(rng, &[3, 4], 1.0);
    let b = rand_t(rng, &[3, 4], 1.0);
    s.prim("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]))?;
    s.prim("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]))?;
    s.prim("mul", &[a.clone(), b], |g, v| g.mul(v[0], v[1]))?;
    s.prim("affine mean", std::slice::from_ref(&a), |g, v| {
        let y = g.affine(v[0], 0.5, 0.5);
        Ok(g.mean(y))
    })?;
    s.prim("sum", std::slice::from_ref(&a), |g, v| {
        let y = g.scale(v[0], -2.0);
        Ok(g.sum(y))
    })?;
    s.prim("gather", &[a], |g, v| g.gather(v[0], vec![0, 5, 5, 11]))?;
    Ok(())
}

/// Channel encoder in training mode, from separator-encoder features to the
/// classifier's cross-entropy.
pub fn channel_encoder_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x11);
    let ce = ChannelEncoderConfig { n_blocks: 2, width: 6, embed_dim: 5, n_channel_classes: 3, se_reduction: 2 };
    let enc = ChannelEncoder::new(&mut Builder::new(&mut store, &mut rng), &ce, 4)?;
    let x0 = Tensor::from_fn(&[3, 4, 9], |_| rng.gen_range(0.0..1.0));
    grad_check_params(&store, &[x0], cfg, |g, st, v| {
        let mut f = Fwd { g, store: st, train: true };
        let c = enc.embed_features(&mut f, v[0])?;
        let logits = enc.classify_channel(&mut f, c)?;
        channel_id_loss(f.g, logits, &[0, 2, 1])
    })
}

/// Modulation layer from embedding and features to the modulated output.
pub fn film_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x22);
    let film = Film::new(&mut Builder::new(&mut store, &mut rng), 5, 4)?;
    let s = rand_t(&mut rng, &[2, 4, 10], 1.0);
    let c = rand_t(&mut rng, &[2, 5], 1.0);
    grad_check_params(&store, &[s, c], cfg, |g, st, v| {
        let mut f = Fwd { g, store: st, train: true };
        let p = film.film_params(&mut f, v[1])?;
        film.film_apply(&mut f, v[0], p)
    })
}

/// Whole model: PIT reconstruction loss plus weighted channel loss.
pub fn training_loss_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let sep = SeparatorConfig { enc_dim: 4, win: 4, stride: 2, n_blocks: 1, chunk_size: 4, hidden: 3, n_sources: 2 };
    let ce = ChannelEncoderConfig { n_blocks: 1, width: 4, embed_dim: 3, n_channel_classes: 2, se_reduction: 2 };
    let (model, store) = Model::new(&ModelConfig::casnet(sep, ce), cfg.seed ^ 0x33)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x44);
    let t = 20;
    let tgt = rand_t(&mut rng, &[2, 2, t], 0.5);
    let mix = Tensor::from_fn(&[2, t], |i| tgt.data()[(i / t) * 2 * t + i % t] + tgt.data()[(i / t) * 2 * t + t + i % t]);
    let aux = rand_t(&mut rng, &[2, t], 0.5);
    grad_check_params(&store, &[mix, aux], cfg, |g, st, v| {
        let mut f = Fwd { g, store: st, train: true };
        let mut noise = ChaCha8Rng::seed_from_u64(0);
        let out = model.casnet_forward(&mut f, v[0], EmbeddingSource::OtherChannel, Some(v[1]), &mut noise)?;
        let tg = f.g.constant(tgt.clone());
        let (l_rc, _) = pit_loss_graph(f.g, out.estimates, tg)?;
        let l_ci = channel_id_loss(f.g, out.logits.expect("encoded embedding"), &[1, 0])?;
        total_loss_graph(f.g, l_rc, Some(l_ci), 0.1)
    })
}

/// Runs the full suite. Deterministic for a given seed.
pub fn run_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let cfg = GradCheckConfig { seed, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Suite { cfg: cfg.clone(), out: Vec::new() };
    primitives(&mut s, &mut rng)?;
    let composite = [
        ("channel encoder", channel_encoder_check(&cfg)?),
        ("film", film_check(&cfg)?),
        ("training loss", training_loss_check(&GradCheckConfig { samples_per_tensor: 8, ..cfg.clone() })?),
    ];
    for (name, report) in composite {
        s.out.push(CheckOutcome { name: name.into(), composite: true, tol: COMPOSITE_TOL, report });
    }
    Ok(s.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_composites() {
        let cfg = GradCheckConfig::default();
        let r = film_check(&cfg).unwrap();
        assert!(r.passes(COMPOSITE_TOL), "{r:?}");
        assert!(r.coordinates > 20);
    }
}
