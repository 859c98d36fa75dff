//! End-to-end acceptance run. Prints one line per criterion and exits
//! nonzero if any hard criterion fails. The ordering check is reported but
//! never fails the run.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use casnet::chanenc::{ChannelEncoderConfig, EmbeddingSource};
use casnet::corpus::{build_corpus, CorpusConfig, Manifest, SpeakerPools, Split, Waveform};
use casnet::evalkit::{default_channels, evaluate, EvalOptions};
use casnet::film::{FilmParams, Model, ModelConfig};
use casnet::gradcore::{Graph, ParamStore, Tensor};
use casnet::nn::{Fwd, BN_EPS, NORM_EPS};
use casnet::objectives::{pit_loss, si_snr};
use casnet::selfcheck::run_suite;
use casnet::separator::SeparatorConfig;
use casnet::trainer::{channel_accuracy, dataset_sisnri, fit, fit_data, load_data, Sampler, Strategy, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn w(v: Vec<f64>) -> Waveform {
    Waveform::new(v, 8000)
}

fn toy_sep(n_blocks: usize, hidden: usize) -> SeparatorConfig {
    SeparatorConfig { enc_dim: 32, win: 16, stride: 8, n_blocks, chunk_size: 50, hidden, n_sources: 2 }
}

fn toy_chan(classes: usize) -> ChannelEncoderConfig {
    ChannelEncoderConfig { n_blocks: 2, width: 16, embed_dim: 16, n_channel_classes: classes, se_reduction: 4 }
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let out = run_suite(0)?;
    let failed: Vec<_> = out.iter().filter(|c| !c.passed()).map(|c| c.name.clone()).collect();
    let secs = t.elapsed().as_secs_f64();
    let worst = out.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    Ok((
        failed.is_empty() && secs < 300.0,
        format!("{} checks, worst rel err {worst:.2e}, {secs:.1}s, failed {failed:?}", out.len()),
    ))
}

fn all_perms(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_perms(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn loss_oracles() -> Outcome {
    let hand = si_snr(&w(vec![1.0, 1.0, -1.0, -1.0]), &w(vec![1.0, 0.0, -1.0, 0.0]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rand_w = |n: usize| w((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let mut worst_scale = 0.0f64;
    for _ in 0..20 {
        let (e, t) = (rand_w(64), rand_w(64));
        let base = si_snr(&e, &t)?;
        for a in [1e-3, 0.5, 7.0, 1e3] {
            let scaled = w(e.samples.iter().map(|v| v * a).collect());
            worst_scale = worst_scale.max((si_snr(&scaled, &t)? - base).abs());
        }
    }
    let mut pit_ok = true;
    for n in [2, 3] {
        for _ in 0..50 {
            let est: Vec<_> = (0..n).map(|_| rand_w(48)).collect();
            let tgt: Vec<_> = (0..n).map(|_| rand_w(48)).collect();
            let (loss, _) = pit_loss(&est, &tgt)?;
            let mut best = f64::NEG_INFINITY;
            for p in all_perms(n) {
                let mut s = 0.0;
                for (i, &j) in p.iter().enumerate() {
                    s += si_snr(&est[i], &tgt[j])?;
                }
                best = best.max(s / n as f64);
            }
            pit_ok &= loss == -best;
        }
    }
    Ok((
        hand.abs() < 1e-6 && worst_scale < 1e-6 && pit_ok,
        format!("hand case {hand:.2e} dB, scale drift {worst_scale:.2e} dB, pit exact {pit_ok}"),
    ))
}

fn structural_identities() -> Outcome {
    let sep = SeparatorConfig { enc_dim: 8, chunk_size: 10, hidden: 4, n_blocks: 1, ..Default::default() };
    let ce = ChannelEncoderConfig { n_blocks: 1, width: 6, embed_dim: 4, n_channel_classes: 3, se_reduction: 2 };
    let (full, mut store) = Model::new(&ModelConfig::casnet(sep.clone(), ce), 9)?;
    let (base, mut base_store) = Model::new(&ModelConfig::baseline(sep), 1)?;
    base_store.copy_matching(&store)?;

    // Bypass against the plain separator.
    let x: Vec<f64> = (0..200).map(|i| (i as f64 * 0.13).sin() * 0.4 + (i as f64 * 0.031).cos() * 0.2).collect();
    let run = |m: &Model, s: &ParamStore| -> casnet::Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut f = Fwd { g: &mut g, store: s, train: false };
        let xv = f.g.input(Tensor::new(x.clone(), &[1, x.len()])?);
        let out = m.casnet_forward(&mut f, xv, EmbeddingSource::Bypass, None, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(f.g.data(out.estimates).to_vec())
    };
    let bypass_ok = run(&full, &store)? == run(&base, &base_store)?;

    // FiLM with unit scale and zero shift against an independent
    // PReLU(instance norm).
    let (m, c, t) = (2, 8, 12);
    let s_data: Vec<f64> = (0..m * c * t).map(|i| (i as f64 * 0.77).cos() * 2.0 + i as f64 * 0.01).collect();
    let slope = store.get(store.find("film.act.slope").ok_or("no film slope")?).tensor.data().to_vec();
    let film_out = {
        let mut g = Graph::new();
        let mut f = Fwd { g: &mut g, store: &store, train: false };
        let s = f.g.input(Tensor::new(s_data.clone(), &[m, c, t])?);
        let p = FilmParams { w: f.g.input(Tensor::full(&[m, c], 1.0)), b: f.g.input(Tensor::zeros(&[m, c])) };
        let y = full.film().ok_or("no film")?.film_apply(&mut f, s, p)?;
        f.g.data(y).to_vec()
    };
    let mut film_err = 0.0f64;
    for (row_i, row) in s_data.chunks(t).enumerate() {
        let mean = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
        let a = slope[row_i % c];
        for (k, v) in row.iter().enumerate() {
            let n = (v - mean) / (var + NORM_EPS).sqrt();
            let e = if n > 0.0 { n } else { a * n };
            film_err = film_err.max((film_out[row_i * t + k] - e).abs());
        }
    }

    // SE block with identity convolutions and a zero excitation network:
    // the gate is sigmoid(0) = 0.5 everywhere, so the block returns 1.5 x.
    let ch = 6;
    let names: Vec<String> = store.params().iter().map(|p| p.name.clone()).collect();
    for name in names.iter().filter(|n| n.starts_with("chan.se0.")) {
        let id = store.find(name).unwrap();
        let data = store.get_mut(id).tensor.data_mut();
        if name.ends_with("conv.w") {
            data.fill(0.0);
            for o in 0..ch {
                data[(o * ch + o) * 3 + 1] = 1.0;
            }
        } else if name.ends_with("bn.gamma") {
            data.fill(1.0);
        } else {
            data.fill(0.0);
        }
    }
    for conv in ["conv1", "conv2"] {
        let mean = store.find_buffer(&format!("chan.se0.{conv}.bn.running_mean")).ok_or("no running mean")?;
        store.buffer_mut(mean).tensor.data_mut().fill(0.0);
        let var = store.find_buffer(&format!("chan.se0.{conv}.bn.running_var")).ok_or("no running var")?;
        store.buffer_mut(var).tensor.data_mut().fill(1.0 - BN_EPS);
    }
    let xin: Vec<f64> = (0..2 * ch * 10).map(|i| ((i * 7) % 13) as f64 * 0.1).collect();
    let se_out = {
        let mut g = Graph::new();
        let mut f = Fwd { g: &mut g, store: &store, train: false };
        let xv = f.g.input(Tensor::new(xin.clone(), &[2, ch, 10])?);
        let y = full.channel_encoder().ok_or("no encoder")?.se_blocks()[0].forward(&mut f, xv)?;
        f.g.data(y).to_vec()
    };
    let se_err = se_out.iter().zip(&xin).map(|(y, x)| (y - 1.5 * x).abs()).fold(0.0, f64::max);

    Ok((
        bypass_ok && film_err < 1e-12 && se_err < 1e-12,
        format!("bypass bit-identical {bypass_ok}, film max err {film_err:.1e}, SE 1.5x max err {se_err:.1e}"),
    ))
}

fn overfit_cfg(corpus: &Path, baseline: bool) -> TrainConfig {
    TrainConfig {
        strategy: Strategy::GuideSame,
        gamma: 0.0,
        baseline,
        epochs: 1000,
        batch_size: 4,
        steps_per_epoch: Some(50),
        max_steps: Some(500),
        lr_init: 1e-3,
        plateau_patience: 1000,
        validate_on: Split::Train,
        separator: toy_sep(2, 32),
        channel_encoder: toy_chan(2),
        corpus: Some(corpus.to_path_buf()),
        ..Default::default()
    }
}

fn overfit_smoke() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir()?;
    let cc = CorpusConfig {
        segment_s: 0.5,
        n_train: 4,
        n_valid: 2,
        n_test: 2,
        n_channels: 2,
        holdout_channel: None,
        speakers: SpeakerPools { train: vec![0, 1, 2, 3], valid: vec![4, 5], test: vec![6, 7] },
        ..Default::default()
    };
    build_corpus(&cc, dir.path())?;
    let mut scores = Vec::new();
    for baseline in [true, false] {
        let cfg = overfit_cfg(dir.path(), baseline);
        let (train, valid, n) = load_data(&cfg)?;
        let out = fit_data(&cfg, &train, &valid, n, None)?;
        let src = if baseline { EmbeddingSource::Bypass } else { EmbeddingSource::SameMixture };
        scores.push((train.len(), dataset_sisnri(&out.model, &out.store, &train, src, 0)?));
    }
    let secs = t.elapsed().as_secs_f64();
    Ok((
        scores.iter().all(|&(n, s)| n == 8 && s >= 5.0) && secs < 1800.0,
        format!("{} mixtures, baseline {:.2} dB, casnet {:.2} dB (>= 5), {secs:.0}s", scores[0].0, scores[0].1, scores[1].1),
    ))
}

fn channel_information() -> Outcome {
    let dir = tempfile::tempdir()?;
    let cc = CorpusConfig::default();
    build_corpus(&cc, dir.path())?;
    let mut cfg = TrainConfig {
        strategy: Strategy::Perturb,
        gamma: 0.1,
        epochs: 1,
        batch_size: 4,
        steps_per_epoch: Some(1200),
        max_steps: Some(1200),
        segment_s: Some(0.5),
        lr_init: 1e-3,
        separator: toy_sep(1, 16),
        channel_encoder: toy_chan(4),
        corpus: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let (train, valid, n) = load_data(&cfg)?;
    let out = fit_data(&cfg, &train, &valid, n, None)?;
    let acc = channel_accuracy(&out.model, &out.store, &train)?;

    // One step with the classifier term switched off.
    cfg.gamma = 0.0;
    let mut tr = Trainer::new(cfg.clone(), n)?;
    let before = tr.store.clone();
    let sampler = Sampler::new(cfg.strategy, &train.records)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let items: Vec<_> = (0..4).map(|_| sampler.sample(&mut rng)).collect();
    tr.train_step(&train, &items, 0)?;
    let mut classifier_grad = 0.0;
    let mut classifier_moved = false;
    for p in tr.store.params().iter().filter(|p| p.name.starts_with("chan.classifier")) {
        classifier_grad += p.tensor.grad.as_deref().unwrap_or(&[]).iter().map(|v| v * v).sum::<f64>();
        classifier_moved |= before.get(before.find(&p.name).unwrap()).tensor.data() != p.tensor.data();
    }
    Ok((
        acc >= 0.95 && classifier_grad == 0.0 && !classifier_moved,
        format!(
            "train accuracy {acc:.4} over {} mixtures (>= 0.95), gamma 0 classifier grad norm {classifier_grad}, moved {classifier_moved}",
            train.len()
        ),
    ))
}

fn ordering() -> Outcome {
    let dir = tempfile::tempdir()?;
    build_corpus(&CorpusConfig { segment_s: 1.0, n_train: 40, n_valid: 8, n_test: 20, ..Default::default() }, dir.path())?;
    let test = Manifest::load(dir.path(), Split::Test)?;
    let mut all = true;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let cfg = TrainConfig {
            strategy: Strategy::Perturb,
            gamma: 0.01,
            seed,
            epochs: 2,
            batch_size: 4,
            steps_per_epoch: Some(500),
            segment_s: Some(0.5),
            lr_init: 1e-3,
            separator: toy_sep(2, 32),
            channel_encoder: toy_chan(4),
            corpus: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let out = fit(&cfg, None)?;
        let score = |src| -> casnet::Result<f64> {
            let mut o = EvalOptions::new(src);
            o.seed = seed;
            Ok(evaluate(&out.model, &out.store, &test, &o)?.mean_si_snri)
        };
        let same = score(EmbeddingSource::SameMixture)?;
        let gauss = score(EmbeddingSource::GaussianNoise)?;
        all &= same - gauss >= 0.0;
        parts.push(format!("seed {seed}: same {same:.3} vs gaussian {gauss:.3}"));
    }
    Ok((all, parts.join(", ")))
}

fn holdout_protocol() -> Outcome {
    let dir = tempfile::tempdir()?;
    let cc = CorpusConfig { segment_s: 0.25, n_train: 6, n_valid: 3, n_test: 3, ..Default::default() };
    build_corpus(&cc, dir.path())?;
    let h = cc.holdout_channel.ok_or("default corpus has no holdout channel")?;
    let train = Manifest::load(dir.path(), Split::Train)?;
    let valid = Manifest::load(dir.path(), Split::Valid)?;
    let test = Manifest::load(dir.path(), Split::Test)?;
    let excluded = !train.channels().contains(&h) && !valid.channels().contains(&h);
    let eval_channels = default_channels(&test);
    let cfg = TrainConfig { corpus: Some(dir.path().to_path_buf()), ..Default::default() };
    let (tr, va, _) = load_data(&cfg)?;
    let loaded_ok = !tr.channels().contains(&h) && !va.channels().contains(&h);
    Ok((
        excluded && loaded_ok && eval_channels == vec![h],
        format!(
            "holdout {h}, train channels {:?}, valid channels {:?}, evaluation channels {eval_channels:?}",
            train.channels(),
            valid.channels()
        ),
    ))
}

fn casnet(args: &[&str]) -> Result<Vec<u8>, Box<dyn std::error::Error>> {
    let o = Command::new(env!("CARGO_BIN_EXE_casnet")).args(args).output()?;
    if !o.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)).into());
    }
    Ok(o.stdout)
}

/// Every file under `root` with its contents, keyed by relative path.
fn tree(root: &Path) -> std::io::Result<Vec<(std::path::PathBuf, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir()?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    std::fs::write(
        p("corpus.json"),
        r#"{"segment_s": 0.25, "n_train": 3, "n_valid": 2, "n_test": 2, "n_channels": 3, "holdout_channel": 2,
            "speakers": {"train": [0, 1, 2, 3], "valid": [4, 5], "test": [6, 7]}}"#,
    )?;
    std::fs::write(
        p("train.json"),
        r#"{"epochs": 2, "batch_size": 2, "steps_per_epoch": 2, "lr_init": 0.001, "strategy": "perturb", "gamma": 0.01,
            "separator": {"enc_dim": 8, "win": 16, "stride": 8, "n_blocks": 1, "chunk_size": 10, "hidden": 4},
            "channel_encoder": {"n_blocks": 1, "width": 4, "embed_dim": 4, "se_reduction": 2}}"#,
    )?;
    let mut mismatched = Vec::new();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let corpus = p(&format!("corpus_{run}"));
        let model = p(&format!("model_{run}"));
        casnet(&["gen-corpus", "--config", &p("corpus.json"), "--out", &corpus, "--seed", "3"])?;
        casnet(&["train", "--config", &p("train.json"), "--corpus", &corpus, "--out", &model, "--seed", "5"])?;
        let ck = format!("{model}/best.ckpt");
        let report = casnet(&["eval", &ck, "--corpus", &corpus, "--emb-source", "gaussian", "--json", "--seed", "7"])?;
        casnet(&["embed", &ck, "--corpus", &corpus, "--out", &p(&format!("emb_{run}.jsonl"))])?;
        outputs.push((corpus, model, report));
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    if a.2 != b.2 {
        mismatched.push("eval report".to_string());
    }
    for f in ["best.ckpt", "last.ckpt", "metrics.csv", "steps.csv"] {
        if std::fs::read(Path::new(&a.1).join(f))? != std::fs::read(Path::new(&b.1).join(f))? {
            mismatched.push(f.to_string());
        }
    }
    // The saved configs differ only in where each run's corpus lives.
    let cfg_of = |dir: &str| -> Result<serde_json::Value, Box<dyn std::error::Error>> {
        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(Path::new(dir).join("train_config.json"))?)?;
        v["corpus"] = serde_json::Value::Null;
        Ok(v)
    };
    if cfg_of(&a.1)? != cfg_of(&b.1)? {
        mismatched.push("train_config.json".to_string());
    }
    let (ta, tb) = (tree(Path::new(&a.0))?, tree(Path::new(&b.0))?);
    if ta.is_empty() || ta != tb {
        mismatched.push(format!("corpus ({} files)", ta.len()));
    }
    if std::fs::read(p("emb_a.jsonl"))? != std::fs::read(p("emb_b.jsonl"))? {
        mismatched.push("embeddings".to_string());
    }
    Ok((mismatched.is_empty(), format!("corpus, checkpoints, logs, report, embeddings; mismatched {mismatched:?}")))
}

fn main() {
    let criteria: [(&str, bool, fn() -> Outcome); 8] = [
        ("1 gradient suite", true, gradient_suite),
        ("2 loss oracles", true, loss_oracles),
        ("3 structural identities", true, structural_identities),
        ("4 overfit smoke", true, overfit_smoke),
        ("5 channel information", true, channel_information),
        ("6 same beats gaussian over 3 seeds (soft)", false, ordering),
        ("7 holdout channel protocol", true, holdout_protocol),
        ("8 determinism", true, determinism),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut hard_failures = 0;
    for (name, hard, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.starts_with(o.as_str())) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let tag = match (ok, hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "SOFT-FAIL",
        };
        println!("[{tag}] {name}: {detail} ({:.0}s)", t.elapsed().as_secs_f64());
        if !ok && hard {
            hard_failures += 1;
        }
    }
    if hard_failures > 0 {
        std::process::exit(1);
    }
}
