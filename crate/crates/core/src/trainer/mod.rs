//! Training loop for the channel-aware model and the plain baseline.

mod optim;
mod sampling;

pub use optim::{clip_grad_norm, Adam, PlateauHalving, ADAM_EPS, BETA1, BETA2};
pub use sampling::{Sampler, Strategy, TrainingItem};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chanenc::{ChannelEncoderConfig, EmbeddingSource};
use crate::corpus::{Example, Manifest, MixtureRecord, Split};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_loaded, EvalOptions};
use crate::film::{Model, ModelConfig};
use crate::gradcore::{Graph, ParamStore, Tensor};
use crate::nn::{Fwd, BN_MOMENTUM};
use crate::objectives::{channel_id_loss, pit_loss_graph, total_loss_graph};
use crate::separator::SeparatorConfig;

pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const CONFIG_FILE: &str = "train_config.json";

/// Training configuration, read from JSON. Missing fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Weight of the channel-identification loss.
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Random crop length in seconds; `None` trains on whole mixtures.
    pub segment_s: Option<f64>,
    pub lr_init: f64,
    pub plateau_patience: usize,
    pub grad_clip: f64,
    pub seed: u64,
    /// Steps per epoch; defaults to one pass over the training mixtures.
    pub steps_per_epoch: Option<usize>,
    /// Hard cap on the total number of steps.
    pub max_steps: Option<usize>,
    pub separator: SeparatorConfig,
    /// Class count is always taken from the corpus profile table.
    pub channel_encoder: ChannelEncoderConfig,
    /// Train the plain separator without channel conditioning.
    pub baseline: bool,
    /// Separator blocks added on top of `separator.n_blocks` (baseline only).
    pub extra_blocks: usize,
    /// Restrict training mixtures to these channels.
    pub train_channels: Option<Vec<u32>>,
    /// Split scored after each epoch.
    pub validate_on: Split,
    pub corpus: Option<PathBuf>,
    /// Print one line per this many steps to stderr; 0 is silent.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::GuideSame,
            gamma: 0.0,
            epochs: 30,
            batch_size: 4,
            segment_s: None,
            lr_init: 1.5e-4,
            plateau_patience: 2,
            grad_clip: 5.0,
            seed: 0,
            steps_per_epoch: None,
            max_steps: None,
            separator: SeparatorConfig::default(),
            channel_encoder: ChannelEncoderConfig::default(),
            baseline: false,
            extra_blocks: 0,
            train_channels: None,
            validate_on: Split::Valid,
            corpus: None,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.lr_init > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("lr_init and grad_clip must be positive".into()));
        }
        if self.segment_s.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Config("segment_s must be positive".into()));
        }
        if self.extra_blocks > 0 && !self.baseline {
            return Err(Error::Config("extra_blocks applies to the baseline only".into()));
        }
        self.separator.validate()
    }

    /// Model configuration for a corpus with `n_classes` channel profiles.
    pub fn model_config(&self, n_classes: usize) -> Result<ModelConfig> {
        let mut sep = self.separator.clone();
        sep.n_blocks += self.extra_blocks;
        if self.baseline {
            return Ok(ModelConfig::baseline(sep));
        }
        let ce = ChannelEncoderConfig { n_channel_classes: n_classes, ..self.channel_encoder.clone() };
        ce.validate()?;
        Ok(ModelConfig::casnet(sep, ce))
    }

    /// Embedding source used for training forwards.
    pub fn train_source(&self) -> EmbeddingSource {
        if self.baseline {
            EmbeddingSource::Bypass
        } else {
            self.strategy.embedding_source()
        }
    }

    /// Embedding source used for validation.
    pub fn valid_source(&self) -> EmbeddingSource {
        if self.baseline {
            EmbeddingSource::Bypass
        } else {
            EmbeddingSource::SameMixture
        }
    }
}

/// Records and their audio, index-aligned.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<MixtureRecord>,
    pub examples: Vec<Example>,
    pub sample_rate: u32,
}

impl Dataset {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        Ok(Self { records: manifest.records.clone(), examples: manifest.load_all()?, sample_rate: manifest.sample_rate() })
    }

    pub fn filter_channels(self, channels: &[u32]) -> Self {
        let (records, examples) =
            self.records.into_iter().zip(self.examples).filter(|(r, _)| channels.contains(&r.channel_id)).unzip();
        Self { records, examples, sample_rate: self.sample_rate }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn channels(&self) -> Vec<u32> {
        let mut c: Vec<u32> = self.records.iter().map(|r| r.channel_id).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Values logged for one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub l_rc: f64,
    /// Cross-entropy of the classifier, logged even when `gamma == 0`.
    pub l_ci: Option<f64>,
    pub l_total: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_rc: f64,
    pub l_ci: Option<f64>,
    pub l_total: f64,
    pub val_sisnri: f64,
    pub lr: f64,
}

/// A batch as graph inputs.
struct Batch {
    mixture: Tensor,
    aux: Option<Tensor>,
    targets: Tensor,
    labels: Vec<usize>,
}

fn crop(x: &[f64], start: usize, len: usize) -> &[f64] {
    &x[start..start + len]
}

/// Model, parameters and optimiser state for one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    adam: Adam,
    rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    pub step: usize,
    pub current_lr: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, n_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let (model, store) = Model::new(&cfg.model_config(n_classes)?, cfg.seed)?;
        let adam = Adam::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        noise_rng.set_stream(2);
        let current_lr = cfg.lr_init;
        Ok(Self { cfg, model, store, adam, rng, noise_rng, step: 0, current_lr })
    }

    fn segment_len(&self, data: &Dataset, items: &[TrainingItem]) -> usize {
        let shortest = items
            .iter()
            .flat_map(|it| [data.examples[it.mixture].mixture.len(), data.examples[it.aux].mixture.len()])
            .min()
            .unwrap_or(0);
        match self.cfg.segment_s {
            Some(s) => ((s * data.sample_rate as f64).round() as usize).min(shortest),
            None => shortest,
        }
    }

    fn make_batch(&mut self, data: &Dataset, items: &[TrainingItem]) -> Result<Batch> {
        let len = self.segment_len(data, items);
        let b = items.len();
        let n = self.model.cfg.separator.n_sources;
        let mut mix = Vec::with_capacity(b * len);
        let mut aux = Vec::with_capacity(b * len);
        let mut tgt = Vec::with_capacity(b * n * len);
        for it in items {
            let ex = &data.examples[it.mixture];
            let s = self.rng.gen_range(0..=ex.mixture.len() - len);
            mix.extend_from_slice(crop(&ex.mixture.samples, s, len));
            for t in &ex.targets {
                tgt.extend_from_slice(crop(&t.samples, s, len));
            }
            let a = &data.examples[it.aux].mixture;
            let s = if it.aux == it.mixture { s } else { self.rng.gen_range(0..=a.len() - len) };
            aux.extend_from_slice(crop(&a.samples, s, len));
        }
        let needs_aux = self.cfg.train_source().needs_aux();
        Ok(Batch {
            mixture: Tensor::new(mix, &[b, len])?,
            aux: if needs_aux { Some(Tensor::new(aux, &[b, len])?) } else { None },
            targets: Tensor::new(tgt, &[b, n, len])?,
            labels: items.iter().map(|it| it.channel_label as usize).collect(),
        })
    }

    /// One forward/backward/update on the given items.
    pub fn train_step(&mut self, data: &Dataset, items: &[TrainingItem], epoch: usize) -> Result<StepLog> {
        let batch = self.make_batch(data, items)?;
        let lr = self.current_lr;
        let mut g = Graph::new();
        let (loss, l_rc, l_ci) = {
            let mut f = Fwd { g: &mut g, store: &self.store, train: true };
            let x = f.g.constant(batch.mixture);
            let aux = batch.aux.map(|a| f.g.constant(a));
            let out = self.model.casnet_forward(&mut f, x, self.cfg.train_source(), aux, &mut self.noise_rng)?;
            let tgt = f.g.constant(batch.targets);
            let (l_rc, _) = pit_loss_graph(f.g, out.estimates, tgt)?;
            let l_ci = match out.logits {
                Some(logits) => Some(channel_id_loss(f.g, logits, &batch.labels)?),
                None => None,
            };
            let loss = total_loss_graph(f.g, l_rc, l_ci, self.cfg.gamma)?;
            (loss, l_rc, l_ci)
        };
        let l_total = g.value(loss).item();
        if !l_total.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        g.backward(loss)?;
        self.store.zero_grad();
        g.write_param_grads(&mut self.store);
        let grad_norm = clip_grad_norm(&mut self.store, self.cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        self.adam.step(&mut self.store, lr);
        let updates = g.take_stat_updates();
        self.store.apply_stat_updates(&updates, BN_MOMENTUM);
        let log = StepLog {
            step: self.step,
            epoch,
            l_rc: g.value(l_rc).item(),
            l_ci: l_ci.map(|v| g.value(v).item()),
            l_total,
            grad_norm,
            lr,
        };
        self.step += 1;
        Ok(log)
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub model: Model,
    /// Parameters of the best validation epoch.
    pub store: ParamStore,
    pub history: Vec<EpochMetrics>,
    pub steps: Vec<StepLog>,
    pub best_val_sisnri: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads the training and validation splits named by the config.
pub fn load_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset, usize)> {
    let root = cfg.corpus.as_deref().ok_or_else(|| Error::Config("no corpus directory given".into()))?;
    let train_m = Manifest::load(root, Split::Train)?;
    let n_classes = train_m.meta.profiles.len();
    let mut train = Dataset::load(&train_m)?;
    if let Some(ch) = &cfg.train_channels {
        train = train.filter_channels(ch);
    }
    let valid = if cfg.validate_on == Split::Train { train.clone() } else { Dataset::load(&Manifest::load(root, cfg.validate_on)?)? };
    Ok((train, valid, n_classes))
}

/// Trains from the corpus named in the config, writing checkpoints and logs
/// to `out_dir` when given.
pub fn fit(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, valid, n_classes) = load_data(cfg)?;
    fit_data(cfg, &train, &valid, n_classes, out_dir)
}

/// Baseline run: the same loop without channel encoder, modulation or
/// channel-identification loss.
pub fn train_baseline(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    fit(&TrainConfig { baseline: true, ..cfg.clone() }, out_dir)
}

/// Training on already-loaded data.
pub fn fit_data(
    cfg: &TrainConfig,
    train: &Dataset,
    valid: &Dataset,
    n_classes: usize,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if valid.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let sampler = Sampler::new(cfg.strategy, &train.records)?;
    if let Some(r) = train.records.iter().find(|r| r.channel_id as usize >= n_classes) {
        return Err(Error::Config(format!("{}: channel {} outside the {n_classes}-class table", r.mixture_id, r.channel_id)));
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let p = d.join(CONFIG_FILE);
        fs::write(&p, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&p, e))?;
    }
    let mut tr = Trainer::new(cfg.clone(), n_classes)?;
    let mut sched = PlateauHalving::new(cfg.lr_init, cfg.plateau_patience);
    let per_epoch = cfg.steps_per_epoch.unwrap_or_else(|| train.len().div_ceil(cfg.batch_size)).max(1);
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    let valid_channels = valid.channels();

    let mut history = Vec::new();
    let mut steps = Vec::new();
    let mut best_store = tr.store.clone();
    'epochs: for epoch in 0..cfg.epochs {
        if tr.step >= max_steps {
            break;
        }
        tr.current_lr = sched.lr;
        let first = steps.len();
        for _ in 0..per_epoch {
            if tr.step >= max_steps {
                break;
            }
            let items: Vec<TrainingItem> = (0..cfg.batch_size).map(|_| sampler.sample(&mut tr.rng)).collect();
            let log = tr.train_step(train, &items, epoch)?;
            if cfg.log_every > 0 && log.step % cfg.log_every == 0 {
                eprintln!(
                    "step {:>6} epoch {:>3} l_rc {:>9.4} l_ci {:>8} l_total {:>9.4} |g| {:>8.3} lr {:.3e}",
                    log.step,
                    epoch,
                    log.l_rc,
                    log.l_ci.map_or("-".into(), |v| format!("{v:.4}")),
                    log.l_total,
                    log.grad_norm,
                    log.lr
                );
            }
            steps.push(log);
        }
        let ep = &steps[first..];
        if ep.is_empty() {
            break 'epochs;
        }
        let opts = EvalOptions {
            source: cfg.valid_source(),
            channels: None,
            seed: cfg.seed,
            model_id: "valid".into(),
            gamma: Some(cfg.gamma),
        };
        let rep = evaluate_loaded(&tr.model, &tr.store, &valid.records, &valid.examples, &valid_channels, &opts)?;
        let m = EpochMetrics {
            epoch,
            l_rc: mean(ep.iter().map(|s| s.l_rc)),
            l_ci: ep[0].l_ci.map(|_| mean(ep.iter().filter_map(|s| s.l_ci))),
            l_total: mean(ep.iter().map(|s| s.l_total)),
            val_sisnri: rep.mean_si_snri,
            lr: sched.lr,
        };
        if cfg.log_every > 0 {
            eprintln!("epoch {epoch:>3} val_sisnri {:.3} dB lr {:.3e}", m.val_sisnri, m.lr);
        }
        history.push(m);
        if sched.observe(m.val_sisnri) {
            best_store = tr.store.clone();
            if let Some(d) = out_dir {
                tr.model.to_checkpoint(&best_store)?.save(&d.join(BEST_CKPT))?;
            }
        }
        if let Some(d) = out_dir {
            tr.model.to_checkpoint(&tr.store)?.save(&d.join(LAST_CKPT))?;
            write_csv(&d.join(METRICS_FILE), &history)?;
            write_step_log(&d.join(STEPS_FILE), &steps)?;
        }
    }
    Ok(TrainOutcome { model: tr.model, store: best_store, history, steps, best_val_sisnri: sched.best })
}

fn write_step_log(path: &Path, steps: &[StepLog]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,epoch,l_rc,l_ci,l_total,grad_norm,lr").expect("write to vec");
    for s in steps {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.step,
            s.epoch,
            s.l_rc,
            s.l_ci.map_or(String::new(), |v| v.to_string()),
            s.l_total,
            s.grad_norm,
            s.lr
        )
        .expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Fraction of mixtures whose own embedding is classified as their channel.
pub fn channel_accuracy(model: &Model, store: &ParamStore, data: &Dataset) -> Result<f64> {
    let enc = model
        .channel_encoder()
        .ok_or_else(|| Error::invalid("the baseline model has no channel classifier"))?;
    let mut correct = 0usize;
    for (r, ex) in data.records.iter().zip(&data.examples) {
        let mut g = Graph::new();
        let mut f = Fwd { g: &mut g, store, train: false };
        let x = ex.mixture.samples.clone();
        let t = x.len();
        let aux = f.g.constant(Tensor::new(x, &[1, t])?);
        let c = enc.encode_channel(&model.sep, &mut f, aux)?;
        let logits = enc.classify_channel(&mut f, c)?;
        let l = g.data(logits);
        let arg = (0..l.len()).fold(0, |best, i| if l[i] > l[best] { i } else { best });
        correct += usize::from(arg == r.channel_id as usize);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Mean SI-SNRi of a model on a dataset under one embedding source.
pub fn dataset_sisnri(model: &Model, store: &ParamStore, data: &Dataset, source: EmbeddingSource, seed: u64) -> Result<f64> {
    let opts = EvalOptions { source, channels: None, seed, model_id: String::new(), gamma: None };
    Ok(evaluate_loaded(model, store, &data.records, &data.examples, &data.channels(), &opts)?.mean_si_snri)
}
