//! Held-out evaluation under each embedding source, and comparison tables.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chanenc::EmbeddingSource;
use crate::corpus::{Example, Manifest, MixtureRecord, Split};
use crate::error::{Error, Result};
use crate::film::Model;
use crate::gradcore::lossops::si_snr_db;
use crate::gradcore::{Graph, ParamStore, Tensor};
use crate::nn::Fwd;
use crate::objectives::best_permutation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureScore {
    pub mixture_id: String,
    pub channel_id: u32,
    /// Mean over sources, PIT-optimal assignment.
    pub si_snr: f64,
    pub si_snri: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub emb_source: EmbeddingSource,
    pub gamma: Option<f64>,
    pub channels: Vec<u32>,
    pub seed: u64,
    pub count: usize,
    pub mean_si_snr: f64,
    pub mean_si_snri: f64,
    pub per_mixture: Vec<MixtureScore>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub source: EmbeddingSource,
    /// Channels to score; `None` means the hold-out channel on the test
    /// split when there is one, otherwise every channel present.
    pub channels: Option<Vec<u32>>,
    pub seed: u64,
    pub model_id: String,
    pub gamma: Option<f64>,
}

impl EvalOptions {
    pub fn new(source: EmbeddingSource) -> Self {
        Self { source, channels: None, seed: 0, model_id: "model".into(), gamma: None }
    }
}

pub fn default_channels(manifest: &Manifest) -> Vec<u32> {
    match (manifest.split, manifest.meta.config.holdout_channel) {
        (Split::Test, Some(h)) => vec![h],
        _ => manifest.channels(),
    }
}

/// Scores of one separated mixture.
pub fn score_example(estimates: &[Vec<f64>], ex: &Example) -> Result<(f64, f64)> {
    let n = ex.targets.len();
    let mut table = Vec::with_capacity(n * n);
    for e in estimates {
        for t in &ex.targets {
            table.push(si_snr_db(e, &t.samples)?);
        }
    }
    let (best, _) = best_permutation(&table, n);
    let mut base = 0.0;
    for t in &ex.targets {
        base += si_snr_db(&ex.mixture.samples, &t.samples)?;
    }
    Ok((best, best - base / n as f64))
}

/// Separates one mixture without recording gradients.
pub fn separate(
    model: &Model,
    store: &ParamStore,
    mixture: &[f64],
    source: EmbeddingSource,
    aux: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let mut f = Fwd { g: &mut g, store, train: false };
    let x = f.g.constant(Tensor::new(mixture.to_vec(), &[1, mixture.len()])?);
    let aux = match aux {
        Some(a) => Some(f.g.constant(Tensor::new(a.to_vec(), &[1, a.len()])?)),
        None => None,
    };
    let out = model.casnet_forward(&mut f, x, source, aux, rng)?;
    let t = mixture.len();
    Ok(g.data(out.estimates).chunks(t).map(<[f64]>::to_vec).collect())
}

fn pick_aux(
    source: EmbeddingSource,
    records: &[MixtureRecord],
    i: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<usize>> {
    let r = &records[i];
    let pool: Vec<usize> = match source {
        EmbeddingSource::SameMixture => return Ok(Some(i)),
        EmbeddingSource::OtherMixtureSameChannel => (0..records.len())
            .filter(|&j| records[j].channel_id == r.channel_id && records[j].content_id != r.content_id)
            .collect(),
        EmbeddingSource::OtherChannel => (0..records.len())
            .filter(|&j| records[j].channel_id != r.channel_id && records[j].content_id != r.content_id)
            .collect(),
        _ => return Ok(None),
    };
    pool.choose(rng).copied().map(Some).ok_or_else(|| {
        Error::Config(format!(
            "embedding source {} needs another mixture for {}, but the split has none",
            source.label(),
            r.mixture_id
        ))
    })
}

/// Evaluates on already-loaded audio. `records[i]` describes `examples[i]`;
/// all of them are candidates for auxiliary mixtures, only those on
/// `channels` are scored.
pub fn evaluate_loaded(
    model: &Model,
    store: &ParamStore,
    records: &[MixtureRecord],
    examples: &[Example],
    channels: &[u32],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if !channels.contains(&r.channel_id) {
            continue;
        }
        let aux = pick_aux(opts.source, records, i, &mut rng)?;
        let ex = &examples[i];
        let est = separate(
            model,
            store,
            &ex.mixture.samples,
            opts.source,
            aux.map(|j| examples[j].mixture.samples.as_slice()),
            &mut rng,
        )?;
        let (si_snr, si_snri) = score_example(&est, ex)?;
        per.push(MixtureScore { mixture_id: r.mixture_id.clone(), channel_id: r.channel_id, si_snr, si_snri });
    }
    if per.is_empty() {
        return Err(Error::Config(format!("no mixtures on channels {channels:?} to evaluate")));
    }
    let n = per.len() as f64;
    Ok(EvalReport {
        model_id: opts.model_id.clone(),
        emb_source: opts.source,
        gamma: opts.gamma,
        channels: channels.to_vec(),
        seed: opts.seed,
        count: per.len(),
        mean_si_snr: per.iter().map(|s| s.si_snr).sum::<f64>() / n,
        mean_si_snri: per.iter().map(|s| s.si_snri).sum::<f64>() / n,
        per_mixture: per,
    })
}

pub fn evaluate(model: &Model, store: &ParamStore, manifest: &Manifest, opts: &EvalOptions) -> Result<EvalReport> {
    if model.cfg.separator.n_sources != 2 {
        return Err(Error::Config("the corpus holds two-speaker mixtures; model has a different source count".into()));
    }
    let channels = opts.channels.clone().unwrap_or_else(|| default_channels(manifest));
    let examples = manifest.load_all()?;
    if let Some(ex) = examples.first() {
        if ex.mixture.sample_rate != manifest.sample_rate() {
            return Err(Error::Config("audio sample rate does not match the manifest".into()));
        }
    }
    evaluate_loaded(model, store, &manifest.records, &examples, &channels, opts)
}

/// Channel embedding of one waveform, as exported by `casnet embed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub mixture_id: String,
    pub channel_id: u32,
    pub vector: Vec<f64>,
}

/// Embedding `[D]` of a single waveform, inference mode.
pub fn embed_waveform(model: &Model, store: &ParamStore, samples: &[f64]) -> Result<Vec<f64>> {
    let enc = model
        .channel_encoder()
        .ok_or_else(|| Error::Config("the checkpoint holds a baseline model without a channel encoder".into()))?;
    let mut g = Graph::new();
    let mut f = Fwd { g: &mut g, store, train: false };
    let x = f.g.constant(Tensor::new(samples.to_vec(), &[1, samples.len()])?);
    let c = enc.encode_channel(&model.sep, &mut f, x)?;
    Ok(g.data(c).to_vec())
}

pub fn export_embeddings(model: &Model, store: &ParamStore, manifest: &Manifest) -> Result<Vec<EmbeddingRecord>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let ex = manifest.load_example(r)?;
            Ok(EmbeddingRecord {
                mixture_id: r.mixture_id.clone(),
                channel_id: r.channel_id,
                vector: embed_waveform(model, store, &ex.mixture.samples)?,
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub emb_source: String,
    pub gamma: Option<f64>,
    pub channels: String,
    pub count: usize,
    pub mean_si_snr: f64,
    pub mean_si_snri: f64,
}

impl From<&EvalReport> for SummaryRow {
    fn from(r: &EvalReport) -> Self {
        let ch: Vec<String> = r.channels.iter().map(u32::to_string).collect();
        Self {
            model: r.model_id.clone(),
            emb_source: r.emb_source.label().to_string(),
            gamma: r.gamma,
            channels: ch.join(" "),
            count: r.count,
            mean_si_snr: r.mean_si_snr,
            mean_si_snri: r.mean_si_snri,
        }
    }
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn informative(label: &str) -> bool {
    EmbeddingSource::from_label(label).is_ok_and(|s| s.needs_aux())
}

/// `yes`/`no` when the row is an encoded-embedding row and the same model
/// and gamma also have a Gaussian-noise row; empty otherwise.
fn beats_noise(rows: &[SummaryRow], r: &SummaryRow) -> String {
    if !informative(&r.emb_source) {
        return String::new();
    }
    let noise = rows.iter().find(|o| {
        o.model == r.model && o.gamma == r.gamma && o.emb_source == EmbeddingSource::GaussianNoise.label()
    });
    match noise {
        Some(n) if r.mean_si_snri >= n.mean_si_snri => "yes".into(),
        Some(_) => "no".into(),
        None => String::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CompareRow {
    model: String,
    emb_source: String,
    gamma: Option<f64>,
    channels: String,
    count: usize,
    mean_si_snr: f64,
    mean_si_snri: f64,
    beats_gaussian: String,
}

/// Comparison table as aligned text and as CSV.
pub fn compare(rows: &[SummaryRow]) -> Result<(String, String)> {
    if rows.is_empty() {
        return Err(Error::invalid("compare needs at least one report"));
    }
    let table: Vec<CompareRow> = rows
        .iter()
        .map(|r| CompareRow {
            model: r.model.clone(),
            emb_source: r.emb_source.clone(),
            gamma: r.gamma,
            channels: r.channels.clone(),
            count: r.count,
            mean_si_snr: r.mean_si_snr,
            mean_si_snri: r.mean_si_snri,
            beats_gaussian: beats_noise(rows, r),
        })
        .collect();

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &table {
        w.serialize(r)?;
    }
    let csv_text = String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)
        .expect("csv output is utf-8");

    let header = ["model", "emb_source", "gamma", "channels", "n", "SI-SNR", "SI-SNRi", "beats_gaussian"];
    let cells: Vec<[String; 8]> = table
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                r.emb_source.clone(),
                r.gamma.map_or("-".into(), |g| format!("{g}")),
                r.channels.clone(),
                r.count.to_string(),
                format!("{:.2}", r.mean_si_snr),
                format!("{:.2}", r.mean_si_snri),
                r.beats_gaussian.clone(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cols: Vec<&str>| -> String {
        cols.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
    };
    let mut text = line(header.to_vec());
    text.push('\n');
    text.push_str(&line(widths.iter().map(|&w| &"--------------------------------"[..w.min(32)]).collect()));
    for row in &cells {
        text.push('\n');
        text.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    text.push('\n');
    Ok((text, csv_text))
}

/// Distinct sources present in a set of rows, for reporting.
pub fn sources_in(rows: &[SummaryRow]) -> BTreeSet<String> {
    rows.iter().map(|r| r.emb_source.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Waveform;

    fn row(model: &str, src: &str, sisnri: f64) -> SummaryRow {
        SummaryRow {
            model: model.into(),
            emb_source: src.into(),
            gamma: Some(0.01),
            channels: "3".into(),
            count: 4,
            mean_si_snr: sisnri - 1.0,
            mean_si_snri: sisnri,
        }
    }

    #[test]
    fn oracle_estimates_score_maximally() {
        let t0: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        let t1: Vec<f64> = (0..64).map(|i| (i as f64 * 0.71).cos() * 0.5).collect();
        let mix: Vec<f64> = t0.iter().zip(&t1).map(|(a, b)| a + b).collect();
        let ex = Example {
            mixture: Waveform::new(mix.clone(), 8000),
            targets: [Waveform::new(t0.clone(), 8000), Waveform::new(t1.clone(), 8000)],
        };
        let (s, si) = score_example(&[t1.clone(), t0.clone()], &ex).unwrap();
        assert_eq!(s, 60.0);
        let base = (si_snr_db(&mix, &t0).unwrap() + si_snr_db(&mix, &t1).unwrap()) / 2.0;
        assert!((si - (60.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn compare_rows_and_ordering_flag() {
        let rows = vec![row("casnet", "same", 5.0), row("casnet", "gaussian", 4.0), row("casnet", "other-same-channel", 3.0)];
        let (text, csv_text) = compare(&rows).unwrap();
        assert_eq!(text.lines().count(), 2 + 3);
        let mut rd = csv::Reader::from_reader(csv_text.as_bytes());
        let parsed: Vec<CompareRow> = rd.deserialize().collect::<std::result::Result<_, _>>().unwrap();
        assert_eq!(parsed.len(), 3);
        assert_eq!(parsed[0].beats_gaussian, "yes");
        assert_eq!(parsed[1].beats_gaussian, "");
        assert_eq!(parsed[2].beats_gaussian, "no");
        assert!(compare(&[]).is_err());
    }

    #[test]
    fn summary_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![row("a", "same", 1.5), row("b", "no-film", -0.25)];
        write_summary_csv(&rows, &p).unwrap();
        assert_eq!(read_summary_csv(&p).unwrap(), rows);
    }
}
