use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tse_core::audio::{read_wav, write_wav, Waveform};
use tse_core::config::RunConfig;
use tse_core::data::{load_manifest, load_record, ManifestEntry, MixtureRecord, SyntheticCorpus};
use tse_core::diagnostics::{diagnostics_table, sde_diagnostics, DiagConfig};
use tse_core::embeddings::{cosine_similarity, toy_embed_concat, EmbeddingStore, Provenance, EMBEDDING_DIM};
use tse_core::metrics::{aggregate, si_sdr, si_sdri, FailedRow, MetricRow};
use tse_core::nn::ScoreNetworkCheckpoint;
use tse_core::sampler::extract_waveform;
use tse_core::stft::Stft;
use tse_core::training::{check_dataset, single_target_speaker, Dataset, StepLog, TrainMode, TrainObserver, Trainer};
use tse_core::Error;

pub const STATE_FILE: &str = "train_state.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const BEST_FILE: &str = "best.ckpt";

/// Some rows could not be processed; the report was still written.
#[derive(Debug)]
pub struct DataFailure(pub String);

impl std::fmt::Display for DataFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataFailure {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn load_records(path: &Path, sample_rate: u32) -> Result<Vec<MixtureRecord>> {
    let entries = load_manifest(path)?;
    Ok(entries
        .iter()
        .map(|e| load_record(e, sample_rate))
        .collect::<tse_core::Result<_>>()?)
}

fn embeddings_path(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| cfg.embeddings.path.clone())
        .ok_or_else(|| config_error("no embeddings given: set embeddings.path or pass --embeddings"))
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = SyntheticCorpus::generate(&cfg.data.synthetic)?;
    corpus.write(out)?;
    println!(
        "wrote {} train / {} valid / {} test mixtures and {} embeddings to {}",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        corpus.embeddings.len(),
        out.display()
    );
    Ok(())
}

pub struct FinetuneArgs {
    pub base: Option<PathBuf>,
    pub speaker: Option<String>,
}

struct CliObserver {
    dir: PathBuf,
    log: File,
    start: Instant,
    best: Option<f64>,
}

impl CliObserver {
    fn write_line(file: &mut File, v: &Value) -> tse_core::Result<()> {
        writeln!(file, "{v}").map_err(|e| Error::Io {
            path: PathBuf::from(LOG_FILE),
            source: e,
        })
    }
}

impl TrainObserver for CliObserver {
    fn on_step(&mut self, log: &StepLog) -> tse_core::Result<()> {
        let mut v = serde_json::to_value(log).expect("step log serializes");
        v["wall_time"] = json!(self.start.elapsed().as_secs_f64());
        Self::write_line(&mut self.log, &v)
    }

    fn on_checkpoint(&mut self, trainer: &Trainer, validation: Option<f64>) -> tse_core::Result<()> {
        let step = trainer.state.step;
        let ckpt = trainer.checkpoint();
        ckpt.save(&self.dir.join(format!("checkpoint_{step:07}.ckpt")))?;
        ckpt.save(&self.dir.join(MODEL_FILE))?;
        trainer.save_state(&self.dir.join(STATE_FILE))?;
        if let Some(v) = validation {
            let path = self.dir.join(VALIDATION_FILE);
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::Io { path: path.clone(), source: e })?;
            Self::write_line(&mut f, &json!({"step": step, "si_sdr_median": v}))?;
            if self.best.is_none_or(|b| v > b) {
                self.best = Some(v);
                ckpt.save(&self.dir.join(BEST_FILE))?;
            }
        }
        Ok(())
    }
}

/// Keeps log lines up to `step` so a resumed run continues the same file.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let kept: String = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<Value>(l)
                .ok()
                .and_then(|v| v["step"].as_u64())
                .is_some_and(|s| s <= step)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept).with_context(|| path.display().to_string())
}

fn best_validation(path: &Path, step: u64) -> Option<f64> {
    let text = fs::read_to_string(path).ok()?;
    text.lines()
        .filter_map(|l| serde_json::from_str::<Value>(l).ok())
        .filter(|v| v["step"].as_u64().is_some_and(|s| s <= step))
        .filter_map(|v| v["si_sdr_median"].as_f64())
        .reduce(f64::max)
}

pub fn train(cfg: &RunConfig, out: Option<PathBuf>, resume: bool, finetune: Option<FinetuneArgs>) -> Result<()> {
    let dir = out.unwrap_or_else(|| cfg.paths.out_dir.clone());
    let sr = cfg.stft.sample_rate;
    let store = EmbeddingStore::load(&embeddings_path(cfg, None)?)?;
    let manifest = cfg
        .data
        .train_manifest
        .as_ref()
        .ok_or_else(|| config_error("data.train_manifest is not set"))?;
    let mut train = load_records(manifest, sr)?;
    let valid = match &cfg.data.valid_manifest {
        Some(p) => load_records(p, sr)?,
        None => Vec::new(),
    };
    let mut tcfg = cfg.training.clone();
    if let Some(ft) = &finetune {
        tcfg.mode = TrainMode::Finetune;
        if let Some(spk) = &ft.speaker {
            train.retain(|r| r.target_speaker() == spk);
            if train.is_empty() {
                return Err(Error::UnknownSpeaker {
                    id: spk.clone(),
                    available: store.ids(),
                }
                .into());
            }
        }
    }
    let data = Dataset { train, valid };
    check_dataset(&data, &store)?;
    if finetune.is_some() {
        single_target_speaker(&data.train).map_err(|e| DataFailure(e.to_string()))?;
    }
    fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
    let state_path = dir.join(STATE_FILE);
    let log_path = dir.join(LOG_FILE);

    let mut trainer = if resume {
        let t = Trainer::load_state(&state_path, Some(tcfg))?;
        truncate_log(&log_path, t.state.step)?;
        truncate_log(&dir.join(VALIDATION_FILE), t.state.step)?;
        t
    } else {
        for f in [&log_path, &dir.join(VALIDATION_FILE)] {
            if f.exists() {
                fs::remove_file(f).with_context(|| f.display().to_string())?;
            }
        }
        match &finetune {
            Some(ft) => {
                let speaker = single_target_speaker(&data.train)?;
                let base_path = ft
                    .base
                    .clone()
                    .or_else(|| cfg.paths.base_checkpoint.clone())
                    .ok_or_else(|| config_error("no base checkpoint: pass --base or set paths.base_checkpoint"))?;
                let base = ScoreNetworkCheckpoint::load(&base_path)?;
                let mut t = Trainer::from_checkpoint(tcfg, &base)?;
                t.metadata.target_speaker = Some(speaker);
                t
            }
            None => Trainer::new(tcfg, cfg.network.clone(), cfg.sde, cfg.stft)?,
        }
    };
    let log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| log_path.display().to_string())?;
    let mut observer = CliObserver {
        best: best_validation(&dir.join(VALIDATION_FILE), trainer.state.step),
        dir: dir.clone(),
        log,
        start: Instant::now(),
    };
    trainer.run(&data, &store, &cfg.sampler, &mut observer)?;
    println!(
        "trained to step {}; model written to {}",
        trainer.state.step,
        dir.join(MODEL_FILE).display()
    );
    Ok(())
}

pub struct ExtractRequest {
    pub checkpoint: PathBuf,
    pub mixture: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub speaker: Option<String>,
    pub embedding: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub out: PathBuf,
}

/// Runs `f(i)` for `i` in `0..n` on `jobs` threads; results keep index order.
fn parallel_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every index is processed"))
        .collect()
}

pub fn extract(cfg: &RunConfig, req: ExtractRequest, jobs: usize) -> Result<()> {
    let ckpt = ScoreNetworkCheckpoint::load(&req.checkpoint)?;
    let net = ckpt.build()?;
    let stft = Stft::new(ckpt.stft)?;
    let sr = ckpt.stft.sample_rate;
    let store = match (&req.embedding, &req.speaker, &req.manifest) {
        (Some(p), _, _) => {
            let s = EmbeddingStore::load(p)?;
            if s.len() != 1 {
                bail!(Error::InvalidInput(format!(
                    "{} holds {} speakers; --embedding expects exactly one",
                    p.display(),
                    s.len()
                )));
            }
            s
        }
        _ => EmbeddingStore::load(&embeddings_path(cfg, req.embeddings.clone())?)?,
    };
    let fixed_speaker = match (&req.embedding, &req.speaker) {
        (Some(_), _) => Some(store.ids()[0].clone()),
        (None, Some(s)) => Some(s.clone()),
        (None, None) => None,
    };
    let run_one = |mixture: &Waveform, speaker: &str, stream: u64| -> tse_core::Result<Waveform> {
        let e = store.get(speaker)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampler.seed);
        rng.set_stream(stream);
        extract_waveform(&net, &ckpt.params, &stft, mixture, e, &cfg.sampler, &mut rng)
    };

    if let Some(path) = &req.mixture {
        let speaker = fixed_speaker.ok_or_else(|| config_error("pass --speaker or --embedding"))?;
        let mixture = read_wav(path, Some(sr))?;
        let est = run_one(&mixture, &speaker, 0)?;
        write_wav(&req.out, &est)?;
        println!("wrote {} ({} samples)", req.out.display(), est.len());
        return Ok(());
    }
    let manifest = req.manifest.as_ref().expect("clap requires --mixture or --manifest");
    let entries = load_manifest(manifest)?;
    fs::create_dir_all(&req.out).with_context(|| req.out.display().to_string())?;
    let results = parallel_map(entries.len(), jobs, |i| -> tse_core::Result<()> {
        let e = &entries[i];
        let mixture = read_wav(&e.mixture_path, Some(sr))?;
        let speaker = fixed_speaker.as_deref().unwrap_or(&e.speaker1_id);
        let est = run_one(&mixture, speaker, i as u64)?;
        write_wav(req.out.join(format!("{}.wav", e.id())), &est)
    });
    for r in results {
        r?;
    }
    println!("wrote {} estimates to {}", entries.len(), req.out.display());
    Ok(())
}

fn evaluate_row(e: &ManifestEntry, estimates: &Path, sr: u32, store: Option<&EmbeddingStore>) -> tse_core::Result<MetricRow> {
    let rec = load_record(e, sr)?;
    let est = read_wav(estimates.join(format!("{}.wav", e.id())), Some(sr))?;
    let n = rec.mixture.len().min(est.len());
    let target = &rec.target().samples[..n];
    let similarity = match store {
        Some(s) => Some(cosine_similarity(s.get(&rec.speaker_ids[0])?, s.get(&rec.speaker_ids[1])?)?),
        None => None,
    };
    Ok(MetricRow {
        id: rec.id.clone(),
        si_sdr: si_sdr(target, &est.samples[..n])?,
        si_sdri: si_sdri(target, &est.samples[..n], &rec.mixture.samples[..n])?,
        similarity,
        extra: Default::default(),
    })
}

pub fn evaluate(
    cfg: &RunConfig,
    manifest: &Path,
    estimates: &Path,
    embeddings: Option<PathBuf>,
    threshold: Option<f64>,
    out: Option<PathBuf>,
    jobs: usize,
) -> Result<()> {
    let entries = load_manifest(manifest)?;
    if entries.is_empty() {
        bail!(Error::Empty("manifest"));
    }
    let store = match embeddings.or_else(|| cfg.embeddings.path.clone()) {
        Some(p) => Some(EmbeddingStore::load(&p)?),
        None => None,
    };
    let sr = cfg.stft.sample_rate;
    let results = parallel_map(entries.len(), jobs, |i| evaluate_row(&entries[i], estimates, sr, store.as_ref()));
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok(row) => rows.push(row),
            Err(err) => failures.push(FailedRow {
                id: e.id(),
                error: err.to_string(),
            }),
        }
    }
    let threshold = threshold.or(store.as_ref().map(|_| 0.15));
    let text = if rows.is_empty() {
        failures
            .iter()
            .map(|f| {
                let mut v = serde_json::to_value(f).expect("failure serializes");
                v["type"] = json!("failed");
                format!("{v}\n")
            })
            .collect::<String>()
    } else {
        let mut report = aggregate(rows, threshold)?;
        report.failures = failures.clone();
        print!("{}", report.summary_table());
        report.to_jsonl()
    };
    let out = out.unwrap_or_else(|| estimates.join("report.jsonl"));
    fs::write(&out, text).with_context(|| out.display().to_string())?;
    println!("report written to {}", out.display());
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("failed: {}: {}", f.id, f.error);
        }
        bail!(DataFailure(format!("{} of {} rows failed", failures.len(), entries.len())));
    }
    Ok(())
}

pub fn sde_diag(cfg: &RunConfig, points: usize, paths: usize, steps: usize, out: Option<PathBuf>) -> Result<()> {
    let dcfg = DiagConfig {
        grid_points: points,
        paths,
        steps,
        ..DiagConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rows = sde_diagnostics(&cfg.sde, &dcfg, &mut rng)?;
    match out {
        Some(path) => {
            let text: String = rows
                .iter()
                .map(|r| format!("{}\n", serde_json::to_string(r).expect("row serializes")))
                .collect();
            fs::write(&path, text).with_context(|| path.display().to_string())?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        None => print!("{}", diagnostics_table(&rows)),
    }
    Ok(())
}

pub fn embed(cfg: &RunConfig, speaker: &str, out: &Path, wavs: &[PathBuf]) -> Result<()> {
    let refs = wavs
        .iter()
        .map(|p| read_wav(p, Some(cfg.stft.sample_rate)))
        .collect::<tse_core::Result<Vec<_>>>()?;
    let vector = toy_embed_concat(&refs)?;
    let mut store = if out.exists() {
        EmbeddingStore::load(out)?
    } else {
        EmbeddingStore::new(EMBEDDING_DIM, Provenance::Toy)
    };
    store.insert(speaker, vector)?;
    store.save(out)?;
    println!("embedding for `{speaker}` written to {}", out.display());
    Ok(())
}
