//! Speaker embeddings: storage, file ingestion, a toy spectral extractor and
//! cosine similarity.
//!
//! Embedding files are line-delimited JSON, one record per speaker, with the
//! fields in this order:
//!
//! ```text
//! {"speaker_id": "spk01", "dim": 192, "vector": [0.01, ...], "source": "external"}
//! ```
//!
//! `source` is optional (`external` when absent). A directory is also
//! accepted: every `*.jsonl` / `*.json` file in it is read as records, and
//! every `*.txt` file as one whitespace-separated vector whose speaker id is
//! the file stem. Files are visited in name order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::stft::{Stft, StftConfig};

/// Dimension of speaker embeddings used throughout.
pub const EMBEDDING_DIM: usize = 192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    External,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub speaker_id: String,
    pub vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    speaker_id: String,
    dim: usize,
    vector: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<Provenance>,
}

/// Speaker id to embedding map with a single shared dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    provenance: Provenance,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, provenance: Provenance) -> Self {
        Self {
            dim,
            provenance,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn insert(&mut self, speaker_id: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let id = speaker_id.into();
        if vector.len() != self.dim {
            return Err(Error::EmbeddingDim {
                id,
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("speaker embedding"));
        }
        if self.entries.contains_key(&id) {
            return Err(Error::DuplicateSpeaker(id));
        }
        self.entries.insert(id, vector);
        Ok(())
    }

    /// Embedding of `speaker_id`; the error lists the available ids.
    pub fn get(&self, speaker_id: &str) -> Result<&[f64]> {
        self.entries
            .get(speaker_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownSpeaker {
                id: speaker_id.into(),
                available: self.ids(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = SpeakerEmbedding> + '_ {
        self.entries.iter().map(|(k, v)| SpeakerEmbedding {
            speaker_id: k.clone(),
            vector: v.clone(),
        })
    }

    /// Serializes the store as line-delimited records.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, v) in &self.entries {
            let rec = Record {
                speaker_id: id.clone(),
                dim: self.dim,
                vector: v.clone(),
                source: Some(self.provenance),
            };
            let _ = writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Loads an embedding file or directory (see the module docs).
    pub fn load(path: &Path) -> Result<Self> {
        let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        if meta.is_dir() {
            let mut files: Vec<_> = std::fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                match f.extension().and_then(|e| e.to_str()) {
                    Some("jsonl" | "json") => records.extend(read_records(&f)?),
                    Some("txt") => records.push(read_vector_file(&f)?),
                    _ => {}
                }
            }
        } else {
            records = read_records(path)?;
        }
        let first = records
            .first()
            .ok_or(Error::Empty("embedding file"))?;
        let dim = first.dim;
        let provenance = first.source.unwrap_or(Provenance::External);
        let mut store = Self::new(dim, provenance);
        for r in records {
            if r.dim != r.vector.len() {
                return Err(Error::EmbeddingDim {
                    id: r.speaker_id,
                    expected: r.dim,
                    actual: r.vector.len(),
                });
            }
            store.insert(r.speaker_id, r.vector)?;
        }
        Ok(store)
    }
}

fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn read_vector_file(path: &Path) -> Result<Record> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vector = text
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>().map_err(|e| Error::Parse {
                path: path.into(),
                line: 1,
                message: format!("`{tok}`: {e}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidInput(format!("{}: no usable file stem", path.display())))?;
    Ok(Record {
        speaker_id: id.into(),
        dim: vector.len(),
        vector,
        source: None,
    })
}

/// Cosine of the angle between `a` and `b`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

const TOY_FFT: usize = 2 * (EMBEDDING_DIM - TOY_MOMENTS);
const TOY_MOMENTS: usize = 8;
/// Relative floor on band power before taking logarithms.
const TOY_FLOOR: f64 = 1e-6;

/// Half-width of the triangular kernel applied to the power spectrum before
/// taking logarithms, wide enough to average over harmonic spacing.
const TOY_SMOOTH_BINS: usize = 16;

fn smooth(p: &[f64], half: usize) -> Vec<f64> {
    let n = p.len() as isize;
    (0..n)
        .map(|i| {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for j in -(half as isize)..=half as isize {
                let k = i + j;
                if (0..n).contains(&k) {
                    let w = (half as isize + 1 - j.abs()) as f64;
                    acc += w * p[k as usize];
                    wsum += w;
                }
            }
            acc / wsum
        })
        .collect()
}

/// Toy speaker embedding from long-term spectral statistics.
///
/// The long-term power spectrum (Hann frames of 368 samples, hop 92) is
/// normalized to unit total power and smoothed across neighbouring bins. The
/// vector holds the 184 mean-removed log band powers (DC dropped) followed by 8 spectral moments: centroid, spread,
/// skewness, kurtosis, flatness, 85% roll-off, low/high power balance and
/// frame-energy modulation depth. The result is L2-normalized. Needs at least
/// one second of non-silent audio.
pub fn toy_embed(w: &Waveform) -> Result<Vec<f64>> {
    if w.len() < w.sample_rate as usize {
        return Err(Error::InvalidInput(format!(
            "toy embedding needs at least 1 s of audio, got {:.3} s",
            w.duration_secs()
        )));
    }
    if w.max_abs() == 0.0 {
        return Err(Error::InvalidInput("toy embedding of silent audio".into()));
    }
    let cfg = StftConfig {
        n_fft: TOY_FFT,
        window_len: TOY_FFT,
        hop: TOY_FFT / 4,
        sample_rate: w.sample_rate,
        ..StftConfig::default()
    };
    let spec = Stft::new(cfg)?.analyze(w)?;
    let (bins, frames) = spec.shape();
    let mut power = vec![0.0; bins - 1];
    let mut frame_energy = vec![0.0; frames];
    for (b, p) in power.iter_mut().enumerate() {
        for (k, fe) in frame_energy.iter_mut().enumerate() {
            let v = spec.get(b + 1, k).norm_sqr();
            *p += v;
            *fe += v;
        }
    }
    let total: f64 = power.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::InvalidInput("toy embedding of silent audio".into()));
    }
    let p: Vec<f64> = power.iter().map(|v| v / total).collect();
    let n = p.len() as f64;

    let logs: Vec<f64> = smooth(&p, TOY_SMOOTH_BINS).iter().map(|v| (v + TOY_FLOOR).ln()).collect();
    let log_mean = logs.iter().sum::<f64>() / n;
    let mut out: Vec<f64> = logs.iter().map(|v| v - log_mean).collect();

    let pos = |i: usize| (i as f64 + 0.5) / n;
    let centroid: f64 = p.iter().enumerate().map(|(i, v)| v * pos(i)).sum();
    let central = |k: i32| -> f64 { p.iter().enumerate().map(|(i, v)| v * (pos(i) - centroid).powi(k)).sum() };
    let spread = central(2).sqrt();
    let skew = if spread > 0.0 { central(3) / spread.powi(3) } else { 0.0 };
    let kurt = if spread > 0.0 { central(4) / spread.powi(4) } else { 0.0 };
    let flatness = (logs.iter().sum::<f64>() / n).exp() / (1.0 / n);
    let mut cum = 0.0;
    let rolloff = p
        .iter()
        .position(|v| {
            cum += v;
            cum >= 0.85
        })
        .map_or(1.0, pos);
    let half = p.len() / 2;
    let low: f64 = p[..half].iter().sum();
    let balance = low - (1.0 - low);
    let fe_mean = frame_energy.iter().sum::<f64>() / frames as f64;
    let fe_std = (frame_energy.iter().map(|v| (v - fe_mean).powi(2)).sum::<f64>() / frames as f64).sqrt();
    let modulation = if fe_mean > 0.0 { fe_std / fe_mean } else { 0.0 };
    out.extend([
        centroid,
        spread,
        skew.tanh(),
        (kurt / 10.0).tanh(),
        flatness,
        rolloff,
        balance,
        modulation.tanh(),
    ]);
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(out.into_iter().map(|v| v / norm).collect())
}

/// [`toy_embed`] over the concatenation of several reference clips.
pub fn toy_embed_concat(refs: &[Waveform]) -> Result<Vec<f64>> {
    toy_embed(&Waveform::concat(refs)?)
}
