//! Synthetic speakers, two-source mixtures, training windows and manifests.
//!
//! A synthetic speaker is a band-limited harmonic source: partials of a
//! fundamental `f0` that fall inside `[band_low, band_high]`, with a
//! speaker-specific amplitude profile fixed by the speaker seed and slow
//! amplitude and pitch modulation that varies per utterance.
//!
//! Manifests are line-delimited JSON records with the fields
//! `mixture_path, source1_path, source2_path, speaker1_id, speaker2_id`
//! (in that order). Relative paths are resolved against the manifest's
//! directory. The first source is the target.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{normalization_gain, read_wav, write_wav, Waveform};
use crate::embeddings::{toy_embed, EmbeddingStore, Provenance, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::stft::{ComplexSpectrogram, Stft};

/// Distance kept between the outermost partials and the band edges, in Hz.
pub const BAND_GUARD_HZ: f64 = 120.0;
/// RMS level of every synthesized utterance.
pub const UTTERANCE_RMS: f64 = 0.1;
const VIBRATO_DEPTH: f64 = 0.01;
const F0_JITTER: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeakerSpec {
    pub speaker_id: String,
    pub band_low: f64,
    pub band_high: f64,
    /// Nominal fundamental frequency in Hz.
    pub f0: f64,
    /// Amplitude ratio between successive partials.
    pub harmonic_decay: f64,
    /// Amplitude-modulation rate range in Hz.
    pub am_rate_min: f64,
    pub am_rate_max: f64,
    /// Fixes the speaker's partial amplitude profile.
    pub seed: u64,
}

impl SyntheticSpeakerSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.band_low >= 0.0 && self.band_low < self.band_high && self.band_high <= nyquist) {
            return Err(Error::InvalidInput(format!(
                "speaker {}: band [{}, {}] Hz must satisfy 0 <= low < high <= {nyquist}",
                self.speaker_id, self.band_low, self.band_high
            )));
        }
        if !(self.f0 > 0.0 && self.harmonic_decay > 0.0 && self.am_rate_min >= 0.0 && self.am_rate_min <= self.am_rate_max) {
            return Err(Error::InvalidInput(format!("speaker {}: invalid harmonic parameters", self.speaker_id)));
        }
        Ok(())
    }

    /// Harmonic numbers whose frequency stays inside the guarded band under
    /// the largest pitch deviation.
    fn partials(&self) -> Vec<usize> {
        let dev = (1.0 + F0_JITTER) * (1.0 + VIBRATO_DEPTH);
        let lo = self.band_low + BAND_GUARD_HZ;
        let hi = self.band_high - BAND_GUARD_HZ;
        (1..)
            .take_while(|k| *k as f64 * self.f0 / dev <= hi)
            .filter(|k| {
                let f = *k as f64 * self.f0;
                f / dev >= lo && f * dev <= hi
            })
            .collect()
    }
}

/// Synthesizes one utterance of `duration` seconds. The speaker's partial
/// profile depends only on `spec`; jitter, modulation and phases come from
/// `rng`.
pub fn synth_speaker<R: Rng + ?Sized>(
    spec: &SyntheticSpeakerSpec,
    duration: f64,
    sample_rate: u32,
    rng: &mut R,
) -> Result<Waveform> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::InvalidInput(format!("duration must be positive, got {duration}")));
    }
    spec.validate(sample_rate)?;
    let partials = spec.partials();
    if partials.is_empty() {
        return Err(Error::InvalidInput(format!(
            "speaker {}: no partial of f0 = {} Hz fits the band",
            spec.speaker_id, spec.f0
        )));
    }
    let mut profile_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let amps: Vec<f64> = partials
        .iter()
        .enumerate()
        .map(|(i, _)| spec.harmonic_decay.powi(i as i32) * profile_rng.random_range(0.3..1.0))
        .collect();

    let f0 = spec.f0 * (1.0 + rng.random_range(-F0_JITTER..F0_JITTER));
    let vib_rate = rng.random_range(4.0..6.0);
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let am_rate = rng.random_range(spec.am_rate_min..=spec.am_rate_max);
    let am_phase = rng.random_range(0.0..2.0 * PI);
    let phases: Vec<f64> = partials.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let n = (duration * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let mut samples = vec![0.0; n];
    // Instantaneous phase of the fundamental, integrated sample by sample.
    let mut theta = 0.0;
    for (i, s) in samples.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let env = 0.55 + 0.45 * (2.0 * PI * am_rate * t + am_phase).sin();
        let mut v = 0.0;
        for ((k, a), p) in partials.iter().zip(&amps).zip(&phases) {
            v += a * (*k as f64 * theta + p).sin();
        }
        *s = env * v;
        let f_inst = f0 * (1.0 + VIBRATO_DEPTH * (2.0 * PI * vib_rate * t + vib_phase).sin());
        theta += 2.0 * PI * f_inst / sr;
    }
    let rms = (samples.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        samples.iter_mut().for_each(|v| *v *= UTTERANCE_RMS / rms);
    }
    Waveform::new(samples, sample_rate)
}

/// Parameter ranges from which speakers of one family are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerFamily {
    pub name: String,
    pub band_low: f64,
    pub band_high: f64,
    pub f0_min: f64,
    pub f0_max: f64,
    pub decay_min: f64,
    pub decay_max: f64,
    pub am_rate_min: f64,
    pub am_rate_max: f64,
}

/// Two families with disjoint bands. `overlap` in `[0, 1]` moves the upper
/// family's band towards the lower one; at 1 both share the same band.
pub fn band_separated_families(overlap: f64) -> [SpeakerFamily; 2] {
    let o = overlap.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| a + o * (b - a);
    [
        SpeakerFamily {
            name: "low".into(),
            band_low: 100.0,
            band_high: 1500.0,
            f0_min: 110.0,
            f0_max: 210.0,
            decay_min: 0.7,
            decay_max: 0.9,
            am_rate_min: 2.0,
            am_rate_max: 5.0,
        },
        SpeakerFamily {
            name: "high".into(),
            band_low: lerp(2300.0, 100.0),
            band_high: lerp(3900.0, 1500.0),
            f0_min: 180.0,
            f0_max: 320.0,
            decay_min: 0.75,
            decay_max: 0.95,
            am_rate_min: 2.0,
            am_rate_max: 5.0,
        },
    ]
}

/// Draws `count` speakers from `family` with ids `{prefix}{family}{index}`.
pub fn sample_speakers<R: Rng + ?Sized>(family: &SpeakerFamily, prefix: &str, count: usize, rng: &mut R) -> Vec<SyntheticSpeakerSpec> {
    (0..count)
        .map(|i| SyntheticSpeakerSpec {
            speaker_id: format!("{prefix}{}{i:02}", family.name),
            band_low: family.band_low,
            band_high: family.band_high,
            f0: rng.random_range(family.f0_min..=family.f0_max),
            harmonic_decay: rng.random_range(family.decay_min..=family.decay_max),
            am_rate_min: family.am_rate_min,
            am_rate_max: family.am_rate_max,
            seed: rng.random(),
        })
        .collect()
}

/// Two-source mixture; source 0 is the target.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureRecord {
    pub id: String,
    pub mixture: Waveform,
    pub sources: [Waveform; 2],
    pub speaker_ids: [String; 2],
}

impl MixtureRecord {
    pub fn target(&self) -> &Waveform {
        &self.sources[0]
    }

    pub fn target_speaker(&self) -> &str {
        &self.speaker_ids[0]
    }

    /// The same mixture with the interferer as target; the id gains an `r`.
    pub fn swapped(&self) -> Self {
        let [a, b] = self.sources.clone();
        let [sa, sb] = self.speaker_ids.clone();
        Self {
            id: format!("{}r", self.id),
            mixture: self.mixture.clone(),
            sources: [b, a],
            speaker_ids: [sb, sa],
        }
    }
}

/// Min-cut mixture: both sources truncated to the shorter length and summed.
pub fn make_mixture(a: &Waveform, b: &Waveform) -> Result<MixtureRecord> {
    if a.sample_rate != b.sample_rate {
        return Err(Error::SampleRate {
            expected: a.sample_rate,
            actual: b.sample_rate,
        });
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("mixture source"));
    }
    let len = a.len().min(b.len());
    let (a, b) = (a.truncated(len), b.truncated(len));
    let mix = a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect();
    Ok(MixtureRecord {
        id: String::new(),
        mixture: Waveform::new(mix, a.sample_rate)?,
        sources: [a, b],
        speaker_ids: [String::new(), String::new()],
    })
}

/// Compressed target/mixture spectrogram pair for one training window.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub x0: ComplexSpectrogram,
    pub y: ComplexSpectrogram,
    pub speaker_id: String,
    pub record_id: String,
}

/// Crops (or right-pads) target and mixture to one model window at the same
/// offset, scales both by the mixture's normalization gain and returns their
/// compressed spectrograms.
pub fn window_batch<R: Rng + ?Sized>(record: &MixtureRecord, stft: &Stft, rng: &mut R) -> Result<TrainingExample> {
    let win = stft.config().window_samples();
    let len = record.mixture.len();
    let offset = if len > win { rng.random_range(0..=len - win) } else { 0 };
    let mix = record.mixture.segment(offset, win);
    let target = record.target().segment(offset, win);
    let gain = normalization_gain(&mix);
    Ok(TrainingExample {
        x0: stft.analyze_compressed(&target.scaled(gain))?,
        y: stft.analyze_compressed(&mix.scaled(gain))?,
        speaker_id: record.target_speaker().to_string(),
        record_id: record.id.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub mixture_path: PathBuf,
    pub source1_path: PathBuf,
    pub source2_path: PathBuf,
    pub speaker1_id: String,
    pub speaker2_id: String,
}

impl ManifestEntry {
    /// Row id: the mixture file stem.
    pub fn id(&self) -> String {
        self.mixture_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Reads a manifest; relative paths become relative to its directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut e: ManifestEntry = serde_json::from_str(line).map_err(|err| Error::Parse {
            path: path.into(),
            line: i + 1,
            message: err.to_string(),
        })?;
        for p in [&mut e.mixture_path, &mut e.source1_path, &mut e.source2_path] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        out.push(e);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads the audio of one manifest row as a min-cut mixture record. The
/// stored mixture file is used as is; sources are truncated to its length.
pub fn load_record(entry: &ManifestEntry, sample_rate: u32) -> Result<MixtureRecord> {
    let mixture = read_wav(&entry.mixture_path, Some(sample_rate))?;
    let s1 = read_wav(&entry.source1_path, Some(sample_rate))?;
    let s2 = read_wav(&entry.source2_path, Some(sample_rate))?;
    let len = mixture.len().min(s1.len()).min(s2.len());
    Ok(MixtureRecord {
        id: entry.id(),
        mixture: mixture.truncated(len),
        sources: [s1.truncated(len), s2.truncated(len)],
        speaker_ids: [entry.speaker1_id.clone(), entry.speaker2_id.clone()],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub sample_rate: u32,
    /// Band overlap between the two families, `0` for disjoint bands.
    pub family_overlap: f64,
    pub train_speakers_per_family: usize,
    pub valid_speakers_per_family: usize,
    pub test_speakers_per_family: usize,
    /// Draw validation and test speakers separately from training speakers.
    pub disjoint_test_speakers: bool,
    pub train_mixtures: usize,
    pub valid_mixtures: usize,
    pub test_mixtures: usize,
    pub utterance_secs: f64,
    /// Length of the enrollment audio behind each speaker's toy embedding.
    pub enrollment_secs: f64,
    /// Interferers come from the other family only.
    pub cross_family: bool,
    /// Uniform per-source gain jitter in dB (0 disables it).
    pub gain_jitter_db: f64,
    /// Also emit every training mixture with the two sources' roles swapped
    /// (id suffix `r`), so each mixture is seen with either speaker as target.
    pub train_both_orders: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sample_rate: 8000,
            family_overlap: 0.0,
            train_speakers_per_family: 4,
            valid_speakers_per_family: 2,
            test_speakers_per_family: 2,
            disjoint_test_speakers: true,
            train_mixtures: 200,
            valid_mixtures: 20,
            test_mixtures: 50,
            utterance_secs: 2.048,
            enrollment_secs: 2.0,
            cross_family: true,
            gain_jitter_db: 0.0,
            train_both_orders: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Generated speakers, mixtures and toy embeddings.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub config: CorpusConfig,
    pub families: [SpeakerFamily; 2],
    /// Speakers per split, each list holding both families.
    pub speakers: [Vec<SyntheticSpeakerSpec>; 3],
    pub train: Vec<MixtureRecord>,
    pub valid: Vec<MixtureRecord>,
    pub test: Vec<MixtureRecord>,
    pub embeddings: EmbeddingStore,
}

/// Enrollment audio of `secs` seconds for `spec`, independent of any
/// mixture utterance.
pub fn enrollment_audio(spec: &SyntheticSpeakerSpec, secs: f64, sample_rate: u32) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x454e_524f_4c4c);
    synth_speaker(spec, secs, sample_rate, &mut rng)
}

impl SyntheticCorpus {
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let families = band_separated_families(config.family_overlap);
        let draw = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> Vec<SyntheticSpeakerSpec> {
            families.iter().flat_map(|f| sample_speakers(f, prefix, n, rng)).collect()
        };
        let train_spk = draw("tr-", config.train_speakers_per_family, &mut rng);
        let (valid_spk, test_spk) = if config.disjoint_test_speakers {
            (
                draw("cv-", config.valid_speakers_per_family, &mut rng),
                draw("tt-", config.test_speakers_per_family, &mut rng),
            )
        } else {
            (train_spk.clone(), train_spk.clone())
        };

        let mut embeddings = EmbeddingStore::new(EMBEDDING_DIM, Provenance::Toy);
        for spec in train_spk.iter().chain(&valid_spk).chain(&test_spk) {
            if embeddings.get(&spec.speaker_id).is_ok() {
                continue;
            }
            let audio = enrollment_audio(spec, config.enrollment_secs, config.sample_rate)?;
            embeddings.insert(spec.speaker_id.clone(), toy_embed(&audio)?)?;
        }

        let mut make = |split: Split, speakers: &[SyntheticSpeakerSpec], n: usize| -> Result<Vec<MixtureRecord>> {
            (0..n)
                .map(|i| mixture_from_speakers(config, split, i, speakers, &mut rng))
                .collect()
        };
        let mut train = make(Split::Train, &train_spk, config.train_mixtures)?;
        if config.train_both_orders {
            train = train
                .into_iter()
                .flat_map(|r| {
                    let s = r.swapped();
                    [r, s]
                })
                .collect();
        }
        let valid = make(Split::Valid, &valid_spk, config.valid_mixtures)?;
        let test = make(Split::Test, &test_spk, config.test_mixtures)?;
        Ok(Self {
            config: config.clone(),
            families,
            speakers: [train_spk, valid_spk, test_spk],
            train,
            valid,
            test,
            embeddings,
        })
    }

    pub fn split(&self, split: Split) -> &[MixtureRecord] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Writes WAV files, one manifest per split, `embeddings.jsonl` and
    /// `speakers.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for split in [Split::Train, Split::Valid, Split::Test] {
            let wav_dir = dir.join("wav").join(split.name());
            std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
            let mut entries = Vec::new();
            for rec in self.split(split) {
                let rel = |suffix: &str| PathBuf::from("wav").join(split.name()).join(format!("{}{suffix}.wav", rec.id));
                let paths = [rel(""), rel("_s1"), rel("_s2")];
                write_wav(dir.join(&paths[0]), &rec.mixture)?;
                write_wav(dir.join(&paths[1]), &rec.sources[0])?;
                write_wav(dir.join(&paths[2]), &rec.sources[1])?;
                let [m, s1, s2] = paths;
                entries.push(ManifestEntry {
                    mixture_path: m,
                    source1_path: s1,
                    source2_path: s2,
                    speaker1_id: rec.speaker_ids[0].clone(),
                    speaker2_id: rec.speaker_ids[1].clone(),
                });
            }
            write_manifest(&dir.join(format!("{}.jsonl", split.name())), &entries)?;
        }
        self.embeddings.save(&dir.join("embeddings.jsonl"))?;
        let speakers = serde_json::to_string_pretty(&self.speakers).expect("speaker specs serialize");
        let p = dir.join("speakers.json");
        std::fs::write(&p, speakers).map_err(|e| Error::io(&p, e))
    }
}

fn family_of(spec: &SyntheticSpeakerSpec, speakers: &[SyntheticSpeakerSpec]) -> f64 {
    speakers
        .iter()
        .find(|s| s.speaker_id == spec.speaker_id)
        .map_or(0.0, |s| s.band_low)
}

/// Mixture `index` of a split: targets alternate between the first and
/// second half of `speakers` (one family each).
fn mixture_from_speakers(
    config: &CorpusConfig,
    split: Split,
    index: usize,
    speakers: &[SyntheticSpeakerSpec],
    rng: &mut ChaCha8Rng,
) -> Result<MixtureRecord> {
    let half = speakers.len() / 2;
    if half == 0 {
        return Err(Error::InvalidInput(format!("{} split has no speakers", split.name())));
    }
    let (own, other) = if index.is_multiple_of(2) {
        (&speakers[..half], &speakers[half..])
    } else {
        (&speakers[half..], &speakers[..half])
    };
    let target = &own[rng.random_range(0..own.len())];
    let pool: Vec<&SyntheticSpeakerSpec> = if config.cross_family {
        other.iter().collect()
    } else {
        speakers.iter().filter(|s| s.speaker_id != target.speaker_id).collect()
    };
    let interferer = pool[rng.random_range(0..pool.len())];
    debug_assert!(!config.cross_family || family_of(target, speakers) != family_of(interferer, speakers) || config.family_overlap >= 1.0);
    let mut a = synth_speaker(target, config.utterance_secs, config.sample_rate, rng)?;
    let mut b = synth_speaker(interferer, config.utterance_secs, config.sample_rate, rng)?;
    if config.gain_jitter_db > 0.0 {
        let j = config.gain_jitter_db;
        a = a.scaled(10f64.powf(rng.random_range(-j..=j) / 20.0));
        b = b.scaled(10f64.powf(rng.random_range(-j..=j) / 20.0));
    }
    let mut rec = make_mixture(&a, &b)?;
    rec.id = format!("{}{index:04}", split.name());
    rec.speaker_ids = [target.speaker_id.clone(), interferer.speaker_id.clone()];
    Ok(rec)
}
