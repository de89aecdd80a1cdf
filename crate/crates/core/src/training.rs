//! Denoising score matching.
//!
//! For a clean window `x0` with mixture `y`, the loss at time `t` is
//! `|s(x_t, y, t, e) + z / sigma(t)|^2` with `x_t = mean(x0, y, t) + sigma(t) z`,
//! averaged over the batch. `t` is uniform on `[t_eps, T]`. Parameters are
//! updated with Adam after global-norm clipping; the learning rate ramps up
//! linearly over the warm-up steps in general mode and is constant when
//! fine-tuning.

use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{window_batch, MixtureRecord};
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::metrics::{median, si_sdr};
use crate::nn::checkpoint::{decode_container, encode_container, json_err, write_atomic};
use crate::nn::{NetworkConfig, ScoreNetwork, ScoreNetworkCheckpoint, TrainingMetadata};
use crate::sampler::{extract_waveform, SamplerConfig};
use crate::sde::{complex_noise, SdeParams};
use crate::stft::{Stft, StftConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    General,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    /// One epoch is `ceil(records / batch_size)` steps.
    pub epochs: usize,
    /// Overrides `epochs` when positive.
    pub max_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub use_ema: bool,
    pub ema_decay: f64,
    pub mode: TrainMode,
    /// Multiply each example's loss by `sigma(t)^2`.
    pub sigma_weighted_loss: bool,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Checkpoint and validation cadence in steps; 0 means only at the end.
    pub checkpoint_every: u64,
    /// Validation windows scored by SI-SDR at each checkpoint; 0 disables.
    pub validation_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            warmup_steps: 2000,
            epochs: 1000,
            max_steps: 0,
            batch_size: 8,
            seed: 0,
            use_ema: false,
            ema_decay: 0.999,
            mode: TrainMode::General,
            sigma_weighted_loss: false,
            grad_clip_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
            validation_samples: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("training: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return fail("ema_decay must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return fail("invalid Adam parameters");
        }
        if self.grad_clip_norm < 0.0 {
            return fail("grad_clip_norm must be nonnegative");
        }
        Ok(())
    }

    /// Number of optimizer steps for a dataset of `records` records.
    pub fn total_steps(&self, records: usize) -> u64 {
        if self.max_steps > 0 {
            self.max_steps
        } else {
            (self.epochs * records.div_ceil(self.batch_size)) as u64
        }
    }
}

/// Learning rate for optimizer step `step`: linear ramp from 0 over
/// `warmup_steps` in general mode, constant when fine-tuning.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.mode == TrainMode::Finetune || cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.learning_rate
    } else {
        cfg.learning_rate * step as f64 / cfg.warmup_steps as f64
    }
}

/// Process time uniform on `[t_eps, T]`.
pub fn sample_time<R: Rng + ?Sized>(sde: &SdeParams, rng: &mut R) -> f64 {
    rng.random_range(sde.t_eps..=sde.t_max)
}

/// `|score + z / sigma|^2` over both real channels.
pub fn dsm_residual_loss(score: &[Complex64], z: &[Complex64], sigma: f64) -> Result<f64> {
    if score.len() != z.len() {
        return Err(Error::shape(z.len(), score.len()));
    }
    Ok(score.iter().zip(z).map(|(s, n)| (s + n / sigma).norm_sqr()).sum())
}

/// One training example for [`dsm_loss`].
#[derive(Debug, Clone, Copy)]
pub struct DsmExample<'a> {
    pub x0: &'a [Complex64],
    pub y: &'a [Complex64],
    pub bins: usize,
    pub frames: usize,
    pub e_ts: &'a [f64],
    pub t: f64,
    pub z: &'a [Complex64],
}

fn channels(v: &[Complex64]) -> Vec<f64> {
    v.iter().map(|c| c.re).chain(v.iter().map(|c| c.im)).collect()
}

/// Denoising score-matching loss of a single example.
pub fn dsm_loss(net: &ScoreNetwork, params: &[f64], ex: &DsmExample, weighted: bool) -> Result<f64> {
    dsm_loss_impl(net, params, ex, weighted, None)
}

/// [`dsm_loss`] that also adds `scale * dloss/dparams` into `grads`.
pub fn dsm_loss_and_grad(
    net: &ScoreNetwork,
    params: &[f64],
    ex: &DsmExample,
    weighted: bool,
    scale: f64,
    grads: &mut [f64],
) -> Result<f64> {
    dsm_loss_impl(net, params, ex, weighted, Some((scale, grads)))
}

fn dsm_loss_impl(
    net: &ScoreNetwork,
    params: &[f64],
    ex: &DsmExample,
    weighted: bool,
    grad: Option<(f64, &mut [f64])>,
) -> Result<f64> {
    let sde = net.sde();
    if !(ex.t >= sde.t_eps && ex.t <= sde.t_max) {
        return Err(Error::InvalidInput(format!(
            "process time {} outside [{}, {}]",
            ex.t, sde.t_eps, sde.t_max
        )));
    }
    let x_t = sde.perturb(ex.x0, ex.y, ex.t, ex.z)?;
    let sigma = sde.std(ex.t);
    let w = if weighted { sigma * sigma } else { 1.0 };
    let (out, cache) = net.forward_cached(params, &channels(&x_t), &channels(ex.y), ex.bins, ex.frames, ex.t, ex.e_ts)?;
    let target = channels(ex.z);
    let resid: Vec<f64> = out.iter().zip(&target).map(|(s, z)| s + z / sigma).collect();
    let loss = w * resid.iter().map(|r| r * r).sum::<f64>();
    if let Some((scale, grads)) = grad {
        let dscore: Vec<f64> = resid.iter().map(|r| 2.0 * w * scale * r).collect();
        net.backward(params, &cache, &dscore, grads)?;
    }
    Ok(loss)
}

/// Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Update number `step` (1-based) with learning rate `lr`.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, step: u64, cfg: &TrainConfig) {
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powf(step as f64);
        let c2 = 1.0 - b2.powf(step as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Scales `grads` to global norm at most `max_norm`; returns the norm before
/// clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) {
    for (e, p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: Vec<f64>,
    pub adam: Adam,
    pub ema: Option<Vec<f64>>,
    pub rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    step: u64,
    rng: ChaCha8Rng,
    train: TrainConfig,
    network: NetworkConfig,
    sde: SdeParams,
    stft: StftConfig,
    metadata: TrainingMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Receives progress from [`Trainer::run`].
pub trait TrainObserver {
    fn on_step(&mut self, _log: &StepLog) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_every` steps and after the last step.
    fn on_checkpoint(&mut self, _trainer: &Trainer, _validation_si_sdr: Option<f64>) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Collects step logs in memory.
#[derive(Debug, Default)]
pub struct LogCollector {
    pub steps: Vec<StepLog>,
    pub validation: Vec<(u64, f64)>,
}

impl TrainObserver for LogCollector {
    fn on_step(&mut self, log: &StepLog) -> Result<()> {
        self.steps.push(log.clone());
        Ok(())
    }

    fn on_checkpoint(&mut self, trainer: &Trainer, v: Option<f64>) -> Result<()> {
        if let Some(v) = v {
            self.validation.push((trainer.state.step, v));
        }
        Ok(())
    }
}

/// Training records plus an optional validation split.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<MixtureRecord>,
    pub valid: Vec<MixtureRecord>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub net: ScoreNetwork,
    pub stft: Stft,
    pub state: TrainState,
    pub metadata: TrainingMetadata,
}

impl Trainer {
    /// Fresh run with parameters initialized from `config.seed`.
    pub fn new(config: TrainConfig, network: NetworkConfig, sde: SdeParams, stft: StftConfig) -> Result<Self> {
        config.validate()?;
        let net = ScoreNetwork::new(network, sde)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = net.init_params(&mut rng);
        Self::from_parts(config, net, stft, params, rng)
    }

    /// Run starting from `base`'s parameters with fresh optimizer state.
    pub fn from_checkpoint(config: TrainConfig, base: &ScoreNetworkCheckpoint) -> Result<Self> {
        config.validate()?;
        let net = base.build()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::from_parts(config, net, base.stft, base.params.clone(), rng)
    }

    fn from_parts(config: TrainConfig, net: ScoreNetwork, stft: StftConfig, params: Vec<f64>, rng: ChaCha8Rng) -> Result<Self> {
        let n = params.len();
        let ema = config.use_ema.then(|| params.clone());
        let metadata = TrainingMetadata {
            step: 0,
            seed: config.seed,
            mode: match config.mode {
                TrainMode::General => "general".into(),
                TrainMode::Finetune => "finetune".into(),
            },
            target_speaker: None,
        };
        Ok(Self {
            stft: Stft::new(stft)?,
            config,
            net,
            state: TrainState {
                step: 0,
                params,
                adam: Adam::new(n),
                ema,
                rng,
            },
            metadata,
        })
    }

    /// Parameters used for inference: the EMA copy when enabled.
    pub fn inference_params(&self) -> &[f64] {
        self.state.ema.as_deref().unwrap_or(&self.state.params)
    }

    pub fn checkpoint(&self) -> ScoreNetworkCheckpoint {
        ScoreNetworkCheckpoint {
            network: self.net.config().clone(),
            sde: *self.net.sde(),
            stft: *self.stft.config(),
            metadata: TrainingMetadata {
                step: self.state.step,
                ..self.metadata.clone()
            },
            params: self.inference_params().to_vec(),
        }
    }

    /// One optimizer step on a random batch.
    pub fn step(&mut self, records: &[MixtureRecord], store: &EmbeddingStore) -> Result<StepLog> {
        if records.is_empty() {
            return Err(Error::Empty("training dataset"));
        }
        let cfg = &self.config;
        let sde = *self.net.sde();
        let n_params = self.state.params.len();
        let mut grads = vec![0.0; n_params];
        let mut loss = 0.0;
        let scale = 1.0 / cfg.batch_size as f64;
        let mut batch_ids = Vec::with_capacity(cfg.batch_size);
        let mut times = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let rng = &mut self.state.rng;
            let rec = &records[rng.random_range(0..records.len())];
            let ex = window_batch(rec, &self.stft, rng)?;
            let e_ts = store.get(&ex.speaker_id)?;
            let t = sample_time(&sde, rng);
            let z = complex_noise(ex.x0.data().len(), rng);
            let (bins, frames) = ex.x0.shape();
            let l = dsm_loss_and_grad(
                &self.net,
                &self.state.params,
                &DsmExample {
                    x0: ex.x0.data(),
                    y: ex.y.data(),
                    bins,
                    frames,
                    e_ts,
                    t,
                    z: &z,
                },
                cfg.sigma_weighted_loss,
                scale,
                &mut grads,
            )?;
            loss += l * scale;
            batch_ids.push(rec.id.clone());
            times.push(t);
        }
        let step = self.state.step + 1;
        let grad_ok = grads.iter().all(|g| g.is_finite());
        if !loss.is_finite() || !grad_ok {
            return Err(Error::NonFiniteLoss {
                step,
                t: times.iter().cloned().fold(f64::NAN, f64::min),
                batch: batch_ids,
            });
        }
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip_norm);
        let lr = lr_schedule(step, cfg);
        self.state.adam.update(&mut self.state.params, &grads, lr, step, cfg);
        if let Some(ema) = self.state.ema.as_mut() {
            ema_update(ema, &self.state.params, cfg.ema_decay);
        }
        self.state.step = step;
        Ok(StepLog {
            step,
            loss,
            lr,
            grad_norm,
        })
    }

    /// Median SI-SDR of extraction on the first `validation_samples`
    /// validation records, each cut to one model window.
    pub fn validate(&self, valid: &[MixtureRecord], store: &EmbeddingStore, sampler: &SamplerConfig) -> Result<Option<f64>> {
        let n = self.config.validation_samples.min(valid.len());
        if n == 0 {
            return Ok(None);
        }
        let win = self.stft.config().window_samples();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ self.state.step);
        let mut scores = Vec::with_capacity(n);
        for rec in &valid[..n] {
            let len = win.min(rec.mixture.len());
            let mix = rec.mixture.truncated(len);
            let e = store.get(rec.target_speaker())?;
            let est = extract_waveform(&self.net, self.inference_params(), &self.stft, &mix, e, sampler, &mut rng)?;
            scores.push(si_sdr(&rec.target().truncated(len).samples, &est.samples)?);
        }
        Ok(Some(median(&scores)))
    }

    /// Runs until `total_steps` optimizer steps have been taken in total.
    pub fn run(
        &mut self,
        data: &Dataset,
        store: &EmbeddingStore,
        sampler: &SamplerConfig,
        observer: &mut dyn TrainObserver,
    ) -> Result<()> {
        let total = self.config.total_steps(data.train.len());
        while self.state.step < total {
            let log = self.step(&data.train, store)?;
            observer.on_step(&log)?;
            let every = self.config.checkpoint_every;
            if every > 0 && self.state.step.is_multiple_of(every) && self.state.step < total {
                let v = self.validate(&data.valid, store, sampler)?;
                observer.on_checkpoint(self, v)?;
            }
        }
        let v = self.validate(&data.valid, store, sampler)?;
        observer.on_checkpoint(self, v)
    }

    pub fn state_to_bytes(&self) -> Result<Vec<u8>> {
        let header = StateHeader {
            step: self.state.step,
            rng: self.state.rng.clone(),
            train: self.config.clone(),
            network: self.net.config().clone(),
            sde: *self.net.sde(),
            stft: *self.stft.config(),
            metadata: self.metadata.clone(),
        };
        let header = serde_json::to_value(header).map_err(json_err)?;
        let mut sections: Vec<(&str, &[f64])> = vec![
            ("params", &self.state.params),
            ("adam_m", &self.state.adam.m),
            ("adam_v", &self.state.adam.v),
        ];
        if let Some(e) = &self.state.ema {
            sections.push(("ema", e));
        }
        encode_container("train_state", header, &sections)
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.state_to_bytes()?)
    }

    /// Restores a run saved with [`Trainer::save_state`]. `config` replaces
    /// the stored training configuration (for example to extend `max_steps`).
    pub fn from_state_bytes(bytes: &[u8], config: Option<TrainConfig>) -> Result<Self> {
        let mut c = decode_container(bytes, "train_state")?;
        let h: StateHeader = serde_json::from_value(c.header).map_err(json_err)?;
        let config = config.unwrap_or(h.train);
        config.validate()?;
        let net = ScoreNetwork::new(h.network, h.sde)?;
        let mut take = |name: &str| {
            c.sections
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("train state lacks `{name}`")))
        };
        let params = take("params")?;
        let m = take("adam_m")?;
        let v = take("adam_v")?;
        let ema = take("ema").ok();
        if params.len() != net.param_count() || m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Checkpoint("train state sizes do not match the network".into()));
        }
        let ema = match (config.use_ema, ema) {
            (true, Some(e)) => Some(e),
            (true, None) => Some(params.clone()),
            (false, _) => None,
        };
        Ok(Self {
            stft: Stft::new(h.stft)?,
            config,
            net,
            state: TrainState {
                step: h.step,
                params,
                adam: Adam { m, v },
                ema,
                rng: h.rng,
            },
            metadata: h.metadata,
        })
    }

    pub fn load_state(path: &Path, config: Option<TrainConfig>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_state_bytes(&bytes, config)
    }
}

/// General training from scratch.
#[allow(clippy::too_many_arguments)]
pub fn train(
    config: &TrainConfig,
    network: &NetworkConfig,
    data: &Dataset,
    store: &EmbeddingStore,
    sde: &SdeParams,
    stft: &StftConfig,
    sampler: &SamplerConfig,
    observer: &mut dyn TrainObserver,
) -> Result<ScoreNetworkCheckpoint> {
    check_dataset(data, store)?;
    let mut trainer = Trainer::new(config.clone(), network.clone(), *sde, *stft)?;
    trainer.run(data, store, sampler, observer)?;
    Ok(trainer.checkpoint())
}

/// The single target speaker of `records`; an error lists all of them when
/// there is more than one.
pub fn single_target_speaker(records: &[MixtureRecord]) -> Result<String> {
    let mut ids: Vec<&str> = records.iter().map(|r| r.target_speaker()).collect();
    ids.sort_unstable();
    ids.dedup();
    match ids.as_slice() {
        [] => Err(Error::Empty("fine-tuning dataset")),
        [one] => Ok((*one).to_string()),
        many => Err(Error::InvalidInput(format!(
            "fine-tuning needs a single target speaker, dataset has {}: {}",
            many.len(),
            many.join(", ")
        ))),
    }
}

/// Personalised fine-tuning: same loop as [`train`], started from `base`,
/// constant learning rate, one target speaker.
pub fn finetune(
    base: &ScoreNetworkCheckpoint,
    data: &Dataset,
    store: &EmbeddingStore,
    config: &TrainConfig,
    sampler: &SamplerConfig,
    observer: &mut dyn TrainObserver,
) -> Result<ScoreNetworkCheckpoint> {
    let speaker = single_target_speaker(&data.train)?;
    check_dataset(data, store)?;
    let config = TrainConfig {
        mode: TrainMode::Finetune,
        ..config.clone()
    };
    let mut trainer = Trainer::from_checkpoint(config, base)?;
    trainer.metadata.target_speaker = Some(speaker);
    trainer.run(data, store, sampler, observer)?;
    Ok(trainer.checkpoint())
}

/// Every target speaker of `data` must have an embedding.
pub fn check_dataset(data: &Dataset, store: &EmbeddingStore) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    for rec in data.train.iter().chain(&data.valid) {
        store.get(rec.target_speaker())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CorpusConfig, SyntheticCorpus};
    use approx::assert_abs_diff_eq;

    fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            depth: 1,
            blocks_per_level: 1,
            base_channels: 4,
            channel_multipliers: vec![1],
            embed_hidden_dim: 4,
            ..NetworkConfig::default()
        }
    }

    fn tiny_stft() -> StftConfig {
        StftConfig {
            n_fft: 14,
            window_len: 16,
            hop: 4,
            frames: 8,
            ..StftConfig::default()
        }
    }

    fn tiny_corpus() -> SyntheticCorpus {
        SyntheticCorpus::generate(&CorpusConfig {
            train_speakers_per_family: 1,
            valid_speakers_per_family: 1,
            test_speakers_per_family: 1,
            train_mixtures: 4,
            valid_mixtures: 2,
            test_mixtures: 0,
            utterance_secs: 0.05,
            enrollment_secs: 1.0,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            max_steps: 6,
            batch_size: 2,
            warmup_steps: 3,
            validation_samples: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert_abs_diff_eq!(lr_schedule(1000, &cfg), 2.5e-4, epsilon = 1e-18);
        assert_eq!(lr_schedule(2000, &cfg), 5e-4);
        assert_eq!(lr_schedule(50_000, &cfg), 5e-4);
        let ft = TrainConfig {
            mode: TrainMode::Finetune,
            ..cfg
        };
        assert_eq!(lr_schedule(0, &ft), 5e-4);
    }

    #[test]
    fn residual_loss_examples() {
        let sigma = 0.2;
        let z = vec![Complex64::new(0.5, -1.0), Complex64::new(2.0, 0.1)];
        let perfect: Vec<Complex64> = z.iter().map(|v| -v / sigma).collect();
        assert_eq!(dsm_residual_loss(&perfect, &z, sigma).unwrap(), 0.0);
        let zero = vec![Complex64::new(0.0, 0.0); 2];
        let direct = z.iter().map(|v| v.norm_sqr()).sum::<f64>() / (sigma * sigma);
        assert_abs_diff_eq!(dsm_residual_loss(&zero, &z, sigma).unwrap(), direct, epsilon = 1e-10);
    }

    #[test]
    fn clipping_and_ema() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert_abs_diff_eq!(g[0], 0.6, epsilon = 1e-15);
        let mut ema = vec![1.0, 2.0];
        ema_update(&mut ema, &[5.0, -1.0], 0.0);
        assert_eq!(ema, vec![5.0, -1.0]);
    }

    #[test]
    fn dsm_gradient_matches_finite_differences() {
        let net = ScoreNetwork::new(tiny_net(), SdeParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = net.init_params(&mut rng);
        let (bins, frames) = (4, 6);
        let n = bins * frames;
        let x0 = complex_noise(n, &mut rng);
        let y = complex_noise(n, &mut rng);
        let z = complex_noise(n, &mut rng);
        let e: Vec<f64> = (0..192).map(|i| (i as f64 * 0.1).sin()).collect();
        let ex = DsmExample {
            x0: &x0,
            y: &y,
            bins,
            frames,
            e_ts: &e,
            t: 0.4,
            z: &z,
        };
        for weighted in [false, true] {
            let mut grads = vec![0.0; params.len()];
            dsm_loss_and_grad(&net, &params, &ex, weighted, 1.0, &mut grads).unwrap();
            let dir: Vec<f64> = (0..params.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let analytic: f64 = grads.iter().zip(&dir).map(|(g, d)| g * d).sum();
            let h = 1e-4;
            let at = |s: f64| {
                let p: Vec<f64> = params.iter().zip(&dir).map(|(a, d)| a + s * d).collect();
                dsm_loss(&net, &p, &ex, weighted).unwrap()
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            assert!((analytic - numeric).abs() / numeric.abs() < 1e-3, "{analytic} vs {numeric}");
        }
        let early = DsmExample { t: 0.01, ..ex };
        assert!(dsm_loss(&net, &params, &early, false).is_err());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let corpus = tiny_corpus();
        let data = Dataset {
            train: corpus.train.clone(),
            valid: corpus.valid.clone(),
        };
        let sampler = SamplerConfig::default();
        let run = || {
            train(&quick_config(), &tiny_net(), &data, &corpus.embeddings, &SdeParams::default(), &tiny_stft(), &sampler, &mut ()).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.metadata.step, 6);

        let mut first = Trainer::new(quick_config(), tiny_net(), SdeParams::default(), tiny_stft()).unwrap();
        for _ in 0..3 {
            first.step(&data.train, &corpus.embeddings).unwrap();
        }
        let bytes = first.state_to_bytes().unwrap();
        let mut resumed = Trainer::from_state_bytes(&bytes, None).unwrap();
        resumed.run(&data, &corpus.embeddings, &sampler, &mut ()).unwrap();
        assert_eq!(resumed.checkpoint().params, a.params);
    }

    #[test]
    fn ema_with_zero_decay_tracks_params() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig {
            use_ema: true,
            ema_decay: 0.0,
            ..quick_config()
        };
        let mut t = Trainer::new(cfg, tiny_net(), SdeParams::default(), tiny_stft()).unwrap();
        for _ in 0..3 {
            t.step(&corpus.train, &corpus.embeddings).unwrap();
        }
        assert_eq!(t.state.ema.as_ref().unwrap(), &t.state.params);
    }

    #[test]
    fn finetune_preconditions_and_zero_epochs() {
        let corpus = tiny_corpus();
        let sampler = SamplerConfig::default();
        let base = train(
            &quick_config(),
            &tiny_net(),
            &Dataset {
                train: corpus.train.clone(),
                valid: vec![],
            },
            &corpus.embeddings,
            &SdeParams::default(),
            &tiny_stft(),
            &sampler,
            &mut (),
        )
        .unwrap();
        let mixed = Dataset {
            train: corpus.train.clone(),
            valid: vec![],
        };
        let err = finetune(&base, &mixed, &corpus.embeddings, &quick_config(), &sampler, &mut ()).unwrap_err();
        assert!(err.to_string().contains("single target speaker"), "{err}");

        let spk = corpus.train[0].target_speaker().to_string();
        let single = Dataset {
            train: corpus.train.iter().filter(|r| r.target_speaker() == spk).cloned().collect(),
            valid: vec![],
        };
        let zero = TrainConfig {
            epochs: 0,
            max_steps: 0,
            ..quick_config()
        };
        let out = finetune(&base, &single, &corpus.embeddings, &zero, &sampler, &mut ()).unwrap();
        assert_eq!(out.params, base.params);
        assert_eq!(out.metadata.target_speaker.as_deref(), Some(spk.as_str()));
    }

    #[test]
    fn unknown_speaker_is_reported() {
        let corpus = tiny_corpus();
        let empty = EmbeddingStore::new(192, crate::embeddings::Provenance::External);
        let err = train(
            &quick_config(),
            &tiny_net(),
            &Dataset {
                train: corpus.train.clone(),
                valid: vec![],
            },
            &empty,
            &SdeParams::default(),
            &tiny_stft(),
            &SamplerConfig::default(),
            &mut (),
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnknownSpeaker { .. }));
    }
}
