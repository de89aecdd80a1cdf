//! Complex STFT analysis/synthesis and the amplitude compression the
//! diffusion process operates on.
//!
//! Framing: the signal is zero-padded by `(window_len - hop) / 2` on the left
//! (and enough on the right to complete the last frame) so that a signal of
//! `F * hop` samples yields exactly `F` frames. Each `window_len` frame is
//! weighted by a periodic Hann window; when `n_fft < window_len` the FFT sees
//! the centred `n_fft` samples of the frame (the window is cropped
//! symmetrically), when `n_fft > window_len` the windowed frame is zero-padded
//! symmetrically. Synthesis is weighted overlap-add normalized by the summed
//! squared window, which reconstructs the input exactly wherever that envelope
//! is nonzero.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub n_fft: usize,
    pub window_len: usize,
    pub hop: usize,
    /// Frames per model input window.
    pub frames: usize,
    /// Amplitude compression exponent.
    pub alpha: f64,
    /// Amplitude scale applied after compression.
    pub beta: f64,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 254,
            window_len: 256,
            hop: 64,
            frames: 256,
            alpha: 0.5,
            beta: 0.15,
            sample_rate: 8000,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Samples covered by one model window of `frames` frames.
    pub fn window_samples(&self) -> usize {
        self.frames * self.hop
    }

    /// Leading zero padding applied before framing.
    pub fn pad(&self) -> usize {
        (self.window_len - self.hop) / 2
    }

    /// Number of samples touched by the FFT within a frame.
    fn active_len(&self) -> usize {
        self.n_fft.min(self.window_len)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("stft: {m}")));
        if self.n_fft < 2 || !self.n_fft.is_multiple_of(2) {
            return fail("n_fft must be even and at least 2");
        }
        if self.window_len == 0 || self.hop == 0 || self.frames == 0 {
            return fail("window_len, hop and frames must be positive");
        }
        if self.hop > self.window_len {
            return fail("hop must not exceed window_len");
        }
        // Periodic Hann is zero only at its first sample, so the squared-window
        // envelope stays positive iff consecutive frames overlap in active samples.
        if self.hop >= self.active_len() {
            return fail("hop must be smaller than min(n_fft, window_len) for reconstruction");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail("alpha must be positive");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return fail("beta must be positive");
        }
        if self.sample_rate == 0 {
            return fail("sample_rate must be positive");
        }
        Ok(())
    }

    /// Number of frames `analyze` produces for a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Raw,
    Compressed,
}

impl Domain {
    fn name(self) -> &'static str {
        match self {
            Domain::Raw => "raw",
            Domain::Compressed => "compressed",
        }
    }
}

/// Complex time-frequency array stored bin-major: `data[bin * frames + frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    bins: usize,
    frames: usize,
    data: Vec<Complex64>,
    pub domain: Domain,
    pub config: StftConfig,
    /// Length of the signal this was analyzed from, if known. Synthesis trims
    /// its output to this length.
    pub signal_len: Option<usize>,
}

impl ComplexSpectrogram {
    pub fn zeros(bins: usize, frames: usize, domain: Domain, config: StftConfig) -> Self {
        Self {
            bins,
            frames,
            data: vec![Complex64::new(0.0, 0.0); bins * frames],
            domain,
            config,
            signal_len: None,
        }
    }

    pub fn from_data(
        bins: usize,
        frames: usize,
        data: Vec<Complex64>,
        domain: Domain,
        config: StftConfig,
    ) -> Result<Self> {
        if data.len() != bins * frames {
            return Err(Error::shape(
                format!("{bins}x{frames}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            bins,
            frames,
            data,
            domain,
            config,
            signal_len: None,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.bins, self.frames)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn get(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[bin * self.frames + frame]
    }

    pub fn with_data(&self, data: Vec<Complex64>) -> Result<Self> {
        let mut out = Self::from_data(self.bins, self.frames, data, self.domain, self.config)?;
        out.signal_len = self.signal_len;
        Ok(out)
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{}x{}", self.bins, self.frames),
                format!("{}x{}", other.bins, other.frames),
            ));
        }
        Ok(())
    }

    fn ensure_domain(&self, expected: Domain) -> Result<()> {
        if self.domain != expected {
            return Err(Error::Domain {
                expected: expected.name(),
                actual: self.domain.name(),
            });
        }
        Ok(())
    }

    /// Two-channel real view `[re; im]`, each channel `bins x frames`.
    pub fn to_channels(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.data.len());
        out.extend(self.data.iter().map(|c| c.re));
        out.extend(self.data.iter().map(|c| c.im));
        out
    }

    pub fn set_from_channels(&mut self, channels: &[f64]) -> Result<()> {
        let n = self.data.len();
        if channels.len() != 2 * n {
            return Err(Error::shape(2 * n, channels.len()));
        }
        for (i, c) in self.data.iter_mut().enumerate() {
            *c = Complex64::new(channels[i], channels[n + i]);
        }
        Ok(())
    }
}

pub fn periodic_hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Reusable analysis/synthesis engine holding the FFT plans and window.
pub struct Stft {
    config: StftConfig,
    /// Window over the `n_fft`-sample FFT frame.
    window: Vec<f64>,
    /// Offset of the FFT frame within the `window_len` frame (may be negative
    /// when the FFT frame is longer).
    offset: isize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let hann = periodic_hann(config.window_len);
        let n = config.n_fft;
        let offset = (config.window_len as isize - n as isize) / 2;
        let window = (0..n)
            .map(|i| {
                let j = i as isize + offset;
                if j >= 0 && (j as usize) < config.window_len {
                    hann[j as usize]
                } else {
                    0.0
                }
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            config,
            window,
            offset,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Raw complex STFT of `w`.
    pub fn analyze(&self, w: &Waveform) -> Result<ComplexSpectrogram> {
        if w.is_empty() {
            return Err(Error::Empty("waveform"));
        }
        let cfg = &self.config;
        let n = cfg.n_fft;
        let bins = cfg.bins();
        let frames = cfg.frames_for(w.len());
        let pad = cfg.pad() as isize;
        let mut spec = ComplexSpectrogram::zeros(bins, frames, Domain::Raw, *cfg);
        spec.signal_len = Some(w.len());
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for k in 0..frames {
            let start = (k * cfg.hop) as isize - pad + self.offset;
            for (i, b) in buf.iter_mut().enumerate() {
                let idx = start + i as isize;
                let s = if idx >= 0 && (idx as usize) < w.len() {
                    w.samples[idx as usize]
                } else {
                    0.0
                };
                *b = Complex64::new(s * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            for (b, v) in buf.iter().take(bins).enumerate() {
                spec.data[b * frames + k] = *v;
            }
        }
        Ok(spec)
    }

    /// Inverse of [`Stft::analyze`]. Without a recorded signal length the full
    /// overlap-add span `(frames - 1) * hop + window_len` is returned.
    pub fn synthesize(&self, spec: &ComplexSpectrogram) -> Result<Waveform> {
        spec.ensure_domain(Domain::Raw)?;
        let cfg = &self.config;
        if spec.bins != cfg.bins() {
            return Err(Error::shape(cfg.bins(), spec.bins));
        }
        let n = cfg.n_fft;
        let frames = spec.frames;
        let span = (frames - 1) * cfg.hop + cfg.window_len;
        let mut out = vec![0.0; span];
        let mut envelope = vec![0.0; span];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for k in 0..frames {
            for b in 0..n {
                buf[b] = if b <= n / 2 {
                    spec.data[b * frames + k]
                } else {
                    spec.data[(n - b) * frames + k].conj()
                };
            }
            self.inverse.process(&mut buf);
            let start = (k * cfg.hop) as isize + self.offset;
            for (i, v) in buf.iter().enumerate() {
                let idx = start + i as isize;
                if idx < 0 || idx as usize >= span {
                    continue;
                }
                let w = self.window[i];
                out[idx as usize] += w * v.re / n as f64;
                envelope[idx as usize] += w * w;
            }
        }
        for (o, e) in out.iter_mut().zip(&envelope) {
            *o = if *e > 1e-10 { *o / e } else { 0.0 };
        }
        let samples = match spec.signal_len {
            Some(len) => {
                let pad = cfg.pad();
                let mut s: Vec<f64> = out.into_iter().skip(pad).take(len).collect();
                s.resize(len, 0.0);
                s
            }
            None => out,
        };
        Waveform::new(samples, cfg.sample_rate)
    }
}

/// Raw complex STFT of `w` (see [`Stft::analyze`]).
pub fn analyze(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    Stft::new(*cfg)?.analyze(w)
}

/// Waveform from a raw spectrogram (see [`Stft::synthesize`]).
pub fn synthesize(spec: &ComplexSpectrogram, cfg: &StftConfig) -> Result<Waveform> {
    Stft::new(*cfg)?.synthesize(spec)
}

/// `c -> beta * |c|^alpha * exp(i arg c)`, with `0 -> 0`.
pub fn compress_value(c: Complex64, alpha: f64, beta: f64) -> Complex64 {
    let mag = c.norm();
    if mag == 0.0 {
        Complex64::new(0.0, 0.0)
    } else {
        c * (beta * mag.powf(alpha - 1.0))
    }
}

/// Exact inverse of [`compress_value`]: `c~ -> (|c~| / beta)^(1/alpha) * exp(i arg c~)`.
pub fn decompress_value(c: Complex64, alpha: f64, beta: f64) -> Complex64 {
    let mag = c.norm();
    if mag == 0.0 {
        Complex64::new(0.0, 0.0)
    } else {
        c * ((mag / beta).powf(1.0 / alpha) / mag)
    }
}

pub fn compress(spec: &ComplexSpectrogram, alpha: f64, beta: f64) -> Result<ComplexSpectrogram> {
    spec.ensure_domain(Domain::Raw)?;
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Config("compression needs alpha > 0 and beta > 0".into()));
    }
    if spec.data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NonFinite("spectrogram"));
    }
    let mut out = spec.clone();
    out.domain = Domain::Compressed;
    for c in &mut out.data {
        *c = compress_value(*c, alpha, beta);
    }
    Ok(out)
}

pub fn decompress(spec: &ComplexSpectrogram, alpha: f64, beta: f64) -> Result<ComplexSpectrogram> {
    spec.ensure_domain(Domain::Compressed)?;
    if alpha == 0.0 || beta == 0.0 || !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::Config("decompression needs nonzero alpha and beta".into()));
    }
    let mut out = spec.clone();
    out.domain = Domain::Raw;
    for c in &mut out.data {
        *c = decompress_value(*c, alpha, beta);
    }
    Ok(out)
}

impl Stft {
    /// Analysis followed by compression with this engine's `alpha`/`beta`.
    pub fn analyze_compressed(&self, w: &Waveform) -> Result<ComplexSpectrogram> {
        compress(&self.analyze(w)?, self.config.alpha, self.config.beta)
    }

    /// Decompression followed by synthesis.
    pub fn synthesize_compressed(&self, spec: &ComplexSpectrogram) -> Result<Waveform> {
        self.synthesize(&decompress(spec, self.config.alpha, self.config.beta)?)
    }
}
