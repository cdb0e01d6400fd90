//! Event gating on short audio windows.
//!
//! The Goertzel bank evaluates a handful of DFT bins on a probe window and
//! fires when the median bin power clears a threshold. For scheduler studies
//! the same decision can instead be drawn from an abstract detector with
//! fixed true/false positive rates.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::Event;

pub const DEFAULT_SAMPLE_RATE: f64 = 16_000.0;
pub const DEFAULT_WINDOW: usize = 1600;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("bin {bin} out of range for a {window}-sample window")]
    BinOutOfRange { bin: usize, window: usize },
    #[error("expected {expected} samples, got {got}")]
    WindowLength { expected: usize, got: usize },
    #[error("filter bank has no target bins")]
    EmptyBank,
    #[error("frequency {freq} Hz outside (0, {nyquist}) Hz")]
    Nyquist { freq: f64, nyquist: f64 },
    #[error("invalid detector: {0}")]
    Invalid(String),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Event,
    NoEvent,
}

impl Decision {
    pub fn is_event(self) -> bool {
        self == Decision::Event
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truth {
    Present,
    Absent,
}

/// Squared magnitude of DFT bin `bin` for any `bin` in `0..n`.
///
/// Runs the two-state Goertzel recurrence with coefficient `2 cos(w)` and
/// forms the output as the complex value `s1 - e^{-jw} s2`, which keeps
/// low-power bins accurate where `s1^2 + s2^2 - c s1 s2` cancels.
pub fn goertzel_bin_power(samples: &[f64], bin: usize) -> f64 {
    let n = samples.len();
    if n == 0 {
        return 0.0;
    }
    let w = 2.0 * PI * (bin % n) as f64 / n as f64;
    let (sin_w, cos_w) = w.sin_cos();
    let coeff = 2.0 * cos_w;
    let (mut s1, mut s2) = (0.0f64, 0.0f64);
    for &x in samples {
        let s = coeff.mul_add(s1, x - s2);
        s2 = s1;
        s1 = s;
    }
    let re = s1 - cos_w * s2;
    let im = sin_w * s2;
    re * re + im * im
}

/// `|X[bin]|^2` for `0 <= bin <= window_len / 2`.
pub fn goertzel_power(samples: &[f64], bin: usize, window_len: usize) -> Result<f64, DetectError> {
    if samples.len() != window_len {
        return Err(DetectError::WindowLength { expected: window_len, got: samples.len() });
    }
    if bin > window_len / 2 {
        return Err(DetectError::BinOutOfRange { bin, window: window_len });
    }
    Ok(goertzel_bin_power(samples, bin))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoertzelBank {
    pub sample_rate: f64,
    pub window: usize,
    pub target_bins: Vec<usize>,
    /// Threshold on median bin power (squared magnitude).
    pub threshold: f64,
}

impl Default for GoertzelBank {
    /// 2-8 kHz in 500 Hz steps on 0.1 s windows at 16 kHz.
    fn default() -> Self {
        let mut bank = Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            window: DEFAULT_WINDOW,
            target_bins: Vec::new(),
            threshold: 200.0,
        };
        bank.target_bins = (0..=12).map(|i| bank.bin_for(2000.0 + 500.0 * i as f64)).collect();
        bank
    }
}

impl GoertzelBank {
    pub fn validate(&self) -> Result<(), DetectError> {
        if self.window == 0 {
            return Err(DetectError::Invalid("window must be positive".into()));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(DetectError::Invalid("sample_rate must be positive".into()));
        }
        if !(self.threshold >= 0.0) {
            return Err(DetectError::Invalid("threshold must be non-negative".into()));
        }
        if self.target_bins.is_empty() {
            return Err(DetectError::EmptyBank);
        }
        if let Some(&bin) = self.target_bins.iter().find(|&&b| b > self.window / 2) {
            return Err(DetectError::BinOutOfRange { bin, window: self.window });
        }
        Ok(())
    }

    /// Nearest bin to `freq`.
    pub fn bin_for(&self, freq: f64) -> usize {
        (freq * self.window as f64 / self.sample_rate).round() as usize
    }

    pub fn bin_freq(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate / self.window as f64
    }

    pub fn powers(&self, samples: &[f64]) -> Result<Vec<f64>, DetectError> {
        self.target_bins.iter().map(|&b| goertzel_power(samples, b, self.window)).collect()
    }

    /// Lower-middle median of the bank's bin powers.
    pub fn median_power(&self, samples: &[f64]) -> Result<f64, DetectError> {
        if self.target_bins.is_empty() {
            return Err(DetectError::EmptyBank);
        }
        Ok(lower_median(self.powers(samples)?))
    }
}

pub fn lower_median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// Median-threshold decision over the bank; fires on strictly greater.
pub fn gate(bank: &GoertzelBank, samples: &[f64]) -> Result<Decision, DetectError> {
    let median = bank.median_power(samples)?;
    Ok(if median > bank.threshold { Decision::Event } else { Decision::NoEvent })
}

/// `amplitude * sin(2 pi f t)` plus Gaussian noise.
pub fn synthesize_tone<R: Rng + ?Sized>(
    freq: f64,
    amplitude: f64,
    sample_rate: f64,
    n: usize,
    noise_sd: f64,
    rng: &mut R,
) -> Result<Vec<f64>, DetectError> {
    let nyquist = sample_rate / 2.0;
    if !(freq > 0.0 && freq < nyquist) {
        return Err(DetectError::Nyquist { freq, nyquist });
    }
    let mut out: Vec<f64> = (0..n)
        .map(|i| amplitude * (2.0 * PI * freq * i as f64 / sample_rate).sin())
        .collect();
    add_noise(&mut out, noise_sd, rng);
    Ok(out)
}

fn add_noise<R: Rng + ?Sized>(samples: &mut [f64], noise_sd: f64, rng: &mut R) {
    if noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise_sd).expect("positive sd");
        for s in samples {
            *s += normal.sample(rng);
        }
    }
}

/// Adds a linear chirp sweeping `[f_lo, f_hi]` over the samples in
/// `range`. Calls are modeled this way so a single vocalization spreads
/// energy over many bank bins.
fn add_chirp(samples: &mut [f64], range: std::ops::Range<usize>, f_lo: f64, f_hi: f64, amplitude: f64, sample_rate: f64) {
    let len = range.len().max(1) as f64 / sample_rate;
    let rate = (f_hi - f_lo) / len;
    for (j, i) in range.enumerate() {
        let t = j as f64 / sample_rate;
        samples[i] += amplitude * (2.0 * PI * (f_lo * t + 0.5 * rate * t * t)).sin();
    }
}

/// Options for simulating probes through the real Goertzel gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoertzelDetector {
    #[serde(default)]
    pub bank: GoertzelBank,
    pub amplitude: f64,
    pub noise_sd: f64,
    /// Width of the frequency sweep of each call, centered on its band.
    pub sweep_hz: f64,
}

impl Default for GoertzelDetector {
    fn default() -> Self {
        Self { bank: GoertzelBank::default(), amplitude: 1.0, noise_sd: 0.1, sweep_hz: 6000.0 }
    }
}

impl GoertzelDetector {
    /// Synthesizes the probe window starting at `t0` from the events that
    /// overlap it and runs the gate.
    pub fn probe<R: Rng + ?Sized>(&self, t0: f64, events: &[&Event], rng: &mut R) -> Result<Decision, DetectError> {
        let bank = &self.bank;
        let n = bank.window;
        let sr = bank.sample_rate;
        let mut samples = vec![0.0; n];
        let nyquist = sr / 2.0;
        for e in events {
            let band = e.band.unwrap_or(bank.bin_freq(bank.target_bins[bank.target_bins.len() / 2]));
            let lo = ((e.start - t0) * sr).ceil().clamp(0.0, n as f64) as usize;
            let hi = ((e.end() - t0) * sr).ceil().clamp(0.0, n as f64) as usize;
            if lo < hi {
                let f_lo = (band - self.sweep_hz / 2.0).max(0.0);
                let f_hi = (band + self.sweep_hz / 2.0).min(nyquist);
                add_chirp(&mut samples, lo..hi, f_lo, f_hi, self.amplitude, sr);
            }
        }
        add_noise(&mut samples, self.noise_sd, rng);
        gate(bank, &samples)
    }

    pub fn window_seconds(&self) -> f64 {
        self.bank.window as f64 / self.bank.sample_rate
    }
}

/// How a probe decides whether an event is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DetectorModel {
    /// Bernoulli decisions; `tp_rate = 1, fp_rate = 0` is the oracle.
    Abstract { tp_rate: f64, fp_rate: f64 },
    Goertzel(GoertzelDetector),
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self::oracle()
    }
}

impl DetectorModel {
    pub fn oracle() -> Self {
        Self::Abstract { tp_rate: 1.0, fp_rate: 0.0 }
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        match self {
            Self::Abstract { tp_rate, fp_rate } => {
                if !(0.0..=1.0).contains(tp_rate) || !(0.0..=1.0).contains(fp_rate) {
                    return Err(DetectError::Invalid("rates must be in [0, 1]".into()));
                }
                Ok(())
            }
            Self::Goertzel(g) => {
                if !(g.noise_sd >= 0.0) || !g.amplitude.is_finite() || !(g.sweep_hz >= 0.0) {
                    return Err(DetectError::Invalid("goertzel detector parameters".into()));
                }
                g.bank.validate()
            }
        }
    }
}

/// Draws an abstract detector decision. A goertzel model has no abstract
/// rates and answers with the truth.
pub fn sample_detection<R: Rng + ?Sized>(model: &DetectorModel, truth: Truth, rng: &mut R) -> Decision {
    let p = match (model, truth) {
        (DetectorModel::Abstract { tp_rate, .. }, Truth::Present) => *tp_rate,
        (DetectorModel::Abstract { fp_rate, .. }, Truth::Absent) => *fp_rate,
        (DetectorModel::Goertzel(_), Truth::Present) => 1.0,
        (DetectorModel::Goertzel(_), Truth::Absent) => 0.0,
    };
    if rng.random::<f64>() < p {
        Decision::Event
    } else {
        Decision::NoEvent
    }
}

/// Reads a 16-bit PCM mono WAV, scaled to [-1, 1).
pub fn read_wav(path: &Path) -> Result<(f64, Vec<f64>), DetectError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(DetectError::Invalid(format!(
            "expected 16-bit PCM mono, got {} channel(s) at {} bits",
            spec.channels, spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((spec.sample_rate as f64, samples))
}

/// Gate decisions for consecutive non-overlapping windows of `samples`;
/// a trailing partial window is ignored.
pub fn gate_windows(bank: &GoertzelBank, samples: &[f64]) -> Result<Vec<Decision>, DetectError> {
    bank.validate()?;
    samples.chunks_exact(bank.window).map(|w| gate(bank, w)).collect()
}
