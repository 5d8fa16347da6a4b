//! Audio ingestion and log-mel feature extraction.

mod mel;
mod resample;
mod stats;
mod wav;

use ndarray::Array2;

use crate::error::{Error, Result};

pub use mel::{hz_to_mel, log_mel, mel_to_hz, LogMelExtractor, MelFilterbank};
pub use resample::resample;
pub use stats::{normalize, NormStats};
pub use wav::{read_wav, write_wav};

pub const SAMPLE_RATE: u32 = 16_000;
pub const CLIP_SECONDS: f64 = 10.0;
pub const CLIP_SAMPLES: usize = 160_000;
pub const N_FFT: usize = 2048;
pub const HOP: usize = 255;
pub const N_MELS: usize = 128;
pub const N_FRAMES: usize = 648;
pub const F_MAX: f64 = 8000.0;
/// Floor applied to mel power before the logarithm.
pub const POWER_FLOOR: f64 = 1e-10;

/// `ln(POWER_FLOOR)`, the smallest value a log-mel entry can take.
pub fn log_floor() -> f32 {
    POWER_FLOOR.ln() as f32
}

/// Seconds between two spectrogram frames.
pub fn frame_hop_seconds() -> f64 {
    HOP as f64 / SAMPLE_RATE as f64
}

/// Mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub clip_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32, clip_id: impl Into<String>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
            clip_id: clip_id.into(),
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Zero-pads or crops to exactly ten seconds.
    pub fn fit_to_clip_length(mut self) -> Self {
        let n = (CLIP_SECONDS * self.sample_rate as f64).round() as usize;
        self.samples.resize(n, 0.0);
        self
    }
}

/// `[N_FRAMES × N_MELS]` log-mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    values: Array2<f32>,
}

impl LogMelSpectrogram {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if values.dim() != (N_FRAMES, N_MELS) {
            return Err(Error::invalid(format!(
                "spectrogram shape {:?}, expected ({N_FRAMES}, {N_MELS})",
                values.dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("spectrogram".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f32> {
        self.values
    }

    pub fn frame_hop_seconds(&self) -> f64 {
        frame_hop_seconds()
    }
}
