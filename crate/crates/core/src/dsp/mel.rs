use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{
    log_floor, AudioClip, LogMelSpectrogram, CLIP_SAMPLES, F_MAX, HOP, N_FFT, N_FRAMES, N_MELS,
    POWER_FLOOR, SAMPLE_RATE,
};
use crate::error::{Error, Result};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters stored sparsely as `(first_bin, weights)`.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    filters: Vec<(usize, Vec<f64>)>,
    centers: Vec<f64>,
}

impl MelFilterbank {
    /// Area-normalised triangles equally spaced on the HTK mel scale between
    /// `f_min` and `f_max`.
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: f64, f_min: f64, f_max: f64) -> Self {
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate / n_fft as f64;
        let mut filters = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (hi - lo);
            let mut first = None;
            let mut w = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let v = ((f - lo) / (c - lo)).min((hi - f) / (hi - c)).max(0.0) * norm;
                if v > 0.0 {
                    first.get_or_insert(k);
                    w.push(v);
                } else if first.is_some() {
                    break;
                }
            }
            filters.push((first.unwrap_or(0), w));
        }
        Self {
            filters,
            centers: edges[1..=n_mels].to_vec(),
        }
    }

    pub fn center_frequencies(&self) -> &[f64] {
        &self.centers
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for ((start, w), o) in self.filters.iter().zip(out.iter_mut()) {
            *o = w.iter().zip(&power[*start..]).map(|(a, b)| a * b).sum();
        }
    }
}

/// Reusable log-mel front end (window, FFT plan and filterbank).
pub struct LogMelExtractor {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    bank: MelFilterbank,
}

impl Default for LogMelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMelExtractor {
    pub fn new() -> Self {
        // Periodic Hann.
        let window = (0..N_FFT)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / N_FFT as f64).cos())
            .collect();
        Self {
            window,
            fft: FftPlanner::new().plan_fft_forward(N_FFT),
            bank: MelFilterbank::new(N_MELS, N_FFT, SAMPLE_RATE as f64, 0.0, F_MAX),
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// Centred STFT frames of a 10 s clip: `1 + CLIP_SAMPLES / HOP` = 628.
    pub fn n_stft_frames() -> usize {
        1 + CLIP_SAMPLES / HOP
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<LogMelSpectrogram> {
        if clip.sample_rate != SAMPLE_RATE {
            return Err(Error::invalid(format!(
                "log-mel expects {SAMPLE_RATE} Hz audio, got {}",
                clip.sample_rate
            )));
        }
        let half = N_FFT / 2;
        let mut padded = vec![0.0f64; CLIP_SAMPLES + N_FFT];
        for (d, &s) in padded[half..half + CLIP_SAMPLES].iter_mut().zip(&clip.samples) {
            *d = s as f64;
        }
        let n_stft = Self::n_stft_frames();
        let offset = (N_FRAMES.saturating_sub(n_stft)) / 2;
        let skip = n_stft.saturating_sub(N_FRAMES) / 2;
        let mut out = Array2::from_elem((N_FRAMES, N_MELS), log_floor());
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; half + 1];
        let mut mel = vec![0.0; N_MELS];
        for t in skip..n_stft.min(skip + N_FRAMES) {
            let frame = &padded[t * HOP..t * HOP + N_FFT];
            for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(x * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            self.bank.apply(&power, &mut mel);
            let mut row = out.row_mut(t - skip + offset);
            for (o, &e) in row.iter_mut().zip(&mel) {
                *o = e.max(POWER_FLOOR).ln() as f32;
            }
        }
        LogMelSpectrogram::new(out)
    }
}

/// Pads or crops the clip to 10 s and extracts its log-mel spectrogram.
pub fn log_mel(clip: &AudioClip) -> Result<LogMelSpectrogram> {
    let clip = clip.clone().fit_to_clip_length();
    LogMelExtractor::new().compute(&clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(hz: f64) -> AudioClip {
        let s = (0..CLIP_SAMPLES)
            .map(|i| (0.5 * (2.0 * PI * hz * i as f64 / SAMPLE_RATE as f64).sin()) as f32)
            .collect();
        AudioClip::new(s, SAMPLE_RATE, "tone").unwrap()
    }

    #[test]
    fn silence_is_floor_everywhere() {
        let c = AudioClip::new(vec![0.0; CLIP_SAMPLES], SAMPLE_RATE, "z").unwrap();
        let m = log_mel(&c).unwrap();
        assert_eq!(m.values().dim(), (648, 128));
        assert!(m.values().iter().all(|&v| v == log_floor()));
    }

    #[test]
    fn short_clip_is_padded_to_shape() {
        let c = AudioClip::new(vec![0.1; 1234], SAMPLE_RATE, "s").unwrap();
        assert_eq!(log_mel(&c).unwrap().values().dim(), (648, 128));
    }

    #[test]
    fn tone_lands_in_nearest_filter() {
        // Independent centre computation: 130 equally spaced HTK mel points.
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let top = mel(8000.0);
        let nearest = (1..=128)
            .map(|i| inv(top * i as f64 / 129.0))
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        let m = log_mel(&tone(1000.0)).unwrap();
        // Frames 12..636 lie fully inside the signal.
        for t in 12..636 {
            let row = m.values().row(t);
            let arg = (0..128).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, nearest, "frame {t}");
        }
    }

    #[test]
    fn bit_identical_on_repeat() {
        let c = tone(523.0);
        assert_eq!(log_mel(&c).unwrap(), log_mel(&c).unwrap());
    }

    #[test]
    fn wrong_rate_is_rejected() {
        let c = AudioClip::new(vec![0.0; 100], 8_000, "r").unwrap();
        assert!(LogMelExtractor::new().compute(&c).is_err());
    }
}
