use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};

use super::{LogMelSpectrogram, N_MELS};
use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};

/// Smallest standard deviation kept, so constant bins normalise to zero.
const MIN_STD: f32 = 1e-6;

/// Per-mel-bin mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Statistics over every frame of every spectrogram.
    pub fn compute<'a>(specs: impl IntoIterator<Item = &'a Array2<f32>>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for s in specs {
            if sum.is_empty() {
                sum = vec![0.0; s.ncols()];
                sq = vec![0.0; s.ncols()];
            } else if s.ncols() != sum.len() {
                return Err(Error::invalid("spectrograms disagree on bin count"));
            }
            for row in s.axis_iter(Axis(0)) {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v as f64;
                    sq[j] += v as f64 * v as f64;
                }
            }
            n += s.nrows();
        }
        if n == 0 {
            return Err(Error::invalid("no frames to compute statistics from"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n as f64 - m * m).max(0.0).sqrt() as f32).max(MIN_STD))
            .collect();
        Ok(Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std,
        })
    }

    fn check(&self, bins: usize) -> Result<()> {
        if self.mean.len() != bins || self.std.len() != bins {
            return Err(Error::invalid(format!(
                "stats have {} bins, spectrogram has {bins}",
                self.mean.len()
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("standard deviations must be positive"));
        }
        Ok(())
    }

    pub fn normalize_array(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        self.check(x.ncols())?;
        let mut out = x.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn denormalize_array(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        self.check(x.ncols())?;
        let mut out = x.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("bin\tmean\tstd\n");
        for (i, (m, d)) in self.mean.iter().zip(&self.std).enumerate() {
            let _ = writeln!(s, "{i}\t{m}\t{d}");
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            what: "normalization stats",
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut out = Self {
            mean: Vec::new(),
            std: Vec::new(),
        };
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(parse_err(i + 1, "expected 3 columns".into()));
            }
            let num = |s: &str| s.parse::<f32>().map_err(|e| parse_err(i + 1, e.to_string()));
            out.mean.push(num(cols[1])?);
            out.std.push(num(cols[2])?);
        }
        if out.mean.len() != N_MELS {
            return Err(parse_err(0, format!("expected {N_MELS} bins, found {}", out.mean.len())));
        }
        out.check(N_MELS)?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_to_string(path)?, path)
    }
}

/// `(value − mean) / std` per mel bin.
pub fn normalize(spec: &LogMelSpectrogram, stats: &NormStats) -> Result<LogMelSpectrogram> {
    LogMelSpectrogram::new(stats.normalize_array(spec.values())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::N_FRAMES;
    use rand::{Rng, SeedableRng};

    fn random_spec(seed: u64) -> Array2<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((N_FRAMES, N_MELS), |(_, j)| {
            rng.random_range(-5.0..5.0) + j as f32 * 0.1
        })
    }

    #[test]
    fn identity_stats_leave_values_alone() {
        let x = random_spec(1);
        let s = NormStats::identity(N_MELS);
        assert_eq!(s.normalize_array(&x).unwrap(), x);
    }

    #[test]
    fn input_equal_to_mean_maps_to_zero() {
        let s = NormStats {
            mean: (0..N_MELS).map(|i| i as f32 * 0.3 - 7.0).collect(),
            std: vec![2.0; N_MELS],
        };
        let x = Array2::from_shape_fn((N_FRAMES, N_MELS), |(_, j)| s.mean[j]);
        assert!(s.normalize_array(&x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn self_normalised_means_vanish() {
        let x = random_spec(2);
        let s = NormStats::compute([&x]).unwrap();
        let y = s.normalize_array(&x).unwrap();
        for j in 0..N_MELS {
            let m: f64 = y.column(j).iter().map(|&v| v as f64).sum::<f64>() / N_FRAMES as f64;
            assert!(m.abs() < 1e-6, "bin {j}: {m}");
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let s = NormStats::identity(10);
        assert!(s.normalize_array(&random_spec(3)).is_err());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let s = NormStats::compute([&random_spec(4)]).unwrap();
        let back = NormStats::from_text(&s.to_text(), Path::new("x")).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn denormalize_inverts_normalize() {
        let x = random_spec(5);
        let s = NormStats::compute([&x]).unwrap();
        let back = s.denormalize_array(&s.normalize_array(&x).unwrap()).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
