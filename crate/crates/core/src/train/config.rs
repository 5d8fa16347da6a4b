use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::ShiftRange;
use crate::error::{Error, Result};

/// Consistency strategy layered on the mean-teacher base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    None,
    Ict,
    Sct,
    Scmt,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::None, Strategy::Ict, Strategy::Sct, Strategy::Scmt];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Ict => "ict",
            Strategy::Sct => "sct",
            Strategy::Scmt => "scmt",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?} (none, ict, sct, scmt)")))
    }
}

/// Every knob of a training run. Serialised as flat TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Model preset name (`tiny` or `default`).
    pub preset: String,
    pub strategy: Strategy,
    pub seed: u64,
    /// Optimiser steps of stage 1.
    pub steps: u64,
    /// Optimiser steps of stage 2; 0 means half of `steps`.
    pub stage2_steps: u64,
    /// Ramp-up length in steps.
    #[serde(rename = "T")]
    pub ramp_steps: u64,
    pub ema_alpha: f64,
    pub lambda_d: f64,
    /// Fraction of stage-2 steps over which `lambda_d` rises linearly from 0.
    pub lambda_d_warmup: f64,
    /// Keep updating the teacher during stage 2.
    pub stage2_ema: bool,
    pub noise_sigma: f64,
    pub beta_params: [f64; 2],
    /// Clips per batch drawn from (strong synthetic, weak real, unlabeled real).
    pub batch_composition: [usize; 3],
    pub lr: f64,
    pub time_shift_bound_s: f64,
    pub freq_shift_bound_bins: f64,
    pub pseudo_threshold: f64,
    /// Validation F1 every this many steps (0: only at the end).
    pub eval_every: u64,
    /// Checkpoint every this many steps (0: only the final one).
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            preset: "default".into(),
            strategy: Strategy::Scmt,
            seed: 0,
            steps: 20_000,
            stage2_steps: 0,
            ramp_steps: 10_000,
            ema_alpha: 0.999,
            lambda_d: 0.1,
            lambda_d_warmup: 0.1,
            stage2_ema: true,
            noise_sigma: 0.5,
            beta_params: [0.2, 0.2],
            batch_composition: [8, 8, 16],
            lr: 1e-3,
            time_shift_bound_s: 2.0,
            freq_shift_bound_bins: 4.0,
            pseudo_threshold: 0.5,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainingConfig {
    /// Settings for the desk-scale preset.
    pub fn tiny() -> Self {
        Self {
            preset: "tiny".into(),
            steps: 2_000,
            ramp_steps: 1_000,
            batch_composition: [4, 4, 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.ramp_steps == 0 {
            return bad("T must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return bad(format!("ema_alpha {} outside [0, 1)", self.ema_alpha));
        }
        if !(self.lambda_d >= 0.0 && self.lambda_d.is_finite()) {
            return bad(format!("lambda_d {} must be non-negative", self.lambda_d));
        }
        if !(0.0..=1.0).contains(&self.lambda_d_warmup) {
            return bad(format!("lambda_d_warmup {} outside [0, 1]", self.lambda_d_warmup));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be non-negative", self.noise_sigma));
        }
        if self.beta_params.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return bad(format!("beta_params {:?} must be positive", self.beta_params));
        }
        if self.batch_composition[0] + self.batch_composition[1] == 0 {
            return bad("batch_composition needs at least one labelled source".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.time_shift_bound_s < 0.0 || self.freq_shift_bound_bins < 0.0 {
            return bad("shift bounds must be non-negative".into());
        }
        crate::nn::ModelConfig::preset(&self.preset).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn stage2_len(&self) -> u64 {
        if self.stage2_steps > 0 {
            self.stage2_steps
        } else {
            self.steps / 2
        }
    }

    /// Time shifts are multiples of `stride` input frames.
    pub fn shift_range(&self, stride: usize) -> ShiftRange {
        ShiftRange {
            time_bound_s: self.time_shift_bound_s,
            freq_bound_bins: self.freq_shift_bound_bins,
            time_quantum: stride,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&crate::io::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_toml().as_bytes())
    }
}
