//! Shared annotation types.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::CLIP_SECONDS;
use crate::error::{Error, Result};
use crate::N_CLASSES;

/// Names of the ten parametric event classes.
pub const CLASS_NAMES: [&str; N_CLASSES] = [
    "beep", "whistle", "siren", "chirp_up", "chirp_down", "hiss", "rumble", "buzz", "hum", "chime",
];

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&c| c == name)
}

/// Recording condition of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Synthetic,
    Real,
}

impl Domain {
    /// Target of the domain discriminator: synthetic 0, real 1.
    pub fn target(self) -> f32 {
        match self {
            Domain::Synthetic => 0.0,
            Domain::Real => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Synthetic => "synthetic",
            Domain::Real => "real",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Domain::Synthetic),
            "real" => Ok(Domain::Real),
            other => Err(Error::invalid(format!("unknown domain {other:?}"))),
        }
    }
}

/// A sound event with onset and offset in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventLabel {
    pub class_id: usize,
    pub onset: f64,
    pub offset: f64,
}

impl EventLabel {
    pub fn new(class_id: usize, onset: f64, offset: f64) -> Result<Self> {
        if class_id >= N_CLASSES {
            return Err(Error::invalid(format!("class id {class_id} out of range")));
        }
        if !(0.0 <= onset && onset < offset && offset <= CLIP_SECONDS) {
            return Err(Error::invalid(format!(
                "event bounds ({onset}, {offset}) must satisfy 0 <= onset < offset <= {CLIP_SECONDS}"
            )));
        }
        Ok(Self {
            class_id,
            onset,
            offset,
        })
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

/// Annotation granularity of a clip.
#[derive(Debug, Clone, PartialEq)]
pub enum ClipLabels {
    Strong(Vec<EventLabel>),
    /// Sorted, de-duplicated class ids.
    Weak(Vec<usize>),
    Unlabeled,
}

impl ClipLabels {
    /// Clip-level class set implied by the labels, if any.
    pub fn classes(&self) -> Option<Vec<usize>> {
        match self {
            ClipLabels::Strong(ev) => {
                let mut c: Vec<usize> = ev.iter().map(|e| e.class_id).collect();
                c.sort_unstable();
                c.dedup();
                Some(c)
            }
            ClipLabels::Weak(c) => Some(c.clone()),
            ClipLabels::Unlabeled => None,
        }
    }
}

/// A clip's identity, domain and annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipAnnotation {
    pub clip_id: String,
    pub domain: Domain,
    pub labels: ClipLabels,
    /// Weak labels assigned by the tagger rather than by a human.
    pub pseudo: bool,
}


/// Raw log-mel features of a set of clips with their annotations.
#[derive(Debug, Clone, Default)]
pub struct FeatureSet {
    pub clips: Vec<ClipAnnotation>,
    /// `[N_FRAMES × N_MELS]` un-normalised log-mel spectrograms.
    pub features: Vec<ndarray::Array2<f32>>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn push(&mut self, clip: ClipAnnotation, features: ndarray::Array2<f32>) {
        self.clips.push(clip);
        self.features.push(features);
    }

    /// Concatenation of several sets.
    pub fn concat<'a>(sets: impl IntoIterator<Item = &'a FeatureSet>) -> FeatureSet {
        let mut out = FeatureSet::default();
        for s in sets {
            out.clips.extend(s.clips.iter().cloned());
            out.features.extend(s.features.iter().cloned());
        }
        out
    }

    /// Clips at the given indices.
    pub fn subset(&self, idx: &[usize]) -> FeatureSet {
        FeatureSet {
            clips: idx.iter().map(|&i| self.clips[i].clone()).collect(),
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
        }
    }

    /// Stacks the selected clips into a normalised `[B, T, F]` batch.
    pub fn normalized_batch(&self, idx: &[usize], norm: &crate::dsp::NormStats) -> Result<ndarray::Array3<f32>> {
        let (t, f) = self.features.first().map(|a| a.dim()).unwrap_or((0, 0));
        let mut out = ndarray::Array3::zeros((idx.len(), t, f));
        for (b, &i) in idx.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), b)
                .assign(&norm.normalize_array(&self.features[i])?);
        }
        Ok(out)
    }
}
