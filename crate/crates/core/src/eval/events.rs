use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::EventLabel;
use crate::dsp::{frame_hop_seconds, CLIP_SECONDS, N_FRAMES};

/// Mapping from output frame index to time: frame `i` spans
/// `[origin + i·period, origin + (i + 1)·period)` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub period: f64,
    pub origin: f64,
}

impl FrameTiming {
    pub fn uniform(period: f64) -> Self {
        Self {
            period,
            origin: 0.0,
        }
    }

    /// Timing of a model whose output frames each pool `stride` spectrogram
    /// frames. The spectrogram carries a symmetric pad, so its first frames
    /// precede the start of the clip.
    pub fn for_stride(stride: usize) -> Self {
        let hop = frame_hop_seconds();
        let pad = (N_FRAMES - crate::dsp::LogMelExtractor::n_stft_frames()) / 2;
        Self {
            period: stride as f64 * hop,
            origin: -(pad as f64) * hop,
        }
    }

    pub fn start(&self, frame: usize) -> f64 {
        self.origin + frame as f64 * self.period
    }

    pub fn centre(&self, frame: usize) -> f64 {
        self.origin + (frame as f64 + 0.5) * self.period
    }
}

/// Running median over a binary sequence with an odd window; the ends are
/// padded by repeating the edge values.
pub fn median_filter(x: &[bool], window: usize) -> Vec<bool> {
    let w = window.max(1) | 1;
    let h = w / 2;
    let n = x.len();
    if n == 0 || w == 1 {
        return x.to_vec();
    }
    let at = |i: isize| x[i.clamp(0, n as isize - 1) as usize];
    (0..n as isize)
        .map(|i| (i - h as isize..=i + h as isize).filter(|&j| at(j)).count() > h)
        .collect()
}

/// Binarises `[frames × classes]` probabilities at `threshold`, median
/// filters each class and turns runs of active frames into events.
pub fn decode_events(
    frame_probs: &Array2<f32>,
    threshold: f64,
    median_window: usize,
    timing: FrameTiming,
) -> Vec<EventLabel> {
    let (n, c) = frame_probs.dim();
    let mut out = Vec::new();
    for class in 0..c {
        let active: Vec<bool> = (0..n)
            .map(|t| frame_probs[[t, class]] as f64 >= threshold)
            .collect();
        let smooth = median_filter(&active, median_window);
        let mut t = 0;
        while t < n {
            if !smooth[t] {
                t += 1;
                continue;
            }
            let start = t;
            while t < n && smooth[t] {
                t += 1;
            }
            let onset = timing.start(start).clamp(0.0, CLIP_SECONDS);
            let offset = timing.start(t).clamp(0.0, CLIP_SECONDS);
            if offset > onset {
                out.push(EventLabel {
                    class_id: class,
                    onset,
                    offset,
                });
            }
        }
    }
    out.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.class_id.cmp(&b.class_id)));
    out
}

/// `[frames × classes]` 0/1 targets: a frame is active for an event when
/// its centre lies inside `[onset, offset)`.
pub fn rasterize(events: &[EventLabel], n_frames: usize, n_classes: usize, timing: FrameTiming) -> Array2<f32> {
    let mut y = Array2::zeros((n_frames, n_classes));
    for e in events {
        for t in 0..n_frames {
            let c = timing.centre(t);
            if c >= e.onset && c < e.offset {
                y[[t, e.class_id]] = 1.0;
            }
        }
    }
    y
}

/// Clip-level 0/1 targets for a set of class ids.
pub fn class_vector(classes: &[usize], n_classes: usize) -> Vec<f32> {
    let mut v = vec![0.0; n_classes];
    for &c in classes {
        v[c] = 1.0;
    }
    v
}
