//! Event decoding and scoring, silhouette analysis and 2-D projection.

pub mod events;
pub mod f1;
pub mod silhouette;
pub mod tsne;

use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

pub use events::{class_vector, decode_events, median_filter, rasterize, FrameTiming};
pub use f1::{event_f1, events_match, ClassScores, Collars, F1Report};
pub use silhouette::{pairwise_distances, silhouette, Silhouette};
pub use tsne::{max_perplexity, tsne, TsneConfig};

use crate::data::{ClipLabels, Domain, EventLabel, FeatureSet};
use crate::dsp::NormStats;
use crate::error::{Error, Result};
use crate::nn::{Mode, SedModel};

/// Post-processing and scoring settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub threshold: f64,
    pub median_window: usize,
    pub collars: Collars,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            median_window: 7,
            collars: Collars::default(),
        }
    }
}

/// Per-clip embedding vector with its domain tag.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub clip_id: String,
    pub vector: Vec<f64>,
    pub domain: Domain,
}

const PREDICT_BATCH: usize = 16;

/// Frame-level probabilities `[N, T, C]` and clip embeddings `[N, D]`.
pub fn predict_set(
    model: &SedModel<f32>,
    norm: &NormStats,
    set: &FeatureSet,
) -> Result<(ndarray::Array3<f32>, Array2<f64>)> {
    let mut frames = Vec::new();
    let mut embs = Vec::new();
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(PREDICT_BATCH) {
        let x = set.normalized_batch(chunk, norm)?;
        let out = model.predict_mode(&x, PREDICT_BATCH, Mode::Eval)?;
        embs.push(out.clip_embedding().mapv(|v| v as f64));
        frames.push(out.frame_probs);
    }
    let t = model.config().n_out_frames();
    let c = model.config().n_classes;
    if frames.is_empty() {
        return Ok((ndarray::Array3::zeros((0, t, c)), Array2::zeros((0, model.config().d_embed()))));
    }
    let fv: Vec<_> = frames.iter().map(|a| a.view()).collect();
    let ev: Vec<_> = embs.iter().map(|a| a.view()).collect();
    Ok((
        ndarray::concatenate(Axis(0), &fv).unwrap(),
        ndarray::concatenate(Axis(0), &ev).unwrap(),
    ))
}

/// Event-based F1 of `model` on the strongly labelled clips of `set`.
pub fn evaluate_f1(model: &SedModel<f32>, norm: &NormStats, set: &FeatureSet, cfg: &DecodeConfig) -> Result<F1Report> {
    let strong: Vec<usize> = (0..set.len())
        .filter(|&i| matches!(set.clips[i].labels, ClipLabels::Strong(_)))
        .collect();
    if strong.is_empty() {
        return Err(Error::invalid("no strongly labelled clips to score"));
    }
    let sub = set.subset(&strong);
    let (frames, _) = predict_set(model, norm, &sub)?;
    let timing = FrameTiming::for_stride(model.config().time_stride());
    let preds: Vec<Vec<EventLabel>> = frames
        .outer_iter()
        .map(|p| decode_events(&p.to_owned(), cfg.threshold, cfg.median_window, timing))
        .collect();
    let refs: Vec<Vec<EventLabel>> = sub
        .clips
        .iter()
        .map(|c| match &c.labels {
            ClipLabels::Strong(e) => e.clone(),
            _ => unreachable!(),
        })
        .collect();
    Ok(event_f1(&preds, &refs, cfg.collars))
}

/// Clip embeddings (time-mean of the recurrent output) of every clip.
pub fn embed(model: &SedModel<f32>, norm: &NormStats, set: &FeatureSet) -> Result<Vec<EmbeddingRecord>> {
    let (_, e) = predict_set(model, norm, set)?;
    Ok(set
        .clips
        .iter()
        .zip(e.outer_iter())
        .map(|(c, v)| EmbeddingRecord {
            clip_id: c.clip_id.clone(),
            vector: v.to_vec(),
            domain: c.domain,
        })
        .collect())
}

fn domain_labels(records: &[EmbeddingRecord]) -> Vec<usize> {
    records.iter().map(|r| r.domain as usize).collect()
}

fn stack(records: &[EmbeddingRecord]) -> Result<Array2<f64>> {
    let d = records.first().map_or(0, |r| r.vector.len());
    if records.iter().any(|r| r.vector.len() != d) {
        return Err(Error::invalid("embedding records differ in dimension"));
    }
    Ok(Array2::from_shape_fn((records.len(), d), |(i, j)| records[i].vector[j]))
}

/// Silhouette over domain tags, on the raw vectors or on a t-SNE projection.
pub fn silhouette_score(records: &[EmbeddingRecord], projection: Option<&TsneConfig>) -> Result<Silhouette> {
    let x = stack(records)?;
    let labels = domain_labels(records);
    match projection {
        None => silhouette(&x, &labels),
        Some(cfg) => silhouette(&tsne(&x, cfg)?, &labels),
    }
}

/// Projected coordinates of one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub clip_id: String,
    pub domain: Domain,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub silhouette_projection: f64,
    pub silhouette_raw: f64,
    pub perplexity: f64,
    pub n_points: usize,
    pub points: Vec<ProjectedPoint>,
}

impl GapReport {
    /// Tab-separated coordinates for plotting.
    pub fn coordinates_tsv(&self) -> String {
        let mut s = String::from("clip_id\tdomain\tx\ty\n");
        for p in &self.points {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", p.clip_id, p.domain, p.x, p.y);
        }
        s
    }
}

/// Embeds every clip, projects the embeddings to 2-D and measures how well
/// the two domains separate, both in the projection and in the raw space.
///
/// The perplexity is lowered to the largest feasible value for small sets.
pub fn domain_gap_report(
    model: &SedModel<f32>,
    norm: &NormStats,
    set: &FeatureSet,
    tsne_cfg: &TsneConfig,
) -> Result<GapReport> {
    let records = embed(model, norm, set)?;
    gap_report_from_records(&records, tsne_cfg)
}

pub fn gap_report_from_records(records: &[EmbeddingRecord], tsne_cfg: &TsneConfig) -> Result<GapReport> {
    let n = records.len();
    let has = |d: Domain| records.iter().any(|r| r.domain == d);
    if !has(Domain::Synthetic) || !has(Domain::Real) {
        return Err(Error::invalid("domain gap analysis needs clips from both domains"));
    }
    let mut cfg = *tsne_cfg;
    cfg.perplexity = cfg.perplexity.min(max_perplexity(n));
    let x = stack(records)?;
    let labels = domain_labels(records);
    let y = tsne(&x, &cfg)?;
    let raw = silhouette(&x, &labels)?.score;
    let proj = silhouette(&y, &labels)?.score;
    Ok(GapReport {
        silhouette_projection: proj,
        silhouette_raw: raw,
        perplexity: cfg.perplexity,
        n_points: n,
        points: records
            .iter()
            .zip(y.outer_iter())
            .map(|(r, p)| ProjectedPoint {
                clip_id: r.clip_id.clone(),
                domain: r.domain,
                x: p[0],
                y: p[1],
            })
            .collect(),
    })
}
