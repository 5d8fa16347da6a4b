//! Clip tagger and weak pseudo-labelling of unlabeled clips.

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::BCE_EPS;
use super::TrainingConfig;
use crate::autograd::Graph;
use crate::data::{ClipLabels, FeatureSet};
use crate::dsp::NormStats;
use crate::error::{Error, Result};
use crate::eval::class_vector;
use crate::nn::{Adam, Mode, ModelConfig, SedModel};

/// Clip-level class probabilities `[N, C]` for a set of clips.
pub trait ClipTagger {
    fn clip_probs(&self, set: &FeatureSet) -> Result<Array2<f32>>;
}

/// A detector used through its clip-level head.
pub struct ModelTagger {
    pub model: SedModel<f32>,
    pub norm: NormStats,
}

impl ClipTagger for ModelTagger {
    fn clip_probs(&self, set: &FeatureSet) -> Result<Array2<f32>> {
        let mut out = Array2::zeros((set.len(), self.model.config().n_classes));
        let idx: Vec<usize> = (0..set.len()).collect();
        for chunk in idx.chunks(16) {
            let x = set.normalized_batch(chunk, &self.norm)?;
            let p = self.model.predict(&x, 16)?.clip_probs;
            for (r, &i) in chunk.iter().enumerate() {
                out.row_mut(i).assign(&p.row(r));
            }
        }
        Ok(out)
    }
}

/// Gives each clip the classes whose tagger probability reaches
/// `threshold`. Clips with an empty set stay unlabeled; labelled ones are
/// marked as pseudo.
pub fn pseudo_label(tagger: &dyn ClipTagger, set: &FeatureSet, threshold: f64) -> Result<FeatureSet> {
    let probs = tagger.clip_probs(set)?;
    if probs.nrows() != set.len() {
        return Err(Error::invalid("tagger returned a different number of clips"));
    }
    let mut out = set.clone();
    for (clip, p) in out.clips.iter_mut().zip(probs.outer_iter()) {
        let classes: Vec<usize> = p
            .iter()
            .enumerate()
            .filter(|(_, &v)| v as f64 >= threshold)
            .map(|(c, _)| c)
            .collect();
        if classes.is_empty() {
            clip.labels = ClipLabels::Unlabeled;
            clip.pseudo = false;
        } else {
            clip.labels = ClipLabels::Weak(classes);
            clip.pseudo = true;
        }
    }
    Ok(out)
}

/// Trains a plain CRNN (no feature pyramid) on clip-level labels of the
/// strong and weak clips.
pub fn train_tagger(cfg: &TrainingConfig, strong: &FeatureSet, weak: &FeatureSet, norm: &NormStats) -> Result<ModelTagger> {
    cfg.validate()?;
    let mc = ModelConfig::preset(&cfg.preset)?.without_pyramid();
    let mut model = SedModel::<f32>::new(mc.clone(), super::derive_seed(cfg.seed, 7))?;
    let mut rng = ChaCha8Rng::seed_from_u64(super::derive_seed(cfg.seed, 8));
    let labelled: Vec<(&FeatureSet, usize, Vec<f32>)> = [strong, weak]
        .into_iter()
        .flat_map(|s| {
            s.clips.iter().enumerate().filter_map(move |(i, c)| {
                c.labels.classes().map(|cl| (s, i, class_vector(&cl, mc.n_classes)))
            })
        })
        .collect();
    if labelled.is_empty() {
        return Err(Error::invalid("tagger needs labelled clips"));
    }
    let b = (cfg.batch_composition[0] + cfg.batch_composition[1]).max(2);
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        let mut rows = Vec::with_capacity(b);
        while rows.len() < b {
            if order.is_empty() {
                order = (0..labelled.len()).collect();
                order.shuffle(&mut rng);
            }
            rows.push(order.pop().unwrap());
        }
        let mut x = Array3::zeros((b, mc.n_frames, mc.n_mels));
        let mut y = Array2::zeros((b, mc.n_classes));
        for (r, &k) in rows.iter().enumerate() {
            let (set, i, v) = &labelled[k];
            x.index_axis_mut(Axis(0), r).assign(&norm.normalize_array(&set.features[*i])?);
            y.row_mut(r).assign(&ndarray::ArrayView1::from(v.as_slice()));
        }
        let g = Graph::<f32>::new();
        let f = model.forward(&g, &x.into_dyn(), Mode::Train)?;
        let w = ndarray::ArrayD::ones(ndarray::IxDyn(&[b, mc.n_classes]));
        let loss = g.bce(f.clip, &y.into_dyn(), &w, BCE_EPS);
        let l = g.scalar(loss);
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("tagger loss at step {step}")));
        }
        let grads = g.backward(loss).into_params();
        adam.step(&mut model.store, &grads, cfg.lr, |_| true)?;
        model.update_running_stats(&f.bn_stats);
    }
    Ok(ModelTagger {
        model,
        norm: norm.clone(),
    })
}
