//! Stage-2 adversarial domain adaptation through a gradient reversal layer.
//!
//! The discriminator reads the recurrent embedding through the reversal
//! layer, so a single backward pass of `L_s + L_w + λ_d·L_d` descends the
//! domain loss in the discriminator and ascends it in the feature extractor.

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::autograd::{Graph, Var};
use crate::data::{Domain, FeatureSet};
use crate::dsp::NormStats;
use crate::error::{Error, Result};
use crate::nn::{Adam, Checkpoint, Mode, ParamGroup, SedModel};
use crate::train::{
    self, Component, LossBreakdown, MetricLog, Objective, Outputs, RunOutput, Targets, TrainData, TrainOutcome,
    Trainer, TrainingConfig, BCE_EPS,
};

/// Frame-level domain loss of one batch.
#[derive(Debug, Clone, Copy)]
pub struct DomainTerm {
    /// Mean BCE of the domain probabilities against the clip domain
    /// broadcast over frames.
    pub loss: Var,
    /// Balanced frame accuracy of the discriminator.
    pub accuracy: f64,
    /// Only one domain was present.
    pub degenerate: bool,
}

fn domain_targets(domains: &[Domain], frames: usize) -> Array2<f32> {
    Array2::from_shape_fn((domains.len(), frames), |(b, _)| domains[b].target())
}

/// Mean per-domain accuracy of thresholding `probs` at 0.5. A domain that
/// is absent is left out of the mean.
pub fn balanced_accuracy(probs: &Array2<f32>, domains: &[Domain]) -> f64 {
    let mut hits = [0usize; 2];
    let mut counts = [0usize; 2];
    for (row, d) in probs.outer_iter().zip(domains) {
        let k = *d as usize;
        for &p in row {
            counts[k] += 1;
            if (p > 0.5) == (*d == Domain::Real) {
                hits[k] += 1;
            }
        }
    }
    let accs: Vec<f64> = (0..2)
        .filter(|&k| counts[k] > 0)
        .map(|k| hits[k] as f64 / counts[k] as f64)
        .collect();
    if accs.is_empty() {
        return 0.0;
    }
    accs.iter().sum::<f64>() / accs.len() as f64
}

/// Domain BCE of discriminator outputs `[B, T]`.
pub fn domain_term(g: &Graph<f32>, domain_probs: Var, domains: &[Domain], lambda_d: f64) -> Result<DomainTerm> {
    let sh = g.shape(domain_probs);
    if sh.len() != 2 || sh[0] != domains.len() {
        return Err(Error::invalid(format!(
            "domain probabilities of shape {sh:?} for {} clips",
            domains.len()
        )));
    }
    if !(lambda_d >= 0.0) {
        return Err(Error::invalid(format!("lambda_d {lambda_d} must be non-negative")));
    }
    let y = domain_targets(domains, sh[1]);
    let w = ArrayD::ones(IxDyn(&sh));
    let loss = g.bce(domain_probs, &y.into_dyn(), &w, BCE_EPS);
    let probs = g.value(domain_probs).view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
    let degenerate = domains.iter().all(|d| *d == domains[0]);
    if degenerate {
        log::warn!("domain batch holds only {} clips; domain loss is degenerate", domains[0]);
    }
    Ok(DomainTerm {
        loss,
        accuracy: balanced_accuracy(&probs, domains),
        degenerate,
    })
}

/// `L_s + L_w + λ_d·L_d`: supervised BCE terms plus the domain term. The
/// sign of the adversarial part is carried by the reversal layer inside
/// `domain_probs`, so every reported component is non-negative.
pub fn ada_objective(
    g: &Graph<f32>,
    student: &Outputs<f32>,
    domain_probs: Var,
    targets: &Targets<f32>,
    domains: &[Domain],
    lambda_d: f64,
) -> Result<(Objective, DomainTerm)> {
    let mut o = Objective::new(0.0, lambda_d);
    let clip_w = targets.clip_weight.clone().into_dyn();
    let frame_w = targets.frame_weight.clone().into_dyn();
    o.push(Component::WBce, g.bce(student.clip, &targets.clip.clone().into_dyn(), &clip_w, BCE_EPS));
    o.push(Component::SBce, g.bce(student.frame, &targets.frame.clone().into_dyn(), &frame_w, BCE_EPS));
    let d = domain_term(g, domain_probs, domains, lambda_d)?;
    o.push(Component::Domain, d.loss);
    Ok((o, d))
}

/// One simultaneous update of every group that passes `trainable`: the
/// feature extractor and label heads descend the supervised loss while
/// receiving the reversed domain gradient, the discriminator descends the
/// domain loss.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_step(
    model: &mut SedModel<f32>,
    adam: &mut Adam<f32>,
    x: &Array3<f32>,
    targets: &Targets<f32>,
    domains: &[Domain],
    lambda_d: f64,
    lr: f64,
    trainable: impl Fn(ParamGroup) -> bool,
) -> Result<LossBreakdown> {
    let g = Graph::<f32>::new();
    let f = model.forward(&g, &x.clone().into_dyn(), Mode::Train)?;
    let probs = model.discriminate(&g, f.embedding, 1.0);
    let out = Outputs {
        clip: f.clip,
        frame: f.frame,
        embedding: Some(f.embedding),
        bn_stats: f.bn_stats,
    };
    let (obj, _) = ada_objective(&g, &out, probs, targets, domains, lambda_d)?;
    let b = obj.breakdown(&g);
    if let Some(name) = b.first_invalid() {
        return Err(Error::NonFinite(format!("loss component {name}")));
    }
    let total = obj.total(&g);
    let grads = g.backward(total).into_params();
    adam.step(&mut model.store, &grads, lr, trainable)?;
    model.update_running_stats(&out.bn_stats);
    Ok(b)
}

/// Balanced frame-level discriminator accuracy on `set` (evaluation mode).
pub fn domain_accuracy(model: &SedModel<f32>, norm: &NormStats, set: &FeatureSet) -> Result<f64> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let t = model.config().n_out_frames();
    let mut probs = Array2::zeros((set.len(), t));
    for chunk in idx.chunks(16) {
        let x = set.normalized_batch(chunk, norm)?;
        let g = Graph::<f32>::inference();
        let f = model.forward(&g, &x.into_dyn(), Mode::Eval)?;
        let p = model.discriminate(&g, f.embedding, 1.0);
        let v = g.value(p);
        for (r, &i) in chunk.iter().enumerate() {
            for k in 0..t {
                probs[[i, k]] = v[[r, k]];
            }
        }
    }
    let domains: Vec<Domain> = set.clips.iter().map(|c| c.domain).collect();
    Ok(balanced_accuracy(&probs, &domains))
}

/// Replaces every discriminator parameter with a fresh initialisation.
pub fn reinit_discriminator(model: &mut SedModel<f32>, seed: u64) -> Result<()> {
    let fresh = SedModel::<f32>::new(model.config().clone(), seed)?;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        if model.store.group(id) == ParamGroup::Domain {
            *model.store.get_mut(id) = fresh.store.get(id).clone();
        }
    }
    Ok(())
}

/// `lambda_d` at stage-2 step `i` (0-based): linear rise over the warmup
/// fraction, constant afterwards.
pub fn lambda_schedule(cfg: &TrainingConfig, i: u64, steps: u64) -> f64 {
    let warm = (cfg.lambda_d_warmup * steps as f64).ceil() as u64;
    if warm == 0 {
        return cfg.lambda_d;
    }
    cfg.lambda_d * ((i + 1) as f64 / warm as f64).min(1.0)
}

/// Stage 2: continues the stage-1 objective from `stage1` and adds the
/// adversarial domain term, with a freshly initialised discriminator.
pub fn train_stage2(
    stage1: &Checkpoint,
    cfg: &TrainingConfig,
    data: &TrainData,
    out: &RunOutput,
) -> Result<TrainOutcome> {
    let mut ckpt = stage1.clone();
    reinit_discriminator(&mut ckpt.student, train::derive_seed(cfg.seed, 3))?;
    reinit_discriminator(&mut ckpt.teacher, train::derive_seed(cfg.seed, 3))?;
    let mut trainer = Trainer::resume(cfg.clone(), data, &ckpt, 2)?;
    let steps = cfg.stage2_len();
    let monitor = data.domain_monitor_set();
    let mut log = match &out.log {
        Some(p) => MetricLog::create(p)?,
        None => MetricLog::in_memory(),
    };
    train::run_loop(
        &mut trainer,
        steps,
        2,
        |i| Some(lambda_schedule(cfg, i, steps)),
        monitor.as_ref(),
        out,
        &mut log,
    )?;
    let checkpoint = trainer.checkpoint(2);
    if let Some(dir) = &out.checkpoint_dir {
        checkpoint.save(&dir.join("stage2_final.safetensors"))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        records: log.records,
    })
}
