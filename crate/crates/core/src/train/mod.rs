//! Stage-1 semi-supervised training: mean teacher with optional
//! interpolation consistency (ICT), shift consistency (SCT) or shift
//! consistency applied to student and teacher (SCMT), plus the clip tagger
//! used for weak pseudo-labels.

mod config;
pub mod losses;
mod pseudo;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{Strategy, TrainingConfig};
pub use losses::{
    ict_loss, mean_teacher_loss, ramp_up, scmt_loss, sct_loss, Component, Detector, LossBreakdown, ModelDetector,
    Objective, Outputs, ShiftedOutputs, TeacherOut, Targets, BCE_EPS,
};
pub use pseudo::{pseudo_label, train_tagger, ClipTagger, ModelTagger};

use crate::augment::{self, ShiftSpec};
use crate::autograd::Graph;
use crate::data::{ClipLabels, Domain, FeatureSet};
use crate::dsp::{log_floor, NormStats};
use crate::error::{Error, Result};
use crate::eval::{class_vector, evaluate_f1, rasterize, DecodeConfig, FrameTiming};
use crate::nn::{ema_update, Adam, Checkpoint, Mode, ModelConfig, ParamGroup, SedModel};

/// The three training pools plus an optional strongly labelled validation set.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    /// Strongly labelled synthetic clips.
    pub strong: FeatureSet,
    /// Weakly labelled real clips.
    pub weak: FeatureSet,
    /// Real clips without human labels; some may carry pseudo weak labels.
    pub unlabeled: FeatureSet,
    pub validation: Option<FeatureSet>,
}

impl TrainData {
    /// Normalisation statistics over every training clip.
    pub fn norm_stats(&self) -> Result<NormStats> {
        NormStats::compute(
            self.strong
                .features
                .iter()
                .chain(&self.weak.features)
                .chain(&self.unlabeled.features),
        )
    }

    /// Synthetic training clips plus the (real) validation clips, balanced,
    /// for domain diagnostics.
    pub fn domain_monitor_set(&self) -> Option<FeatureSet> {
        let val = self.validation.as_ref()?;
        let n = val.len().min(self.strong.len());
        if n == 0 {
            return None;
        }
        let idx: Vec<usize> = (0..n).collect();
        Some(FeatureSet::concat([&self.strong.subset(&idx), &val.subset(&idx)]))
    }
}

/// One metric-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    /// Balanced frame-level discriminator accuracy on the batch (stage 2).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub domain_accuracy: Option<f64>,
    /// The batch held a single domain, so the domain loss was degenerate.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub degenerate_domain: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_f1: Option<f64>,
    /// Discriminator accuracy on held-out clips (stage 2).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub heldout_domain_accuracy: Option<f64>,
}

impl StepRecord {
    /// JSON line; stage-1 lines leave out the domain fields.
    pub fn to_json_line(&self) -> String {
        let mut v = serde_json::to_value(self).expect("record serialises");
        if self.stage == 1 {
            let m = v.as_object_mut().unwrap();
            m.remove("L_d");
            m.remove("lambda_d");
        }
        serde_json::to_string(&v).expect("record serialises")
    }
}

/// Line-delimited metric log. Records are kept in memory and, when a path
/// is given, appended to the file as they arrive.
pub struct MetricLog {
    writer: Option<BufWriter<File>>,
    path: Option<PathBuf>,
    pub records: Vec<StepRecord>,
}

impl MetricLog {
    pub fn in_memory() -> Self {
        Self {
            writer: None,
            path: None,
            records: Vec::new(),
        }
    }

    /// Starts a fresh log file at `path`.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            writer: Some(BufWriter::new(f)),
            path: Some(path.to_path_buf()),
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, r: StepRecord) -> Result<()> {
        if let (Some(w), Some(p)) = (self.writer.as_mut(), self.path.as_ref()) {
            writeln!(w, "{}", r.to_json_line()).map_err(|e| Error::io(p, e))?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let (Some(w), Some(p)) = (self.writer.as_mut(), self.path.as_ref()) {
            w.flush().map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

/// Where a run persists its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub log: Option<PathBuf>,
    /// Directory for periodic checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Result of a training stage.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<StepRecord>,
}

impl TrainOutcome {
    /// Last validation F1 in the log.
    pub fn final_val_f1(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_f1)
    }
}

/// Endless shuffled pass over `0..n`.
#[derive(Debug, Clone)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Strong,
    Weak,
    Unlabeled,
}

/// Per-clip supervision at the model's output rate.
#[derive(Debug, Clone)]
struct ClipTarget {
    clip: Option<Array1<f32>>,
    frame: Option<Array2<f32>>,
}

fn clip_target(labels: &ClipLabels, n_out: usize, n_classes: usize, timing: FrameTiming) -> ClipTarget {
    match labels {
        ClipLabels::Strong(ev) => ClipTarget {
            clip: None,
            frame: Some(rasterize(ev, n_out, n_classes, timing)),
        },
        ClipLabels::Weak(c) => ClipTarget {
            clip: Some(Array1::from(class_vector(c, n_classes))),
            frame: None,
        },
        ClipLabels::Unlabeled => ClipTarget { clip: None, frame: None },
    }
}

/// A drawn batch: raw features, targets, domains and the row ranges of the
/// three sources.
struct Batch {
    raw: Array3<f32>,
    targets: Targets<f32>,
    domains: Vec<Domain>,
    unlabeled_rows: std::ops::Range<usize>,
}

/// Mutable state of a training run.
pub struct Trainer<'a> {
    pub cfg: TrainingConfig,
    pub student: SedModel<f32>,
    pub teacher: SedModel<f32>,
    pub norm: NormStats,
    data: &'a TrainData,
    adam: Adam<f32>,
    rng: ChaCha8Rng,
    step: u64,
    cyclers: [Cycler; 3],
    // (source set, index) for each pool
    pools: [Vec<(Source, usize)>; 3],
    targets: [Vec<ClipTarget>; 3],
    decode: DecodeConfig,
}

fn set_of(data: &TrainData, s: Source) -> &FeatureSet {
    match s {
        Source::Strong => &data.strong,
        Source::Weak => &data.weak,
        Source::Unlabeled => &data.unlabeled,
    }
}

impl<'a> Trainer<'a> {
    /// A fresh run: student and teacher start from the same initialisation.
    pub fn new(cfg: TrainingConfig, data: &'a TrainData, norm: Option<NormStats>) -> Result<Self> {
        cfg.validate()?;
        let model_cfg = ModelConfig::preset(&cfg.preset)?;
        let student = SedModel::new(model_cfg, cfg.seed)?;
        let teacher = student.clone();
        let norm = match norm {
            Some(n) => n,
            None => data.norm_stats()?,
        };
        let seed = cfg_rng_seed(cfg.seed, 1);
        Self::with_models(cfg, data, student, teacher, norm, seed)
    }

    /// Continues from a checkpoint with a fresh optimiser. The step counter,
    /// and with it the consistency ramp, carries on from the checkpoint.
    pub fn resume(cfg: TrainingConfig, data: &'a TrainData, ckpt: &Checkpoint, stream: u64) -> Result<Self> {
        cfg.validate()?;
        let expected = ModelConfig::preset(&cfg.preset)?;
        if &expected != ckpt.config() {
            return Err(Error::Config(format!(
                "checkpoint was trained with a different architecture than preset {:?}",
                cfg.preset
            )));
        }
        let mut t = Self::with_models(
            cfg.clone(),
            data,
            ckpt.student.clone(),
            ckpt.teacher.clone(),
            ckpt.norm.clone(),
            cfg_rng_seed(cfg.seed, stream),
        )?;
        t.step = ckpt.step;
        Ok(t)
    }

    fn with_models(
        cfg: TrainingConfig,
        data: &'a TrainData,
        student: SedModel<f32>,
        teacher: SedModel<f32>,
        norm: NormStats,
        rng_seed: u64,
    ) -> Result<Self> {
        let mc = student.config().clone();
        let timing = FrameTiming::for_stride(mc.time_stride());
        let (n_out, n_c) = (mc.n_out_frames(), mc.n_classes);
        let strong: Vec<(Source, usize)> = (0..data.strong.len()).map(|i| (Source::Strong, i)).collect();
        let mut weak: Vec<(Source, usize)> = (0..data.weak.len()).map(|i| (Source::Weak, i)).collect();
        weak.extend(
            (0..data.unlabeled.len())
                .filter(|&i| matches!(data.unlabeled.clips[i].labels, ClipLabels::Weak(_)))
                .map(|i| (Source::Unlabeled, i)),
        );
        let unlabeled: Vec<(Source, usize)> = (0..data.unlabeled.len()).map(|i| (Source::Unlabeled, i)).collect();
        for (k, (pool, name)) in [(&strong, "strong"), (&weak, "weak"), (&unlabeled, "unlabeled")]
            .into_iter()
            .enumerate()
        {
            if cfg.batch_composition[k] > 0 && pool.is_empty() {
                return Err(Error::invalid(format!(
                    "batch_composition asks for {} {name} clips but the {name} pool is empty",
                    cfg.batch_composition[k]
                )));
            }
        }
        for s in [&data.strong, &data.weak, &data.unlabeled] {
            if let Some(f) = s.features.iter().find(|f| f.dim() != (mc.n_frames, mc.n_mels)) {
                return Err(Error::invalid(format!(
                    "features of shape {:?}, model expects ({}, {})",
                    f.dim(),
                    mc.n_frames,
                    mc.n_mels
                )));
            }
        }
        let tg = |s: &FeatureSet| -> Vec<ClipTarget> {
            s.clips.iter().map(|c| clip_target(&c.labels, n_out, n_c, timing)).collect()
        };
        let targets = [tg(&data.strong), tg(&data.weak), tg(&data.unlabeled)];
        Ok(Self {
            adam: Adam::new(cfg.lr),
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            step: 0,
            cyclers: [Cycler::new(strong.len()), Cycler::new(weak.len()), Cycler::new(unlabeled.len())],
            pools: [strong, weak, unlabeled],
            targets,
            decode: DecodeConfig::default(),
            cfg,
            student,
            teacher,
            norm,
            data,
        })
    }

    /// Optimiser steps taken, including those of a resumed checkpoint.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn target(&self, s: Source, i: usize) -> &ClipTarget {
        let k = match s {
            Source::Strong => 0,
            Source::Weak => 1,
            Source::Unlabeled => 2,
        };
        &self.targets[k][i]
    }

    fn draw_batch(&mut self) -> Batch {
        let mc = self.student.config();
        let (n_out, n_c) = (mc.n_out_frames(), mc.n_classes);
        let comp = self.cfg.batch_composition;
        let b: usize = comp.iter().sum();
        let mut rows = Vec::with_capacity(b);
        for k in 0..3 {
            for _ in 0..comp[k] {
                let j = self.cyclers[k].next(&mut self.rng);
                rows.push((k, self.pools[k][j]));
            }
        }
        let mut raw = Array3::zeros((b, mc.n_frames, mc.n_mels));
        let mut targets = Targets::empty(b, n_out, n_c);
        let mut domains = Vec::with_capacity(b);
        for (r, &(k, (src, i))) in rows.iter().enumerate() {
            let set = set_of(self.data, src);
            raw.index_axis_mut(Axis(0), r).assign(&set.features[i]);
            domains.push(set.clips[i].domain);
            // unlabeled slots carry no supervision even for pseudo-labelled clips
            if k == 2 {
                continue;
            }
            let t = self.target(src, i);
            if let Some(c) = &t.clip {
                targets.clip.row_mut(r).assign(c);
                targets.clip_weight.row_mut(r).fill(1.0);
            }
            if let Some(f) = &t.frame {
                targets.frame.index_axis_mut(Axis(0), r).assign(f);
                targets.frame_weight.index_axis_mut(Axis(0), r).fill(1.0);
            }
        }
        Batch {
            raw,
            targets,
            domains,
            unlabeled_rows: comp[0] + comp[1]..b,
        }
    }

    fn normalize(&self, raw: &Array3<f32>) -> Result<Array3<f32>> {
        let mut out = raw.clone();
        for mut clip in out.outer_iter_mut() {
            let n = self.norm.normalize_array(&clip.to_owned())?;
            clip.assign(&n);
        }
        Ok(out)
    }


    /// One optimiser step. `lambda_d` is `Some` in stage 2.
    pub fn train_step(&mut self, lambda_d: Option<f64>) -> Result<StepRecord> {
        let batch = self.draw_batch();
        let stride = self.student.config().time_stride();
        let strategy = self.cfg.strategy;
        let shift = match strategy {
            Strategy::Sct | Strategy::Scmt => {
                augment::sample_shift(&mut self.rng, &self.cfg.shift_range(stride))
            }
            _ => ShiftSpec::default(),
        };
        let ramp = ramp_up(self.step, self.cfg.ramp_steps);
        let sigma = self.cfg.noise_sigma;
        let x = self.normalize(&batch.raw)?;

        let g = Graph::<f32>::new();
        let student = ModelDetector {
            model: &self.student,
            mode: Mode::Train,
        };
        let teacher_det = ModelDetector {
            model: &self.teacher,
            mode: Mode::Train,
        };
        let base = student.run(&g, &x)?;
        let x_noisy = noisy(&mut self.rng, sigma, &x);
        let teacher_out = TeacherOut::compute(&teacher_det, &x_noisy)?;
        let mut obj = mean_teacher_loss(&g, &base, &teacher_out, &batch.targets, ramp)?;

        match strategy {
            Strategy::None => {}
            Strategy::Ict => {
                let (a, b) = (self.cfg.beta_params[0], self.cfg.beta_params[1]);
                let lambda = augment::sample_lambda(&mut self.rng, a, b)? as f64;
                let rows = batch.unlabeled_rows.clone();
                let mut perm: Vec<usize> = (0..rows.len()).collect();
                perm.shuffle(&mut self.rng);
                let u = x.slice(s![rows.clone(), .., ..]).to_owned();
                if let Some((l, _)) = ict_loss(&g, &student, &teacher_out.rows(rows), &u, lambda, &perm)? {
                    obj.push(Component::Ict, l);
                }
            }
            Strategy::Sct | Strategy::Scmt => {
                let x_t = augment::batch::time_shift(&x, shift.tau);
                let x_f = self.normalize(&augment::batch::freq_shift(&batch.raw, shift.nu, log_floor()))?;
                let shifted = ShiftedOutputs {
                    time: student.run(&g, &x_t)?,
                    freq: student.run(&g, &x_f)?,
                };
                let targets = &batch.targets;
                if strategy == Strategy::Sct {
                    obj.extend(sct_loss(&g, &base, &shifted, targets, shift, stride, ramp));
                } else {
                    let t_in = noisy(&mut self.rng, sigma, &x_t);
                    let f_in = noisy(&mut self.rng, sigma, &x_f);
                    let tt = TeacherOut::compute(&teacher_det, &t_in)?;
                    let tf = TeacherOut::compute(&teacher_det, &f_in)?;
                    obj.extend(scmt_loss(&g, &base, &shifted, &tt, &tf, targets, shift, stride, ramp));
                }
            }
        }

        let mut domain_accuracy = None;
        let mut degenerate = None;
        if let Some(ld) = lambda_d {
            let emb = base.embedding.expect("model exposes its embedding");
            let probs = self.student.discriminate(&g, emb, 1.0);
            let d = crate::ada::domain_term(&g, probs, &batch.domains, ld)?;
            domain_accuracy = Some(d.accuracy);
            degenerate = Some(d.degenerate);
            obj.lambda_d = ld;
            obj.push(Component::Domain, d.loss);
        }

        let breakdown = obj.breakdown(&g);
        if let Some(name) = breakdown.first_invalid() {
            return Err(Error::NonFinite(format!("loss component {name} at step {}", self.step)));
        }
        let total = obj.total(&g);
        let grads = g.backward(total).into_params();
        let stage2 = lambda_d.is_some();
        self.adam.step(&mut self.student.store, &grads, self.cfg.lr, |grp| {
            stage2 || grp != ParamGroup::Domain
        })?;
        self.student.update_running_stats(&base.bn_stats);
        if !stage2 || self.cfg.stage2_ema {
            ema_update(&self.student.store, &mut self.teacher.store, self.cfg.ema_alpha)?;
        }
        self.step += 1;
        Ok(StepRecord {
            stage: if stage2 { 2 } else { 1 },
            step: self.step,
            lr: self.cfg.lr,
            loss: breakdown,
            domain_accuracy,
            degenerate_domain: degenerate,
            val_f1: None,
            heldout_domain_accuracy: None,
        })
    }

    /// Event F1 of the student on the validation set.
    pub fn validation_f1(&self) -> Result<Option<f64>> {
        match &self.data.validation {
            Some(v) if !v.is_empty() => Ok(Some(evaluate_f1(&self.student, &self.norm, v, &self.decode)?.macro_f1)),
            _ => Ok(None),
        }
    }

    pub fn checkpoint(&self, stage: u8) -> Checkpoint {
        let mut info = BTreeMap::new();
        info.insert("stage".into(), stage.to_string());
        info.insert("strategy".into(), self.cfg.strategy.to_string());
        info.insert("seed".into(), self.cfg.seed.to_string());
        info.insert("ada".into(), (stage == 2).to_string());
        let mut c = Checkpoint::new(self.student.clone(), self.teacher.clone(), self.norm.clone(), self.step);
        c.info = info;
        c
    }
}

fn noisy(rng: &mut ChaCha8Rng, sigma: f64, x: &Array3<f32>) -> Array3<f32> {
    let mut y = x.clone();
    augment::add_noise(&mut y, sigma, rng);
    y
}

fn cfg_rng_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Derived seed for an independent random stream of a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    cfg_rng_seed(seed, stream)
}

pub(crate) fn should_eval(every: u64, step: u64, last: u64) -> bool {
    step == last || (every > 0 && step % every == 0)
}

/// Runs `steps` optimiser steps, logging every one, evaluating and
/// checkpointing on the configured intervals.
pub(crate) fn run_loop(
    trainer: &mut Trainer<'_>,
    steps: u64,
    stage: u8,
    lambda_at: impl Fn(u64) -> Option<f64>,
    monitor: Option<&FeatureSet>,
    out: &RunOutput,
    log: &mut MetricLog,
) -> Result<()> {
    let every_ck = trainer.cfg.checkpoint_every;
    let every_ev = trainer.cfg.eval_every;
    for i in 0..steps {
        let mut rec = trainer.train_step(lambda_at(i))?;
        if should_eval(every_ev, i + 1, steps) {
            rec.val_f1 = trainer.validation_f1()?;
            if let Some(m) = monitor {
                rec.heldout_domain_accuracy = Some(crate::ada::domain_accuracy(&trainer.student, &trainer.norm, m)?);
            }
        }
        log.push(rec)?;
        if let Some(dir) = &out.checkpoint_dir {
            if every_ck > 0 && (i + 1) % every_ck == 0 && i + 1 != steps {
                trainer
                    .checkpoint(stage)
                    .save(&dir.join(format!("stage{stage}_step{:06}.safetensors", i + 1)))?;
            }
        }
    }
    log.flush()
}

/// Stage 1: mean-teacher training with the configured strategy.
pub fn train_stage1(cfg: &TrainingConfig, data: &TrainData, out: &RunOutput) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), data, None)?;
    let mut log = match &out.log {
        Some(p) => MetricLog::create(p)?,
        None => MetricLog::in_memory(),
    };
    run_loop(&mut trainer, cfg.steps, 1, |_| None, None, out, &mut log)?;
    let checkpoint = trainer.checkpoint(1);
    if let Some(dir) = &out.checkpoint_dir {
        checkpoint.save(&dir.join("stage1_final.safetensors"))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        records: log.records,
    })
}

#[cfg(test)]
pub(crate) mod tests;
