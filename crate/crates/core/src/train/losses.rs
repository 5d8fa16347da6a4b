//! Loss terms of the mean-teacher, interpolation-consistency and
//! shift-consistency objectives.

use ndarray::{Array2, Array3, ArrayD, Axis, Ix2, Ix3};
use serde::{Deserialize, Serialize};

use crate::augment::{output_shift, roll, ShiftSpec};
use crate::autograd::{BatchStats, Graph, Real, Var};
use crate::error::{Error, Result};
use crate::nn::{Mode, SedModel};

/// BCE clamp on probabilities.
pub const BCE_EPS: f64 = 1e-7;

/// `exp(-5 (1 - t/T)^2)`, with `t` clamped to `T`.
pub fn ramp_up(t: u64, ramp: u64) -> f64 {
    assert!(ramp > 0, "ramp-up length must be positive");
    let x = t.min(ramp) as f64 / ramp as f64;
    (-5.0 * (1.0 - x) * (1.0 - x)).exp()
}

/// Graph nodes of one detector pass.
#[derive(Debug, Clone)]
pub struct Outputs<T> {
    /// `[B, C]`
    pub clip: Var,
    /// `[B, T, C]`
    pub frame: Var,
    /// `[B, T, D]`, when the detector exposes one.
    pub embedding: Option<Var>,
    pub bn_stats: Vec<BatchStats<T>>,
}

/// Anything that maps a `[B, T, F]` batch to clip and frame predictions.
pub trait Detector<T: Real> {
    fn run(&self, g: &Graph<T>, x: &Array3<T>) -> Result<Outputs<T>>;
    /// Input frames per output frame.
    fn time_stride(&self) -> usize;
}

/// A [`SedModel`] evaluated with a fixed batch-norm mode.
pub struct ModelDetector<'a, T: Real> {
    pub model: &'a SedModel<T>,
    pub mode: Mode,
}

impl<T: Real> Detector<T> for ModelDetector<'_, T> {
    fn run(&self, g: &Graph<T>, x: &Array3<T>) -> Result<Outputs<T>> {
        let f = self.model.forward(g, &x.clone().into_dyn(), self.mode)?;
        Ok(Outputs {
            clip: f.clip,
            frame: f.frame,
            embedding: Some(f.embedding),
            bn_stats: f.bn_stats,
        })
    }

    fn time_stride(&self) -> usize {
        self.model.config().time_stride()
    }
}

/// Teacher predictions, held as constants.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOut<T> {
    pub clip: Array2<T>,
    pub frame: Array3<T>,
}

impl<T: Real> TeacherOut<T> {
    /// Runs `det` without recording gradients.
    pub fn compute(det: &dyn Detector<T>, x: &Array3<T>) -> Result<Self> {
        let g = Graph::inference();
        let o = det.run(&g, x)?;
        Ok(Self::from_graph(&g, &o))
    }

    pub fn from_graph(g: &Graph<T>, o: &Outputs<T>) -> Self {
        Self {
            clip: g.value(o.clip).view().into_dimensionality::<Ix2>().unwrap().to_owned(),
            frame: g.value(o.frame).view().into_dimensionality::<Ix3>().unwrap().to_owned(),
        }
    }

    /// Rows `rows` of both outputs.
    pub fn rows(&self, rows: std::ops::Range<usize>) -> Self {
        Self {
            clip: self.clip.slice(ndarray::s![rows.clone(), ..]).to_owned(),
            frame: self.frame.slice(ndarray::s![rows, .., ..]).to_owned(),
        }
    }
}

/// Supervision for one batch. Weights are 1 where a target exists, 0 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets<T> {
    pub clip: Array2<T>,
    pub clip_weight: Array2<T>,
    pub frame: Array3<T>,
    pub frame_weight: Array3<T>,
}

impl<T: Real> Targets<T> {
    pub fn empty(b: usize, t: usize, c: usize) -> Self {
        Self {
            clip: Array2::zeros((b, c)),
            clip_weight: Array2::zeros((b, c)),
            frame: Array3::zeros((b, t, c)),
            frame_weight: Array3::zeros((b, t, c)),
        }
    }

    /// Frame targets and weights shifted by `tau` input frames.
    pub fn time_shifted(&self, tau: i32, stride: usize) -> Self {
        let k = output_shift(tau, stride);
        Self {
            clip: self.clip.clone(),
            clip_weight: self.clip_weight.clone(),
            frame: roll(self.frame.view(), Axis(1), k),
            frame_weight: roll(self.frame_weight.view(), Axis(1), k),
        }
    }
}

/// Named scalar loss components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    WBce,
    SBce,
    PWMse,
    PSMse,
    Ict,
    WfBce,
    SfBce,
    StBce,
    StMse,
    PWtMse,
    PWfMse,
    PStMse,
    PSfMse,
    Domain,
}

impl Component {
    pub const ALL: [Component; 14] = [
        Component::WBce,
        Component::SBce,
        Component::PWMse,
        Component::PSMse,
        Component::Ict,
        Component::WfBce,
        Component::SfBce,
        Component::StBce,
        Component::StMse,
        Component::PWtMse,
        Component::PWfMse,
        Component::PStMse,
        Component::PSfMse,
        Component::Domain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::WBce => "L_w_bce",
            Component::SBce => "L_s_bce",
            Component::PWMse => "Lp_w_mse",
            Component::PSMse => "Lp_s_mse",
            Component::Ict => "L_ict",
            Component::WfBce => "L_wf_bce",
            Component::SfBce => "L_sf_bce",
            Component::StBce => "L_st_bce",
            Component::StMse => "L_st_mse",
            Component::PWtMse => "Lp_wt_mse",
            Component::PWfMse => "Lp_wf_mse",
            Component::PStMse => "Lp_st_mse",
            Component::PSfMse => "Lp_sf_mse",
            Component::Domain => "L_d",
        }
    }

    /// How the component enters the total: supervised terms at weight 1,
    /// consistency terms at the ramp-up weight, the domain term at `lambda_d`.
    pub fn weight(self, ramp: f64, lambda_d: f64) -> f64 {
        match self {
            Component::WBce | Component::SBce | Component::WfBce | Component::SfBce | Component::StBce => 1.0,
            Component::Domain => lambda_d,
            _ => ramp,
        }
    }
}

/// Values of every loss component for one step. Inactive components are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[allow(non_snake_case)]
pub struct LossBreakdown {
    pub L_w_bce: f64,
    pub L_s_bce: f64,
    pub Lp_w_mse: f64,
    pub Lp_s_mse: f64,
    pub L_ict: f64,
    pub L_wf_bce: f64,
    pub L_sf_bce: f64,
    pub L_st_bce: f64,
    pub L_st_mse: f64,
    pub Lp_wt_mse: f64,
    pub Lp_wf_mse: f64,
    pub Lp_st_mse: f64,
    pub Lp_sf_mse: f64,
    pub L_d: f64,
    /// Ramp-up weight applied to the consistency terms.
    pub ramp: f64,
    pub lambda_d: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, c: Component) -> f64 {
        match c {
            Component::WBce => self.L_w_bce,
            Component::SBce => self.L_s_bce,
            Component::PWMse => self.Lp_w_mse,
            Component::PSMse => self.Lp_s_mse,
            Component::Ict => self.L_ict,
            Component::WfBce => self.L_wf_bce,
            Component::SfBce => self.L_sf_bce,
            Component::StBce => self.L_st_bce,
            Component::StMse => self.L_st_mse,
            Component::PWtMse => self.Lp_wt_mse,
            Component::PWfMse => self.Lp_wf_mse,
            Component::PStMse => self.Lp_st_mse,
            Component::PSfMse => self.Lp_sf_mse,
            Component::Domain => self.L_d,
        }
    }

    fn slot(&mut self, c: Component) -> &mut f64 {
        match c {
            Component::WBce => &mut self.L_w_bce,
            Component::SBce => &mut self.L_s_bce,
            Component::PWMse => &mut self.Lp_w_mse,
            Component::PSMse => &mut self.Lp_s_mse,
            Component::Ict => &mut self.L_ict,
            Component::WfBce => &mut self.L_wf_bce,
            Component::SfBce => &mut self.L_sf_bce,
            Component::StBce => &mut self.L_st_bce,
            Component::StMse => &mut self.L_st_mse,
            Component::PWtMse => &mut self.Lp_wt_mse,
            Component::PWfMse => &mut self.Lp_wf_mse,
            Component::PStMse => &mut self.Lp_st_mse,
            Component::PSfMse => &mut self.Lp_sf_mse,
            Component::Domain => &mut self.L_d,
        }
    }

    /// Weighted sum of the components, accumulated in a fixed order.
    pub fn weighted_sum(&self) -> f64 {
        Component::ALL
            .iter()
            .map(|&c| c.weight(self.ramp, self.lambda_d) * self.get(c))
            .sum()
    }

    /// First component that is negative or not finite.
    pub fn first_invalid(&self) -> Option<&'static str> {
        Component::ALL
            .iter()
            .find(|&&c| !(self.get(c).is_finite() && self.get(c) >= 0.0))
            .map(|c| c.name())
    }
}

/// A set of scalar loss nodes that together form one objective.
#[derive(Debug, Clone)]
pub struct Objective {
    pub ramp: f64,
    pub lambda_d: f64,
    terms: Vec<(Component, Var)>,
}

impl Objective {
    pub fn new(ramp: f64, lambda_d: f64) -> Self {
        Self {
            ramp,
            lambda_d,
            terms: Vec::new(),
        }
    }

    pub fn push(&mut self, c: Component, v: Var) {
        assert!(self.get(c).is_none(), "{} added twice", c.name());
        self.terms.push((c, v));
    }

    pub fn get(&self, c: Component) -> Option<Var> {
        self.terms.iter().find(|(k, _)| *k == c).map(|(_, v)| *v)
    }

    pub fn extend(&mut self, other: Objective) {
        for (c, v) in other.terms {
            self.push(c, v);
        }
    }

    pub fn components(&self) -> impl Iterator<Item = Component> + '_ {
        self.terms.iter().map(|(c, _)| *c)
    }

    /// The differentiable weighted sum. Terms with zero weight are left out
    /// so they contribute no gradient at all.
    pub fn total<T: Real>(&self, g: &Graph<T>) -> Var {
        let terms: Vec<(Var, f64)> = self
            .terms
            .iter()
            .map(|&(c, v)| (v, c.weight(self.ramp, self.lambda_d)))
            .filter(|&(_, w)| w != 0.0)
            .collect();
        if terms.is_empty() {
            return g.constant(ArrayD::zeros(ndarray::IxDyn(&[])));
        }
        g.weighted_sum(&terms)
    }

    pub fn breakdown<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        let mut b = LossBreakdown {
            ramp: self.ramp,
            lambda_d: self.lambda_d,
            ..Default::default()
        };
        for &(c, v) in &self.terms {
            *b.slot(c) = g.scalar(v).as_f64();
        }
        b.total = b.weighted_sum();
        b
    }
}

fn check_probs<T: Real>(what: &str, a: impl IntoIterator<Item = T>) -> Result<()> {
    for v in a {
        let v = v.as_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{what} contains {v}, outside [0, 1]")));
        }
    }
    Ok(())
}

fn ones_like<T: Real>(g: &Graph<T>, v: Var) -> ArrayD<T> {
    ArrayD::ones(ndarray::IxDyn(&g.shape(v)))
}

fn mse_all<T: Real>(g: &Graph<T>, a: Var, target: &ArrayD<T>) -> Var {
    g.mse(a, target, &ones_like(g, a))
}

fn bce_clip<T: Real>(g: &Graph<T>, p: Var, y: &Targets<T>) -> Var {
    g.bce(p, &y.clip.clone().into_dyn(), &y.clip_weight.clone().into_dyn(), BCE_EPS)
}

fn bce_frame<T: Real>(g: &Graph<T>, p: Var, y: &Targets<T>) -> Var {
    g.bce(p, &y.frame.clone().into_dyn(), &y.frame_weight.clone().into_dyn(), BCE_EPS)
}

/// Supervised BCE on labelled clips plus student-teacher MSE on all clips.
pub fn mean_teacher_loss<T: Real>(
    g: &Graph<T>,
    student: &Outputs<T>,
    teacher: &TeacherOut<T>,
    targets: &Targets<T>,
    ramp: f64,
) -> Result<Objective> {
    check_probs("student clip output", g.value(student.clip).iter().copied())?;
    check_probs("student frame output", g.value(student.frame).iter().copied())?;
    check_probs("teacher clip output", teacher.clip.iter().copied())?;
    check_probs("teacher frame output", teacher.frame.iter().copied())?;
    check_probs("clip targets", targets.clip.iter().copied())?;
    check_probs("frame targets", targets.frame.iter().copied())?;
    let mut o = Objective::new(ramp, 0.0);
    o.push(Component::WBce, bce_clip(g, student.clip, targets));
    o.push(Component::SBce, bce_frame(g, student.frame, targets));
    o.push(Component::PWMse, mse_all(g, student.clip, &teacher.clip.clone().into_dyn()));
    o.push(Component::PSMse, mse_all(g, student.frame, &teacher.frame.clone().into_dyn()));
    Ok(o)
}

/// Interpolation consistency on a batch of unlabeled clips: the student's
/// prediction on `Mix_λ(u_j, u_perm(j))` against the mix of the teacher's
/// predictions, summed over clip and frame level.
///
/// Returns `None` (with a warning) for batches smaller than 2.
pub fn ict_loss<T: Real>(
    g: &Graph<T>,
    student: &dyn Detector<T>,
    teacher_on_u: &TeacherOut<T>,
    u: &Array3<T>,
    lambda: f64,
    perm: &[usize],
) -> Result<Option<(Var, Outputs<T>)>> {
    let b = u.shape()[0];
    if b < 2 {
        log::warn!("interpolation consistency skipped: batch of {b} unlabeled clips");
        return Ok(None);
    }
    if perm.len() != b || teacher_on_u.clip.nrows() != b {
        return Err(Error::invalid("ict_loss: batch, partner and teacher sizes differ"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("mixing weight {lambda} outside [0, 1]")));
    }
    // b + λ(a - b) so identical partners mix to themselves exactly
    let l = T::cst(lambda);
    let mix = |a: T, b: T| b + l * (a - b);
    let mixed = Array3::from_shape_fn(u.raw_dim(), |(i, t, f)| mix(u[[i, t, f]], u[[perm[i], t, f]]));
    let (tc, tf) = (&teacher_on_u.clip, &teacher_on_u.frame);
    let clip_t = Array2::from_shape_fn(tc.raw_dim(), |(i, c)| mix(tc[[i, c]], tc[[perm[i], c]]));
    let frame_t = Array3::from_shape_fn(tf.raw_dim(), |(i, t, c)| mix(tf[[i, t, c]], tf[[perm[i], t, c]]));
    let out = student.run(g, &mixed)?;
    let a = mse_all(g, out.clip, &clip_t.into_dyn());
    let s = mse_all(g, out.frame, &frame_t.into_dyn());
    Ok(Some((g.add(a, s), out)))
}

/// Student passes on the time- and frequency-shifted batch.
pub struct ShiftedOutputs<T> {
    pub time: Outputs<T>,
    pub freq: Outputs<T>,
}

/// Shift-consistency loss of the student alone.
///
/// `base` are the student's outputs on the unshifted batch; the shifted
/// frame predictions are compared with `base` shifted by `shift.tau`,
/// held constant.
pub fn sct_loss<T: Real>(
    g: &Graph<T>,
    base: &Outputs<T>,
    shifted: &ShiftedOutputs<T>,
    targets: &Targets<T>,
    shift: ShiftSpec,
    stride: usize,
    ramp: f64,
) -> Objective {
    let mut o = Objective::new(ramp, 0.0);
    o.push(Component::WfBce, bce_clip(g, shifted.freq.clip, targets));
    o.push(Component::SfBce, bce_frame(g, shifted.freq.frame, targets));
    let moved = targets.time_shifted(shift.tau, stride);
    o.push(Component::StBce, bce_frame(g, shifted.time.frame, &moved));
    let base_frame = g.value(base.frame);
    let target = roll(base_frame.view(), Axis(1), output_shift(shift.tau, stride));
    o.push(Component::StMse, mse_all(g, shifted.time.frame, &target));
    o
}

/// Shift-consistency mean-teacher loss: [`sct_loss`] plus student-teacher
/// MSE on the time-shifted (`t`) and frequency-shifted (`f`) inputs at
/// clip (`w`) and frame (`s`) level.
#[allow(clippy::too_many_arguments)]
pub fn scmt_loss<T: Real>(
    g: &Graph<T>,
    base: &Outputs<T>,
    shifted: &ShiftedOutputs<T>,
    teacher_time: &TeacherOut<T>,
    teacher_freq: &TeacherOut<T>,
    targets: &Targets<T>,
    shift: ShiftSpec,
    stride: usize,
    ramp: f64,
) -> Objective {
    let mut o = sct_loss(g, base, shifted, targets, shift, stride, ramp);
    o.push(Component::PWtMse, mse_all(g, shifted.time.clip, &teacher_time.clip.clone().into_dyn()));
    o.push(Component::PWfMse, mse_all(g, shifted.freq.clip, &teacher_freq.clip.clone().into_dyn()));
    o.push(Component::PStMse, mse_all(g, shifted.time.frame, &teacher_time.frame.clone().into_dyn()));
    o.push(Component::PSfMse, mse_all(g, shifted.freq.frame, &teacher_freq.frame.clone().into_dyn()));
    o
}
