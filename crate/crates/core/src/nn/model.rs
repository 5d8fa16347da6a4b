//! FP-CRNN sound event detector with attention pooling and a frame-level
//! domain discriminator.
//!
//! Data flow for one batch of normalised log-mel spectrograms `[B, T, F]`:
//!
//! 1. optional average pooling of the input;
//! 2. CNN blocks, each `conv3x3 → batch-norm → GLU → average-pool`;
//! 3. either the last block flattened to a sequence (plain CRNN), or a
//!    feature pyramid merging several blocks top-down, pooled back to the
//!    output frame rate;
//! 4. a bidirectional GRU whose output sequence is the embedding;
//! 5. per-frame sigmoid class scores and attention logits, combined into
//!    clip-level probabilities by [`attention_pool`].

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix2, Ix3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::autograd::{BatchStats, Graph, ParamId, Real, Var};
use crate::error::{Error, Result};
use crate::N_CLASSES;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub n_frames: usize,
    pub n_mels: usize,
    /// Average pooling `(time, freq)` applied to the input before the CNN.
    pub input_pool: [usize; 2],
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub time_pools: Vec<usize>,
    pub freq_pools: Vec<usize>,
    /// CNN stages (0-based) merged by the feature pyramid; empty for a plain CRNN.
    pub pyramid_stages: Vec<usize>,
    pub pyramid_dim: usize,
    pub rnn_hidden: usize,
    pub disc_hidden: Vec<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    /// Full-size FP-CRNN.
    pub fn default_preset() -> Self {
        Self {
            n_classes: N_CLASSES,
            n_frames: crate::dsp::N_FRAMES,
            n_mels: crate::dsp::N_MELS,
            input_pool: [1, 1],
            channels: vec![32, 64, 128],
            kernel: 3,
            time_pools: vec![2, 2, 2],
            freq_pools: vec![4, 4, 4],
            pyramid_stages: vec![1, 2],
            pyramid_dim: 128,
            rnn_hidden: 128,
            disc_hidden: vec![128, 128],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Desk-scale FP-CRNN used by tests and toy experiments. The input is
    /// pooled by (2, 4) and the pyramid merges the first and last stages;
    /// the output rate matches the full model (81 frames).
    pub fn tiny_preset() -> Self {
        Self {
            input_pool: [2, 4],
            channels: vec![8, 16, 32],
            time_pools: vec![2, 2, 1],
            freq_pools: vec![4, 2, 4],
            pyramid_stages: vec![0, 2],
            pyramid_dim: 32,
            rnn_hidden: 32,
            disc_hidden: vec![32, 32],
            ..Self::default_preset()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny_preset()),
            "default" => Ok(Self::default_preset()),
            other => Err(Error::Config(format!("unknown preset {other:?} (tiny|default)"))),
        }
    }

    /// Same architecture without the feature pyramid.
    pub fn without_pyramid(mut self) -> Self {
        self.pyramid_stages.clear();
        self
    }

    /// Time length after each CNN stage.
    pub fn stage_lengths(&self) -> Vec<usize> {
        let mut t = self.n_frames / self.input_pool[0];
        self.time_pools
            .iter()
            .map(|&p| {
                t /= p;
                t
            })
            .collect()
    }

    fn stage_widths(&self) -> Vec<usize> {
        let mut f = self.n_mels / self.input_pool[1];
        self.freq_pools
            .iter()
            .zip(&self.channels)
            .map(|(&p, &c)| {
                f /= p;
                c * f
            })
            .collect()
    }

    /// Number of frames in the frame-level output.
    pub fn n_out_frames(&self) -> usize {
        *self.stage_lengths().last().unwrap_or(&self.n_frames)
    }

    /// Input frames per output frame.
    pub fn time_stride(&self) -> usize {
        self.input_pool[0] * self.time_pools.iter().product::<usize>()
    }

    pub fn d_embed(&self) -> usize {
        2 * self.rnn_hidden
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.time_pools.len() != n || self.freq_pools.len() != n {
            return Err(Error::Config(
                "channels, time_pools and freq_pools must have equal non-zero length".into(),
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("kernel size must be odd".into()));
        }
        let mut t = self.n_frames;
        let mut f = self.n_mels;
        if t % self.input_pool[0] != 0 || f % self.input_pool[1] != 0 {
            return Err(Error::Config("input pooling must divide the input shape".into()));
        }
        t /= self.input_pool[0];
        f /= self.input_pool[1];
        for (i, (&tp, &fp)) in self.time_pools.iter().zip(&self.freq_pools).enumerate() {
            if tp == 0 || fp == 0 || t % tp != 0 || f % fp != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: pooling ({tp}, {fp}) does not divide ({t}, {f})"
                )));
            }
            t /= tp;
            f /= fp;
        }
        let mut prev = None;
        for &s in &self.pyramid_stages {
            if s >= n {
                return Err(Error::Config(format!("pyramid stage {s} out of range")));
            }
            if let Some(p) = prev {
                if s <= p {
                    return Err(Error::Config("pyramid stages must be increasing".into()));
                }
            }
            prev = Some(s);
        }
        if !self.pyramid_stages.is_empty() && *self.pyramid_stages.last().unwrap() != n - 1 {
            return Err(Error::Config("pyramid must include the deepest stage".into()));
        }
        Ok(())
    }
}

/// BatchNorm evaluation mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with the running statistics.
    Eval,
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    /// `[B, C]` clip-level probabilities.
    pub clip: Var,
    /// `[B, T, C]` frame-level probabilities.
    pub frame: Var,
    /// `[B, T, C]` attention logits.
    pub attention: Var,
    /// `[B, T, D]` recurrent output sequence.
    pub embedding: Var,
    /// Batch statistics of each normalisation layer (train mode only).
    pub bn_stats: Vec<BatchStats<T>>,
}

/// Plain-array model outputs.
#[derive(Debug, Clone)]
pub struct ModelOutput<T> {
    pub clip_probs: Array2<T>,
    pub frame_probs: Array3<T>,
    pub embedding: Array3<T>,
}

impl<T: Real> ModelOutput<T> {
    /// Time-mean of the embedding sequence, one vector per clip.
    pub fn clip_embedding(&self) -> Array2<T> {
        self.embedding.mean_axis(Axis(1)).unwrap()
    }
}

#[derive(Debug, Clone)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct LinearIds {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct Ids {
    convs: Vec<ConvIds>,
    laterals: Vec<LinearIds>,
    gru: [[ParamId; 4]; 2],
    strong: LinearIds,
    attention: LinearIds,
    disc: Vec<LinearIds>,
}

/// Sound event detector with its parameters.
#[derive(Debug, Clone)]
pub struct SedModel<T: Real> {
    config: ModelConfig,
    pub store: ParamStore<T>,
    ids: Ids,
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> ArrayD<T> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::cst(rng.random_range(-bound..=bound)))
}

fn linear_ids<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
    zero: bool,
) -> LinearIds {
    let bound = (6.0 / (d_in + d_out) as f64).sqrt();
    let w = if zero {
        ArrayD::zeros(IxDyn(&[d_out, d_in]))
    } else {
        uniform(rng, &[d_out, d_in], bound)
    };
    let w = store.add(&format!("{name}.w"), w);
    let b = bias.then(|| store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[d_out]))));
    LinearIds { w, b }
}

impl<T: Real> SedModel<T> {
    /// Builds a freshly initialised model; the discriminator output layer
    /// starts at zero so every domain probability is 0.5.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = config.kernel;

        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            let fan_in = c_in * k * k;
            let fan_out = 2 * c * k * k;
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = store.add(&format!("f.conv{i}.w"), uniform(&mut rng, &[2 * c, c_in, k, k], bound));
            let b = store.add(&format!("f.conv{i}.b"), ArrayD::zeros(IxDyn(&[2 * c])));
            let gamma = store.add(&format!("f.bn{i}.gamma"), ArrayD::ones(IxDyn(&[2 * c])));
            let beta = store.add(&format!("f.bn{i}.beta"), ArrayD::zeros(IxDyn(&[2 * c])));
            store.add_buffer(&format!("f.bn{i}.running_mean"), ArrayD::zeros(IxDyn(&[2 * c])));
            store.add_buffer(&format!("f.bn{i}.running_var"), ArrayD::ones(IxDyn(&[2 * c])));
            convs.push(ConvIds { w, b, gamma, beta });
            c_in = c;
        }

        let widths = config.stage_widths();
        let mut laterals = Vec::new();
        let deepest = config.channels.len() - 1;
        for &s in &config.pyramid_stages {
            // the top of the pyramid has no bias so an all-zero deep map adds nothing
            laterals.push(linear_ids(
                &mut store,
                &mut rng,
                &format!("f.fpn{s}"),
                widths[s],
                config.pyramid_dim,
                s != deepest,
                false,
            ));
        }
        let rnn_in = if config.pyramid_stages.is_empty() {
            widths[deepest]
        } else {
            config.pyramid_dim
        };

        let h = config.rnn_hidden;
        let gb = 1.0 / (h as f64).sqrt();
        let mut gru = [[ParamId(0); 4]; 2];
        for (di, dir) in ["fwd", "bwd"].iter().enumerate() {
            gru[di] = [
                store.add(&format!("f.gru_{dir}.w_ih"), uniform(&mut rng, &[3 * h, rnn_in], gb)),
                store.add(&format!("f.gru_{dir}.w_hh"), uniform(&mut rng, &[3 * h, h], gb)),
                store.add(&format!("f.gru_{dir}.b_ih"), uniform(&mut rng, &[3 * h], gb)),
                store.add(&format!("f.gru_{dir}.b_hh"), uniform(&mut rng, &[3 * h], gb)),
            ];
        }

        let d = config.d_embed();
        let strong = linear_ids(&mut store, &mut rng, "y.strong", d, config.n_classes, true, false);
        let attention = linear_ids(&mut store, &mut rng, "y.att", d, config.n_classes, true, false);

        let mut disc = Vec::new();
        let mut d_in = d;
        for (i, &hd) in config.disc_hidden.iter().enumerate() {
            disc.push(linear_ids(&mut store, &mut rng, &format!("d.l{i}"), d_in, hd, true, false));
            d_in = hd;
        }
        disc.push(linear_ids(&mut store, &mut rng, "d.out", d_in, 1, true, true));

        Ok(Self {
            config,
            store,
            ids: Ids {
                convs,
                laterals,
                gru,
                strong,
                attention,
                disc,
            },
        })
    }

    /// Rebuilds a model around an existing parameter store.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let template = SedModel::<T>::new(config.clone(), 0)?;
        template.store.check_compatible(&store).map_err(|e| Error::Checkpoint(e.to_string()))?;
        for (name, buf) in template.store.buffers() {
            match store.buffer(name) {
                Some(b) if b.shape() == buf.shape() => {}
                _ => return Err(Error::Checkpoint(format!("buffer {name} missing or mismatched"))),
            }
        }
        Ok(Self {
            config,
            store,
            ids: template.ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same architecture and parameters in another precision.
    pub fn cast<U: Real>(&self) -> SedModel<U> {
        SedModel {
            config: self.config.clone(),
            store: self.store.cast(),
            ids: self.ids.clone(),
        }
    }

    fn p(&self, g: &Graph<T>, id: ParamId) -> Var {
        g.param(id, std::rc::Rc::new(self.store.get(id).clone()))
    }

    fn linear(&self, g: &Graph<T>, x: Var, ids: &LinearIds) -> Var {
        let w = self.p(g, ids.w);
        let b = ids.b.map(|b| self.p(g, b));
        g.linear(x, w, b)
    }

    /// Forward pass over a `[B, T, F]` batch of normalised spectrograms.
    pub fn forward(&self, g: &Graph<T>, input: &ArrayD<T>, mode: Mode) -> Result<Forward<T>> {
        let cfg = &self.config;
        let sh = input.shape();
        if sh.len() != 3 || sh[1] != cfg.n_frames || sh[2] != cfg.n_mels {
            return Err(Error::invalid(format!(
                "expected input [B, {}, {}], got {:?}",
                cfg.n_frames, cfg.n_mels, sh
            )));
        }
        let b = sh[0];
        let x = g.constant(
            input
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(vec![b, 1, cfg.n_frames, cfg.n_mels])
                .unwrap(),
        );
        let mut h = g.avg_pool2d(x, cfg.input_pool[0], cfg.input_pool[1]);
        let mut checkpoints: Vec<(&str, Var)> = Vec::new();
        let mut stages = Vec::new();
        let mut bn_stats = Vec::new();
        for (i, ids) in self.ids.convs.iter().enumerate() {
            let c = g.conv2d(h, self.p(g, ids.w), self.p(g, ids.b));
            let (gamma, beta) = (self.p(g, ids.gamma), self.p(g, ids.beta));
            let n = match mode {
                Mode::Train => {
                    let (n, stats) = g.batch_norm_train(c, gamma, beta, cfg.bn_eps);
                    bn_stats.push(stats);
                    n
                }
                Mode::Eval => {
                    let mean = self.bn_buffer(i, "running_mean");
                    let var = self.bn_buffer(i, "running_var");
                    g.batch_norm_eval(c, gamma, beta, &mean, &var, cfg.bn_eps)
                }
            };
            let a = g.glu(n);
            h = g.avg_pool2d(a, cfg.time_pools[i], cfg.freq_pools[i]);
            stages.push(h);
        }
        checkpoints.push(("cnn", h));

        let seq = if cfg.pyramid_stages.is_empty() {
            g.to_sequence(h)
        } else {
            let maps: Vec<Var> = cfg
                .pyramid_stages
                .iter()
                .zip(&self.ids.laterals)
                .map(|(&s, ids)| {
                    let flat = g.to_sequence(stages[s]);
                    self.linear(g, flat, ids)
                })
                .collect();
            let fused = fp_merge(g, &maps)?;
            let len = g.shape(fused)[1];
            g.avg_pool_time(fused, len / cfg.n_out_frames())
        };
        checkpoints.push(("pyramid", seq));

        let gru = &self.ids.gru;
        let fwd = gru[0].map(|id| self.p(g, id));
        let bwd = gru[1].map(|id| self.p(g, id));
        let embedding = g.bigru(seq, fwd, bwd);
        checkpoints.push(("gru", embedding));

        let logits = self.linear(g, embedding, &self.ids.strong);
        let frame = g.sigmoid(logits);
        let attention = self.linear(g, embedding, &self.ids.attention);
        let clip = attention_pool(g, frame, attention);
        checkpoints.push(("heads", clip));

        if let Some((name, _)) = checkpoints
            .iter()
            .find(|(_, v)| g.value(*v).iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NonFinite(format!("forward pass after stage {name}")));
        }
        Ok(Forward {
            clip,
            frame,
            attention,
            embedding,
            bn_stats,
        })
    }

    /// Per-frame probability that each frame comes from the real domain.
    ///
    /// The embedding passes through a gradient reversal layer scaled by
    /// `lambda_d` first, so the feature extractor receives the negated domain
    /// gradient while the discriminator receives it unchanged.
    pub fn discriminate(&self, g: &Graph<T>, embedding: Var, lambda_d: f64) -> Var {
        let sh = g.shape(embedding);
        let mut h = g.grl(embedding, lambda_d);
        let last = self.ids.disc.len() - 1;
        for (i, ids) in self.ids.disc.iter().enumerate() {
            h = self.linear(g, h, ids);
            if i < last {
                h = g.relu(h);
            }
        }
        let p = g.sigmoid(h);
        g.reshape(p, &sh[..sh.len() - 1])
    }

    fn bn_buffer(&self, i: usize, which: &str) -> Array1<T> {
        self.store
            .buffer(&format!("f.bn{i}.{which}"))
            .expect("batch-norm buffer")
            .iter()
            .copied()
            .collect()
    }

    /// Folds batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) {
        let m = T::cst(self.config.bn_momentum);
        let keep = T::one() - m;
        for (i, s) in stats.iter().enumerate() {
            if let Some(rm) = self.store.buffer_mut(&format!("f.bn{i}.running_mean")) {
                for (r, &v) in rm.iter_mut().zip(s.mean.iter()) {
                    *r = keep * *r + m * v;
                }
            }
            if let Some(rv) = self.store.buffer_mut(&format!("f.bn{i}.running_var")) {
                for (r, &v) in rv.iter_mut().zip(s.var_unbiased.iter()) {
                    *r = keep * *r + m * v;
                }
            }
        }
    }

    /// Inference in evaluation mode, in chunks of `batch` clips.
    pub fn predict(&self, input: &Array3<T>, batch: usize) -> Result<ModelOutput<T>> {
        self.predict_mode(input, batch, Mode::Eval)
    }

    pub fn predict_mode(&self, input: &Array3<T>, batch: usize, mode: Mode) -> Result<ModelOutput<T>> {
        let n = input.shape()[0];
        let mut clips = Vec::new();
        let mut frames = Vec::new();
        let mut embs = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            let chunk = input.slice(ndarray::s![start..end, .., ..]).to_owned().into_dyn();
            let g = Graph::inference();
            let out = self.forward(&g, &chunk, mode)?;
            clips.push(g.value(out.clip).view().into_dimensionality::<Ix2>().unwrap().to_owned());
            frames.push(g.value(out.frame).view().into_dimensionality::<Ix3>().unwrap().to_owned());
            embs.push(g.value(out.embedding).view().into_dimensionality::<Ix3>().unwrap().to_owned());
            start = end;
        }
        let cat2 = |v: Vec<Array2<T>>| {
            let views: Vec<_> = v.iter().map(|a| a.view()).collect();
            ndarray::concatenate(Axis(0), &views).unwrap()
        };
        let cat3 = |v: Vec<Array3<T>>| {
            let views: Vec<_> = v.iter().map(|a| a.view()).collect();
            ndarray::concatenate(Axis(0), &views).unwrap()
        };
        if n == 0 {
            let t = self.config.n_out_frames();
            return Ok(ModelOutput {
                clip_probs: Array2::zeros((0, self.config.n_classes)),
                frame_probs: Array3::zeros((0, t, self.config.n_classes)),
                embedding: Array3::zeros((0, t, self.config.d_embed())),
            });
        }
        Ok(ModelOutput {
            clip_probs: cat2(clips),
            frame_probs: cat3(frames),
            embedding: cat3(embs),
        })
    }
}

/// Clip-level probabilities as the attention-weighted average of frame
/// probabilities: per class, a softmax over time of the attention logits
/// weights the frame scores.
pub fn attention_pool<T: Real>(g: &Graph<T>, frame_probs: Var, attention_logits: Var) -> Var {
    let w = g.softmax(attention_logits, 1);
    let weighted = g.mul(w, frame_probs);
    g.sum_axis(weighted, 1)
}

/// Top-down feature-pyramid merge of `[B, T_i, D]` maps ordered from the
/// shallowest to the deepest stage.
///
/// Starting from the deepest map, each level is upsampled (nearest neighbour
/// along time) to the next shallower length and added to that level's
/// lateral map. The result has the length of the shallowest map.
pub fn fp_merge<T: Real>(g: &Graph<T>, maps: &[Var]) -> Result<Var> {
    let Some(&deepest) = maps.last() else {
        return Err(Error::Config("feature pyramid needs at least one stage".into()));
    };
    let mut acc = deepest;
    for &lateral in maps[..maps.len() - 1].iter().rev() {
        let (ls, ds) = (g.shape(lateral), g.shape(acc));
        if ls[2] != ds[2] {
            return Err(Error::Config(format!(
                "pyramid widths differ after projection: {} vs {}",
                ls[2], ds[2]
            )));
        }
        if ls[1] <= ds[1] || ls[1] % ds[1] != 0 {
            return Err(Error::Config(format!(
                "pyramid stage of length {} is not a strict multiple of the deeper length {}",
                ls[1], ds[1]
            )));
        }
        let up = g.upsample_time(acc, ls[1] / ds[1]);
        acc = g.add(lateral, up);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    fn tiny() -> SedModel<f64> {
        SedModel::new(ModelConfig::tiny_preset(), 11).unwrap()
    }

    fn input(b: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((b, 648, 128), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn output_shapes() {
        let m = tiny();
        let out = m.predict(&input(2, 0), 2).unwrap();
        assert_eq!(out.clip_probs.dim(), (2, 10));
        assert_eq!(out.frame_probs.dim(), (2, 81, 10));
        assert_eq!(out.embedding.dim(), (2, 81, 64));
        assert!(out.frame_probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(m.config().n_out_frames(), 81);
    }

    #[test]
    fn silence_gives_finite_outputs() {
        let m = tiny();
        let floor = crate::dsp::log_floor() as f64;
        let x = Array3::from_elem((2, 648, 128), floor);
        for mode in [Mode::Train, Mode::Eval] {
            let out = m.predict_mode(&x, 2, mode).unwrap();
            assert!(out.clip_probs.iter().chain(out.embedding.iter()).all(|v| v.is_finite()));
        }
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let m = tiny();
        let one = input(1, 3);
        let x = ndarray::concatenate(Axis(0), &[one.view(), one.view()]).unwrap();
        let out = m.predict_mode(&x, 2, Mode::Train).unwrap();
        assert_eq!(out.frame_probs.index_axis(Axis(0), 0), out.frame_probs.index_axis(Axis(0), 1));
        assert_eq!(out.clip_probs.row(0), out.clip_probs.row(1));
    }

    #[test]
    fn plain_crnn_has_same_output_rate() {
        let cfg = ModelConfig::tiny_preset().without_pyramid();
        let m = SedModel::<f64>::new(cfg, 1).unwrap();
        assert_eq!(m.predict(&input(1, 1), 1).unwrap().frame_probs.dim(), (1, 81, 10));
    }

    #[test]
    fn untrained_discriminator_is_undecided() {
        let m = tiny();
        let g = Graph::new();
        let out = m.forward(&g, &input(2, 4).into_dyn(), Mode::Train).unwrap();
        let d = m.discriminate(&g, out.embedding, 0.3);
        assert_eq!(g.shape(d), vec![2, 81]);
        assert!(g.value(d).iter().all(|&p| p == 0.5));
    }

    #[test]
    fn discriminator_outputs_are_probabilities() {
        let mut m = tiny();
        let id = m.store.id("d.out.w").unwrap();
        m.store.get_mut(id).mapv_inplace(|_| 0.7);
        let g = Graph::new();
        let emb = g.constant(ArrayD::from_shape_fn(IxDyn(&[1, 4, 64]), |i| {
            if i[1] < 2 { 0.3 } else { (i[2] as f64 * 0.37).sin() }
        }));
        let d = g.value(m.discriminate(&g, emb, 1.0));
        assert!(d.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(d[[0, 0]], d[[0, 1]]);
    }

    #[test]
    fn attention_pool_cases() {
        let g = Graph::<f64>::new();
        let frame = array![[[0.2, 0.9], [0.2, 0.1], [0.2, 0.5]]].into_dyn();
        let fv = g.constant(frame.clone());
        // uniform attention averages over time
        let uni = g.constant(ArrayD::zeros(IxDyn(&[1, 3, 2])));
        let c = g.value(attention_pool(&g, fv, uni));
        assert!((c[[0, 0]] - 0.2).abs() < 1e-15);
        assert!((c[[0, 1]] - 0.5).abs() < 1e-12);
        // near one-hot attention picks a frame
        let hot = g.constant(array![[[0.0, 0.0], [800.0, 800.0], [0.0, 0.0]]].into_dyn());
        let c = g.value(attention_pool(&g, fv, hot));
        assert!((c[[0, 1]] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn fp_merge_single_scale_is_identity() {
        let g = Graph::<f64>::new();
        let x = g.constant(ArrayD::from_shape_fn(IxDyn(&[1, 4, 3]), |i| i[1] as f64 - i[2] as f64));
        let y = fp_merge(&g, &[x]).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn fp_merge_zero_deep_map_returns_lateral() {
        let g = Graph::<f64>::new();
        let lat = g.constant(ArrayD::from_shape_fn(IxDyn(&[2, 8, 3]), |i| (i[0] + i[1] * i[2]) as f64));
        let deep = g.constant(ArrayD::zeros(IxDyn(&[2, 2, 3])));
        let y = fp_merge(&g, &[lat, deep]).unwrap();
        assert_eq!(g.value(y), g.value(lat));
        assert_eq!(g.shape(y)[1], 8);
    }

    #[test]
    fn fp_merge_rejects_width_mismatch() {
        let g = Graph::<f64>::new();
        let a = g.constant(ArrayD::zeros(IxDyn(&[1, 4, 3])));
        let b = g.constant(ArrayD::zeros(IxDyn(&[1, 2, 5])));
        assert!(matches!(fp_merge(&g, &[a, b]), Err(Error::Config(_))));
    }

    #[test]
    fn fused_length_follows_strides() {
        let cfg = ModelConfig::default_preset();
        assert_eq!(cfg.stage_lengths(), vec![324, 162, 81]);
        assert_eq!(cfg.time_stride(), 8);
        assert_eq!(cfg.n_out_frames(), 81);
        let tiny = ModelConfig::tiny_preset();
        assert_eq!(tiny.stage_lengths(), vec![162, 81, 81]);
        assert_eq!(tiny.time_stride(), 8);
        // the pyramid output takes the length of its shallowest stage
        let m = SedModel::<f64>::new(tiny, 0).unwrap();
        let g = Graph::<f64>::inference();
        let maps = [
            g.constant(ArrayD::zeros(IxDyn(&[1, 162, 32]))),
            g.constant(ArrayD::zeros(IxDyn(&[1, 81, 32]))),
        ];
        assert_eq!(g.shape(fp_merge(&g, &maps).unwrap())[1], 162);
        assert_eq!(m.config().n_out_frames(), 81);
    }

    #[test]
    fn parameters_partition_by_group() {
        let m = tiny();
        use super::super::params::ParamGroup;
        let mut seen = std::collections::BTreeSet::new();
        for (id, name, _) in m.store.iter() {
            let g = m.store.group(id);
            seen.insert(g);
            let want = match &name[..2] {
                "f." => ParamGroup::Feature,
                "y." => ParamGroup::Label,
                "d." => ParamGroup::Domain,
                _ => panic!("{name}"),
            };
            assert_eq!(g, want);
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn bad_input_shape_is_rejected() {
        let m = tiny();
        let g = Graph::new();
        assert!(m.forward(&g, &ArrayD::zeros(IxDyn(&[1, 600, 128])), Mode::Eval).is_err());
    }

    #[test]
    fn non_finite_input_is_reported() {
        let m = tiny();
        let mut x = input(1, 9);
        x[[0, 5, 5]] = f64::NAN;
        let err = m.predict(&x, 1).unwrap_err();
        assert!(err.to_string().contains("stage"), "{err}");
    }
}
