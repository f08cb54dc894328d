//! Shared-encoder, multi-decoder fully convolutional affordance ensemble.
//!
//! Encoder: `conv(k3, s1) -> conv(k5, s2) -> conv(k5, s2)` with ReLU after
//! each block. Every decoder mirrors it: the latent is joined with a one-hot
//! orientation plane, then two `conv -> 2x bilinear upsample -> concat skip`
//! stages and a final convolution to one channel followed by a sigmoid.
//!
//! The orientation planes are convolved by their own kernel slice and summed
//! with the latent's convolution, which equals convolving the channel-wise
//! concatenation. This lets the latent half be computed once per member and
//! shared by all orientations.
//!
//! Any forward can be restricted to an output window; the required input
//! window of every layer is derived backwards from it. Training evaluates a
//! single output pixel per transition, touching only that pixel's receptive
//! field, and yields the same value as the full map at that pixel.

mod checkpoint;

use std::cell::Cell;

use rand::seq::index;
use rand::Rng;

use crate::autodiff::kernels::{conv_input_window, upsample_input_window};
use crate::autodiff::{AdamState, Graph, ParamId, ParamStore, Var, Window, DEFAULT_LEARNING_RATE};
use crate::error::{Error, Result};
use crate::scene::{Action, SceneObservation, ORIENTATION_COUNT};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Probability clamp used inside logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels of the three encoder blocks.
    pub channels: [usize; 3],
    /// Kernel sizes of the three encoder blocks (mirrored by the decoder).
    pub kernels: [usize; 3],
    pub ensemble_size: usize,
    pub orientation_count: usize,
    pub learning_rate: f64,
}

impl ModelConfig {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            channels: [8, 16, 16],
            kernels: [3, 5, 5],
            ensemble_size: 5,
            orientation_count: ORIENTATION_COUNT,
            learning_rate: DEFAULT_LEARNING_RATE,
        }
    }

    pub fn with_ensemble_size(mut self, n: usize) -> Self {
        self.ensemble_size = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!(
                "input size {}x{} must be a positive multiple of 4",
                self.height, self.width
            )));
        }
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble size must be at least 1".into()));
        }
        if self.orientation_count == 0 {
            return Err(Error::Config("orientation count must be positive".into()));
        }
        if self.channels.contains(&0) || self.kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config("channels must be positive and kernels odd".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderParams {
    k1: ParamId,
    b1: ParamId,
    k2: ParamId,
    b2: ParamId,
    k3: ParamId,
    b3: ParamId,
}

#[derive(Clone, Debug)]
struct DecoderParams {
    k3_latent: ParamId,
    k3_orient: ParamId,
    b3: ParamId,
    k2: ParamId,
    b2: ParamId,
    k1: ParamId,
    b1: ParamId,
}

/// Per-layer windows of one (possibly partial) forward pass.
#[derive(Clone, Copy, Debug)]
struct Windows {
    out: Window,
    c1: Window,
    d2: Window,
    c2: Window,
    d3: Window,
    e3: Window,
    e2: Window,
    e1: Window,
    x: Window,
}

struct Encoded {
    w: Windows,
    e1: Var,
    e2: Var,
    e3: Var,
}

/// Something the model can be trained on.
pub trait LabeledAction {
    fn observation(&self) -> &SceneObservation;
    fn action(&self) -> Action;
    fn label(&self) -> f64;
}

/// Per-member and mean probability maps, each `[orientation, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffordanceMaps {
    pub height: usize,
    pub width: usize,
    pub orientation_count: usize,
    pub members: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Member grids and their mean for a single orientation.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientationMaps {
    pub members: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub steps: usize,
    pub mean_loss: f64,
    pub last_loss: f64,
}

pub struct EnsembleModel {
    config: ModelConfig,
    params: ParamStore,
    encoder: EncoderParams,
    decoders: Vec<DecoderParams>,
    adam: AdamState,
    encoder_evals: Cell<u64>,
}

impl Clone for EnsembleModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            encoder: self.encoder.clone(),
            decoders: self.decoders.clone(),
            adam: self.adam.clone(),
            encoder_evals: Cell::new(self.encoder_evals.get()),
        }
    }
}

fn pad(k: usize) -> usize {
    k / 2
}

fn add_conv<R: Rng + ?Sized>(
    params: &mut ParamStore,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let fan_in = inp * k * k;
    let kern = params.add_uniform(format!("{name}.kernel"), &[out, inp, k, k], fan_in, rng);
    let bias = params.add_uniform(format!("{name}.bias"), &[out], fan_in, rng);
    (kern, bias)
}

impl EnsembleModel {
    /// Builds a model with every parameter drawn from `rng`; decoders are
    /// initialized one after another, so each member gets distinct weights.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let [c1, c2, c3] = config.channels;
        let [k1, k2, k3] = config.kernels;
        let q = config.orientation_count;
        let mut params = ParamStore::new();
        let (ek1, eb1) = add_conv(&mut params, "enc1", c1, 1, k1, rng);
        let (ek2, eb2) = add_conv(&mut params, "enc2", c2, c1, k2, rng);
        let (ek3, eb3) = add_conv(&mut params, "enc3", c3, c2, k3, rng);
        let encoder = EncoderParams {
            k1: ek1,
            b1: eb1,
            k2: ek2,
            b2: eb2,
            k3: ek3,
            b3: eb3,
        };
        let mut decoders = Vec::with_capacity(config.ensemble_size);
        for m in 0..config.ensemble_size {
            // the first decoder conv sees latent and orientation channels jointly
            let fan_in = (c3 + q) * k3 * k3;
            let k3_latent =
                params.add_uniform(format!("dec{m}.block3.latent"), &[c2, c3, k3, k3], fan_in, rng);
            let k3_orient =
                params.add_uniform(format!("dec{m}.block3.orient"), &[c2, q, k3, k3], fan_in, rng);
            let b3 = params.add_uniform(format!("dec{m}.block3.bias"), &[c2], fan_in, rng);
            let (dk2, db2) = add_conv(&mut params, &format!("dec{m}.block2"), c1, 2 * c2, k2, rng);
            let (dk1, db1) = add_conv(&mut params, &format!("dec{m}.block1"), 1, 2 * c1, k1, rng);
            decoders.push(DecoderParams {
                k3_latent,
                k3_orient,
                b3,
                k2: dk2,
                b2: db2,
                k1: dk1,
                b1: db1,
            });
        }
        let adam = AdamState::new(&params, config.learning_rate);
        Ok(Self {
            config,
            params,
            encoder,
            decoders,
            adam,
            encoder_evals: Cell::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ensemble_size(&self) -> usize {
        self.decoders.len()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.adam
    }

    /// Number of encoder evaluations performed so far.
    pub fn encoder_evaluations(&self) -> u64 {
        self.encoder_evals.get()
    }

    /// Parameter ids belonging to the shared encoder.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        let e = &self.encoder;
        vec![e.k1, e.b1, e.k2, e.b2, e.k3, e.b3]
    }

    /// Parameter ids belonging to decoder `member`.
    pub fn decoder_param_ids(&self, member: usize) -> Vec<ParamId> {
        let d = &self.decoders[member];
        vec![d.k3_latent, d.k3_orient, d.b3, d.k2, d.b2, d.k1, d.b1]
    }

    fn windows(&self, out: Window) -> Windows {
        let (h, w) = (self.config.height, self.config.width);
        let [k1, k2, k3] = self.config.kernels;
        let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);
        let c1 = conv_input_window(&out, h, w, k1, 1, pad(k1));
        let d2 = upsample_input_window(&c1, h2, w2);
        let c2 = conv_input_window(&d2, h2, w2, k2, 1, pad(k2));
        let d3 = upsample_input_window(&c2, h4, w4);
        let e3 = conv_input_window(&d3, h4, w4, k3, 1, pad(k3));
        let e2 = c2.union(&conv_input_window(&e3, h2, w2, k3, 2, pad(k3)));
        let e1 = c1.union(&conv_input_window(&e2, h, w, k2, 2, pad(k2)));
        let x = conv_input_window(&e1, h, w, k1, 1, pad(k1));
        Windows {
            out,
            c1,
            d2,
            c2,
            d3,
            e3,
            e2,
            e1,
            x,
        }
    }

    fn check_obs(&self, obs: &SceneObservation) -> Result<()> {
        if (obs.height, obs.width) != (self.config.height, self.config.width) {
            return Err(Error::Shape(format!(
                "model expects {}x{} observations, got {}x{}",
                self.config.height, self.config.width, obs.height, obs.width
            )));
        }
        Ok(())
    }

    fn check_orientation(&self, q: usize) -> Result<()> {
        if q >= self.config.orientation_count {
            return Err(Error::Orientation {
                index: q,
                count: self.config.orientation_count,
            });
        }
        Ok(())
    }

    fn encode(&self, g: &mut Graph, obs: &SceneObservation, w: Windows) -> Result<Encoded> {
        self.encoder_evals.set(self.encoder_evals.get() + 1);
        let (h, wd) = (self.config.height, self.config.width);
        let [k1, k2, k3] = self.config.kernels;
        let xw = w.x;
        let mut crop = Vec::with_capacity(xw.area());
        for r in xw.row..xw.row + xw.rows {
            crop.extend_from_slice(&obs.heightmap[r * wd + xw.col..r * wd + xw.col + xw.cols]);
        }
        debug_assert_eq!((xw.height, xw.width), (h, wd));
        let x = g.input(Tensor::new(vec![1, xw.rows, xw.cols], crop)?);
        let e = &self.encoder;
        let (pk1, pb1) = (g.param(&self.params, e.k1), g.param(&self.params, e.b1));
        let (pk2, pb2) = (g.param(&self.params, e.k2), g.param(&self.params, e.b2));
        let (pk3, pb3) = (g.param(&self.params, e.k3), g.param(&self.params, e.b3));

        let e1 = g.conv2d_window(x, pk1, 1, pad(k1), w.x, w.e1)?;
        let e1 = g.add_bias(e1, pb1)?;
        let e1 = g.relu(e1);
        let e2 = g.conv2d_window(e1, pk2, 2, pad(k2), w.e1, w.e2)?;
        let e2 = g.add_bias(e2, pb2)?;
        let e2 = g.relu(e2);
        let e3 = g.conv2d_window(e2, pk3, 2, pad(k3), w.e2, w.e3)?;
        let e3 = g.add_bias(e3, pb3)?;
        let e3 = g.relu(e3);
        Ok(Encoded { w, e1, e2, e3 })
    }

    /// Latent half of the first decoder block (orientation independent).
    fn decode_latent(&self, g: &mut Graph, enc: &Encoded, member: usize) -> Result<Var> {
        let k3 = self.config.kernels[2];
        let kl = g.param(&self.params, self.decoders[member].k3_latent);
        g.conv2d_window(enc.e3, kl, 1, pad(k3), enc.w.e3, enc.w.d3)
    }

    /// Finishes decoder `member` for orientation `q`; returns probabilities
    /// over the output window, shaped `[1, rows, cols]`.
    fn decode(&self, g: &mut Graph, enc: &Encoded, latent: Var, member: usize, q: usize) -> Result<Var> {
        let [k1, k2, k3] = self.config.kernels;
        let w = enc.w;
        let d = &self.decoders[member];
        let qn = self.config.orientation_count;
        let mut onehot = Tensor::zeros(&[qn, w.e3.rows, w.e3.cols]);
        let plane = w.e3.area();
        onehot.data_mut()[q * plane..(q + 1) * plane].fill(1.0);
        let onehot = g.input(onehot);
        let ko = g.param(&self.params, d.k3_orient);
        let orient = g.conv2d_window(onehot, ko, 1, pad(k3), w.e3, w.d3)?;
        let d3 = g.add(latent, orient)?;
        let b3 = g.param(&self.params, d.b3);
        let d3 = g.add_bias(d3, b3)?;
        let d3 = g.relu(d3);

        let u3 = g.upsample2x_window(d3, w.d3, w.c2)?;
        let skip2 = g.crop(enc.e2, w.e2, w.c2)?;
        let c2 = g.concat_channels(u3, skip2)?;
        let pk2 = g.param(&self.params, d.k2);
        let pb2 = g.param(&self.params, d.b2);
        let d2 = g.conv2d_window(c2, pk2, 1, pad(k2), w.c2, w.d2)?;
        let d2 = g.add_bias(d2, pb2)?;
        let d2 = g.relu(d2);

        let u2 = g.upsample2x_window(d2, w.d2, w.c1)?;
        let skip1 = g.crop(enc.e1, w.e1, w.c1)?;
        let c1 = g.concat_channels(u2, skip1)?;
        let pk1 = g.param(&self.params, d.k1);
        let pb1 = g.param(&self.params, d.b1);
        let logits = g.conv2d_window(c1, pk1, 1, pad(k1), w.c1, w.out)?;
        let logits = g.add_bias(logits, pb1)?;
        Ok(g.sigmoid(logits))
    }

    fn full_windows(&self) -> Windows {
        self.windows(Window::full(self.config.height, self.config.width))
    }

    /// Success-probability grid `[H * W]` of one member for orientation `q`.
    pub fn forward_member(&self, obs: &SceneObservation, q: usize, member: usize) -> Result<Vec<f64>> {
        self.check_obs(obs)?;
        self.check_orientation(q)?;
        if member >= self.ensemble_size() {
            return Err(Error::Config(format!("no ensemble member {member}")));
        }
        let mut g = Graph::inference();
        let enc = self.encode(&mut g, obs, self.full_windows())?;
        let lat = self.decode_latent(&mut g, &enc, member)?;
        let p = self.decode(&mut g, &enc, lat, member, q)?;
        Ok(g.value(p).data().to_vec())
    }

    /// All member grids and their mean for orientation `q`; the encoder
    /// runs once.
    pub fn forward_all(&self, obs: &SceneObservation, q: usize) -> Result<OrientationMaps> {
        self.check_obs(obs)?;
        self.check_orientation(q)?;
        let mut g = Graph::inference();
        let enc = self.encode(&mut g, obs, self.full_windows())?;
        let mut members = Vec::with_capacity(self.ensemble_size());
        for m in 0..self.ensemble_size() {
            let lat = self.decode_latent(&mut g, &enc, m)?;
            let p = self.decode(&mut g, &enc, lat, m, q)?;
            members.push(g.value(p).data().to_vec());
        }
        let mean = mean_of(&members);
        Ok(OrientationMaps { members, mean })
    }

    /// Full `[orientation, H, W]` maps for every member plus their mean.
    pub fn affordance_maps(&self, obs: &SceneObservation) -> Result<AffordanceMaps> {
        self.check_obs(obs)?;
        let (h, w, qn) = (self.config.height, self.config.width, self.config.orientation_count);
        let mut g = Graph::inference();
        let enc = self.encode(&mut g, obs, self.full_windows())?;
        let mut members = Vec::with_capacity(self.ensemble_size());
        for m in 0..self.ensemble_size() {
            let lat = self.decode_latent(&mut g, &enc, m)?;
            let mut volume = Vec::with_capacity(qn * h * w);
            for q in 0..qn {
                let mark = g.len();
                let p = self.decode(&mut g, &enc, lat, m, q)?;
                volume.extend_from_slice(g.value(p).data());
                debug_assert!(g.len() > mark);
            }
            members.push(volume);
        }
        let mean = mean_of(&members);
        Ok(AffordanceMaps {
            height: h,
            width: w,
            orientation_count: qn,
            members,
            mean,
        })
    }

    /// Each member's success probability for one action, computed over the
    /// action pixel's receptive field only.
    pub fn predict_at(&self, obs: &SceneObservation, action: &Action) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let probs = self.member_outputs_at(&mut g, obs, action)?;
        Ok(probs.iter().map(|&v| g.value(v).item()).collect())
    }

    fn member_outputs_at(&self, g: &mut Graph, obs: &SceneObservation, action: &Action) -> Result<Vec<Var>> {
        self.check_obs(obs)?;
        self.check_orientation(action.orientation)?;
        let (h, w) = (self.config.height, self.config.width);
        if action.row >= h || action.col >= w {
            return Err(Error::Shape(format!(
                "action ({}, {}) outside {h}x{w}",
                action.row, action.col
            )));
        }
        let wins = self.windows(Window::pixel(action.row, action.col, h, w));
        let enc = self.encode(g, obs, wins)?;
        (0..self.ensemble_size())
            .map(|m| {
                let lat = self.decode_latent(g, &enc, m)?;
                let p = self.decode(g, &enc, lat, m, action.orientation)?;
                g.pick(p, 0)
            })
            .collect()
    }

    /// Records the ensemble loss over `batch` on a fresh tape: binary
    /// cross-entropy summed over members, averaged over the batch.
    pub fn loss_graph<T: LabeledAction>(&self, batch: &[&T]) -> Result<(Graph, Var)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut g = Graph::new();
        let mut terms = Vec::with_capacity(batch.len() * self.ensemble_size());
        for ex in batch {
            let outs = self.member_outputs_at(&mut g, ex.observation(), &ex.action())?;
            for p in outs {
                terms.push(g.bce(p, ex.label(), PROB_CLAMP)?);
            }
        }
        let total = g.add_n(&terms)?;
        let loss = g.scale(total, 1.0 / batch.len() as f64);
        Ok((g, loss))
    }

    /// Runs `steps` Adam updates, each on a uniformly drawn batch (without
    /// replacement when the buffer holds at least `batch` items). Every
    /// member sees the same batch.
    pub fn update<T: LabeledAction, R: Rng + ?Sized>(
        &mut self,
        buffer: &[T],
        steps: usize,
        batch: usize,
        rng: &mut R,
    ) -> Result<TrainStats> {
        if steps == 0 {
            return Ok(TrainStats::default());
        }
        if buffer.is_empty() || batch == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut total = 0.0;
        let mut last = 0.0;
        for _ in 0..steps {
            let picks = sample_batch(buffer.len(), batch, rng);
            let items: Vec<&T> = picks.iter().map(|&i| &buffer[i]).collect();
            let (g, loss) = self.loss_graph(&items)?;
            last = g.value(loss).item();
            total += last;
            g.backward(loss, &mut self.params)?;
            self.adam.step(&mut self.params);
            self.params.zero_grad();
        }
        Ok(TrainStats {
            steps,
            mean_loss: total / steps as f64,
            last_loss: last,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, values: Vec<Tensor>) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut model = Self::new(config, &mut rng)?;
        if values.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                values.len()
            )));
        }
        for (p, v) in model.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name(),
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v;
        }
        Ok(model)
    }
}

/// Batch indices: distinct when `len >= batch`, otherwise drawn with
/// replacement.
pub fn sample_batch<R: Rng + ?Sized>(len: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    if len >= batch {
        index::sample(rng, len, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.gen_range(0..len)).collect()
    }
}

fn mean_of(members: &[Vec<f64>]) -> Vec<f64> {
    let n = members.len() as f64;
    let len = members.first().map_or(0, Vec::len);
    (0..len)
        .map(|i| members.iter().map(|m| m[i]).sum::<f64>() / n)
        .collect()
}

/// Ensemble binary cross-entropy from plain numbers: `outputs[m][n]` is
/// member `m`'s probability for sample `n`. Summed over members, averaged
/// over samples.
pub fn bce_loss(outputs: &[Vec<f64>], labels: &[f64]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if outputs.iter().any(|m| m.len() != labels.len()) {
        return Err(Error::Shape("member outputs and labels differ in length".into()));
    }
    let mut total = 0.0;
    for member in outputs {
        for (&p, &b) in member.iter().zip(labels) {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total += -b * p.ln() - (1.0 - b) * (1.0 - p).ln();
        }
    }
    Ok(total / labels.len() as f64)
}
