//! Convolutional VAE / beta-VAE goal-space learner.
//!
//! The encoder stacks `conv_layers` stride-2 convolutions (4x4 kernels,
//! padding 1), `dense_layers` rectified dense layers and a linear head
//! producing `latent_dim` means and `latent_dim` log-variances. The decoder
//! mirrors it with transposed convolutions and emits per-pixel Bernoulli
//! logits. The goal-space embedding of an image is the posterior mean.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::renderer::{Image, ImageDataset};
use crate::seeding::{self, Stream};
use crate::tensor::checkpoint::{read_tensors, write_tensors};
use crate::tensor::kernels::{conv2d_forward, dense_forward, relu};
use crate::tensor::{AdamState, Graph, NodeId, Scalar, Tensor};

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeArchitecture {
    pub image_size: usize,
    pub conv_layers: usize,
    pub channels: usize,
    pub dense_layers: usize,
    pub dense_units: usize,
    pub latent_dim: usize,
    /// KL weight: 1 is a plain VAE, larger values give a beta-VAE.
    pub beta: f64,
}

impl VaeArchitecture {
    /// Four 32-channel convolutions, two 256-unit dense layers, 10 latents.
    pub fn full() -> Self {
        Self {
            image_size: 64,
            conv_layers: 4,
            channels: 32,
            dense_layers: 2,
            dense_units: 256,
            latent_dim: 10,
            beta: 1.0,
        }
    }

    /// Reduced network that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            conv_layers: 2,
            channels: 16,
            dense_layers: 1,
            dense_units: 128,
            latent_dim: 10,
            beta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_layers == 0 || self.channels == 0 || self.latent_dim == 0 {
            return Err(argument(
                "conv_layers, channels and latent_dim must be positive",
            ));
        }
        if self.dense_layers > 0 && self.dense_units == 0 {
            return Err(argument("dense_units must be positive"));
        }
        if !self.image_size.is_multiple_of(1 << self.conv_layers) {
            return Err(argument(format!(
                "image size {} is not divisible by 2^{}",
                self.image_size, self.conv_layers
            )));
        }
        if !(self.beta >= 0.0) {
            return Err(argument("beta must be non-negative"));
        }
        Ok(())
    }

    /// Spatial side of the last convolutional feature map.
    pub fn bottleneck_side(&self) -> usize {
        self.image_size >> self.conv_layers
    }

    fn flat_features(&self) -> usize {
        self.channels * self.bottleneck_side().pow(2)
    }

    /// Shapes of every parameter tensor, in slot order.
    pub fn parameter_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut in_ch = 1;
        for _ in 0..self.conv_layers {
            shapes.push(vec![self.channels, in_ch, KERNEL, KERNEL]);
            shapes.push(vec![self.channels]);
            in_ch = self.channels;
        }
        let mut width = self.flat_features();
        for _ in 0..self.dense_layers {
            shapes.push(vec![self.dense_units, width]);
            shapes.push(vec![self.dense_units]);
            width = self.dense_units;
        }
        shapes.push(vec![2 * self.latent_dim, width]);
        shapes.push(vec![2 * self.latent_dim]);

        let mut width = self.latent_dim;
        for _ in 0..self.dense_layers {
            shapes.push(vec![self.dense_units, width]);
            shapes.push(vec![self.dense_units]);
            width = self.dense_units;
        }
        shapes.push(vec![self.flat_features(), width]);
        shapes.push(vec![self.flat_features()]);
        for i in 0..self.conv_layers {
            let out_ch = if i + 1 == self.conv_layers {
                1
            } else {
                self.channels
            };
            shapes.push(vec![self.channels, out_ch, KERNEL, KERNEL]);
            shapes.push(vec![out_ch]);
        }
        shapes
    }

    /// Activation shapes through the network for a batch, encoder first.
    pub fn shape_chain(&self, batch: usize) -> Vec<Vec<usize>> {
        let mut chain = vec![vec![batch, 1, self.image_size, self.image_size]];
        let mut side = self.image_size;
        for _ in 0..self.conv_layers {
            side /= 2;
            chain.push(vec![batch, self.channels, side, side]);
        }
        chain.push(vec![batch, self.flat_features()]);
        for _ in 0..self.dense_layers {
            chain.push(vec![batch, self.dense_units]);
        }
        chain.push(vec![batch, 2 * self.latent_dim]);
        chain.push(vec![batch, self.latent_dim]);
        for _ in 0..self.dense_layers {
            chain.push(vec![batch, self.dense_units]);
        }
        chain.push(vec![batch, self.flat_features()]);
        chain.push(vec![batch, self.channels, side, side]);
        for i in 0..self.conv_layers {
            side *= 2;
            let ch = if i + 1 == self.conv_layers {
                1
            } else {
                self.channels
            };
            chain.push(vec![batch, ch, side, side]);
        }
        chain
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            iterations: 10_000,
            seed,
            precision: Precision::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(argument("learning_rate and batch_size must be positive"));
        }
        Ok(())
    }
}

/// Per-sample ELBO terms of one minibatch: `loss = nll + beta * kl`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
}

/// Logged training point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub terms: ElboTerms,
}

/// VAE parameters and the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Vae<T: Scalar = f64> {
    arch: VaeArchitecture,
    params: Vec<Tensor<T>>,
}

/// Parameter nodes of one tape.
struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    fn pair(&self, layer: usize) -> (NodeId, NodeId) {
        (self.ids[2 * layer], self.ids[2 * layer + 1])
    }
}

impl<T: Scalar> Vae<T> {
    /// Fresh model with weights and biases drawn uniformly from
    /// `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(arch: VaeArchitecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.parameter_shapes();
        let n_encoder_conv = arch.conv_layers;
        let first_decoder_conv = shapes.len() / 2 - arch.conv_layers;
        let mut params = Vec::with_capacity(shapes.len());
        for (layer, pair) in shapes.chunks(2).enumerate() {
            let w = &pair[0];
            let fan_in = if layer < n_encoder_conv {
                w[1] * KERNEL * KERNEL
            } else if layer >= first_decoder_conv {
                // Each output pixel of a stride-2 transposed conv sees
                // (k/2)^2 taps per input channel.
                w[0] * (KERNEL / STRIDE).pow(2)
            } else {
                w[1]
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for shape in pair {
                params.push(Tensor::from_fn(shape, |_| {
                    T::of(rng.random_range(-bound..bound))
                }));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn from_tensors(arch: VaeArchitecture, params: Vec<Tensor<T>>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.parameter_shapes();
        if shapes.len() != params.len()
            || shapes
                .iter()
                .zip(&params)
                .any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::Format(
                "checkpoint tensors do not match the architecture".into(),
            ));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &VaeArchitecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            ids: self
                .params
                .iter()
                .enumerate()
                .map(|(slot, p)| g.param(slot, p))
                .collect(),
        }
    }

    fn encode_nodes(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<(NodeId, NodeId)> {
        let a = &self.arch;
        let mut h = x;
        let mut layer = 0;
        for _ in 0..a.conv_layers {
            let (w, b) = p.pair(layer);
            let c = g.conv2d(h, w, Some(b), STRIDE, PAD)?;
            h = g.relu(c);
            layer += 1;
        }
        h = g.flatten(h)?;
        for _ in 0..a.dense_layers {
            let (w, b) = p.pair(layer);
            let d = g.dense(h, w, Some(b))?;
            h = g.relu(d);
            layer += 1;
        }
        let (w, b) = p.pair(layer);
        let head = g.dense(h, w, Some(b))?;
        let mu = g.slice_cols(head, 0, a.latent_dim)?;
        let logvar = g.slice_cols(head, a.latent_dim, a.latent_dim)?;
        Ok((mu, logvar))
    }

    fn decode_nodes(&self, g: &mut Graph<T>, p: &Bound, z: NodeId) -> Result<NodeId> {
        let a = &self.arch;
        let mut layer = a.conv_layers + a.dense_layers + 1;
        let mut h = z;
        for _ in 0..a.dense_layers {
            let (w, b) = p.pair(layer);
            let d = g.dense(h, w, Some(b))?;
            h = g.relu(d);
            layer += 1;
        }
        let (w, b) = p.pair(layer);
        let d = g.dense(h, w, Some(b))?;
        h = g.relu(d);
        layer += 1;
        let batch = g.value(h).shape()[0];
        let side = a.bottleneck_side();
        h = g.reshape(h, &[batch, a.channels, side, side])?;
        for i in 0..a.conv_layers {
            let (w, b) = p.pair(layer);
            let c = g.conv_transpose2d(h, w, Some(b), STRIDE, PAD)?;
            h = if i + 1 == a.conv_layers { c } else { g.relu(c) };
            layer += 1;
        }
        Ok(h)
    }

    /// Builds the ELBO tape for a `[B, 1, H, W]` batch. Returns the tape, the
    /// loss node and the per-sample terms.
    pub fn elbo<R: Rng + ?Sized>(
        &self,
        batch: &Tensor<T>,
        rng: &mut R,
    ) -> Result<(Graph<T>, NodeId, ElboTerms)> {
        let s = self.arch.image_size;
        let &[b, 1, h, w] = batch.shape() else {
            return Err(argument(format!(
                "batch shape {:?} is not [B,1,H,W]",
                batch.shape()
            )));
        };
        if h != s || w != s || b == 0 {
            return Err(argument(format!(
                "batch shape {:?} does not fit the model",
                batch.shape()
            )));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.constant(batch.clone());
        let (mu, logvar) = self.encode_nodes(&mut g, &p, x)?;
        let z = g.reparameterize(mu, logvar, rng)?;
        let logits = self.decode_nodes(&mut g, &p, z)?;
        let inv_b = T::one() / T::of(b as f64);
        let nll_sum = g.bernoulli_nll(logits, batch.clone())?;
        let nll = g.scale(nll_sum, inv_b);
        let kl_sum = g.kl_gaussian(mu, logvar)?;
        let kl = g.scale(kl_sum, inv_b);
        let weighted = g.scale(kl, T::of(self.arch.beta));
        let loss = g.add(nll, weighted)?;
        let terms = ElboTerms {
            loss: g.value(loss).item().as_f64(),
            nll: g.value(nll).item().as_f64(),
            kl: g.value(kl).item().as_f64(),
        };
        Ok((g, loss, terms))
    }

    /// Per-pixel reconstruction probabilities from a latent batch `[B, L]`.
    pub fn decode_probabilities(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let zn = g.constant(z.clone());
        let logits = self.decode_nodes(&mut g, &p, zn)?;
        let probs = g.sigmoid(logits);
        Ok(g.value(probs).clone())
    }

    /// Posterior means for a `[B, 1, H, W]` batch, without building a tape.
    pub fn encode_mean(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let a = &self.arch;
        let mut h = batch.clone();
        let mut layer = 0;
        let pair = |l: usize| (&self.params[2 * l], &self.params[2 * l + 1]);
        for _ in 0..a.conv_layers {
            let (w, b) = pair(layer);
            h = relu(&conv2d_forward(&h, w, Some(b), STRIDE, PAD)?);
            layer += 1;
        }
        let batch_n = h.shape()[0];
        let flat = h.len() / batch_n.max(1);
        h = h.reshape(&[batch_n, flat])?;
        for _ in 0..a.dense_layers {
            let (w, b) = pair(layer);
            h = relu(&dense_forward(&h, w, Some(b))?);
            layer += 1;
        }
        let (w, b) = pair(layer);
        let head = dense_forward(&h, w, Some(b))?;
        let l = a.latent_dim;
        let mu: Vec<T> = head
            .data()
            .chunks_exact(2 * l)
            .flat_map(|row| row[..l].iter().copied())
            .collect();
        Tensor::from_vec(&[batch_n, l], mu)
    }

    /// Goal-space point of an observation: the posterior mean.
    pub fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let x = images_to_tensor(std::slice::from_ref(image), self.arch.image_size)?;
        Ok(self
            .encode_mean(&x)?
            .data()
            .iter()
            .map(|v| v.as_f64())
            .collect())
    }

    pub fn embed_all(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = images_to_tensor(chunk, self.arch.image_size)?;
            let mu = self.encode_mean(&x)?;
            out.extend(
                mu.data()
                    .chunks_exact(self.arch.latent_dim)
                    .map(|row| row.iter().map(|v| v.as_f64()).collect::<Vec<_>>()),
            );
        }
        Ok(out)
    }
}

/// Stacks images into a `[B, 1, S, S]` tensor of intensities.
pub fn images_to_tensor<T: Scalar>(images: &[Image], size: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.size() != size {
            return Err(argument(format!(
                "{}px image for a {size}px model",
                img.size()
            )));
        }
        data.extend(img.intensities().map(T::of));
    }
    Tensor::from_vec(&[images.len(), 1, size, size], data)
}

/// A trained model in either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Representation {
    F64(Vae<f64>),
    F32(Vae<f32>),
}

impl Representation {
    pub fn arch(&self) -> &VaeArchitecture {
        match self {
            Representation::F64(m) => m.arch(),
            Representation::F32(m) => m.arch(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.arch().latent_dim
    }

    pub fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        match self {
            Representation::F64(m) => m.embed(image),
            Representation::F32(m) => m.embed(image),
        }
    }

    pub fn embed_all(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        match self {
            Representation::F64(m) => m.embed_all(images),
            Representation::F32(m) => m.embed_all(images),
        }
    }

    pub fn write_checkpoint<W: std::io::Write>(&self, w: W) -> Result<()> {
        match self {
            Representation::F64(m) => write_tensors(m.params(), w),
            Representation::F32(m) => write_tensors(m.params(), w),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path, arch: VaeArchitecture, precision: Precision) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(match precision {
            Precision::F64 => {
                Representation::F64(Vae::from_tensors(arch, read_tensors(bytes.as_slice())?)?)
            }
            Precision::F32 => {
                Representation::F32(Vae::from_tensors(arch, read_tensors(bytes.as_slice())?)?)
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Representation,
    /// Terms of every iteration's minibatch.
    pub losses: Vec<ElboTerms>,
    /// One record every [`LOG_EVERY`] iterations.
    pub curve: Vec<LossRecord>,
}

pub const LOG_EVERY: usize = 100;
pub const SMOOTHING_WINDOW: usize = 50;

impl TrainOutput {
    /// Mean loss over the first and last [`SMOOTHING_WINDOW`] iterations.
    pub fn smoothed_start_end(&self) -> Option<(f64, f64)> {
        let n = self.losses.len();
        if n == 0 {
            return None;
        }
        let w = SMOOTHING_WINDOW.min(n);
        let mean = |s: &[ElboTerms]| s.iter().map(|t| t.loss).sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..w]), mean(&self.losses[n - w..])))
    }
}

/// Minibatch Adam on the negative ELBO; batches are drawn uniformly with
/// replacement from the dataset.
pub fn train(
    dataset: &ImageDataset,
    arch: &VaeArchitecture,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    train_with_progress(dataset, arch, cfg, |_| {})
}

pub fn train_with_progress(
    dataset: &ImageDataset,
    arch: &VaeArchitecture,
    cfg: &TrainConfig,
    on_log: impl FnMut(&LossRecord),
) -> Result<TrainOutput> {
    if dataset.is_empty() {
        return Err(argument("cannot train on an empty dataset"));
    }
    if dataset.size != arch.image_size {
        return Err(argument(format!(
            "dataset images are {}px, model expects {}px",
            dataset.size, arch.image_size
        )));
    }
    cfg.validate()?;
    match cfg.precision {
        Precision::F64 => {
            let (m, losses, curve) = train_typed::<f64>(dataset, arch, cfg, on_log)?;
            Ok(TrainOutput {
                model: Representation::F64(m),
                losses,
                curve,
            })
        }
        Precision::F32 => {
            let (m, losses, curve) = train_typed::<f32>(dataset, arch, cfg, on_log)?;
            Ok(TrainOutput {
                model: Representation::F32(m),
                losses,
                curve,
            })
        }
    }
}

type Trained<T> = (Vae<T>, Vec<ElboTerms>, Vec<LossRecord>);

fn train_typed<T: Scalar>(
    dataset: &ImageDataset,
    arch: &VaeArchitecture,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LossRecord),
) -> Result<Trained<T>> {
    let mut rng = seeding::stream(cfg.seed, Stream::Representation);
    let mut model = Vae::<T>::new(arch.clone(), &mut rng)?;
    let mut adam = AdamState::new(cfg.learning_rate, model.params());
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut curve = Vec::with_capacity(cfg.iterations / LOG_EVERY);
    let mut batch_images = Vec::with_capacity(cfg.batch_size);

    for it in 0..cfg.iterations {
        batch_images.clear();
        for _ in 0..cfg.batch_size {
            let i = rng.random_range(0..dataset.len());
            batch_images.push(dataset.images[i].clone());
        }
        let batch = images_to_tensor::<T>(&batch_images, arch.image_size)?;
        let (graph, loss, terms) = model.elbo(&batch, &mut rng)?;
        if !terms.loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at iteration {it}")));
        }
        let grads = graph.backward(loss)?.dense(model.params());
        adam.step(model.params_mut(), &grads)?;
        losses.push(terms);
        if (it + 1) % LOG_EVERY == 0 {
            let rec = LossRecord {
                iteration: it + 1,
                terms,
            };
            on_log(&rec);
            curve.push(rec);
        }
    }
    Ok((model, losses, curve))
}

/// Per-dimension `[min, max]` of the embeddings of `images`.
pub fn latent_ranges(model: &Representation, images: &[Image]) -> Result<Vec<[f64; 2]>> {
    if images.is_empty() {
        return Err(argument("latent ranges need at least one image"));
    }
    Ok(ranges_of(&model.embed_all(images)?))
}

/// Elementwise bounds of a non-empty set of points.
pub fn ranges_of(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let dim = points.first().map_or(0, Vec::len);
    let mut out = vec![[f64::INFINITY, f64::NEG_INFINITY]; dim];
    for p in points {
        for (r, &v) in out.iter_mut().zip(p) {
            r[0] = r[0].min(v);
            r[1] = r[1].max(v);
        }
    }
    out
}

/// Writes a training curve as `iteration,nll,kl,loss` rows.
pub fn write_curve_csv<W: std::io::Write>(curve: &[LossRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iteration", "nll", "kl", "loss"])?;
    for r in curve {
        out.write_record([
            r.iteration.to_string(),
            r.terms.nll.to_string(),
            r.terms.kl.to_string(),
            r.terms.loss.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
