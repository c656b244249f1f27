//! Optimization loop: grouped Adam, step-decay schedule, batched training
//! with the full loss suite, per-epoch evaluation and binary checkpoints.
//!
//! Reproducibility contract: all randomness flows from `TrainConfig::seed`
//! through fixed-order draws (epoch shuffle, then per image dropout mask and
//! equivariance transform), and every kernel reduces in a fixed order, so a
//! rerun with the same seed and data is bit-identical.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss, concentration_loss, equivariance_loss, orthogonality_loss,
    presence_loss, total_loss, LossReport, LossTerms, LossWeights,
};
use crate::metrics::{accuracy, ari, assign_keypoints, extract_centroids, nmi, PartCentroid};
use crate::model::{
    backbone_features, compute_attention, eval_forward, forward, Mode, ParamGroup, PartModel,
};
use crate::synthgen::{Dataset, LabeledSample};
use crate::tensor::Tensor;
use crate::transforms::{sample_transform, warp, TransformRanges};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub lr_modulation: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_period: usize,
    pub lr_decay_count: usize,
    pub grad_clip: f64,
    pub part_dropout: f64,
    pub weights: LossWeights,
    pub ranges: TransformRanges,
    pub include_background: bool,
    pub disable_conc: bool,
    pub disable_orth: bool,
    pub disable_equiv: bool,
    pub disable_pres: bool,
    pub disable_part_dropout: bool,
    /// Held-out slice size for per-epoch metrics.
    pub eval_slice: usize,
    pub presence_tau: f64,
    /// Re-seed prototypes from real backbone features before the first
    /// step. Without a pretrained backbone, random prototypes leave the
    /// attention nearly uniform and the heavily weighted concentration
    /// prior then collapses every foreground map before classification
    /// finds any signal.
    pub prototype_warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            seed: 0,
            lr_backbone: 1e-4,
            lr_head: 1e-3,
            lr_modulation: 1e-2,
            lr_decay_factor: 0.5,
            lr_decay_period: 5,
            lr_decay_count: 5,
            grad_clip: 10.0,
            part_dropout: 0.3,
            weights: LossWeights::default(),
            ranges: TransformRanges::default(),
            include_background: true,
            disable_conc: false,
            disable_orth: false,
            disable_equiv: false,
            disable_pres: false,
            disable_part_dropout: false,
            eval_slice: 128,
            presence_tau: 0.1,
            prototype_warm_start: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_backbone <= 0.0 || self.lr_head <= 0.0 || self.lr_modulation <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.lr_decay_factor) || self.lr_decay_factor == 0.0 {
            return Err(Error::Config(format!(
                "decay factor must be in (0, 1), got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_period == 0 {
            return Err(Error::Config("decay period must be >= 1 epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.part_dropout) {
            return Err(Error::Config(format!(
                "part dropout rate must be in [0, 1), got {}",
                self.part_dropout
            )));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        self.ranges.validate()
    }

    fn group_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Head => self.lr_head,
            ParamGroup::Modulation => self.lr_modulation,
        }
    }
}

/// First/second moment buffers per parameter, in `named_params` order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &PartModel) -> Self {
        let sizes: Vec<usize> = model.named_params().iter().map(|(_, _, t)| t.len()).collect();
        OptimizerState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// Canonical bias-corrected Adam update for one parameter tensor. `step`
/// counts from 1 for the current update.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    values: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..values.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Step-decay multiplier: halves every `period` epochs, `max_decays` times.
pub fn lr_schedule(epoch: usize, period: usize, factor: f64, max_decays: usize) -> f64 {
    factor.powi((epoch / period).min(max_decays) as i32)
}

/// Per-epoch slice metrics next to the loss means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub accuracy_pct: f64,
    pub nmi: f64,
    pub ari: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossReport,
    pub eval: SliceMetrics,
}

/// Evaluation products for one image.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub predicted_class: usize,
    pub centroids: Vec<PartCentroid>,
    /// (ground-truth identity, predicted channel) per visible keypoint.
    pub assignments: Vec<(usize, usize)>,
    /// `[K+1, H, W]` attention stack.
    pub attention: Tensor,
}

/// Runs eval-mode forwards over `samples` (in parallel; outputs keep input
/// order) and extracts predictions, centroids and keypoint assignments.
pub fn eval_images(model: &PartModel, samples: &[&LabeledSample], tau: f64) -> Result<Vec<ImageEval>> {
    samples
        .par_iter()
        .map(|sample| {
            let (g, out) = eval_forward(model, &sample.image)?;
            let probs = g.value(out.probs).data();
            let predicted_class = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let attention = g.value(out.attention).clone();
            let centroids = extract_centroids(&attention, tau)?;
            let visible: Vec<(f64, f64, usize)> = sample
                .keypoints
                .iter()
                .filter(|kp| kp.visible)
                .map(|kp| (kp.x, kp.y, kp.identity))
                .collect();
            let assignments = assign_keypoints(&attention, &visible)?;
            Ok(ImageEval { predicted_class, centroids, assignments, attention })
        })
        .collect()
}

/// Slice metrics over a set of evaluated images.
pub fn slice_metrics(evals: &[ImageEval], labels: &[usize]) -> Result<SliceMetrics> {
    let preds: Vec<usize> = evals.iter().map(|e| e.predicted_class).collect();
    let mut gt = Vec::new();
    let mut pred_parts = Vec::new();
    for e in evals {
        for &(identity, channel) in &e.assignments {
            gt.push(identity);
            pred_parts.push(channel);
        }
    }
    Ok(SliceMetrics {
        accuracy_pct: accuracy(&preds, labels)?,
        nmi: nmi(&gt, &pred_parts)?,
        ari: ari(&gt, &pred_parts)?,
    })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Independent stream seed for (config seed, purpose, index).
fn stream_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(purpose.wrapping_mul(0x9E3779B97F4A7C15) ^ index))
}

struct StepOutcome {
    report: LossReport,
    #[cfg_attr(not(test), allow(dead_code))]
    keep_masks: Vec<Vec<bool>>,
}

/// Replaces each prototype with a feature vector sampled from the untrained
/// backbone over random training images, plus a little jitter so no two
/// prototypes coincide. Foreground prototypes draw from high-norm cells
/// (salient structure), the background prototype from a low-norm cell, so
/// every attention channel has a real feature cluster to claim from step one.
pub fn warm_start_prototypes(
    model: &mut PartModel,
    samples: &[&LabeledSample],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    use rand::Rng;
    if samples.is_empty() {
        return Err(Error::Precondition("warm start needs at least one sample".into()));
    }
    let d = model.config.feature_dim();
    let k = model.config.num_parts;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    for proto in 0..=k {
        let sample = samples[rng.random_range(0..samples.len())];
        let mut g = Graph::new();
        let nodes = model.insert(&mut g);
        let img = g.constant(Tensor::new(
            sample.image.shape().to_vec(),
            sample.image.data().to_vec(),
        )?);
        let feats = backbone_features(&mut g, &nodes, &model.config, img)?;
        let fs = g.value(feats).shape().to_vec();
        let (h, w) = (fs[1], fs[2]);
        let ft = g.value(feats);
        let mut by_norm: Vec<(f64, usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| {
                let norm: f64 = (0..d).map(|di| ft.at(&[di, y, x]).powi(2)).sum();
                (norm, y, x)
            })
            .collect();
        by_norm.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite norms"));
        let (cy, cx) = if proto < k {
            // A random cell among the most salient quarter of the grid.
            let tier = (h * w / 4).max(k + 1).min(h * w);
            let pick = rng.random_range(0..tier);
            (by_norm[pick].1, by_norm[pick].2)
        } else {
            // Background: the least salient cell.
            let last = by_norm.len() - 1;
            (by_norm[last].1, by_norm[last].2)
        };
        let mut row = Vec::with_capacity(d);
        for di in 0..d {
            row.push(ft.at(&[di, cy, cx]) + 0.02 * (rng.random::<f64>() - 0.5));
        }
        rows.push(row);
    }
    for (proto, row) in rows.iter().enumerate() {
        for (di, &v) in row.iter().enumerate() {
            model.prototypes.set(&[proto, di], v);
        }
    }
    Ok(())
}

/// One optimizer step over a batch: forwards (plus a warped forward per
/// image when the equivariance prior is on), all enabled losses, backward,
/// global-norm clip and grouped Adam.
fn train_step(
    model: &mut PartModel,
    state: &mut OptimizerState,
    batch: &[&LabeledSample],
    config: &TrainConfig,
    lr_mult: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let nodes = model.insert(&mut g);
    let inv_b = 1.0 / batch.len() as f64;

    let mut class_sum: Option<NodeId> = None;
    let mut conc_sum: Option<NodeId> = None;
    let mut orth_sum: Option<NodeId> = None;
    let mut equiv_sum: Option<NodeId> = None;
    let mut attentions = Vec::with_capacity(batch.len());
    let mut keep_masks = Vec::with_capacity(batch.len());

    let chain = |g: &mut Graph, acc: &mut Option<NodeId>, term: NodeId| -> Result<()> {
        *acc = Some(match *acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
        Ok(())
    };

    for sample in batch {
        let dropout_rate = if config.disable_part_dropout { 0.0 } else { config.part_dropout };
        let out = forward(
            &mut g,
            &nodes,
            &model.config,
            &sample.image,
            Mode::Train { dropout_rate, rng },
        )?;
        keep_masks.push(out.keep_mask.clone());
        attentions.push(out.attention);

        let cls = classification_loss(&mut g, out.scores, sample.class)?;
        chain(&mut g, &mut class_sum, cls)?;
        if !config.disable_conc {
            let conc = concentration_loss(&mut g, out.attention)?;
            chain(&mut g, &mut conc_sum, conc)?;
        }
        if !config.disable_orth {
            let orth =
                orthogonality_loss(&mut g, out.part_vectors, config.include_background)?;
            chain(&mut g, &mut orth_sum, orth)?;
        }
        if !config.disable_equiv {
            let t = sample_transform(rng, &config.ranges)?;
            let warped_image = warp(&sample.image, &t)?;
            let img = g.constant(warped_image);
            let feats = backbone_features(&mut g, &nodes, &model.config, img)?;
            let att_warped = compute_attention(&mut g, feats, nodes.prototypes)?;
            let att_back = g.warp(att_warped, &t.invert())?;
            let eq = equivariance_loss(&mut g, out.attention, att_back)?;
            chain(&mut g, &mut equiv_sum, eq)?;
        }
    }

    let mean_of = |g: &mut Graph, acc: Option<NodeId>| -> Result<Option<NodeId>> {
        acc.map(|id| g.scale(id, inv_b)).transpose()
    };
    let terms = LossTerms {
        class: mean_of(&mut g, class_sum)?,
        conc: mean_of(&mut g, conc_sum)?,
        orth: mean_of(&mut g, orth_sum)?,
        equiv: mean_of(&mut g, equiv_sum)?,
        pres: if config.disable_pres {
            None
        } else {
            Some(presence_loss(&mut g, &attentions)?)
        },
    };
    let (total, report) = total_loss(&mut g, &terms, &config.weights)?;
    g.backward(total)?;

    // Gather gradients in parameter order; verify them before touching any
    // state so a bad step leaves the model untouched.
    let names: Vec<(String, ParamGroup, usize, bool)> = model
        .named_params()
        .iter()
        .map(|(n, grp, t)| (n.clone(), *grp, t.len(), t.requires_grad()))
        .collect();
    let ordered_nodes: Vec<NodeId> = nodes
        .conv_weights
        .iter()
        .zip(&nodes.conv_biases)
        .flat_map(|(&w, &b)| [w, b])
        .chain([nodes.prototypes, nodes.modulation, nodes.classifier])
        .collect();
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(names.len());
    for ((name, _, len, tracked), node) in names.iter().zip(&ordered_nodes) {
        let grad = match g.grad(*node) {
            Some(gd) => gd.to_vec(),
            None => vec![0.0; *len],
        };
        if *tracked && grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {name}; step aborted"
            )));
        }
        grads.push(grad);
    }

    let norm: f64 = grads.iter().flat_map(|v| v.iter().map(|g| g * g)).sum::<f64>().sqrt();
    if norm > config.grad_clip {
        let scale = config.grad_clip / norm;
        for grad in &mut grads {
            for v in grad.iter_mut() {
                *v *= scale;
            }
        }
    }

    state.step += 1;
    let step = state.step;
    let mut index = 0;
    model.for_each_param_mut(|_, group, tensor| {
        if tensor.requires_grad() {
            adam_step(
                tensor.data_mut(),
                &grads[index],
                &mut state.m[index],
                &mut state.v[index],
                step,
                config.group_lr(group) * lr_mult,
                ADAM_BETA1,
                ADAM_BETA2,
                ADAM_EPS,
            );
        }
        index += 1;
    });
    Ok(StepOutcome { report, keep_masks })
}

/// Trains in place; calls `on_epoch` after each epoch (for checkpoints and
/// logging) and returns the per-epoch log.
pub fn train(
    model: &mut PartModel,
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&PartModel, &OptimizerState, &EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if dataset.train_indices.is_empty() {
        return Err(Error::Precondition("training split is empty".into()));
    }
    let mut state = OptimizerState::new(model);
    let mut logs = Vec::with_capacity(config.epochs);
    if config.prototype_warm_start && config.epochs > 0 {
        let train_refs: Vec<&LabeledSample> =
            dataset.train_indices.iter().map(|&i| &dataset.samples[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, 2, 0));
        warm_start_prototypes(model, &train_refs, &mut rng)?;
    }
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, 1, epoch as u64));
        let mut order = dataset.train_indices.clone();
        order.shuffle(&mut rng);
        let lr_mult = lr_schedule(
            epoch,
            config.lr_decay_period,
            config.lr_decay_factor,
            config.lr_decay_count,
        );
        let mut sums = LossReport::default();
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
            let outcome = train_step(model, &mut state, &batch, config, lr_mult, &mut rng)?;
            sums.class += outcome.report.class;
            sums.conc += outcome.report.conc;
            sums.orth += outcome.report.orth;
            sums.equiv += outcome.report.equiv;
            sums.pres += outcome.report.pres;
            sums.total += outcome.report.total;
            steps += 1;
        }
        let inv = 1.0 / steps.max(1) as f64;
        let loss = LossReport {
            class: sums.class * inv,
            conc: sums.conc * inv,
            orth: sums.orth * inv,
            equiv: sums.equiv * inv,
            pres: sums.pres * inv,
            total: sums.total * inv,
        };
        let slice: Vec<&LabeledSample> = dataset
            .test_indices
            .iter()
            .take(config.eval_slice.max(1))
            .map(|&i| &dataset.samples[i])
            .collect();
        let eval = if slice.is_empty() {
            SliceMetrics { accuracy_pct: 0.0, nmi: 0.0, ari: 0.0 }
        } else {
            let labels: Vec<usize> = dataset
                .test_indices
                .iter()
                .take(config.eval_slice.max(1))
                .map(|&i| dataset.samples[i].class)
                .collect();
            let evals = eval_images(model, &slice, config.presence_tau)?;
            slice_metrics(&evals, &labels)?
        };
        let log = EpochLog { epoch, loss, eval };
        on_epoch(model, &state, &log)?;
        logs.push(log);
    }
    Ok(logs)
}

// ── checkpoints ─────────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 4] = b"PDSC";
const CHECKPOINT_VERSION: u32 = 1;

/// Deserialized checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub params: Vec<(String, Tensor)>,
    pub optim: Vec<(String, Tensor)>,
    pub step: u64,
}

fn write_entries(out: &mut Vec<u8>, entries: &[(String, &Tensor)]) {
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &ext in tensor.shape() {
            out.extend_from_slice(&(ext as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serializes model parameters plus optimizer state behind a magic/version
/// header, the sha256 of the resolved config, and the config text itself.
pub fn save_checkpoint(
    path: &Path,
    model: &PartModel,
    state: &OptimizerState,
    config_text: &str,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let digest = Sha256::digest(config_text.as_bytes());
    out.extend_from_slice(&digest);
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());

    let params = model.named_params();
    let entries: Vec<(String, &Tensor)> =
        params.iter().map(|(n, _, t)| (n.clone(), *t)).collect();
    write_entries(&mut out, &entries);

    let step_tensor = Tensor::scalar(state.step as f64);
    let mut optim: Vec<(String, Tensor)> = Vec::new();
    for ((name, _, tensor), (m, v)) in params.iter().zip(state.m.iter().zip(&state.v)) {
        optim.push((format!("adam.m.{name}"), Tensor::new(tensor.shape().to_vec(), m.clone())?));
        optim.push((format!("adam.v.{name}"), Tensor::new(tensor.shape().to_vec(), v.clone())?));
    }
    optim.push(("adam.step".into(), step_tensor));
    let optim_refs: Vec<(String, &Tensor)> =
        optim.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_entries(&mut out, &optim_refs);

    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn entries(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = self.u32()? as usize;
            let name = String::from_utf8(self.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let ndim = self.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = self.take(len * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let digest: Vec<u8> = r.take(32)?.to_vec();
    let config_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(config_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
    if Sha256::digest(config_text.as_bytes()).as_slice() != digest.as_slice() {
        return Err(Error::Checkpoint("config digest mismatch".into()));
    }
    let params = r.entries()?;
    let optim = r.entries()?;
    let step = optim
        .iter()
        .find(|(n, _)| n == "adam.step")
        .map(|(_, t)| t.data()[0] as u64)
        .unwrap_or(0);
    Ok(Checkpoint { config_text, params, optim, step })
}

/// Restores parameters (and optimizer moments when present) into a model.
pub fn restore(model: &mut PartModel, checkpoint: &Checkpoint) -> Result<OptimizerState> {
    for (name, tensor) in &checkpoint.params {
        model.set_param(name, tensor.clone())?;
    }
    let mut state = OptimizerState::new(model);
    state.step = checkpoint.step;
    for (i, (name, _, _)) in model.named_params().iter().enumerate() {
        for (cname, ctensor) in &checkpoint.optim {
            if cname == &format!("adam.m.{name}") {
                state.m[i].copy_from_slice(ctensor.data());
            } else if cname == &format!("adam.v.{name}") {
                state.v[i].copy_from_slice(ctensor.data());
            }
        }
    }
    Ok(state)
}
