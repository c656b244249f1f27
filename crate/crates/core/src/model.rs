//! The part-discovery model.
//!
//! A small CNN backbone turns a `3 x S x S` image into a `D x H x W` feature
//! tensor. K+1 learned prototypes (K parts plus background) are compared
//! against every feature vector to produce attention maps; attention-weighted
//! pooling yields one part vector per prototype; the K foreground vectors are
//! modulated elementwise and pushed through a shared linear classifier whose
//! per-part scores are averaged. Part dropout removes whole parts from the
//! average during training so no single part can carry the classification.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Normalization of attention-weighted pooling: divide by the pixel count
/// (as printed in the pooling formula) or by each map's attention mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingNorm {
    Area,
    Mass,
}

impl PoolingNorm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "area" => Ok(PoolingNorm::Area),
            "mass" => Ok(PoolingNorm::Mass),
            other => Err(Error::Config(format!("unknown pooling_norm \"{other}\""))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PoolingNorm::Area => "area",
            PoolingNorm::Mass => "mass",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input edge length S (images are 3 x S x S).
    pub input_size: usize,
    /// Output channels per backbone block; the last entry is D.
    pub widths: Vec<usize>,
    /// Whether each block ends with a stride-2 average pool.
    pub downsample: Vec<bool>,
    /// Number of foreground parts K.
    pub num_parts: usize,
    /// Number of classes C.
    pub num_classes: usize,
    pub pooling_norm: PoolingNorm,
    /// When false the classifier consumes raw part vectors (ablation).
    pub use_modulation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            widths: vec![8, 16, 32, 64],
            // Three stride-2 stages: an 8x8 grid at S = 64, so one feature
            // cell is about one glyph.
            downsample: vec![true, true, true, false],
            num_parts: 4,
            num_classes: 16,
            pooling_norm: PoolingNorm::Area,
            use_modulation: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.downsample.len() {
            return Err(Error::Config(format!(
                "widths ({}) and downsample ({}) must be equal-length and nonempty",
                self.widths.len(),
                self.downsample.len()
            )));
        }
        if self.num_parts == 0 || self.num_classes < 2 {
            return Err(Error::Config("need at least one part and two classes".into()));
        }
        let halvings = self.downsample.iter().filter(|&&d| d).count() as u32;
        if self.input_size % (1 << halvings) != 0 || self.input_size >> halvings == 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by 2^{halvings}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Feature dimensionality D.
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated nonempty")
    }

    /// Spatial extent of the feature grid (H = W).
    pub fn feature_grid(&self) -> usize {
        let halvings = self.downsample.iter().filter(|&&d| d).count() as u32;
        self.input_size >> halvings
    }
}

/// Learning-rate groups from the three-way split: backbone convolutions, the
/// new head layers (prototypes + classifier), and the modulation vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
    Modulation,
}

/// Backbone weights plus the part head.
#[derive(Debug, Clone)]
pub struct PartModel {
    pub config: ModelConfig,
    /// One `[c_out, c_in, 3, 3]` kernel stack per block.
    pub conv_weights: Vec<Tensor>,
    pub conv_biases: Vec<Tensor>,
    /// `[K+1, D]`: K part prototypes plus one background prototype.
    pub prototypes: Tensor,
    /// `[K, D]` elementwise modulation vectors (foreground parts only).
    pub modulation: Tensor,
    /// `[C, D]` shared classifier matrix.
    pub classifier: Tensor,
}

impl PartModel {
    /// Initializes a model. Backbone kernels are center-dominated (a He-scaled
    /// dirac tap plus a weak 3x3 ring), so initial features behave like
    /// pointwise color transforms: pose-invariant enough for prototype
    /// matching to be stable before any training, while the ring lets spatial
    /// structure grow with the gradients. Prototypes are N(0, 0.1^2),
    /// modulation starts at all-ones and the classifier at unit scale. Draw
    /// order is fixed so a seed pins the parameters.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut conv_weights = Vec::new();
        let mut conv_biases = Vec::new();
        let mut c_in = 3;
        for &c_out in &config.widths {
            let center = Normal::new(0.0, (2.0 / c_in as f64).sqrt()).expect("center sd");
            let ring = Normal::new(0.0, 0.3 * (2.0 / (9.0 * c_in as f64)).sqrt()).expect("ring sd");
            let mut data = Vec::with_capacity(c_out * c_in * 9);
            for _ in 0..c_out * c_in {
                for tap in 0..9 {
                    data.push(if tap == 4 { center.sample(rng) } else { ring.sample(rng) });
                }
            }
            conv_weights.push(Tensor::new(vec![c_out, c_in, 3, 3], data)?.with_grad());
            conv_biases.push(Tensor::zeros(vec![c_out]).with_grad());
            c_in = c_out;
        }
        let d = config.feature_dim();
        let k = config.num_parts;
        let proto = Normal::new(0.0, 0.1).expect("proto sd");
        let prototypes = Tensor::new(
            vec![k + 1, d],
            (0..(k + 1) * d).map(|_| proto.sample(rng)).collect(),
        )?
        .with_grad();
        let modulation = if config.use_modulation {
            Tensor::full(vec![k, d], 1.0).with_grad()
        } else {
            Tensor::full(vec![k, d], 1.0)
        };
        // Area-normalized pooling leaves part vectors with norm well below
        // one, so the classifier needs unit-scale rows for the initial
        // logits to reach O(1) and give cross-entropy real traction.
        let cls = Normal::new(0.0, 1.0).expect("classifier sd");
        let classifier = Tensor::new(
            vec![config.num_classes, d],
            (0..config.num_classes * d).map(|_| cls.sample(rng)).collect(),
        )?
        .with_grad();
        Ok(PartModel { config, conv_weights, conv_biases, prototypes, modulation, classifier })
    }

    /// Named parameters in a fixed order (checkpoint and optimizer order).
    pub fn named_params(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.conv_weights.iter().zip(&self.conv_biases).enumerate() {
            out.push((format!("backbone.block{i}.weight"), ParamGroup::Backbone, w));
            out.push((format!("backbone.block{i}.bias"), ParamGroup::Backbone, b));
        }
        out.push(("head.prototypes".into(), ParamGroup::Head, &self.prototypes));
        out.push(("head.modulation".into(), ParamGroup::Modulation, &self.modulation));
        out.push(("head.classifier".into(), ParamGroup::Head, &self.classifier));
        out
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, ParamGroup, &mut Tensor)) {
        for (i, (w, b)) in self.conv_weights.iter_mut().zip(&mut self.conv_biases).enumerate() {
            f(&format!("backbone.block{i}.weight"), ParamGroup::Backbone, w);
            f(&format!("backbone.block{i}.bias"), ParamGroup::Backbone, b);
        }
        f("head.prototypes", ParamGroup::Head, &mut self.prototypes);
        f("head.modulation", ParamGroup::Modulation, &mut self.modulation);
        f("head.classifier", ParamGroup::Head, &mut self.classifier);
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let mut found = false;
        let mut err = None;
        self.for_each_param_mut(|n, _, t| {
            if n == name && !found {
                found = true;
                if t.shape() != value.shape() {
                    err = Some(Error::Shape(format!(
                        "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                        value.shape(),
                        t.shape()
                    )));
                } else {
                    t.data_mut().copy_from_slice(value.data());
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if !found {
            return Err(Error::Checkpoint(format!("unknown parameter name \"{name}\"")));
        }
        Ok(())
    }

    /// Inserts all parameters as graph leaves for one forward/backward pass.
    pub fn insert(&self, g: &mut Graph) -> ModelNodes {
        ModelNodes {
            conv_weights: self.conv_weights.iter().map(|t| g.leaf(t)).collect(),
            conv_biases: self.conv_biases.iter().map(|t| g.leaf(t)).collect(),
            prototypes: g.leaf(&self.prototypes),
            modulation: g.leaf(&self.modulation),
            classifier: g.leaf(&self.classifier),
        }
    }
}

/// Graph leaf ids for one pass of the model's parameters.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub conv_weights: Vec<NodeId>,
    pub conv_biases: Vec<NodeId>,
    pub prototypes: NodeId,
    pub modulation: NodeId,
    pub classifier: NodeId,
}

/// Train/eval switch for [`forward`].
pub enum Mode<'a, R: Rng> {
    Train { dropout_rate: f64, rng: &'a mut R },
    Eval,
}

/// Everything a training step needs from one image's pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[K+1, H, W]` attention maps, channel-sum 1 at every pixel.
    pub attention: NodeId,
    /// `[K+1, D]` pooled part vectors (background last).
    pub part_vectors: NodeId,
    /// `[K, C]` per-part class scores.
    pub per_part_scores: NodeId,
    /// `[C]` averaged scores over kept parts.
    pub scores: NodeId,
    /// `[C]` softmax of `scores`.
    pub probs: NodeId,
    pub keep_mask: Vec<bool>,
}

/// Backbone: per block, 3x3 conv (stride 1, pad 1) -> relu -> optional
/// stride-2 max pool. Maps `[3, S, S]` to `[D, H, W]`. Max pooling keeps
/// activation magnitudes through the downsample chain, which matters here
/// because the prototype distances need feature variance to produce any
/// spatial structure at initialization.
pub fn backbone_features(
    g: &mut Graph,
    nodes: &ModelNodes,
    cfg: &ModelConfig,
    image: NodeId,
) -> Result<NodeId> {
    let mut x = image;
    for i in 0..cfg.widths.len() {
        x = g.conv2d(x, nodes.conv_weights[i], nodes.conv_biases[i], 1, 1)?;
        x = g.relu(x)?;
        if cfg.downsample[i] {
            x = g.maxpool2d(x, 2, 2)?;
        }
    }
    Ok(x)
}

/// Attention maps from squared prototype distances: per pixel,
/// softmax_k( -|z_ij - p_k|^2 ) over the K+1 channels. The shared -|z|^2
/// term rides through the softmax's max subtraction unchanged.
pub fn compute_attention(g: &mut Graph, features: NodeId, prototypes: NodeId) -> Result<NodeId> {
    let fs = g.value(features).shape().to_vec();
    let ps = g.value(prototypes).shape().to_vec();
    if fs.len() != 3 || ps.len() != 2 || ps[1] != fs[0] {
        return Err(Error::Shape(format!(
            "attention expects features [D,H,W] and prototypes [K+1,D]; got {fs:?} and {ps:?}"
        )));
    }
    let (d, h, w) = (fs[0], fs[1], fs[2]);
    let z2d = g.reshape(features, vec![d, h * w])?;
    let zsq_e = g.square(z2d)?;
    let zsq = g.sum(zsq_e, &[0])?; // [1, HW]
    let psq_e = g.square(prototypes)?;
    let psq = g.sum(psq_e, &[1])?; // [K+1, 1]
    let cross = g.matmul(prototypes, z2d)?; // [K+1, HW]
    let twice = g.scale(cross, 2.0)?;
    let m1 = g.sub(twice, psq)?;
    let logits = g.sub(m1, zsq)?; // -(|z|^2 - 2 z.p + |p|^2)
    let att = g.softmax(logits, 0)?;
    g.reshape(att, vec![ps[0], h, w])
}

/// Attention-weighted pooling of feature vectors into `[K+1, D]` part
/// vectors: `v_k = sum_ij z_ij a_ij^k / (H W)` for area normalization, or
/// division by `sum_ij a_ij^k + 1e-6` for mass normalization.
pub fn pool_part_vectors(
    g: &mut Graph,
    features: NodeId,
    attention: NodeId,
    norm: PoolingNorm,
) -> Result<NodeId> {
    let fs = g.value(features).shape().to_vec();
    let as_ = g.value(attention).shape().to_vec();
    if fs.len() != 3 || as_.len() != 3 || fs[1] != as_[1] || fs[2] != as_[2] {
        return Err(Error::Shape(format!(
            "pooling expects matching spatial extents; got features {fs:?}, attention {as_:?}"
        )));
    }
    let (d, h, w) = (fs[0], fs[1], fs[2]);
    let kp1 = as_[0];
    let z2d = g.reshape(features, vec![d, h * w])?;
    let a2d = g.reshape(attention, vec![kp1, h * w])?;
    let zt = g.transpose(z2d)?; // [HW, D]
    let raw = g.matmul(a2d, zt)?; // [K+1, D]
    match norm {
        PoolingNorm::Area => g.scale(raw, 1.0 / (h * w) as f64),
        PoolingNorm::Mass => {
            let mass = g.sum(a2d, &[1])?; // [K+1, 1]
            let denom = g.add_scalar(mass, 1e-6)?;
            g.div(raw, denom)
        }
    }
}

/// Per-part scores and their masked average. Only the K foreground vectors
/// are classified; scores of kept parts are averaged and softmaxed.
pub fn classify(
    g: &mut Graph,
    part_vectors: NodeId,
    modulation: NodeId,
    classifier: NodeId,
    keep_mask: &[bool],
    use_modulation: bool,
) -> Result<(NodeId, NodeId, NodeId)> {
    let vs = g.value(part_vectors).shape().to_vec();
    let k = vs[0].checked_sub(1).filter(|&k| k > 0).ok_or_else(|| {
        Error::Shape(format!("part vectors {vs:?} must hold K+1 >= 2 rows"))
    })?;
    if keep_mask.len() != k {
        return Err(Error::Shape(format!(
            "keep mask has {} entries for {k} parts",
            keep_mask.len()
        )));
    }
    let kept = keep_mask.iter().filter(|&&b| b).count();
    if kept == 0 {
        return Err(Error::Precondition("keep mask drops every part".into()));
    }
    let fg = g.narrow(part_vectors, 0, 0, k)?;
    let modulated = if use_modulation { g.mul(fg, modulation)? } else { fg };
    let wt = g.transpose(classifier)?; // [D, C]
    let per_part = g.matmul(modulated, wt)?; // [K, C]
    let mask = g.constant(Tensor::new(
        vec![k, 1],
        keep_mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?);
    let masked = g.mul(per_part, mask)?;
    let summed = g.sum(masked, &[0])?; // [1, C]
    let c = g.value(summed).shape()[1];
    let scaled = g.scale(summed, 1.0 / kept as f64)?;
    let scores = g.reshape(scaled, vec![c])?;
    let probs = g.softmax(scores, 0)?;
    Ok((per_part, scores, probs))
}

/// Independent Bernoulli part dropout; resamples until at least one part
/// survives. Rate 0 keeps everything.
pub fn sample_part_dropout(k: usize, rate: f64, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("part dropout rate must be in [0, 1), got {rate}")));
    }
    loop {
        let mask: Vec<bool> = (0..k).map(|_| rng.random::<f64>() >= rate).collect();
        if mask.iter().any(|&b| b) {
            return Ok(mask);
        }
    }
}

/// Full pass: backbone, attention, pooling, dropout (train only), classify.
pub fn forward<R: Rng>(
    g: &mut Graph,
    nodes: &ModelNodes,
    cfg: &ModelConfig,
    image: &Tensor,
    mode: Mode<'_, R>,
) -> Result<ForwardOutput> {
    let img = g.constant(Tensor::new(image.shape().to_vec(), image.data().to_vec())?);
    let features = backbone_features(g, nodes, cfg, img)?;
    let attention = compute_attention(g, features, nodes.prototypes)?;
    let part_vectors = pool_part_vectors(g, features, attention, cfg.pooling_norm)?;
    let keep_mask = match mode {
        Mode::Train { dropout_rate, rng } => {
            sample_part_dropout(cfg.num_parts, dropout_rate, rng)?
        }
        Mode::Eval => vec![true; cfg.num_parts],
    };
    let (per_part_scores, scores, probs) = classify(
        g,
        part_vectors,
        nodes.modulation,
        nodes.classifier,
        &keep_mask,
        cfg.use_modulation,
    )?;
    Ok(ForwardOutput { attention, part_vectors, per_part_scores, scores, probs, keep_mask })
}

/// Eval-mode forward on a private graph; returns the graph for value reads.
pub fn eval_forward(model: &PartModel, image: &Tensor) -> Result<(Graph, ForwardOutput)> {
    let mut g = Graph::new();
    let nodes = model.insert(&mut g);
    let out = forward::<rand_chacha::ChaCha8Rng>(&mut g, &nodes, &model.config, image, Mode::Eval)?;
    Ok((g, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_size: 16,
            widths: vec![4, 8],
            downsample: vec![true, true],
            num_parts: 3,
            num_classes: 4,
            pooling_norm: PoolingNorm::Area,
            use_modulation: true,
        }
    }

    fn graph_with(t: Tensor) -> (Graph, NodeId) {
        let mut g = Graph::new();
        let id = g.constant(t);
        (g, id)
    }

    #[test]
    fn attention_uniform_when_equidistant() {
        let (d, k) = (3, 2);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![d, 2, 2]));
        // Prototypes on distinct axes, all at distance 1 from the origin.
        let p = g.constant(
            Tensor::new(vec![k + 1, d], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let a = compute_attention(&mut g, z, p).unwrap();
        for &v in g.value(a).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_dominance_at_matching_prototype() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap());
        let p = g.constant(
            Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 11.0, 0.0, 0.0]).unwrap(),
        );
        let a = compute_attention(&mut g, z, p).unwrap();
        assert!(g.value(a).data()[0] > 1.0 - 1e-8);
    }

    #[test]
    fn attention_matches_per_pixel_oracle() {
        let (d, k, h, w) = (3, 2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zt = Tensor::new(vec![d, h, w], (0..d * h * w).map(|_| rng.random::<f64>()).collect())
            .unwrap();
        let pt = Tensor::new(
            vec![k + 1, d],
            (0..(k + 1) * d).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let z = g.constant(zt.clone());
        let p = g.constant(pt.clone());
        let a = compute_attention(&mut g, z, p).unwrap();
        for y in 0..h {
            for x in 0..w {
                let mut logits = Vec::new();
                for ki in 0..=k {
                    let mut d2 = 0.0;
                    for di in 0..d {
                        let diff = zt.at(&[di, y, x]) - pt.at(&[ki, di]);
                        d2 += diff * diff;
                    }
                    logits.push(-d2);
                }
                let hi = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - hi).exp()).collect();
                let total: f64 = exps.iter().sum();
                for ki in 0..=k {
                    assert!((g.value(a).at(&[ki, y, x]) - exps[ki] / total).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_channels_sum_to_one_under_adversarial_scale() {
        for scale in [1.0, 1e3, -1e3] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let (mut g, z) = graph_with(
                Tensor::new(
                    vec![4, 3, 3],
                    (0..36).map(|_| rng.random::<f64>() * scale).collect(),
                )
                .unwrap(),
            );
            let p = g.constant(
                Tensor::new(vec![3, 4], (0..12).map(|_| rng.random::<f64>()).collect()).unwrap(),
            );
            let a = compute_attention(&mut g, z, p).unwrap();
            let at = g.value(a);
            for y in 0..3 {
                for x in 0..3 {
                    let s: f64 = (0..3).map(|k| at.at(&[k, y, x])).sum();
                    assert!((s - 1.0).abs() < 1e-9, "sum {s} at scale {scale}");
                }
            }
        }
    }

    #[test]
    fn pooling_impulse_exposes_area_normalization() {
        let (d, h, w) = (2, 2, 3);
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![d, h, w], (0..12).map(f64::from).collect()).unwrap());
        let mut a = Tensor::zeros(vec![2, h, w]);
        a.set(&[0, 1, 2], 1.0); // one-hot at pixel (1, 2)
        let aid = g.constant(a);
        let v = pool_part_vectors(&mut g, z, aid, PoolingNorm::Area).unwrap();
        let vt = g.value(v);
        for di in 0..d {
            let z_val = g.value(z).at(&[di, 1, 2]);
            assert!((vt.at(&[0, di]) - z_val / 6.0).abs() < 1e-15);
            assert_eq!(vt.at(&[1, di]), 0.0);
        }
    }

    #[test]
    fn pooling_uniform_attention_gives_scaled_mean() {
        let (d, k, h, w) = (3, 2, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zt = Tensor::new(vec![d, h, w], (0..27).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mut g = Graph::new();
        let z = g.constant(zt.clone());
        let a = g.constant(Tensor::full(vec![k + 1, h, w], 1.0 / (k + 1) as f64));
        let v = pool_part_vectors(&mut g, z, a, PoolingNorm::Area).unwrap();
        for ki in 0..=k {
            for di in 0..d {
                let mean: f64 =
                    (0..h).flat_map(|y| (0..w).map(move |x| (y, x)))
                        .map(|(y, x)| zt.at(&[di, y, x]))
                        .sum::<f64>()
                        / (h * w) as f64;
                let expect = mean / (k + 1) as f64;
                assert!((g.value(v).at(&[ki, di]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_matches_double_loop_oracle() {
        let (d, k, h, w) = (4, 2, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let zt = Tensor::new(vec![d, h, w], (0..d * h * w).map(|_| rng.random::<f64>()).collect())
            .unwrap();
        let at = Tensor::new(
            vec![k + 1, h, w],
            (0..(k + 1) * h * w).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        for norm in [PoolingNorm::Area, PoolingNorm::Mass] {
            let mut g = Graph::new();
            let z = g.constant(zt.clone());
            let a = g.constant(at.clone());
            let v = pool_part_vectors(&mut g, z, a, norm).unwrap();
            for ki in 0..=k {
                let mass: f64 = (0..h)
                    .flat_map(|y| (0..w).map(move |x| (y, x)))
                    .map(|(y, x)| at.at(&[ki, y, x]))
                    .sum();
                for di in 0..d {
                    let mut acc = 0.0;
                    for y in 0..h {
                        for x in 0..w {
                            acc += zt.at(&[di, y, x]) * at.at(&[ki, y, x]);
                        }
                    }
                    let expect = match norm {
                        PoolingNorm::Area => acc / (h * w) as f64,
                        PoolingNorm::Mass => acc / (mass + 1e-6),
                    };
                    assert!((g.value(v).at(&[ki, di]) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pooling_is_degree_one_in_attention() {
        // Power-of-two scales make the homogeneity exact in f64.
        let (d, k, h, w) = (3, 2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zt = Tensor::new(vec![d, h, w], (0..12).map(|_| rng.random::<f64>()).collect()).unwrap();
        let at = Tensor::new(
            vec![k + 1, h, w],
            (0..(k + 1) * h * w).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        for c in [0.5, 2.0, 4.0] {
            let scaled = Tensor::new(
                at.shape().to_vec(),
                at.data().iter().map(|&v| c * v).collect(),
            )
            .unwrap();
            let run = |amap: &Tensor| {
                let mut g = Graph::new();
                let z = g.constant(zt.clone());
                let a = g.constant(amap.clone());
                let v = pool_part_vectors(&mut g, z, a, PoolingNorm::Area).unwrap();
                g.value(v).data().to_vec()
            };
            let base = run(&at);
            let big = run(&scaled);
            for (b, s) in base.iter().zip(&big) {
                assert_eq!(*s, c * b);
            }
        }
    }

    #[test]
    fn classify_identity_modulation_single_part() {
        let (d, c) = (3, 2);
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![2, d], vec![1.0, 2.0, 3.0, 9.0, 9.0, 9.0]).unwrap());
        let m = g.constant(Tensor::full(vec![1, d], 1.0));
        let wt = Tensor::new(vec![c, d], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let w = g.constant(wt);
        let (_, s, _) = classify(&mut g, v, m, w, &[true], true).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 5.0]);
    }

    #[test]
    fn classify_average_invariant_for_identical_parts() {
        let (d, c) = (4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let row: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let mut vdata = row.clone();
        vdata.extend_from_slice(&row);
        vdata.extend(std::iter::repeat_n(0.0, d)); // background
        let wt = Tensor::new(vec![c, d], (0..c * d).map(|_| rng.random::<f64>()).collect()).unwrap();
        let run = |mask: &[bool]| {
            let mut g = Graph::new();
            let v = g.constant(Tensor::new(vec![3, d], vdata.clone()).unwrap());
            let m = g.constant(Tensor::full(vec![2, d], 1.0));
            let w = g.constant(wt.clone());
            let (_, s, _) = classify(&mut g, v, m, w, mask, true).unwrap();
            g.value(s).data().to_vec()
        };
        let both = run(&[true, true]);
        let one = run(&[true, false]);
        for (a, b) in both.iter().zip(&one) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_matches_matrix_vector_oracle() {
        let (k, d, c) = (3, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let vt = Tensor::new(vec![k + 1, d], (0..(k + 1) * d).map(|_| rng.random::<f64>()).collect())
            .unwrap();
        let mt = Tensor::new(vec![k, d], (0..k * d).map(|_| rng.random::<f64>()).collect()).unwrap();
        let wt = Tensor::new(vec![c, d], (0..c * d).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mask = [true, false, true];
        let mut g = Graph::new();
        let v = g.constant(vt.clone());
        let m = g.constant(mt.clone());
        let w = g.constant(wt.clone());
        let (per_part, s, probs) = classify(&mut g, v, m, w, &mask, true).unwrap();
        let mut mean = vec![0.0; c];
        for ki in 0..k {
            for ci in 0..c {
                let mut acc = 0.0;
                for di in 0..d {
                    acc += wt.at(&[ci, di]) * (mt.at(&[ki, di]) * vt.at(&[ki, di]));
                }
                assert!((g.value(per_part).at(&[ki, ci]) - acc).abs() < 1e-12);
                if mask[ki] {
                    mean[ci] += acc / 2.0;
                }
            }
        }
        for ci in 0..c {
            assert!((g.value(s).data()[ci] - mean[ci]).abs() < 1e-12);
        }
        let p: f64 = g.value(probs).data().iter().sum();
        assert!((p - 1.0).abs() < 1e-9);
    }

    #[test]
    fn classify_rejects_all_dropped() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::zeros(vec![3, 2]));
        let m = g.constant(Tensor::full(vec![2, 2], 1.0));
        let w = g.constant(Tensor::zeros(vec![2, 2]));
        let r = classify(&mut g, v, m, w, &[false, false], true);
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn dropout_zero_rate_keeps_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = sample_part_dropout(8, 0.0, &mut rng).unwrap();
        assert_eq!(mask, vec![true; 8]);
    }

    #[test]
    fn dropout_always_keeps_at_least_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5000 {
            let mask = sample_part_dropout(4, 0.9, &mut rng).unwrap();
            assert!(mask.iter().any(|&b| b));
        }
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_part_dropout(4, 1.0, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dropout_keep_rate_matches_conditional_binomial() {
        // Resampling all-dropped masks conditions the distribution on >= 1
        // kept part, so the expected keep rate is (1-r)/(1-r^K) and the
        // spread comes from the conditional variance.
        let (k, r, n) = (8usize, 0.9f64, 10_000usize);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut kept_total = 0usize;
        for _ in 0..n {
            kept_total +=
                sample_part_dropout(k, r, &mut rng).unwrap().iter().filter(|&&b| b).count();
        }
        let p = 1.0 - r;
        let alive = 1.0 - r.powi(k as i32);
        let mean_count = k as f64 * p / alive;
        let ex2 = (k as f64 * p * r + (k as f64 * p).powi(2)) / alive;
        let sd_count = (ex2 - mean_count * mean_count).sqrt();
        let empirical = kept_total as f64 / n as f64;
        let tol = 2.0 * sd_count / (n as f64).sqrt();
        assert!(
            (empirical - mean_count).abs() < tol,
            "kept/draw {empirical} vs conditional mean {mean_count} (tol {tol})"
        );
    }

    #[test]
    fn eval_forward_is_deterministic_and_normalized() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = PartModel::init(cfg.clone(), &mut rng).unwrap();
        let image = Tensor::new(
            vec![3, 16, 16],
            (0..3 * 256).map(|i| ((i * 31 % 97) as f64) / 97.0).collect(),
        )
        .unwrap();
        let (g1, o1) = eval_forward(&model, &image).unwrap();
        let (g2, o2) = eval_forward(&model, &image).unwrap();
        assert_eq!(g1.value(o1.probs).data(), g2.value(o2.probs).data());
        assert_eq!(g1.value(o1.attention).data(), g2.value(o2.attention).data());
        assert_eq!(o1.keep_mask, vec![true; cfg.num_parts]);

        let at = g1.value(o1.attention);
        let grid = cfg.feature_grid();
        for y in 0..grid {
            for x in 0..grid {
                let s: f64 = (0..=cfg.num_parts).map(|k| at.at(&[k, y, x])).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
        let p: f64 = g1.value(o1.probs).data().iter().sum();
        assert!((p - 1.0).abs() < 1e-9);
    }

    #[test]
    fn permuting_parts_permutes_scores_and_preserves_average() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut model = PartModel::init(cfg.clone(), &mut rng).unwrap();
        for v in model.modulation.data_mut() {
            *v = rng.random::<f64>() + 0.5;
        }
        let image = Tensor::new(
            vec![3, 16, 16],
            (0..3 * 256).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        let (g1, o1) = eval_forward(&model, &image).unwrap();
        let base_s = g1.value(o1.scores).data().to_vec();
        let base_pp = g1.value(o1.per_part_scores).data().to_vec();
        let c = cfg.num_classes;

        // Rotate the three foreground parts (prototypes + modulation rows).
        let perm = [1usize, 2, 0];
        let mut permuted = model.clone();
        let d = cfg.feature_dim();
        for (dst, &src) in perm.iter().enumerate() {
            for di in 0..d {
                let pv = model.prototypes.at(&[src, di]);
                permuted.prototypes.set(&[dst, di], pv);
                let mv = model.modulation.at(&[src, di]);
                permuted.modulation.set(&[dst, di], mv);
            }
        }
        let (g2, o2) = eval_forward(&permuted, &image).unwrap();
        let perm_s = g2.value(o2.scores).data().to_vec();
        let perm_pp = g2.value(o2.per_part_scores).data().to_vec();
        for (dst, &src) in perm.iter().enumerate() {
            for ci in 0..c {
                assert!((perm_pp[dst * c + ci] - base_pp[src * c + ci]).abs() < 1e-12);
            }
        }
        for (a, b) in base_s.iter().zip(&perm_s) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
