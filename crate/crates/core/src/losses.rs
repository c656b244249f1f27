//! Training objectives: classification plus the four part priors
//! (concentration, orthogonality, equivariance, presence) and their
//! weighted combination.
//!
//! Every loss builds onto an existing [`Graph`] and returns a scalar node, so
//! gradients flow back through the model. Attention stacks are `[K+1, H, W]`
//! with the background in the last channel; the priors only touch the K
//! foreground channels. Norm denominators carry a 1e-6 guard so dead channels
//! cannot produce NaNs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EPS: f64 = 1e-6;

/// Multipliers for the weighted total. The concentration term is three
/// orders of magnitude smaller than the rest, hence its large default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub class: f64,
    pub conc: f64,
    pub orth: f64,
    pub equiv: f64,
    pub pres: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { class: 1.0, conc: 1000.0, orth: 1.0, equiv: 1.0, pres: 1.0 }
    }
}

/// Scalar nodes of the computed terms; `None` marks a disabled term, which
/// contributes nothing to the total and reports as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub class: Option<NodeId>,
    pub conc: Option<NodeId>,
    pub orth: Option<NodeId>,
    pub equiv: Option<NodeId>,
    pub pres: Option<NodeId>,
}

/// Per-term values plus the weighted total, as logged every epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossReport {
    pub class: f64,
    pub conc: f64,
    pub orth: f64,
    pub equiv: f64,
    pub pres: f64,
    pub total: f64,
}

fn scalar(g: &mut Graph, id: NodeId) -> Result<NodeId> {
    if g.value(id).len() != 1 {
        return Err(Error::Shape(format!(
            "expected a scalar loss, got shape {:?}",
            g.value(id).shape()
        )));
    }
    g.reshape(id, vec![1])
}

/// Cross-entropy of the true class under the score vector, computed as
/// `logsumexp(s) - s_y` so no stored probability is ever logged.
pub fn classification_loss(g: &mut Graph, scores: NodeId, class: usize) -> Result<NodeId> {
    let shape = g.value(scores).shape().to_vec();
    if shape.len() != 1 {
        return Err(Error::Shape(format!("scores must be a vector, got {shape:?}")));
    }
    let c = shape[0];
    if class >= c {
        return Err(Error::Numeric(format!("class index {class} out of range for {c} classes")));
    }
    let hi = g.max(scores, &[0])?;
    let shifted = g.sub(scores, hi)?;
    let exps = g.exp(shifted)?;
    let total = g.sum(exps, &[0])?;
    let log_total = g.log(total)?;
    let lse = g.add(log_total, hi)?;
    let mut onehot = vec![0.0; c];
    onehot[class] = 1.0;
    let oh = g.constant(Tensor::from_vec(onehot));
    let picked = g.mul(scores, oh)?;
    let s_y = g.sum(picked, &[0])?;
    let loss = g.sub(lse, s_y)?;
    scalar(g, loss)
}

/// Normalized cell-center coordinates along one axis, tiled over the grid.
fn coord_row(g: &mut Graph, h: usize, w: usize, horizontal: bool) -> NodeId {
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            data.push(if horizontal {
                (j as f64 + 0.5) / w as f64
            } else {
                (i as f64 + 0.5) / h as f64
            });
        }
    }
    g.constant(Tensor::new(vec![1, h * w], data).expect("coord shape"))
}

/// Mean spatial variance of the mass-normalized foreground maps: for each
/// part, the variance of its attention as a distribution over cell-center
/// coordinates, vertical plus horizontal, averaged over the K parts.
pub fn concentration_loss(g: &mut Graph, attention: NodeId) -> Result<NodeId> {
    let shape = g.value(attention).shape().to_vec();
    if shape.len() != 3 || shape[0] < 2 {
        return Err(Error::Shape(format!(
            "attention must be [K+1, H, W] with K >= 1, got {shape:?}"
        )));
    }
    let (k, h, w) = (shape[0] - 1, shape[1], shape[2]);
    let fg = g.narrow(attention, 0, 0, k)?;
    let flat = g.reshape(fg, vec![k, h * w])?;
    let mass = g.sum(flat, &[1])?;
    let denom = g.add_scalar(mass, EPS)?;
    let normed = g.div(flat, denom)?;
    let mut axis_var = Vec::new();
    for horizontal in [false, true] {
        let coords = coord_row(g, h, w, horizontal);
        let weighted = g.mul(normed, coords)?;
        let mu = g.sum(weighted, &[1])?; // [K, 1]
        let diff = g.sub(coords, mu)?; // [K, HW] by broadcast
        let diff2 = g.square(diff)?;
        let contrib = g.mul(normed, diff2)?;
        axis_var.push(g.sum(contrib, &[1])?);
    }
    let both = g.add(axis_var[0], axis_var[1])?;
    let total = g.sum(both, &[0, 1])?;
    let loss = g.scale(total, 1.0 / k as f64)?;
    scalar(g, loss)
}

/// Sum of pairwise cosine similarities between part vectors over ordered
/// pairs (no pair-count normalization). `include_background` widens the sum
/// from the K foreground vectors to all K+1.
pub fn orthogonality_loss(
    g: &mut Graph,
    part_vectors: NodeId,
    include_background: bool,
) -> Result<NodeId> {
    let shape = g.value(part_vectors).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("part vectors must be [N, D], got {shape:?}")));
    }
    let n = if include_background { shape[0] } else { shape[0] - 1 };
    if n < 2 {
        return Err(Error::Precondition(format!(
            "orthogonality needs at least 2 vectors, got {n}"
        )));
    }
    let v = if include_background {
        part_vectors
    } else {
        g.narrow(part_vectors, 0, 0, n)?
    };
    let sq = g.square(v)?;
    let sumsq = g.sum(sq, &[1])?; // [N, 1]
    let norms = g.sqrt(sumsq)?;
    let norms_t = g.transpose(norms)?; // [1, N]
    let vt = g.transpose(v)?;
    let gram = g.matmul(v, vt)?; // [N, N]
    let outer = g.mul(norms, norms_t)?;
    let denom = g.add_scalar(outer, EPS)?;
    let cosines = g.div(gram, denom)?;
    let mut mask = vec![1.0; n * n];
    for i in 0..n {
        mask[i * n + i] = 0.0;
    }
    let off_diag = g.constant(Tensor::new(vec![n, n], mask)?);
    let masked = g.mul(cosines, off_diag)?;
    let loss = g.sum(masked, &[0, 1])?;
    scalar(g, loss)
}

/// One minus the mean foreground cosine between the attention of the
/// original image and the warped-back attention of the transformed image.
pub fn equivariance_loss(g: &mut Graph, original: NodeId, warped_back: NodeId) -> Result<NodeId> {
    let sa = g.value(original).shape().to_vec();
    let sb = g.value(warped_back).shape().to_vec();
    if sa != sb || sa.len() != 3 || sa[0] < 2 {
        return Err(Error::Shape(format!(
            "equivariance expects two equal [K+1, H, W] stacks, got {sa:?} and {sb:?}"
        )));
    }
    let (k, h, w) = (sa[0] - 1, sa[1], sa[2]);
    let fa = g.narrow(original, 0, 0, k)?;
    let fb = g.narrow(warped_back, 0, 0, k)?;
    let fa = g.reshape(fa, vec![k, h * w])?;
    let fb = g.reshape(fb, vec![k, h * w])?;
    let prod = g.mul(fa, fb)?;
    let inner = g.sum(prod, &[1])?; // [K, 1]
    let na_sq = g.square(fa)?;
    let na_sum = g.sum(na_sq, &[1])?;
    let na = g.sqrt(na_sum)?;
    let nb_sq = g.square(fb)?;
    let nb_sum = g.sum(nb_sq, &[1])?;
    let nb = g.sqrt(nb_sum)?;
    let outer = g.mul(na, nb)?;
    let denom = g.add_scalar(outer, EPS)?;
    let cos = g.div(inner, denom)?;
    let mean = g.mean(cos, &[0, 1])?;
    let neg = g.scale(mean, -1.0)?;
    let loss = g.add_scalar(neg, 1.0)?;
    scalar(g, loss)
}

/// One minus the mean over parts of the best 3x3-pooled attention anywhere
/// in the batch. The pooling stops a single hot pixel from counting as
/// presence.
pub fn presence_loss(g: &mut Graph, batch_attention: &[NodeId]) -> Result<NodeId> {
    if batch_attention.is_empty() {
        return Err(Error::Precondition("presence loss needs a nonempty batch".into()));
    }
    let shape = g.value(batch_attention[0]).shape().to_vec();
    if shape.len() != 3 || shape[0] < 2 {
        return Err(Error::Shape(format!(
            "attention must be [K+1, H, W] with K >= 1, got {shape:?}"
        )));
    }
    if shape[1] < 3 || shape[2] < 3 {
        return Err(Error::Shape(format!(
            "presence pooling needs at least 3x3 maps, got {}x{}",
            shape[1], shape[2]
        )));
    }
    let k = shape[0] - 1;
    let mut rows = Vec::with_capacity(batch_attention.len());
    for &att in batch_attention {
        if g.value(att).shape() != shape.as_slice() {
            return Err(Error::Shape("attention stacks in a batch must share a shape".into()));
        }
        let pooled = g.avgpool2d(att, 3, 1)?;
        let fg = g.narrow(pooled, 0, 0, k)?;
        let best = g.max(fg, &[1, 2])?; // [K, 1, 1]
        rows.push(g.reshape(best, vec![1, k])?);
    }
    let stacked = g.concat(&rows, 0)?; // [B, K]
    let batch_best = g.max(stacked, &[0])?; // [1, K]
    let mean = g.mean(batch_best, &[0, 1])?;
    let neg = g.scale(mean, -1.0)?;
    let loss = g.add_scalar(neg, 1.0)?;
    scalar(g, loss)
}

/// Weighted sum of the present terms, in fixed order (class, conc, orth,
/// equiv, pres). Any non-finite term value aborts with its name.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, weights: &LossWeights) -> Result<(NodeId, LossReport)> {
    let named = [
        ("classification", terms.class, weights.class),
        ("concentration", terms.conc, weights.conc),
        ("orthogonality", terms.orth, weights.orth),
        ("equivariance", terms.equiv, weights.equiv),
        ("presence", terms.pres, weights.pres),
    ];
    let mut values = [0.0; 5];
    let mut acc: Option<NodeId> = None;
    for (i, (name, term, weight)) in named.into_iter().enumerate() {
        let Some(id) = term else { continue };
        let value = g.value(id).item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is not finite ({value})")));
        }
        values[i] = value;
        let weighted = g.scale(id, weight)?;
        acc = Some(match acc {
            Some(a) => g.add(a, weighted)?,
            None => weighted,
        });
    }
    let total = match acc {
        Some(a) => a,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let report = LossReport {
        class: values[0],
        conc: values[1],
        orth: values[2],
        equiv: values[3],
        pres: values[4],
        total: g.value(total).item()?,
    };
    Ok((total, report))
}
