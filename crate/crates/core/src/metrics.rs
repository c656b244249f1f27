//! Part-quality and classification metrics.
//!
//! Discovered parts are summarized by their attention centroids; agreement
//! with ground-truth keypoint identities is scored with NMI and ARI over the
//! whole dataset, and by a linear keypoint regression from discovered
//! centroids to annotated keypoints. Coordinates are normalized cell centers
//! in `[0,1]^2`, matching the concentration loss convention.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default attention threshold for counting a part as present.
pub const PRESENCE_TAU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartCentroid {
    pub x: f64,
    pub y: f64,
    pub present: bool,
}

/// One annotated keypoint of one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub identity: usize,
    pub visible: bool,
}

/// Discovered centroids plus annotations for one image, as consumed by
/// [`keypoint_regression`].
#[derive(Debug, Clone)]
pub struct RegressionSample {
    pub centroids: Vec<PartCentroid>,
    pub keypoints: Vec<Keypoint>,
}

/// Aggregate evaluation results, serialized as the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nmi: f64,
    pub ari: f64,
    pub keypoint_error_pct: f64,
    pub accuracy_pct: f64,
    /// Fraction of evaluated images in which each foreground part fired.
    pub per_part_presence_histogram: Vec<f64>,
}

/// Centroid (and presence) of each foreground attention map. A part is
/// present iff its peak attention reaches `tau`; its centroid is the mean of
/// the mass-normalized map over cell-center coordinates.
pub fn extract_centroids(attention: &Tensor, tau: f64) -> Result<Vec<PartCentroid>> {
    if !(0.0..1.0).contains(&tau) || tau == 0.0 {
        return Err(Error::Config(format!("presence threshold must be in (0,1), got {tau}")));
    }
    let shape = attention.shape();
    if shape.len() != 3 || shape[0] < 2 {
        return Err(Error::Shape(format!("attention must be [K+1, H, W], got {shape:?}")));
    }
    let (k, h, w) = (shape[0] - 1, shape[1], shape[2]);
    let mut out = Vec::with_capacity(k);
    for part in 0..k {
        let plane = &attention.data()[part * h * w..(part + 1) * h * w];
        let peak = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if peak < tau {
            out.push(PartCentroid { x: 0.0, y: 0.0, present: false });
            continue;
        }
        let mass: f64 = plane.iter().sum();
        let mut cx = 0.0;
        let mut cy = 0.0;
        for i in 0..h {
            for j in 0..w {
                let a = plane[i * w + j] / mass;
                cx += a * (j as f64 + 0.5) / w as f64;
                cy += a * (i as f64 + 0.5) / h as f64;
            }
        }
        out.push(PartCentroid { x: cx, y: cy, present: true });
    }
    Ok(out)
}

/// Maps each visible keypoint to its feature-grid cell and labels it with the
/// argmax attention channel there. Background (index K) is a legal label.
pub fn assign_keypoints(
    attention: &Tensor,
    keypoints: &[(f64, f64, usize)],
) -> Result<Vec<(usize, usize)>> {
    let shape = attention.shape();
    if shape.len() != 3 || shape[0] < 2 {
        return Err(Error::Shape(format!("attention must be [K+1, H, W], got {shape:?}")));
    }
    let (channels, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(keypoints.len());
    for &(x, y, identity) in keypoints {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::Numeric(format!(
                "keypoint ({x}, {y}) outside the unit square"
            )));
        }
        let cell_y = ((y * h as f64).floor() as usize).min(h - 1);
        let cell_x = ((x * w as f64).floor() as usize).min(w - 1);
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..channels {
            let v = attention.data()[(c * h + cell_y) * w + cell_x];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        out.push((identity, best));
    }
    Ok(out)
}

/// Contingency counts over sorted label alphabets, so float accumulation
/// order is deterministic.
fn contingency(a: &[usize], b: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<Vec<usize>>) {
    let mut la: Vec<usize> = a.to_vec();
    la.sort_unstable();
    la.dedup();
    let mut lb: Vec<usize> = b.to_vec();
    lb.sort_unstable();
    lb.dedup();
    let ia: std::collections::HashMap<usize, usize> =
        la.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let ib: std::collections::HashMap<usize, usize> =
        lb.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut table = vec![vec![0usize; lb.len()]; la.len()];
    for (&x, &y) in a.iter().zip(b) {
        table[ia[&x]][ib[&y]] += 1;
    }
    let rows: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<usize> =
        (0..lb.len()).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    (rows, cols, table)
}

fn check_pair(a: &[usize], b: &[usize]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Precondition(format!(
            "label sequences must be nonempty and equal length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Normalized mutual information with arithmetic-mean normalization,
/// `I(U;V) / ((H(U) + H(V)) / 2)`, natural log. Two constant partitions
/// score 1; a constant against anything else scores 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let (rows, cols, table) = contingency(a, b);
    let entropy = |counts: &[usize]| -> f64 {
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let hu = entropy(&rows);
    let hv = entropy(&cols);
    if hu + hv == 0.0 {
        return Ok(1.0); // both constant: identical up to relabeling
    }
    let mut info = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let pij = c as f64 / n;
            let pi = rows[i] as f64 / n;
            let qj = cols[j] as f64 / n;
            info += pij * (pij / (pi * qj)).ln();
        }
    }
    Ok(info / ((hu + hv) / 2.0))
}

fn comb2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency table. Degenerate tables where
/// the expected index equals the maximum index score 1 (perfect agreement in
/// the only sense the table permits).
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    check_pair(a, b)?;
    let (rows, cols, table) = contingency(a, b);
    let sum_ij: f64 = table.iter().flatten().map(|&c| comb2(c)).sum();
    let sum_a: f64 = rows.iter().map(|&c| comb2(c)).sum();
    let sum_b: f64 = cols.iter().map(|&c| comb2(c)).sum();
    let total = comb2(a.len());
    if total == 0.0 {
        return Ok(1.0); // single item: trivially identical partitions
    }
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if max_index == expected {
        return Ok(1.0);
    }
    Ok((sum_ij - expected) / (max_index - expected))
}

/// Linear least-squares regression (with bias) from the 2K-vector of
/// discovered centroids to each keypoint coordinate, fit on `train` and
/// scored on `test`. Absent parts are imputed with their train-set mean
/// centroid; the error is the mean test distance as a percentage of the
/// image diagonal. Rank-deficient designs fall back to the SVD
/// pseudo-inverse with a warning.
pub fn keypoint_regression(train: &[RegressionSample], test: &[RegressionSample]) -> Result<f64> {
    let k = train
        .first()
        .map(|s| s.centroids.len())
        .ok_or_else(|| Error::Precondition("empty training split".into()))?;
    if k == 0 {
        return Err(Error::Precondition("no parts to regress from".into()));
    }
    if train.len() < 2 * k + 1 {
        return Err(Error::Precondition(format!(
            "need at least {} training images for {k} parts, got {}",
            2 * k + 1,
            train.len()
        )));
    }
    // Train-set mean centroid per part, for imputing absent detections.
    let mut mean = vec![(0.5f64, 0.5f64); k];
    for (part, slot) in mean.iter_mut().enumerate() {
        let mut acc = (0.0, 0.0);
        let mut count = 0;
        for s in train {
            let c = s.centroids[part];
            if c.present {
                acc.0 += c.x;
                acc.1 += c.y;
                count += 1;
            }
        }
        if count > 0 {
            *slot = (acc.0 / count as f64, acc.1 / count as f64);
        }
    }
    let features = |s: &RegressionSample| -> Vec<f64> {
        let mut row = Vec::with_capacity(2 * k + 1);
        for (part, c) in s.centroids.iter().enumerate() {
            if c.present {
                row.push(c.x);
                row.push(c.y);
            } else {
                row.push(mean[part].0);
                row.push(mean[part].1);
            }
        }
        row.push(1.0);
        row
    };

    let mut identities: Vec<usize> = train
        .iter()
        .flat_map(|s| s.keypoints.iter().filter(|kp| kp.visible).map(|kp| kp.identity))
        .collect();
    identities.sort_unstable();
    identities.dedup();

    let p = 2 * k + 1;
    let mut warned = false;
    let mut total_err = 0.0;
    let mut total_count = 0usize;
    for &identity in &identities {
        let rows: Vec<(&RegressionSample, &Keypoint)> = train
            .iter()
            .filter_map(|s| {
                s.keypoints
                    .iter()
                    .find(|kp| kp.identity == identity && kp.visible)
                    .map(|kp| (s, kp))
            })
            .collect();
        if rows.len() < p {
            continue; // not enough visible examples to fit this keypoint
        }
        let mut flat = Vec::with_capacity(rows.len() * p);
        for (s, _) in &rows {
            flat.extend(features(s));
        }
        let x = DMatrix::from_row_slice(rows.len(), p, &flat);
        let svd = x.svd(true, true);
        if !warned && svd.rank(1e-9) < p {
            eprintln!(
                "warning: keypoint regression design matrix is rank deficient; \
                 solving with the pseudo-inverse"
            );
            warned = true;
        }
        let tx = DVector::from_iterator(rows.len(), rows.iter().map(|(_, kp)| kp.x));
        let ty = DVector::from_iterator(rows.len(), rows.iter().map(|(_, kp)| kp.y));
        let bx = svd
            .solve(&tx, 1e-9)
            .map_err(|e| Error::Numeric(format!("least squares failed: {e}")))?;
        let by = svd
            .solve(&ty, 1e-9)
            .map_err(|e| Error::Numeric(format!("least squares failed: {e}")))?;
        for s in test {
            let Some(kp) = s.keypoints.iter().find(|kp| kp.identity == identity && kp.visible)
            else {
                continue;
            };
            let phi = features(s);
            let px: f64 = phi.iter().zip(bx.iter()).map(|(a, b)| a * b).sum();
            let py: f64 = phi.iter().zip(by.iter()).map(|(a, b)| a * b).sum();
            total_err += ((px - kp.x).powi(2) + (py - kp.y).powi(2)).sqrt();
            total_count += 1;
        }
    }
    if total_count == 0 {
        return Err(Error::Precondition("no visible test keypoints to score".into()));
    }
    // Coordinates live in the unit square, whose diagonal is sqrt(2).
    Ok(100.0 * (total_err / total_count as f64) / std::f64::consts::SQRT_2)
}

/// Percentage of matching entries.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "prediction/label length mismatch: {} vs {}",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Precondition("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}
