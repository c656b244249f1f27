//! Random rigid transforms and bilinear warping.
//!
//! A [`RigidTransform`] rotates by `theta`, scales by `scale` about the map
//! center, then translates by `(tx, ty)` expressed as fractions of the frame
//! edge. [`warp`] resamples a `[C, H, W]` map by inverse mapping with bilinear
//! interpolation, reading zeros outside the source grid. The warp is linear in
//! the map values, so its adjoint (used by the graph backward pass) is the
//! transpose scatter of the same interpolation weights.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sample coordinates this close to a grid point snap onto it, so that
/// grid-aligned transforms (identity, 90-degree rotations) are exact
/// permutations rather than off by one trig ulp.
const GRID_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    /// Rotation angle in radians, about the map center.
    pub theta: f64,
    /// Translation as a fraction of the frame width.
    pub tx: f64,
    /// Translation as a fraction of the frame height.
    pub ty: f64,
    /// Isotropic scale factor, > 0.
    pub scale: f64,
}

impl RigidTransform {
    pub fn new(theta: f64, tx: f64, ty: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::Config(format!("transform scale must be > 0, got {scale}")));
        }
        Ok(RigidTransform { theta, tx, ty, scale })
    }

    pub fn identity() -> Self {
        RigidTransform { theta: 0.0, tx: 0.0, ty: 0.0, scale: 1.0 }
    }

    pub fn is_identity(&self) -> bool {
        self.theta == 0.0 && self.tx == 0.0 && self.ty == 0.0 && self.scale == 1.0
    }

    /// Parameters whose composition with `self` is the identity point map:
    /// the angle and scale invert directly and the translation is rotated and
    /// scaled back. Exact for square frames, where the translation fractions
    /// share one edge length.
    pub fn invert(&self) -> Self {
        let (s, c) = self.theta.sin_cos();
        let inv_scale = 1.0 / self.scale;
        RigidTransform {
            theta: -self.theta,
            tx: -inv_scale * (c * self.tx + s * self.ty),
            ty: -inv_scale * (-s * self.tx + c * self.ty),
            scale: inv_scale,
        }
    }
}

/// Uniform sampling ranges for [`sample_transform`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransformRanges {
    /// Rotation range in radians.
    pub theta: (f64, f64),
    /// Translation range, fraction of the frame edge, used for both axes.
    pub translate: (f64, f64),
    /// Scale range, must stay positive.
    pub scale: (f64, f64),
}

impl Default for TransformRanges {
    fn default() -> Self {
        let deg30 = 30.0_f64.to_radians();
        TransformRanges { theta: (-deg30, deg30), translate: (-0.1, 0.1), scale: (0.9, 1.1) }
    }
}

impl TransformRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in
            [("theta", self.theta), ("translate", self.translate), ("scale", self.scale)]
        {
            if lo > hi {
                return Err(Error::Config(format!("inverted {name} range: [{lo}, {hi}]")));
            }
        }
        if self.scale.0 <= 0.0 {
            return Err(Error::Config(format!("scale range must be positive, got {:?}", self.scale)));
        }
        Ok(())
    }
}

/// Draws a transform with independent uniform components. The draw order
/// (theta, tx, ty, scale) is fixed so seeded runs replay exactly.
pub fn sample_transform(rng: &mut impl Rng, ranges: &TransformRanges) -> Result<RigidTransform> {
    ranges.validate()?;
    let theta = rng.random_range(ranges.theta.0..=ranges.theta.1);
    let tx = rng.random_range(ranges.translate.0..=ranges.translate.1);
    let ty = rng.random_range(ranges.translate.0..=ranges.translate.1);
    let scale = rng.random_range(ranges.scale.0..=ranges.scale.1);
    RigidTransform::new(theta, tx, ty, scale)
}

/// Source coordinates (y, x) feeding output pixel `(oy, ox)` under `t`.
fn source_point(t: &RigidTransform, h: usize, w: usize, oy: usize, ox: usize) -> (f64, f64) {
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let qx = ox as f64 - cx - t.tx * w as f64;
    let qy = oy as f64 - cy - t.ty * h as f64;
    let (s, c) = t.theta.sin_cos();
    let inv = 1.0 / t.scale;
    let mut sx = (c * qx + s * qy) * inv + cx;
    let mut sy = (-s * qx + c * qy) * inv + cy;
    if (sx - sx.round()).abs() < GRID_SNAP {
        sx = sx.round();
    }
    if (sy - sy.round()).abs() < GRID_SNAP {
        sy = sy.round();
    }
    (sy, sx)
}

/// Bilinear taps for a source point: up to four (linear index, weight) pairs.
fn taps(sy: f64, sx: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let dx = sx - x0;
    let dy = sy - y0;
    let mut out = [(0usize, 0.0f64); 4];
    let mut n = 0;
    for (yy, wy) in [(y0, 1.0 - dy), (y0 + 1.0, dy)] {
        if wy == 0.0 || yy < 0.0 || yy >= h as f64 {
            continue;
        }
        for (xx, wx) in [(x0, 1.0 - dx), (x0 + 1.0, dx)] {
            if wx == 0.0 || xx < 0.0 || xx >= w as f64 {
                continue;
            }
            out[n] = (yy as usize * w + xx as usize, wy * wx);
            n += 1;
        }
    }
    out
}

/// Warps a `[C, H, W]` map by `t` (inverse mapping, bilinear, zero fill).
pub fn warp(map: &Tensor, t: &RigidTransform) -> Result<Tensor> {
    let s = map.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("warp expects [C,H,W], got {s:?}")));
    }
    let (ch, h, w) = (s[0], s[1], s[2]);
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("warp needs at least 2x2 maps, got {h}x{w}")));
    }
    if t.is_identity() {
        return Tensor::new(s.to_vec(), map.data().to_vec());
    }
    let src = map.data();
    let mut out = vec![0.0; src.len()];
    for oy in 0..h {
        for ox in 0..w {
            let (sy, sx) = source_point(t, h, w, oy, ox);
            let tp = taps(sy, sx, h, w);
            for c in 0..ch {
                let plane = &src[c * h * w..(c + 1) * h * w];
                let mut v = 0.0;
                for &(idx, wt) in &tp {
                    if wt != 0.0 {
                        v += wt * plane[idx];
                    }
                }
                out[(c * h + oy) * w + ox] = v;
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Adjoint of [`warp`]: scatters an output-shaped gradient back through the
/// interpolation weights. `shape` is the (identical) input/output shape.
pub fn warp_adjoint(grad_out: &[f64], shape: &[usize], t: &RigidTransform) -> Vec<f64> {
    let (ch, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; grad_out.len()];
    if t.is_identity() {
        out.copy_from_slice(grad_out);
        return out;
    }
    for oy in 0..h {
        for ox in 0..w {
            let (sy, sx) = source_point(t, h, w, oy, ox);
            let tp = taps(sy, sx, h, w);
            for c in 0..ch {
                let g = grad_out[(c * h + oy) * w + ox];
                if g == 0.0 {
                    continue;
                }
                let plane = &mut out[c * h * w..(c + 1) * h * w];
                for &(idx, wt) in &tp {
                    if wt != 0.0 {
                        plane[idx] += wt * g;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_blob(h: usize, w: usize, cy: f64, cx: f64, sigma: f64) -> Tensor {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                data.push((-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
        Tensor::new(vec![1, h, w], data).unwrap()
    }

    #[test]
    fn zero_width_ranges_give_identity() {
        let ranges =
            TransformRanges { theta: (0.0, 0.0), translate: (0.0, 0.0), scale: (1.0, 1.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = sample_transform(&mut rng, &ranges).unwrap();
        assert!(t.is_identity());
    }

    #[test]
    fn inverted_range_is_config_error() {
        let ranges =
            TransformRanges { theta: (0.5, -0.5), translate: (0.0, 0.0), scale: (1.0, 1.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(sample_transform(&mut rng, &ranges), Err(Error::Config(_))));
    }

    #[test]
    fn fixed_seed_replays_sample_sequence() {
        let ranges = TransformRanges::default();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            (0..10).map(|_| sample_transform(&mut rng, &ranges).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn sample_means_match_range_midpoints() {
        let ranges = TransformRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let (mut st, mut stx, mut ss) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let t = sample_transform(&mut rng, &ranges).unwrap();
            st += t.theta;
            stx += t.tx;
            ss += t.scale;
        }
        // Uniform on [a,b]: sd of the mean is (b-a)/sqrt(12 n).
        let tol = |lo: f64, hi: f64| 2.0 * (hi - lo) / (12.0 * n as f64).sqrt();
        assert!((st / n as f64).abs() < tol(ranges.theta.0, ranges.theta.1));
        assert!((stx / n as f64).abs() < tol(-0.1, 0.1));
        assert!((ss / n as f64 - 1.0).abs() < tol(0.9, 1.1));
    }

    #[test]
    fn identity_warp_is_bit_identical() {
        let m = gaussian_blob(7, 7, 3.0, 3.0, 1.5);
        let out = warp(&m, &RigidTransform::identity()).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn quarter_turn_is_exact_permutation() {
        let n = 6;
        let m = Tensor::new(vec![1, n, n], (0..n * n).map(|v| v as f64).collect()).unwrap();
        let t = RigidTransform::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0, 1.0).unwrap();
        let out = warp(&m, &t).unwrap();
        // Output pixel (oy, ox) reads the source rotated back by -90 degrees:
        // (sy, sx) = (c - (ox - c), c + (oy - c)) = (n - 1 - ox, oy).
        for oy in 0..n {
            for ox in 0..n {
                let expect = m.at(&[0, n - 1 - ox, oy]);
                assert_eq!(out.at(&[0, oy, ox]), expect, "at ({oy},{ox})");
            }
        }
    }

    #[test]
    fn invert_composes_to_identity_points() {
        let t = RigidTransform::new(0.3, 0.07, -0.04, 1.08).unwrap();
        let ti = t.invert();
        // Push a grid of points through T then T^{-1} in point space.
        let (h, w) = (11, 11);
        for &(py, px) in &[(0.0, 0.0), (3.2, 7.9), (10.0, 10.0), (5.0, 2.5)] {
            let apply = |tr: &RigidTransform, y: f64, x: f64| {
                let cx = (w as f64 - 1.0) / 2.0;
                let cy = (h as f64 - 1.0) / 2.0;
                let (s, c) = tr.theta.sin_cos();
                let dx = x - cx;
                let dy = y - cy;
                (
                    tr.scale * (s * dx + c * dy) + cy + tr.ty * h as f64,
                    tr.scale * (c * dx - s * dy) + cx + tr.tx * w as f64,
                )
            };
            let (my, mx) = apply(&t, py, px);
            let (ry, rx) = apply(&ti, my, mx);
            assert!((ry - py).abs() < 1e-12 && (rx - px).abs() < 1e-12);
        }
    }

    #[test]
    fn roundtrip_recovers_smooth_maps() {
        let m = gaussian_blob(16, 16, 8.0, 6.0, 2.5);
        let t = RigidTransform::new(0.4, 0.05, -0.06, 1.05).unwrap();
        let fwd = warp(&m, &t).unwrap();
        let back = warp(&fwd, &t.invert()).unwrap();
        let mut worst = 0.0f64;
        for y in 2..14 {
            for x in 2..14 {
                worst = worst.max((back.at(&[0, y, x]) - m.at(&[0, y, x])).abs());
            }
        }
        assert!(worst < 0.15, "interior round-trip error {worst}");
    }

    #[test]
    fn warp_is_linear_in_the_map() {
        let m1 = gaussian_blob(10, 10, 4.0, 4.0, 2.0);
        let m2 = gaussian_blob(10, 10, 6.0, 7.0, 1.5);
        let t = RigidTransform::new(-0.25, 0.03, 0.08, 0.95).unwrap();
        let (a, b) = (1.7, -0.6);
        let mixed = Tensor::new(
            vec![1, 10, 10],
            m1.data().iter().zip(m2.data()).map(|(&x, &y)| a * x + b * y).collect(),
        )
        .unwrap();
        let lhs = warp(&mixed, &t).unwrap();
        let w1 = warp(&m1, &t).unwrap();
        let w2 = warp(&m2, &t).unwrap();
        for i in 0..100 {
            let rhs = a * w1.data()[i] + b * w2.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn mass_conserved_under_quarter_turns_and_scale() {
        let m = gaussian_blob(24, 24, 11.5, 11.5, 2.0);
        let mass = |t: &Tensor| t.data().iter().sum::<f64>();
        let m0 = mass(&m);
        for quarter in 1..4 {
            let t = RigidTransform::new(
                std::f64::consts::FRAC_PI_2 * quarter as f64,
                0.0,
                0.0,
                1.0,
            )
            .unwrap();
            assert!((mass(&warp(&m, &t).unwrap()) - m0).abs() < 1e-9);
        }
        let t = RigidTransform::new(0.2, 0.02, -0.03, 1.06).unwrap();
        let scaled = mass(&warp(&m, &t).unwrap());
        // Interior mass scales with the Jacobian sigma^2.
        assert!((scaled / (m0 * 1.06 * 1.06) - 1.0).abs() < 0.05);
    }
}
