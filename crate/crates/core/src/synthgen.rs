//! PartGlyphs: a seeded procedural dataset for measurable part discovery.
//!
//! Each image shows one object made of P glyph parts at fixed body-frame
//! offsets, drawn over a low-frequency gradient background with distractor
//! dots. Two designated slots carry class information (2 shapes x 2 colors
//! each, 16 classes); the remaining slots look the same in every class, so a
//! model must spread attention beyond the discriminative parts to discover
//! them all. Part centroids are the posed offsets themselves - analytic, not
//! measured from pixels - which makes keypoint metrics exact.
//!
//! On disk a dataset is a directory of binary PPM images plus
//! `annotations.csv` (sample_id, class, part_id, x, y, visible), `split.csv`
//! and a `manifest.json` holding the seed and generator config.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Keypoint;
use crate::tensor::Tensor;

/// Classes are pinned by the attribute table: 2 shapes x 2 colors on each of
/// the two designated slots.
pub const NUM_CLASSES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlyphConfig {
    pub image_size: usize,
    pub num_parts: usize,
    /// Probability of dropping each part from an image (visibility false).
    pub occlude_prob: f64,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        GlyphConfig { image_size: 64, num_parts: 4, occlude_prob: 0.0 }
    }
}

impl GlyphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 || self.image_size % 2 != 0 {
            return Err(Error::Config(format!(
                "image size must be an even number >= 32, got {}",
                self.image_size
            )));
        }
        if !(2..=6).contains(&self.num_parts) {
            return Err(Error::Config(format!(
                "part count must be in 2..=6, got {}",
                self.num_parts
            )));
        }
        if !(0.0..1.0).contains(&self.occlude_prob) {
            return Err(Error::Config(format!(
                "occlude probability must be in [0, 1), got {}",
                self.occlude_prob
            )));
        }
        // Parts sit on a circle of radius 0.23 S. Poses that overflow the
        // frame are rejection-sampled away, but at least the smallest pose
        // must fit or no pose ever will.
        let s = self.image_size as f64;
        let margin = GLYPH_RADIUS * 1.35 * POSE_SCALE.1 * s + 1.5;
        let reach = POSE_SCALE.0 * OFFSET_RADIUS * s + margin;
        if reach >= s / 2.0 {
            return Err(Error::Config(format!(
                "parts do not fit the {0}x{0} frame",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// One image with its label and analytic part annotations.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    /// `[3, S, S]` RGB in [0, 1].
    pub image: Tensor,
    /// 0-based class id.
    pub class: usize,
    /// One keypoint per part slot, coordinates in [0, 1]^2.
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disc,
    Square,
    Triangle,
    Cross,
}

const GLYPH_RADIUS: f64 = 0.085; // fraction of S, before pose scale
const OFFSET_RADIUS: f64 = 0.23;
const POSE_ROTATION: f64 = 0.5; // radians, +/-
const POSE_SHIFT: f64 = 0.12; // fraction of S, +/-
const POSE_SCALE: (f64, f64) = (0.85, 1.1);
const DISTRACTOR_COUNT: usize = 8;

/// Saturated part colors; the two designated slots draw from the first four.
const PART_COLORS: [[f64; 3]; 8] = [
    [0.90, 0.10, 0.10], // red
    [0.92, 0.88, 0.08], // yellow
    [0.12, 0.25, 0.92], // blue
    [0.88, 0.10, 0.85], // magenta
    [0.10, 0.78, 0.18], // green
    [0.08, 0.82, 0.85], // cyan
    [0.95, 0.55, 0.05], // orange
    [0.55, 0.10, 0.95], // purple
];

/// Distractor colors stay far from every part color.
const DISTRACTOR_COLORS: [[f64; 3]; 4] = [
    [0.95, 0.95, 0.95],
    [0.62, 0.62, 0.62],
    [0.25, 0.25, 0.25],
    [0.45, 0.30, 0.12],
];

/// Appearance of a part slot under a class. Slots 0 and 1 carry the class
/// bits; higher slots are class-invariant.
fn slot_appearance(slot: usize, class: usize) -> (Shape, [f64; 3]) {
    match slot {
        0 => {
            let shape = if class >> 3 & 1 == 0 { Shape::Disc } else { Shape::Square };
            (shape, PART_COLORS[class >> 2 & 1])
        }
        1 => {
            let shape = if class >> 1 & 1 == 0 { Shape::Triangle } else { Shape::Cross };
            (shape, PART_COLORS[2 + (class & 1)])
        }
        2 => (Shape::Disc, PART_COLORS[4]),
        3 => (Shape::Cross, PART_COLORS[5]),
        4 => (Shape::Square, PART_COLORS[6]),
        _ => (Shape::Triangle, PART_COLORS[7]),
    }
}

/// Body-frame slot offsets: evenly spaced on a circle, fractions of S.
fn slot_offsets(p: usize) -> Vec<(f64, f64)> {
    (0..p)
        .map(|i| {
            let angle = std::f64::consts::FRAC_PI_4 + i as f64 / p as f64 * std::f64::consts::TAU;
            (OFFSET_RADIUS * angle.cos(), OFFSET_RADIUS * angle.sin())
        })
        .collect()
}

fn inside(shape: Shape, u: f64, v: f64, r: f64) -> bool {
    match shape {
        Shape::Disc => u * u + v * v <= r * r,
        Shape::Square => u.abs().max(v.abs()) <= 0.88 * r,
        Shape::Triangle => {
            // Vertices at 90, 210, 330 degrees, radius 1.25 r (up in body
            // frame, with image y growing downward).
            let verts: [(f64, f64); 3] = [(0.0, -1.25 * r), (-1.083 * r, 0.625 * r), (1.083 * r, 0.625 * r)];
            let mut sign = 0.0;
            for i in 0..3 {
                let (ax, ay) = verts[i];
                let (bx, by) = verts[(i + 1) % 3];
                let cross = (bx - ax) * (v - ay) - (by - ay) * (u - ax);
                if i == 0 {
                    sign = cross;
                } else if cross * sign < 0.0 {
                    return false;
                }
            }
            true
        }
        Shape::Cross => {
            (u.abs() <= 1.15 * r && v.abs() <= 0.42 * r)
                || (v.abs() <= 1.15 * r && u.abs() <= 0.42 * r)
        }
    }
}

fn render_sample(class: usize, config: &GlyphConfig, rng: &mut ChaCha8Rng) -> LabeledSample {
    let s = config.image_size;
    let sf = s as f64;
    let offsets = slot_offsets(config.num_parts);
    let margin = (GLYPH_RADIUS * 1.35 * POSE_SCALE.1) * sf + 1.5;

    // Pose, rejection-sampled until every part center is inside the frame.
    let mut tries = 0;
    let (theta, shift_x, shift_y, scale) = loop {
        tries += 1;
        assert!(tries < 10_000, "pose sampling cannot satisfy the frame margin");
        let theta = rng.random_range(-POSE_ROTATION..=POSE_ROTATION);
        let shift_x = rng.random_range(-POSE_SHIFT..=POSE_SHIFT) * sf;
        let shift_y = rng.random_range(-POSE_SHIFT..=POSE_SHIFT) * sf;
        let scale = rng.random_range(POSE_SCALE.0..=POSE_SCALE.1);
        let (sin, cos) = theta.sin_cos();
        let ok = offsets.iter().all(|&(ox, oy)| {
            let qx = sf / 2.0 + shift_x + scale * sf * (cos * ox - sin * oy);
            let qy = sf / 2.0 + shift_y + scale * sf * (sin * ox + cos * oy);
            qx >= margin && qx <= sf - margin && qy >= margin && qy <= sf - margin
        });
        if ok {
            break (theta, shift_x, shift_y, scale);
        }
    };
    let (sin, cos) = theta.sin_cos();
    let centers: Vec<(f64, f64)> = offsets
        .iter()
        .map(|&(ox, oy)| {
            (
                sf / 2.0 + shift_x + scale * sf * (cos * ox - sin * oy),
                sf / 2.0 + shift_y + scale * sf * (sin * ox + cos * oy),
            )
        })
        .collect();
    let visible: Vec<bool> =
        (0..config.num_parts).map(|_| rng.random::<f64>() >= config.occlude_prob).collect();

    // Low-frequency background gradient from four random corner colors.
    let corners: [[f64; 3]; 4] =
        std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.05..=0.30)));
    let mut image = vec![0.0; 3 * s * s];
    for y in 0..s {
        let fy = y as f64 / (s - 1) as f64;
        for x in 0..s {
            let fx = x as f64 / (s - 1) as f64;
            for c in 0..3 {
                let top = corners[0][c] * (1.0 - fx) + corners[1][c] * fx;
                let bottom = corners[2][c] * (1.0 - fx) + corners[3][c] * fx;
                image[(c * s + y) * s + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }

    // Distractor dots, drawn before the parts so parts stay unoccluded.
    for _ in 0..DISTRACTOR_COUNT {
        let dx = rng.random_range(0.0..=sf);
        let dy = rng.random_range(0.0..=sf);
        let dr = rng.random_range(1.0..=2.5);
        let color = DISTRACTOR_COLORS[rng.random_range(0..DISTRACTOR_COLORS.len())];
        paint(&mut image, s, dx, dy, dr + 1.0, |u, v| u * u + v * v <= dr * dr, color);
    }

    let r = GLYPH_RADIUS * sf * scale;
    for (slot, &(qx, qy)) in centers.iter().enumerate() {
        if !visible[slot] {
            continue;
        }
        let (shape, color) = slot_appearance(slot, class);
        paint(
            &mut image,
            s,
            qx,
            qy,
            1.35 * r + 1.0,
            |px, py| {
                // Rotate into the body frame so glyphs turn with the pose;
                // the radius already carries the pose scale.
                let u = cos * px + sin * py;
                let v = -sin * px + cos * py;
                inside(shape, u, v, r)
            },
            color,
        );
    }

    let keypoints = centers
        .iter()
        .enumerate()
        .map(|(slot, &(qx, qy))| Keypoint {
            x: qx / sf,
            y: qy / sf,
            identity: slot,
            visible: visible[slot],
        })
        .collect();
    LabeledSample {
        image: Tensor::new(vec![3, s, s], image).expect("image shape"),
        class,
        keypoints,
    }
}

/// Fills pixels around (cx, cy) where `hit(px - cx, py - cy)` holds.
fn paint(
    image: &mut [f64],
    s: usize,
    cx: f64,
    cy: f64,
    reach: f64,
    hit: impl Fn(f64, f64) -> bool,
    color: [f64; 3],
) {
    let x0 = ((cx - reach).floor().max(0.0)) as usize;
    let x1 = ((cx + reach).ceil().min(s as f64 - 1.0)) as usize;
    let y0 = ((cy - reach).floor().max(0.0)) as usize;
    let y1 = ((cy + reach).ceil().min(s as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let px = x as f64 + 0.5 - cx;
            let py = y as f64 + 0.5 - cy;
            if hit(px, py) {
                for c in 0..3 {
                    image[(c * s + y) * s + x] = color[c];
                }
            }
        }
    }
}

/// Generates `n` samples, classes balanced within one sample. Each sample's
/// randomness comes from its own stream seeded with `seed ^ index`, so the
/// result is identical no matter how the work is scheduled.
pub fn generate(seed: u64, n: usize, config: &GlyphConfig) -> Result<Vec<LabeledSample>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Config("cannot generate an empty dataset".into()));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            render_sample(i % NUM_CLASSES, config, &mut rng)
        })
        .collect())
}

/// Stratified train/test split. Per-class train counts come from largest-
/// remainder apportionment, so the train total is exactly
/// `round(fraction * n)` while staying proportional per class.
pub fn split(
    samples: &[LabeledSample],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.class).or_default().push(i);
    }
    for (class, members) in &by_class {
        if members.len() < 2 {
            return Err(Error::Precondition(format!(
                "class {class} has {} sample(s); stratified split needs at least 2",
                members.len()
            )));
        }
    }
    let target: usize = ((train_fraction * samples.len() as f64).round() as usize)
        .clamp(by_class.len(), samples.len() - by_class.len());
    let mut quotas: Vec<(usize, usize, f64)> = by_class
        .iter()
        .map(|(&class, members)| {
            let q = train_fraction * members.len() as f64;
            let base = (q.floor() as usize).clamp(1, members.len() - 1);
            (class, base, q - q.floor())
        })
        .collect();
    let mut assigned: usize = quotas.iter().map(|&(_, b, _)| b).sum();
    // Hand out the remainder by largest fractional part, class id breaking ties.
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        quotas[b].2.partial_cmp(&quotas[a].2).unwrap().then(quotas[a].0.cmp(&quotas[b].0))
    });
    let mut cursor = 0;
    while assigned < target && cursor < order.len() * 2 {
        let qi = &mut quotas[order[cursor % order.len()]];
        let cap = by_class[&qi.0].len() - 1;
        if qi.1 < cap {
            qi.1 += 1;
            assigned += 1;
        }
        cursor += 1;
    }
    while assigned > target {
        for idx in order.iter().rev() {
            let qi = &mut quotas[*idx];
            if qi.1 > 1 && assigned > target {
                qi.1 -= 1;
                assigned -= 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, base, _) in &quotas {
        let mut members = by_class[class].clone();
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..*base]);
        test.extend_from_slice(&members[*base..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

// ── on-disk format ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub n: usize,
    pub train_fraction: f64,
    pub num_classes: usize,
    pub config: GlyphConfig,
}

/// A dataset loaded back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &LabeledSample> {
        self.train_indices.iter().map(|&i| &self.samples[i])
    }

    pub fn test(&self) -> impl Iterator<Item = &LabeledSample> {
        self.test_indices.iter().map(|&i| &self.samples[i])
    }
}

/// Encodes a `[3, H, W]` tensor in [0,1] as binary 8-bit PPM.
pub fn ppm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("PPM export expects [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = (data[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                out.push(v);
            }
        }
    }
    Ok(out)
}

/// Decodes a binary 8-bit PPM into a `[3, H, W]` tensor in [0,1].
pub fn ppm_parse(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| {
            Error::Parse("PPM header is not ASCII".into())
        })?);
    }
    if fields.len() != 4 || fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::Parse(format!("unsupported PPM header {fields:?}")));
    }
    let w: usize = fields[1].parse().map_err(|_| Error::Parse("bad PPM width".into()))?;
    let h: usize = fields[2].parse().map_err(|_| Error::Parse("bad PPM height".into()))?;
    pos += 1; // single whitespace after maxval
    let pixels = &bytes[pos..];
    if pixels.len() != 3 * w * h {
        return Err(Error::Parse(format!(
            "PPM payload is {} bytes, expected {}",
            pixels.len(),
            3 * w * h
        )));
    }
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = pixels[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn image_file_name(index: usize) -> String {
    format!("img_{index:05}.ppm")
}

/// Writes images, annotations, split assignment and manifest into `dir`.
pub fn write_dataset(
    dir: &Path,
    samples: &[LabeledSample],
    train_indices: &[usize],
    manifest: &Manifest,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, sample) in samples.iter().enumerate() {
        fs::write(dir.join(image_file_name(i)), ppm_bytes(&sample.image)?)?;
    }
    let mut ann = String::from("sample_id,class,part_id,x,y,visible\n");
    for (i, sample) in samples.iter().enumerate() {
        for kp in &sample.keypoints {
            ann.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i,
                sample.class,
                kp.identity,
                kp.x,
                kp.y,
                u8::from(kp.visible)
            ));
        }
    }
    fs::write(dir.join("annotations.csv"), ann)?;
    let train_set: std::collections::HashSet<usize> = train_indices.iter().copied().collect();
    let mut split_csv = String::from("sample_id,split\n");
    for i in 0..samples.len() {
        split_csv.push_str(&format!(
            "{},{}\n",
            i,
            if train_set.contains(&i) { "train" } else { "test" }
        ));
    }
    fs::write(dir.join("split.csv"), split_csv)?;
    let mut file = fs::File::create(dir.join("manifest.json"))?;
    file.write_all(serde_json::to_string_pretty(manifest).expect("manifest json").as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

fn parse_line_err(file: &str, line_no: usize, what: &str) -> Error {
    Error::Parse(format!("{file}:{line_no}: {what}"))
}

/// Loads a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::Parse(format!("manifest.json: {e}")))?;
    let mut keypoints: Vec<Vec<Keypoint>> = vec![Vec::new(); manifest.n];
    let mut classes: Vec<Option<usize>> = vec![None; manifest.n];
    let ann = fs::read_to_string(dir.join("annotations.csv"))?;
    for (line_no, line) in ann.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(parse_line_err("annotations.csv", line_no + 1, "expected 6 fields"));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| parse_line_err("annotations.csv", line_no + 1, "bad sample id"))?;
        if id >= manifest.n {
            return Err(parse_line_err("annotations.csv", line_no + 1, "sample id out of range"));
        }
        let class: usize = fields[1]
            .parse()
            .map_err(|_| parse_line_err("annotations.csv", line_no + 1, "bad class"))?;
        let identity: usize = fields[2]
            .parse()
            .map_err(|_| parse_line_err("annotations.csv", line_no + 1, "bad part id"))?;
        let x: f64 = fields[3]
            .parse()
            .map_err(|_| parse_line_err("annotations.csv", line_no + 1, "bad x"))?;
        let y: f64 = fields[4]
            .parse()
            .map_err(|_| parse_line_err("annotations.csv", line_no + 1, "bad y"))?;
        let visible = match fields[5] {
            "0" => false,
            "1" => true,
            _ => return Err(parse_line_err("annotations.csv", line_no + 1, "bad visibility")),
        };
        classes[id] = Some(class);
        keypoints[id].push(Keypoint { x, y, identity, visible });
    }
    let split_text = fs::read_to_string(dir.join("split.csv"))?;
    let mut train_indices = Vec::new();
    let mut test_indices = Vec::new();
    for (line_no, line) in split_text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let (id_str, which) = line
            .split_once(',')
            .ok_or_else(|| parse_line_err("split.csv", line_no + 1, "expected 2 fields"))?;
        let id: usize = id_str
            .parse()
            .map_err(|_| parse_line_err("split.csv", line_no + 1, "bad sample id"))?;
        match which {
            "train" => train_indices.push(id),
            "test" => test_indices.push(id),
            _ => return Err(parse_line_err("split.csv", line_no + 1, "bad split label")),
        }
    }
    let mut samples = Vec::with_capacity(manifest.n);
    for i in 0..manifest.n {
        let mut bytes = Vec::new();
        fs::File::open(dir.join(image_file_name(i)))?.read_to_end(&mut bytes)?;
        let image = ppm_parse(&bytes)?;
        let class = classes[i].ok_or_else(|| {
            Error::Parse(format!("annotations.csv: sample {i} has no rows"))
        })?;
        let mut kps = std::mem::take(&mut keypoints[i]);
        kps.sort_by_key(|kp| kp.identity);
        samples.push(LabeledSample { image, class, keypoints: kps });
    }
    Ok(Dataset { samples, train_indices, test_indices, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_byte_identical() {
        let config = GlyphConfig { image_size: 32, ..Default::default() };
        let a = generate(7, 20, &config).unwrap();
        let b = generate(7, 20, &config).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.class, y.class);
            assert_eq!(x.keypoints, y.keypoints);
        }
    }

    #[test]
    fn classes_balance_within_one() {
        let samples = generate(3, 160, &GlyphConfig { image_size: 32, ..Default::default() }).unwrap();
        let mut counts = [0usize; NUM_CLASSES];
        for s in &samples {
            counts[s.class] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));
    }

    #[test]
    fn pixel_scan_recovers_annotated_centroids() {
        let config = GlyphConfig::default();
        let samples = generate(11, 16, &config).unwrap();
        let s = config.image_size;
        for sample in &samples {
            for kp in &sample.keypoints {
                let (_, color) = slot_appearance(kp.identity, sample.class);
                let mut acc = (0.0, 0.0);
                let mut count = 0usize;
                for y in 0..s {
                    for x in 0..s {
                        let close = (0..3).all(|c| {
                            (sample.image.at(&[c, y, x]) - color[c]).abs() < 0.15
                        });
                        if close {
                            acc.0 += x as f64 + 0.5;
                            acc.1 += y as f64 + 0.5;
                            count += 1;
                        }
                    }
                }
                assert!(count > 0, "part {} pixels not found", kp.identity);
                let px = acc.0 / count as f64;
                let py = acc.1 / count as f64;
                let dx = px - kp.x * s as f64;
                let dy = py - kp.y * s as f64;
                assert!(
                    (dx * dx + dy * dy).sqrt() < 2.0,
                    "part {} rendered {} px from its annotation",
                    kp.identity,
                    (dx * dx + dy * dy).sqrt()
                );
            }
        }
    }

    #[test]
    fn keypoints_are_analytic_and_in_frame() {
        let samples =
            generate(5, 32, &GlyphConfig { image_size: 32, ..Default::default() }).unwrap();
        for s in &samples {
            assert_eq!(s.keypoints.len(), 4);
            for kp in &s.keypoints {
                assert!(kp.visible);
                assert!((0.0..=1.0).contains(&kp.x) && (0.0..=1.0).contains(&kp.y));
            }
        }
    }

    #[test]
    fn occlusion_marks_visibility() {
        let config = GlyphConfig { image_size: 32, occlude_prob: 0.5, ..Default::default() };
        let samples = generate(9, 64, &config).unwrap();
        let hidden: usize = samples
            .iter()
            .flat_map(|s| &s.keypoints)
            .filter(|kp| !kp.visible)
            .count();
        assert!(hidden > 40 && hidden < 220, "hidden {hidden} of 256");
    }

    #[test]
    fn invariant_slots_ignore_class() {
        for class in 0..NUM_CLASSES {
            assert_eq!(slot_appearance(2, class), slot_appearance(2, 0));
            assert_eq!(slot_appearance(3, class), slot_appearance(3, 0));
        }
        // And the designated slots enumerate all 16 classes bijectively.
        let mut seen: Vec<String> = (0..NUM_CLASSES)
            .map(|class| format!("{:?}{:?}", slot_appearance(0, class), slot_appearance(1, class)))
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), NUM_CLASSES);
    }

    #[test]
    fn split_is_stratified_and_exact() {
        let samples = generate(3, 160, &GlyphConfig { image_size: 32, ..Default::default() }).unwrap();
        let (train, test) = split(&samples, 0.8, 42).unwrap();
        assert_eq!(train.len(), 128);
        assert_eq!(test.len(), 32);
        let mut train_counts = [0usize; NUM_CLASSES];
        let mut test_counts = [0usize; NUM_CLASSES];
        for &i in &train {
            train_counts[samples[i].class] += 1;
        }
        for &i in &test {
            test_counts[samples[i].class] += 1;
        }
        assert!(train_counts.iter().all(|&c| c == 8));
        assert!(test_counts.iter().all(|&c| c == 2));
        // Disjoint and exhaustive.
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..160).collect::<Vec<_>>());
    }

    #[test]
    fn split_round_total_from_unbalanced_classes() {
        // 2500 samples over 16 classes (156 or 157 each): plain flooring
        // would give 1988; the largest-remainder rule lands exactly on 2000.
        let samples = generate(1, 2500, &GlyphConfig { image_size: 32, ..Default::default() }).unwrap();
        let (train, test) = split(&samples, 0.8, 7).unwrap();
        assert_eq!(train.len(), 2000);
        assert_eq!(test.len(), 500);
    }

    #[test]
    fn split_seeds_differ_but_counts_match() {
        let samples = generate(3, 160, &GlyphConfig { image_size: 32, ..Default::default() }).unwrap();
        let (a, _) = split(&samples, 0.8, 1).unwrap();
        let (b, _) = split(&samples, 0.8, 2).unwrap();
        assert_eq!(a.len(), b.len());
        assert_ne!(a, b);
        let (c, _) = split(&samples, 0.8, 1).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn split_rejects_undersized_classes() {
        let samples = generate(3, 8, &GlyphConfig { image_size: 32, ..Default::default() }).unwrap();
        assert!(matches!(split(&samples, 0.5, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn ppm_roundtrip_is_exact_after_quantization() {
        let config = GlyphConfig { image_size: 32, ..Default::default() };
        let sample = &generate(2, 1, &config).unwrap()[0];
        let bytes = ppm_bytes(&sample.image).unwrap();
        let back = ppm_parse(&bytes).unwrap();
        let again = ppm_bytes(&back).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn dataset_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let config = GlyphConfig { image_size: 32, ..Default::default() };
        let samples = generate(13, 32, &config).unwrap();
        let (train, test) = split(&samples, 0.75, 13).unwrap();
        let manifest = Manifest {
            format_version: 1,
            seed: 13,
            n: 32,
            train_fraction: 0.75,
            num_classes: NUM_CLASSES,
            config,
        };
        write_dataset(dir.path(), &samples, &train, &manifest).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.manifest, manifest);
        assert_eq!(loaded.train_indices, train);
        assert_eq!(loaded.test_indices, test);
        for (orig, back) in samples.iter().zip(&loaded.samples) {
            assert_eq!(orig.class, back.class);
            assert_eq!(orig.keypoints.len(), back.keypoints.len());
            for (a, b) in orig.keypoints.iter().zip(&back.keypoints) {
                assert_eq!(a.x, b.x); // annotations round-trip exactly
                assert_eq!(a.y, b.y);
            }
            for (a, b) in orig.image.data().iter().zip(back.image.data()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}
