//! The three experiment commands behind the CLI and the Python bindings:
//! dataset generation, training, and evaluation with artifact export.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{self, ExperimentConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy, ari, keypoint_regression, nmi, MetricsReport, RegressionSample,
};
use crate::model::PartModel;
use crate::synthgen::{
    generate, image_file_name, load_dataset, ppm_bytes, split, write_dataset, Dataset,
    GlyphConfig, Manifest, NUM_CLASSES,
};
use crate::tensor::Tensor;
use crate::trainer::{
    eval_images, load_checkpoint, restore, save_checkpoint, train, EpochLog, ImageEval,
    OptimizerState,
};

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub seed: u64,
    pub n: usize,
    pub out: PathBuf,
    pub image_size: usize,
    pub parts: usize,
    pub occlude_prob: f64,
    pub train_fraction: f64,
    pub force: bool,
}

impl Default for GenerateArgs {
    fn default() -> Self {
        GenerateArgs {
            seed: 0,
            n: 160,
            out: PathBuf::from("dataset"),
            image_size: 64,
            parts: 4,
            occlude_prob: 0.0,
            train_fraction: 0.8,
            force: false,
        }
    }
}

/// Generates a PartGlyphs dataset directory (images, annotations, split,
/// manifest). Refuses to write into a non-empty directory without `force`.
pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    if args.out.exists() {
        let non_empty = fs::read_dir(&args.out)?.next().is_some();
        if non_empty && !args.force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                args.out.display()
            )));
        }
    }
    let config = GlyphConfig {
        image_size: args.image_size,
        num_parts: args.parts,
        occlude_prob: args.occlude_prob,
    };
    let samples = generate(args.seed, args.n, &config)?;
    let (train_indices, _) = split(&samples, args.train_fraction, args.seed)?;
    let manifest = Manifest {
        format_version: 1,
        seed: args.seed,
        n: args.n,
        train_fraction: args.train_fraction,
        num_classes: NUM_CLASSES,
        config,
    };
    write_dataset(&args.out, &samples, &train_indices, &manifest)
}

/// Trains a model on a dataset directory. Writes `config.resolved.txt`, a
/// JSON-lines `train_log.jsonl` (one line per epoch) and `checkpoint.pdsc`
/// into `out`; returns the per-epoch log.
pub fn cmd_train(
    config_path: Option<&Path>,
    data: &Path,
    out: &Path,
) -> Result<Vec<EpochLog>> {
    let exp = match config_path {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            config::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    let dataset = load_dataset(data)?;
    if exp.k != dataset.manifest.config.num_parts {
        eprintln!(
            "warning: config discovers k = {} parts but the dataset annotates {}",
            exp.k, dataset.manifest.config.num_parts
        );
    }
    let model_cfg =
        exp.model_config(dataset.manifest.config.image_size, dataset.manifest.num_classes);
    model_cfg.validate()?;
    let resolved = exp.serialize();
    fs::create_dir_all(out)?;
    fs::write(out.join("config.resolved.txt"), &resolved)?;
    let log_path = out.join("train_log.jsonl");
    let mut log_file = fs::File::create(&log_path)?;
    let checkpoint_path = out.join("checkpoint.pdsc");

    let mut rng = ChaCha8Rng::seed_from_u64(exp.train.seed);
    let mut model = PartModel::init(model_cfg, &mut rng)?;
    let logs = train(&mut model, &dataset, &exp.train, |model, state, log| {
        let line = serde_json::to_string(log).expect("epoch log json");
        writeln!(log_file, "{line}")?;
        log_file.flush()?;
        save_checkpoint(&checkpoint_path, model, state, &resolved)
    })?;
    if logs.is_empty() {
        // Zero-epoch runs still leave a loadable (untrained) checkpoint.
        save_checkpoint(&checkpoint_path, &model, &OptimizerState::new(&model), &resolved)?;
    }
    Ok(logs)
}

/// Fixed rendering palette for part-assignment maps: channel k keeps one
/// color across every image; the background channel is dark gray.
pub fn map_color(channel: usize, num_parts: usize) -> [f64; 3] {
    const COLORS: [[f64; 3]; 8] = [
        [0.89, 0.10, 0.11],
        [0.22, 0.49, 0.72],
        [0.30, 0.69, 0.29],
        [0.60, 0.31, 0.64],
        [1.00, 0.60, 0.00],
        [0.65, 0.34, 0.16],
        [0.97, 0.51, 0.75],
        [0.40, 0.80, 0.80],
    ];
    if channel >= num_parts {
        [0.12, 0.12, 0.12]
    } else {
        COLORS[channel % COLORS.len()]
    }
}

/// Nearest-neighbor upsampling of the argmax channel grid to image size.
fn render_part_map(attention: &Tensor, image_size: usize, num_parts: usize) -> Result<Tensor> {
    let shape = attention.shape();
    let (channels, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Tensor::zeros(vec![3, image_size, image_size]);
    for y in 0..image_size {
        for x in 0..image_size {
            let cy = (y * h / image_size).min(h - 1);
            let cx = (x * w / image_size).min(w - 1);
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..channels {
                let v = attention.at(&[c, cy, cx]);
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            let color = map_color(best, num_parts);
            for c in 0..3 {
                out.set(&[c, y, x], color[c]);
            }
        }
    }
    Ok(out)
}

fn regression_samples(dataset: &Dataset, indices: &[usize], evals: &[ImageEval]) -> Vec<RegressionSample> {
    indices
        .iter()
        .zip(evals)
        .map(|(&i, e)| RegressionSample {
            centroids: e.centroids.clone(),
            keypoints: dataset.samples[i].keypoints.clone(),
        })
        .collect()
}

/// Evaluates a checkpoint on a dataset: writes `metrics.json`,
/// `centroids.csv`, `assignments.csv` and per-image part maps under `maps/`.
pub fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path) -> Result<MetricsReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let exp = config::parse(&ckpt.config_text)?;
    let dataset = load_dataset(data)?;
    let model_cfg =
        exp.model_config(dataset.manifest.config.image_size, dataset.manifest.num_classes);
    model_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(exp.train.seed);
    let mut model = PartModel::init(model_cfg, &mut rng)?;
    restore(&mut model, &ckpt)?;

    let tau = exp.train.presence_tau;
    let train_refs: Vec<_> = dataset.train().collect();
    let test_refs: Vec<_> = dataset.test().collect();
    if test_refs.is_empty() {
        return Err(Error::Precondition("dataset has no test split".into()));
    }
    let train_evals = eval_images(&model, &train_refs, tau)?;
    let test_evals = eval_images(&model, &test_refs, tau)?;

    let labels: Vec<usize> = test_refs.iter().map(|s| s.class).collect();
    let predictions: Vec<usize> = test_evals.iter().map(|e| e.predicted_class).collect();
    let mut gt_parts = Vec::new();
    let mut pred_parts = Vec::new();
    for e in &test_evals {
        for &(identity, channel) in &e.assignments {
            gt_parts.push(identity);
            pred_parts.push(channel);
        }
    }
    let train_reg = regression_samples(&dataset, &dataset.train_indices, &train_evals);
    let test_reg = regression_samples(&dataset, &dataset.test_indices, &test_evals);

    let k = exp.k;
    let mut presence = vec![0usize; k];
    for e in &test_evals {
        for (part, c) in e.centroids.iter().enumerate() {
            if c.present {
                presence[part] += 1;
            }
        }
    }
    let report = MetricsReport {
        nmi: nmi(&gt_parts, &pred_parts)?,
        ari: ari(&gt_parts, &pred_parts)?,
        keypoint_error_pct: keypoint_regression(&train_reg, &test_reg)?,
        accuracy_pct: accuracy(&predictions, &labels)?,
        per_part_presence_histogram: presence
            .iter()
            .map(|&c| c as f64 / test_evals.len() as f64)
            .collect(),
    };

    fs::create_dir_all(out)?;
    let maps_dir = out.join("maps");
    fs::create_dir_all(&maps_dir)?;
    let image_size = dataset.manifest.config.image_size;
    let mut centroid_csv = String::from("sample_id,part_id,x,y,present\n");
    let mut assign_csv = String::from("sample_id,keypoint_identity,predicted_channel\n");
    for (&idx, e) in dataset.test_indices.iter().zip(&test_evals) {
        for (part, c) in e.centroids.iter().enumerate() {
            centroid_csv.push_str(&format!(
                "{},{},{},{},{}\n",
                idx,
                part,
                c.x,
                c.y,
                u8::from(c.present)
            ));
        }
        for &(identity, channel) in &e.assignments {
            assign_csv.push_str(&format!("{idx},{identity},{channel}\n"));
        }
        let map = render_part_map(&e.attention, image_size, k)?;
        fs::write(maps_dir.join(format!("partmap_{}", image_file_name(idx))), ppm_bytes(&map)?)?;
    }
    fs::write(out.join("centroids.csv"), centroid_csv)?;
    fs::write(out.join("assignments.csv"), assign_csv)?;
    let json = serde_json::to_string_pretty(&report).expect("metrics json");
    fs::write(out.join("metrics.json"), format!("{json}\n"))?;
    Ok(report)
}
