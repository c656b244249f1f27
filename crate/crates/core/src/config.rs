//! Experiment configuration: a plain-text `key = value` file covering the
//! model, training schedule, loss weights and ablation switches. Unknown
//! keys are parse errors (no silent typo acceptance), `#` starts a comment,
//! and every run writes its fully resolved config next to the outputs.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PoolingNorm};
use crate::trainer::TrainConfig;
use crate::transforms::TransformRanges;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Number of foreground parts K.
    pub k: usize,
    pub backbone_widths: Vec<usize>,
    pub backbone_downsample: Vec<bool>,
    pub pooling_norm: PoolingNorm,
    /// Ablation: bypass the modulation vectors entirely.
    pub no_modulation: bool,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            k: 4,
            backbone_widths: vec![8, 16, 32, 64],
            backbone_downsample: vec![true, true, true, false],
            pooling_norm: PoolingNorm::Area,
            no_modulation: false,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Model architecture for a dataset with the given image size and class
    /// count (both come from the dataset manifest).
    pub fn model_config(&self, input_size: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_size,
            widths: self.backbone_widths.clone(),
            downsample: self.backbone_downsample.clone(),
            num_parts: self.k,
            num_classes,
            pooling_norm: self.pooling_norm,
            use_modulation: !self.no_modulation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.backbone_widths.is_empty()
            || self.backbone_widths.len() != self.backbone_downsample.len()
        {
            return Err(Error::Config(
                "backbone_widths and backbone_downsample must be nonempty and equal length".into(),
            ));
        }
        self.train.validate()
    }

    /// Fully resolved key=value text, parseable by [`parse`].
    pub fn serialize(&self) -> String {
        let t = &self.train;
        let list_usize =
            |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let list_bool =
            |v: &[bool]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "# model\n\
             k = {}\n\
             backbone_widths = {}\n\
             backbone_downsample = {}\n\
             pooling_norm = {}\n\
             include_background = {}\n\
             no_modulation = {}\n\
             \n# training\n\
             epochs = {}\n\
             batch_size = {}\n\
             seed = {}\n\
             lr_backbone = {}\n\
             lr_head = {}\n\
             lr_modulation = {}\n\
             lr_decay_factor = {}\n\
             lr_decay_period = {}\n\
             lr_decay_count = {}\n\
             grad_clip = {}\n\
             part_dropout = {}\n\
             \n# loss weights\n\
             w_class = {}\n\
             w_conc = {}\n\
             w_orth = {}\n\
             w_equiv = {}\n\
             w_pres = {}\n\
             \n# ablation switches\n\
             no_conc = {}\n\
             no_orth = {}\n\
             no_equiv = {}\n\
             no_pres = {}\n\
             no_part_dropout = {}\n\
             \n# equivariance transforms\n\
             equiv_rotation_deg = {}\n\
             equiv_translation = {}\n\
             equiv_scale_min = {}\n\
             equiv_scale_max = {}\n\
             \n# initialization\n\
             prototype_warm_start = {}\n\
             \n# evaluation\n\
             presence_tau = {}\n\
             eval_slice = {}\n",
            self.k,
            list_usize(&self.backbone_widths),
            list_bool(&self.backbone_downsample),
            self.pooling_norm.as_str(),
            t.include_background,
            self.no_modulation,
            t.epochs,
            t.batch_size,
            t.seed,
            t.lr_backbone,
            t.lr_head,
            t.lr_modulation,
            t.lr_decay_factor,
            t.lr_decay_period,
            t.lr_decay_count,
            t.grad_clip,
            t.part_dropout,
            t.weights.class,
            t.weights.conc,
            t.weights.orth,
            t.weights.equiv,
            t.weights.pres,
            t.disable_conc,
            t.disable_orth,
            t.disable_equiv,
            t.disable_pres,
            t.disable_part_dropout,
            t.ranges.theta.1.to_degrees(),
            t.ranges.translate.1,
            t.ranges.scale.0,
            t.ranges.scale.1,
            t.prototype_warm_start,
            t.presence_tau,
            t.eval_slice,
        )
    }
}

fn bad(line_no: usize, what: impl std::fmt::Display) -> Error {
    Error::Parse(format!("config line {line_no}: {what}"))
}

/// Parses a key=value config over the defaults.
pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut rotation_deg = cfg.train.ranges.theta.1.to_degrees();
    let mut translation = cfg.train.ranges.translate.1;
    let mut scale_min = cfg.train.ranges.scale.0;
    let mut scale_max = cfg.train.ranges.scale.1;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(line_no, "expected \"key = value\""))?;
        let key = key.trim();
        let value = value.trim();
        let usize_v = || -> Result<usize> {
            value.parse().map_err(|_| bad(line_no, format!("invalid integer \"{value}\"")))
        };
        let u64_v = || -> Result<u64> {
            value.parse().map_err(|_| bad(line_no, format!("invalid integer \"{value}\"")))
        };
        let f64_v = || -> Result<f64> {
            value.parse().map_err(|_| bad(line_no, format!("invalid number \"{value}\"")))
        };
        let bool_v = || -> Result<bool> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(bad(line_no, format!("invalid boolean \"{value}\""))),
            }
        };
        match key {
            "k" => cfg.k = usize_v()?,
            "backbone_widths" => {
                cfg.backbone_widths = value
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| bad(line_no, format!("invalid width \"{s}\"")))
                    })
                    .collect::<Result<_>>()?;
            }
            "backbone_downsample" => {
                cfg.backbone_downsample = value
                    .split(',')
                    .map(|s| match s.trim() {
                        "true" => Ok(true),
                        "false" => Ok(false),
                        other => Err(bad(line_no, format!("invalid boolean \"{other}\""))),
                    })
                    .collect::<Result<_>>()?;
            }
            "pooling_norm" => {
                cfg.pooling_norm =
                    PoolingNorm::parse(value).map_err(|e| bad(line_no, e))?;
            }
            "include_background" => cfg.train.include_background = bool_v()?,
            "no_modulation" => cfg.no_modulation = bool_v()?,
            "epochs" => cfg.train.epochs = usize_v()?,
            "batch_size" => cfg.train.batch_size = usize_v()?,
            "seed" => cfg.train.seed = u64_v()?,
            "lr_backbone" => cfg.train.lr_backbone = f64_v()?,
            "lr_head" => cfg.train.lr_head = f64_v()?,
            "lr_modulation" => cfg.train.lr_modulation = f64_v()?,
            "lr_decay_factor" => cfg.train.lr_decay_factor = f64_v()?,
            "lr_decay_period" => cfg.train.lr_decay_period = usize_v()?,
            "lr_decay_count" => cfg.train.lr_decay_count = usize_v()?,
            "grad_clip" => cfg.train.grad_clip = f64_v()?,
            "part_dropout" => cfg.train.part_dropout = f64_v()?,
            "w_class" => cfg.train.weights.class = f64_v()?,
            "w_conc" => cfg.train.weights.conc = f64_v()?,
            "w_orth" => cfg.train.weights.orth = f64_v()?,
            "w_equiv" => cfg.train.weights.equiv = f64_v()?,
            "w_pres" => cfg.train.weights.pres = f64_v()?,
            "no_conc" => cfg.train.disable_conc = bool_v()?,
            "no_orth" => cfg.train.disable_orth = bool_v()?,
            "no_equiv" => cfg.train.disable_equiv = bool_v()?,
            "no_pres" => cfg.train.disable_pres = bool_v()?,
            "no_part_dropout" => cfg.train.disable_part_dropout = bool_v()?,
            "equiv_rotation_deg" => rotation_deg = f64_v()?,
            "equiv_translation" => translation = f64_v()?,
            "equiv_scale_min" => scale_min = f64_v()?,
            "equiv_scale_max" => scale_max = f64_v()?,
            "prototype_warm_start" => cfg.train.prototype_warm_start = bool_v()?,
            "presence_tau" => cfg.train.presence_tau = f64_v()?,
            "eval_slice" => cfg.train.eval_slice = usize_v()?,
            other => return Err(bad(line_no, format!("unknown key \"{other}\""))),
        }
    }
    if rotation_deg < 0.0 || translation < 0.0 {
        return Err(Error::Config("transform ranges must be nonnegative".into()));
    }
    cfg.train.ranges = TransformRanges {
        theta: (-rotation_deg.to_radians(), rotation_deg.to_radians()),
        translate: (-translation, translation),
        scale: (scale_min, scale_max),
    };
    cfg.validate()?;
    Ok(cfg)
}
