use std::fmt::Write as _;
use std::str::FromStr;

use super::normalize::Normalization;
use crate::error::{Error, Result};
use crate::model::MfaranetConfig;
use crate::supervision::{CeResolution, LossConfig, TrainerConfig};

/// One `key = value` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigEntry {
    /// Byte offset of the line start.
    pub offset: usize,
    pub key: String,
    pub value: String,
}

/// Line grammar: blank, `# comment`, or `key = value` with an optional
/// trailing `# comment`.
pub fn parse_config(text: &str) -> Result<Vec<ConfigEntry>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for raw in text.split_inclusive('\n') {
        let line = raw.split('#').next().unwrap_or("").trim();
        if !line.is_empty() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                offset,
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::Parse {
                    offset,
                    reason: format!("invalid key `{k}`"),
                });
            }
            out.push(ConfigEntry {
                offset,
                key: k.to_string(),
                value: v.to_string(),
            });
        }
        offset += raw.len();
    }
    Ok(out)
}

/// Everything a run needs besides paths: model, loss, optimizer, data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `standard` or `toy`.
    pub preset: String,
    pub model: MfaranetConfig,
    pub loss: LossConfig,
    pub trainer: TrainerConfig,
    pub norm: Normalization,
    /// Toy dataset image side and generator counts.
    pub image_size: usize,
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset("toy", 6).expect("known preset")
    }
}

fn bad(e: &ConfigEntry, reason: impl std::fmt::Display) -> Error {
    Error::Parse {
        offset: e.offset,
        reason: format!("`{}`: {reason}", e.key),
    }
}

fn num<T: FromStr>(e: &ConfigEntry) -> Result<T> {
    e.value
        .parse()
        .map_err(|_| bad(e, format!("cannot parse `{}`", e.value)))
}

fn boolean(e: &ConfigEntry) -> Result<bool> {
    match e.value.as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        v => Err(bad(e, format!("expected boolean, got `{v}`"))),
    }
}

fn triple(e: &ConfigEntry) -> Result<[f32; 3]> {
    let v: Vec<f32> = e
        .value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| bad(e, "expected three comma-separated numbers"))
        })
        .collect::<Result<_>>()?;
    v.try_into()
        .map_err(|_| bad(e, "expected three comma-separated numbers"))
}

fn parsed<T: FromStr<Err = Error>>(e: &ConfigEntry) -> Result<T> {
    e.value.parse().map_err(|err| bad(e, err))
}

impl RunConfig {
    pub fn preset(name: &str, classes: usize) -> Result<Self> {
        let model = match name {
            "standard" => MfaranetConfig::standard(classes),
            "toy" => MfaranetConfig::toy(classes),
            other => return Err(Error::Config(format!("unknown model preset `{other}`"))),
        };
        let trainer = TrainerConfig::default();
        Ok(RunConfig {
            preset: name.to_string(),
            model,
            loss: LossConfig::default(),
            trainer,
            norm: Normalization::default(),
            image_size: 96,
            train_count: 64,
            val_count: 16,
        })
    }

    /// `model` and `classes` are applied first, so the preset never
    /// overwrites an explicit setting regardless of line order.
    pub fn from_text(text: &str) -> Result<Self> {
        let entries = parse_config(text)?;
        let preset = entries.iter().rev().find(|e| e.key == "model");
        let classes = entries.iter().rev().find(|e| e.key == "classes");
        let classes = classes.map(num::<usize>).transpose()?.unwrap_or(6);
        let mut cfg = match preset {
            Some(e) => RunConfig::preset(&e.value, classes).map_err(|err| bad(e, err))?,
            None => RunConfig::preset("toy", classes)?,
        };
        for e in &entries {
            cfg.set(e)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, e: &ConfigEntry) -> Result<()> {
        let (m, l, t) = (&mut self.model, &mut self.loss, &mut self.trainer);
        match e.key.as_str() {
            "model" | "classes" => {}
            "align" => m.align = parsed(e)?,
            "fusion" => m.fusion = parsed(e)?,
            "normalize_attention" => m.normalize_attention = boolean(e)?,
            "dch" => m.mfam.dch = num(e)?,
            "share_projections" => m.mfam.share_projections = boolean(e)?,
            "fusion_bn" => m.mfam.fusion_bn = boolean(e)?,
            "resize_convention" => m.mfam.convention = parsed(e)?,
            "dilation_scope" => {
                m.backbone.dilation_scope = match e.value.as_str() {
                    "all_convs" => crate::backbone::DilationScope::AllConvs,
                    "first_conv" => crate::backbone::DilationScope::FirstConv,
                    v => return Err(bad(e, format!("expected all_convs or first_conv, got `{v}`"))),
                }
            }
            "lambda1" => l.lambda1 = num(e)?,
            "lambda2" => l.lambda2 = num(e)?,
            "lambda3" => l.lambda3 = num(e)?,
            "ths" => l.ths = num(e)?,
            "ohem_thresh" => l.ohem_thresh = num(e)?,
            "min_kept_fraction" => l.min_kept_fraction = num(e)?,
            "fused_weight" => l.fused_weight = num(e)?,
            "ignore_label" => {
                l.ignore_label = if e.value == "none" { None } else { Some(num(e)?) };
                if let Some(v) = l.ignore_label {
                    t.augment.ignore = v;
                }
            }
            "ce_resolution" => {
                l.ce_resolution = match e.value.as_str() {
                    "quarter" => CeResolution::Quarter,
                    "full" => CeResolution::Full,
                    v => return Err(bad(e, format!("expected quarter or full, got `{v}`"))),
                }
            }
            "base_lr" => t.base_lr = num(e)?,
            "lr_power" => t.power = num(e)?,
            "momentum" => t.sgd.momentum = num(e)?,
            "weight_decay" => t.sgd.weight_decay = num(e)?,
            "batch_size" => t.batch_size = num(e)?,
            "max_iter" => t.max_iter = num(e)?,
            "seed" => t.seed = num(e)?,
            "flip_prob" => t.augment.flip_prob = num(e)?,
            "scale_min" => t.augment.scale_min = num(e)?,
            "scale_max" => t.augment.scale_max = num(e)?,
            "crop" => {
                let n: usize = num(e)?;
                t.augment.crop = (n, n);
            }
            "val_every" => t.val_every = num(e)?,
            "checkpoint_every" => t.checkpoint_every = num(e)?,
            "mean" => self.norm.mean = triple(e)?,
            "std" => self.norm.std = triple(e)?,
            "image_size" => self.image_size = num(e)?,
            "train_count" => self.train_count = num(e)?,
            "val_count" => self.val_count = num(e)?,
            _ => return Err(bad(e, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.model.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        if self.norm.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("std entries must be positive".into()));
        }
        let a = &self.trainer.augment;
        if !(a.scale_min > 0.0 && a.scale_min <= a.scale_max) {
            return Err(Error::Config("need 0 < scale_min <= scale_max".into()));
        }
        Ok(())
    }

    /// Canonical text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let (m, l, t) = (&self.model, &self.loss, &self.trainer);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let triple = |v: [f32; 3]| format!("{}, {}, {}", v[0], v[1], v[2]);
        kv("model", self.preset.clone());
        kv("classes", m.classes.to_string());
        kv("align", m.align.to_string());
        kv("fusion", m.fusion.to_string());
        kv("normalize_attention", m.normalize_attention.to_string());
        kv("dch", m.mfam.dch.to_string());
        kv("share_projections", m.mfam.share_projections.to_string());
        kv("fusion_bn", m.mfam.fusion_bn.to_string());
        kv("resize_convention", m.mfam.convention.to_string());
        kv(
            "dilation_scope",
            match m.backbone.dilation_scope {
                crate::backbone::DilationScope::AllConvs => "all_convs",
                crate::backbone::DilationScope::FirstConv => "first_conv",
            }
            .into(),
        );
        kv("lambda1", l.lambda1.to_string());
        kv("lambda2", l.lambda2.to_string());
        kv("lambda3", l.lambda3.to_string());
        kv("ths", l.ths.to_string());
        kv("ohem_thresh", l.ohem_thresh.to_string());
        kv("min_kept_fraction", l.min_kept_fraction.to_string());
        kv("fused_weight", l.fused_weight.to_string());
        kv("ignore_label", l.ignore_label.map_or("none".into(), |v| v.to_string()));
        kv(
            "ce_resolution",
            match l.ce_resolution {
                CeResolution::Quarter => "quarter",
                CeResolution::Full => "full",
            }
            .into(),
        );
        kv("base_lr", t.base_lr.to_string());
        kv("lr_power", t.power.to_string());
        kv("momentum", t.sgd.momentum.to_string());
        kv("weight_decay", t.sgd.weight_decay.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("max_iter", t.max_iter.to_string());
        kv("seed", t.seed.to_string());
        kv("flip_prob", t.augment.flip_prob.to_string());
        kv("scale_min", t.augment.scale_min.to_string());
        kv("scale_max", t.augment.scale_max.to_string());
        kv("crop", t.augment.crop.0.to_string());
        kv("val_every", t.val_every.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("mean", triple(self.norm.mean));
        kv("std", triple(self.norm.std));
        kv("image_size", self.image_size.to_string());
        kv("train_count", self.train_count.to_string());
        kv("val_count", self.val_count.to_string());
        s
    }
}
