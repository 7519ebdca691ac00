use std::sync::Arc;

use super::boundary::boundary_labels;
use super::losses::{balanced_bce, boundary_reg, ce_ohem, OhemParams};
use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::labels::Labels;
use crate::tensor::{Element, ResizeConvention, Tensor};

/// Resolution at which the segmentation cross entropy is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CeResolution {
    /// Score resolution with nearest-downsampled labels.
    #[default]
    Quarter,
    /// Scores bilinearly upsampled to label resolution.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub ths: f64,
    pub ohem_thresh: f64,
    pub min_kept_fraction: f64,
    pub ignore_label: Option<u8>,
    /// Weight of an extra OHEM cross entropy on the fused scores; the
    /// per-scale terms alone leave the attention heads without gradient.
    pub fused_weight: f64,
    pub ce_resolution: CeResolution,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 0.3,
            lambda2: 1.0,
            lambda3: 0.1,
            ths: 0.8,
            ohem_thresh: 0.7,
            min_kept_fraction: 0.007,
            ignore_label: Some(crate::labels::IGNORE_LABEL),
            fused_weight: 1.0,
            ce_resolution: CeResolution::Quarter,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 || self.fused_weight < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if !(self.ths > 0.0 && self.ths < 1.0) {
            return bad("ths must lie in (0, 1)");
        }
        if !(self.ohem_thresh > 0.0 && self.ohem_thresh <= 1.0) {
            return bad("ohem_thresh must lie in (0, 1]");
        }
        if !(self.min_kept_fraction >= 0.0 && self.min_kept_fraction <= 1.0) {
            return bad("min_kept_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn ohem(&self, pixels: usize) -> OhemParams {
        OhemParams {
            thresh: self.ohem_thresh,
            min_kept: ((self.min_kept_fraction * pixels as f64).ceil() as usize).max(1),
            ignore: self.ignore_label,
        }
    }
}

/// Per-scale terms and their weighted sums.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// `λ1 Σ_s L_BCE`.
    pub bce: f64,
    /// `λ2 Σ_s L_CE`.
    pub ce: f64,
    /// `λ3 Σ_s L_reg`.
    pub reg: f64,
    /// Unweighted fused-score cross entropy.
    pub fused_ce: f64,
    /// Unweighted `(bce, ce, reg)` per scale.
    pub per_scale: Vec<(f64, f64, f64)>,
}

/// Label tensors shared by all loss terms of one batch.
#[derive(Debug, Clone)]
pub struct Targets<T: Element> {
    pub full: Arc<Labels>,
    pub quarter: Arc<Labels>,
    pub boundary: Arc<Tensor<T>>,
}

impl<T: Element> Targets<T> {
    pub fn new(labels: &Labels, down: usize, ignore: Option<u8>) -> Result<Self> {
        Ok(Targets {
            full: Arc::new(labels.clone()),
            quarter: Arc::new(labels.downsample_nearest(down)?),
            boundary: Arc::new(boundary_labels(labels, down, ignore)?),
        })
    }
}

fn check_scales<X>(scores: &[X], boundary: &[X]) -> Result<()> {
    if scores.len() != 4 {
        return Err(Error::Config(format!(
            "joint supervision needs 4 scales, got {}",
            scores.len()
        )));
    }
    if boundary.len() != 4 {
        return Err(Error::Config(format!(
            "joint supervision needs 4 boundary maps, got {}",
            boundary.len()
        )));
    }
    Ok(())
}

fn ce_labels<T: Element>(t: &Targets<T>, cfg: &LossConfig) -> Arc<Labels> {
    match cfg.ce_resolution {
        CeResolution::Quarter => t.quarter.clone(),
        CeResolution::Full => t.full.clone(),
    }
}

fn ce_input<T: Element>(scores: &Tensor<T>, t: &Targets<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    match cfg.ce_resolution {
        CeResolution::Quarter => Ok(scores.clone()),
        CeResolution::Full => {
            crate::tensor::bilinear_resize(scores, t.full.height(), t.full.width(), ResizeConvention::HalfPixel)
        }
    }
}

/// Evaluates the joint objective directly on tensors.
pub fn mjs_total<T: Element>(
    scores: &[Tensor<T>],
    boundary: &[Tensor<T>],
    fused: Option<&Tensor<T>>,
    targets: &Targets<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    check_scales(scores, boundary)?;
    let labels = ce_labels(targets, cfg);
    let pixels = labels.data().len();
    let mut per_scale = Vec::new();
    for (s, b) in scores.iter().zip(boundary) {
        let bce = balanced_bce(b, &targets.boundary)?.loss.as_f64();
        let ce = ce_ohem(&ce_input(s, targets, cfg)?, &labels, &cfg.ohem(pixels))?
            .loss
            .as_f64();
        let reg = boundary_reg(s, b, &targets.quarter, cfg.ths, cfg.ignore_label)?
            .loss
            .as_f64();
        per_scale.push((bce, ce, reg));
    }
    let fused_ce = match fused {
        Some(f) if cfg.fused_weight > 0.0 => ce_ohem(&ce_input(f, targets, cfg)?, &labels, &cfg.ohem(pixels))?
            .loss
            .as_f64(),
        _ => 0.0,
    };
    Ok(breakdown(per_scale, fused_ce, cfg))
}

fn breakdown(per_scale: Vec<(f64, f64, f64)>, fused_ce: f64, cfg: &LossConfig) -> LossBreakdown {
    let bce = cfg.lambda1 * per_scale.iter().map(|t| t.0).sum::<f64>();
    let ce = cfg.lambda2 * per_scale.iter().map(|t| t.1).sum::<f64>();
    let reg = cfg.lambda3 * per_scale.iter().map(|t| t.2).sum::<f64>();
    LossBreakdown {
        total: bce + ce + reg + cfg.fused_weight * fused_ce,
        bce,
        ce,
        reg,
        fused_ce,
        per_scale,
    }
}

/// Tape handles of a recorded objective.
#[derive(Debug, Clone)]
pub struct MjsVars {
    pub total: Var,
    /// `(bce, ce, reg)` per scale.
    pub terms: Vec<(Var, Var, Var)>,
    pub fused_ce: Option<Var>,
}

impl MjsVars {
    pub fn breakdown<T: Element>(&self, tape: &Tape<T>, cfg: &LossConfig) -> LossBreakdown {
        let v = |x: Var| tape.value(x).data()[0].as_f64();
        let per_scale = self.terms.iter().map(|&(a, b, c)| (v(a), v(b), v(c))).collect();
        breakdown(per_scale, self.fused_ce.map_or(0.0, v), cfg)
    }
}

fn record_ce<T: Element>(tape: &mut Tape<T>, s: Var, targets: &Targets<T>, cfg: &LossConfig) -> Result<Var> {
    let labels = ce_labels(targets, cfg);
    let pixels = labels.data().len();
    let x = match cfg.ce_resolution {
        CeResolution::Quarter => s,
        CeResolution::Full => tape.record(
            Op::Resize {
                h: targets.full.height(),
                w: targets.full.width(),
                convention: ResizeConvention::HalfPixel,
            },
            &[s],
        )?,
    };
    tape.record(
        Op::CrossEntropyOhem {
            labels,
            params: cfg.ohem(pixels),
        },
        &[x],
    )
}

/// Records the joint objective on `tape`.
pub fn record_mjs<T: Element>(
    tape: &mut Tape<T>,
    scores: &[Var],
    boundary: &[Var],
    fused: Option<Var>,
    targets: &Targets<T>,
    cfg: &LossConfig,
) -> Result<MjsVars> {
    check_scales(scores, boundary)?;
    let mut terms = Vec::new();
    let mut all = Vec::new();
    let mut weights = Vec::new();
    for (&s, &b) in scores.iter().zip(boundary) {
        let bce = tape.record(
            Op::BalancedBce {
                target: targets.boundary.clone(),
            },
            &[b],
        )?;
        let ce = record_ce(tape, s, targets, cfg)?;
        let reg = tape.record(
            Op::BoundaryReg {
                labels: targets.quarter.clone(),
                ths: cfg.ths,
                ignore: cfg.ignore_label,
            },
            &[s, b],
        )?;
        terms.push((bce, ce, reg));
        all.extend([bce, ce, reg]);
        weights.extend([cfg.lambda1, cfg.lambda2, cfg.lambda3].map(T::from_f64_lossy));
    }
    let fused_ce = match fused {
        Some(f) if cfg.fused_weight > 0.0 => {
            let v = record_ce(tape, f, targets, cfg)?;
            all.push(v);
            weights.push(T::from_f64_lossy(cfg.fused_weight));
            Some(v)
        }
        _ => None,
    };
    let total = tape.record(Op::WeightedSum(weights), &all)?;
    Ok(MjsVars { total, terms, fused_ce })
}
