use std::collections::BTreeMap;

use crate::autodiff::GradientMap;
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ParamKind, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// `base · (1 − iter/max_iter)^power`, clamped at zero.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 {
        return base;
    }
    base * (1.0 - iter as f64 / max_iter as f64).max(0.0).powf(power)
}

/// Momentum buffers by parameter name.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: BTreeMap<String, Tensor<f32>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// `v ← m·v + g + wd·p`, `p ← p − lr·v`; decay skips BN gamma/beta.
/// `kinds` maps each trainable name to its role. A non-finite gradient
/// aborts the whole step before any parameter changes.
pub fn sgd_step(
    params: &mut ParamSet<f32>,
    grads: &GradientMap<f32>,
    kinds: &BTreeMap<String, ParamKind>,
    state: &mut SgdState,
    lr: f64,
    cfg: &SgdConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    let (m, lr) = (cfg.momentum as f32, lr as f32);
    for (name, g) in grads {
        let kind = kinds.get(name).copied().unwrap_or(ParamKind::Weight);
        if !kind.trainable() {
            continue;
        }
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::param(name, "gradient for unknown parameter"))?;
        if p.dims() != g.dims() {
            return Err(Error::param(
                name,
                format!("gradient dims {} vs {}", g.dims(), p.dims()),
            ));
        }
        let wd = if kind.weight_decay() {
            cfg.weight_decay as f32
        } else {
            0.0
        };
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.dims()));
        for ((vv, &gv), pv) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
            *vv = m * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Role of every trainable parameter of `graph`.
pub fn param_kinds(graph: &ModelGraph) -> BTreeMap<String, ParamKind> {
    graph.param_specs().into_iter().map(|s| (s.name, s.kind)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_scalar_step() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(1.0f32));
        let grads: GradientMap<f32> = [("w".to_string(), Tensor::scalar(2.0))].into_iter().collect();
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut p, &grads, &BTreeMap::new(), &mut SgdState::new(), 0.1, &cfg).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![0.5f32, -1.5]));
        let before = p.clone();
        let grads: GradientMap<f32> = [("w".to_string(), Tensor::zeros(before.get("w").unwrap().dims()))]
            .into_iter()
            .collect();
        let cfg = SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        sgd_step(&mut p, &grads, &BTreeMap::new(), &mut SgdState::new(), 0.1, &cfg).unwrap();
        assert!(p.bitwise_eq(&before));
    }

    #[test]
    fn three_momentum_steps_match_unrolled_recursion() {
        let (m, wd, lr) = (0.9f64, 0.01f64, 0.1f64);
        let gs = [1.0f64, -0.5, 2.0];
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(1.0f32));
        let mut state = SgdState::new();
        let cfg = SgdConfig {
            momentum: m,
            weight_decay: wd,
        };
        for &g in &gs {
            let grads: GradientMap<f32> = [("w".to_string(), Tensor::scalar(g as f32))].into_iter().collect();
            sgd_step(&mut p, &grads, &BTreeMap::new(), &mut state, lr, &cfg).unwrap();
        }
        // v1 = g1 + wd p0; p1 = p0 - lr v1; v2 = m v1 + g2 + wd p1; ...
        let p0 = 1.0;
        let v1 = gs[0] + wd * p0;
        let p1 = p0 - lr * v1;
        let v2 = m * v1 + gs[1] + wd * p1;
        let p2 = p1 - lr * v2;
        let v3 = m * v2 + gs[2] + wd * p2;
        let p3 = p2 - lr * v3;
        assert!((f64::from(p.get("w").unwrap().data()[0]) - p3).abs() < 1e-6);
    }

    #[test]
    fn bn_affine_parameters_skip_decay() {
        let mut p = ParamSet::new();
        p.insert("x.gamma", Tensor::scalar(2.0f32));
        p.insert("x.weight", Tensor::scalar(2.0f32));
        let grads: GradientMap<f32> = ["x.gamma", "x.weight"]
            .iter()
            .map(|n| (n.to_string(), Tensor::scalar(0.0)))
            .collect();
        let kinds: BTreeMap<String, ParamKind> = [
            ("x.gamma".to_string(), ParamKind::Gamma),
            ("x.weight".to_string(), ParamKind::Weight),
        ]
        .into_iter()
        .collect();
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.5,
        };
        sgd_step(&mut p, &grads, &kinds, &mut SgdState::new(), 1.0, &cfg).unwrap();
        assert_eq!(p.get("x.gamma").unwrap().data()[0], 2.0);
        assert_eq!(p.get("x.weight").unwrap().data()[0], 1.0);
    }

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(0.01, 0, 100, 0.9), 0.01);
        assert_eq!(poly_lr(0.01, 100, 100, 0.9), 0.0);
    }

    #[test]
    fn non_finite_gradient_is_named_and_leaves_params() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::scalar(1.0f32));
        p.insert("b", Tensor::scalar(1.0f32));
        let grads: GradientMap<f32> = [
            ("a".to_string(), Tensor::scalar(1.0)),
            ("b".to_string(), Tensor::scalar(f32::NAN)),
        ]
        .into_iter()
        .collect();
        let r = sgd_step(
            &mut p,
            &grads,
            &BTreeMap::new(),
            &mut SgdState::new(),
            0.1,
            &SgdConfig::default(),
        );
        assert!(matches!(r, Err(Error::NonFinite(m)) if m.contains("`b`")));
        assert_eq!(p.get("a").unwrap().data()[0], 1.0);
    }
}
