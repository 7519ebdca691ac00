//! Central finite-difference verification of recorded adjoints.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Coordinates probed across all inputs; every coordinate when fewer exist.
    pub coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-6,
            coords: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(1, |a|, |n|)` seen.
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Compares the tape gradient of `<r, f(inputs)>` against central
/// differences. `r` is a fixed random projection (or 1 for scalar outputs).
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval = |xs: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(inputs)?;
    let od = tape.value(out).dims();
    let proj = if od.len() == 1 {
        Tensor::scalar(1.0)
    } else {
        Tensor::from_fn(od, |_| rng.gen_range(-1.0..1.0))
    };
    let dot = |t: &Tensor<f64>| t.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum::<f64>();
    let grads = tape.backward(out, &proj)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let picks: Vec<usize> = if total <= cfg.coords {
        (0..total).collect()
    } else {
        let mut v = sample(&mut rng, total, cfg.coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for flat in picks {
        let (mut which, mut idx) = (0, flat);
        while idx >= inputs[which].len() {
            idx -= inputs[which].len();
            which += 1;
        }
        let orig = work[which].data()[idx];
        work[which].data_mut()[idx] = orig + cfg.epsilon;
        let (tp, _, op) = eval(&work)?;
        let plus = dot(tp.value(op));
        work[which].data_mut()[idx] = orig - cfg.epsilon;
        let (tm, _, om) = eval(&work)?;
        let minus = dot(tm.value(om));
        work[which].data_mut()[idx] = orig;

        let numeric = (plus - minus) / (2.0 * cfg.epsilon);
        let e = rel_err(analytic[which].data()[idx], numeric);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = Some((which, idx));
        }
    }
    Ok(report)
}
