use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment, AugmentConfig};
use super::mjs::{record_mjs, LossBreakdown, LossConfig, Targets};
use super::sgd::{param_kinds, poly_lr, sgd_step, SgdConfig, SgdState};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::eval::ConfusionMatrix;
use crate::graph::{record_graph, update_running_stats, ModelGraph, ParamSet, TrainMode};
use crate::io::atomic::write_atomic;
use crate::io::weights::write_weights_file;
use crate::labels::Labels;
use crate::model::{inference_graph, predict, SCORE_STRIDE};
use crate::tensor::{Dims, Tensor};

/// Normalized `(1, 3, H, W)` images with their label maps.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<Labels>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub base_lr: f64,
    pub power: f64,
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub max_iter: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Validation period in iterations; 0 validates only at the end.
    pub val_every: usize,
    /// Checkpoint period in iterations; 0 writes only the final weights.
    pub checkpoint_every: usize,
    /// Receives `metrics.log` and checkpoints when set.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            base_lr: 0.01,
            power: 0.9,
            sgd: SgdConfig::default(),
            batch_size: 8,
            max_iter: 200,
            seed: 0,
            augment: AugmentConfig::default(),
            val_every: 0,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    /// 1-based count of completed steps.
    pub iter: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl IterRecord {
    /// `iter lr total bce ce reg`.
    pub fn log_line(&self) -> String {
        format!(
            "{} {:.6} {:.6} {:.6} {:.6} {:.6}",
            self.iter, self.lr, self.loss.total, self.loss.bce, self.loss.ce, self.loss.reg
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub records: Vec<IterRecord>,
    /// `(iter, mIoU)` per validation pass.
    pub val: Vec<(usize, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    /// Mean total loss over the first and last `window` iterations.
    pub fn smoothed_endpoints(&self, window: usize) -> Option<(f64, f64)> {
        let w = window.min(self.records.len());
        if w == 0 {
            return None;
        }
        let mean = |r: &[IterRecord]| r.iter().map(|x| x.loss.total).sum::<f64>() / r.len() as f64;
        Some((mean(&self.records[..w]), mean(&self.records[self.records.len() - w..])))
    }

    pub fn log_text(&self) -> String {
        self.records.iter().fold(String::new(), |mut s, r| {
            let _ = writeln!(s, "{}", r.log_line());
            s
        })
    }
}

fn batch_indices(n: usize, batch: usize, iter: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut pos = iter * batch;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    while out.len() < batch {
        let (epoch, off) = (pos / n, pos % n);
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch as u64);
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[off]);
        pos += 1;
    }
    out
}

fn make_batch(data: &Dataset, idx: &[usize], iter: usize, cfg: &TrainerConfig) -> Result<(Tensor<f32>, Labels)> {
    // augmentation draws live on their own stream family, disjoint from
    // the shuffling streams
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa5a5_5a5a_0f0f_f0f0);
    rng.set_stream(iter as u64);
    let mut imgs = Vec::with_capacity(idx.len());
    let mut labs = Vec::with_capacity(idx.len());
    for &i in idx {
        let (im, lb) = augment(&data.images[i], &data.labels[i], &mut rng, &cfg.augment);
        imgs.push(im);
        labs.push(lb);
    }
    let d = imgs[0].dims();
    let mut buf = Vec::with_capacity(d.len() * imgs.len());
    for im in &imgs {
        buf.extend_from_slice(im.data());
    }
    Ok((
        Tensor::from_vec(Dims::new(imgs.len(), d.c, d.h, d.w), buf)?,
        Labels::stack(&labs)?,
    ))
}

/// One forward/backward/update step; returns the loss before the update.
pub fn train_step(
    graph: &ModelGraph,
    params: &mut ParamSet<f32>,
    state: &mut SgdState,
    image: Tensor<f32>,
    labels: &Labels,
    lr: f64,
    sgd: &SgdConfig,
    loss: &LossConfig,
) -> Result<LossBreakdown> {
    let targets = Targets::new(labels, SCORE_STRIDE, loss.ignore_label)?;
    let mut tape = Tape::new();
    let run = record_graph(graph, params, &[("image", image)], &mut tape, TrainMode::Train)?;
    let scores: Vec<_> = (1..=4)
        .map(|n| run.output(graph, &format!("score.{n}")))
        .collect::<Result<_>>()?;
    let boundary: Vec<_> = (1..=4)
        .map(|n| run.output(graph, &format!("boundary.{n}")))
        .collect::<Result<_>>()?;
    let fused = run.output(graph, "fused")?;
    let vars = record_mjs(&mut tape, &scores, &boundary, Some(fused), &targets, loss)?;
    let breakdown = vars.breakdown(&tape, loss);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss ({breakdown:?})")));
    }
    let grads = tape.backward(vars.total, &Tensor::scalar(1.0))?;
    let gmap = tape.gradient_map(&grads);
    update_running_stats(graph, params, &tape, &run)?;
    sgd_step(params, &gmap, &param_kinds(graph), state, lr, sgd)?;
    Ok(breakdown)
}

/// Accumulated confusion of `fused` predictions over `data`.
pub fn evaluate(
    graph: &ModelGraph,
    params: &ParamSet<f32>,
    data: &Dataset,
    classes: usize,
    ignore: Option<u8>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    for (img, lab) in data.images.iter().zip(&data.labels) {
        let pred = predict(graph, params, img)?;
        cm.update(&pred, lab, ignore)?;
    }
    Ok(cm)
}

fn validate(train: &ModelGraph, params: &ParamSet<f32>, val: &Dataset, loss: &LossConfig) -> Result<f64> {
    let g = inference_graph(train)?;
    let d = g.infer_shapes(&[("image", val.images[0].dims())])?;
    let classes = d[g.output("fused").expect("fused").0].c;
    Ok(evaluate(&g, params, val, classes, loss.ignore_label)?.miou()?.miou)
}

/// Seeded SGD training of a training graph (outputs `score.K`,
/// `boundary.K`, `fused`). `max_iter == 0` returns with parameters untouched.
pub fn train_loop(
    graph: &ModelGraph,
    params: &mut ParamSet<f32>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainerConfig,
    loss: &LossConfig,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    loss.validate()?;
    let mut report = TrainReport::default();
    let mut state = SgdState::new();
    let mut log = String::new();
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    for it in 0..cfg.max_iter {
        let idx = batch_indices(train.len(), cfg.batch_size, it, cfg.seed);
        let (image, labels) = make_batch(train, &idx, it, cfg)?;
        let lr = poly_lr(cfg.base_lr, it, cfg.max_iter, cfg.power);
        let breakdown =
            train_step(graph, params, &mut state, image, &labels, lr, &cfg.sgd, loss).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at iteration {} on samples {idx:?}", it + 1)),
                other => other,
            })?;
        let rec = IterRecord {
            iter: it + 1,
            lr,
            loss: breakdown,
        };
        if let Some(dir) = &cfg.out_dir {
            let _ = writeln!(log, "{}", rec.log_line());
            write_atomic(&dir.join("metrics.log"), log.as_bytes())?;
        }
        report.records.push(rec);
        let done = it + 1;
        let last = done == cfg.max_iter;
        if let Some(v) = val.filter(|v| !v.is_empty()) {
            if last || (cfg.val_every > 0 && done % cfg.val_every == 0) {
                report.val.push((done, validate(graph, params, v, loss)?));
            }
        }
        if let Some(dir) = &cfg.out_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && !last {
                let p = dir.join(format!("ckpt_{done:06}.mfw"));
                write_weights_file(&p, params)?;
                report.checkpoints.push(p);
            }
        }
    }
    if let Some(dir) = &cfg.out_dir {
        let p = dir.join("final.mfw");
        write_weights_file(&p, params)?;
        report.checkpoints.push(p);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..5).flat_map(|it| batch_indices(10, 2, it, 3)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn log_line_format() {
        let r = IterRecord {
            iter: 3,
            lr: 0.01,
            loss: LossBreakdown {
                total: 1.5,
                bce: 0.25,
                ce: 1.0,
                reg: 0.0,
                fused_ce: 0.25,
                per_scale: vec![],
            },
        };
        assert_eq!(r.log_line(), "3 0.010000 1.500000 0.250000 1.000000 0.000000");
    }
}
