use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{run_graph, ModelGraph, ParamSet, RunOptions};
use crate::tensor::{Dims, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub median_ms: f64,
    pub mean_ms: f64,
    pub stddev_ms: f64,
    /// Images per second at the median time.
    pub fps: f64,
    pub repeats: usize,
    pub threads: usize,
    pub input: Dims,
}

impl Timing {
    fn from_samples(mut ms: Vec<f64>, input: Dims) -> Timing {
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let var = ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mid = ms.len() / 2;
        let median = if ms.len() % 2 == 1 {
            ms[mid]
        } else {
            0.5 * (ms[mid - 1] + ms[mid])
        };
        Timing {
            median_ms: median,
            mean_ms: mean,
            stddev_ms: var.sqrt(),
            fps: input.n as f64 * 1000.0 / median,
            repeats: ms.len(),
            threads: rayon::current_num_threads(),
            input,
        }
    }
}

impl std::fmt::Display for Timing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "input {} threads {} repeats {}: median {:.3} ms, mean {:.3} ms, stddev {:.3} ms, {:.2} fps",
            self.input, self.threads, self.repeats, self.median_ms, self.mean_ms, self.stddev_ms, self.fps
        )
    }
}

fn random_image(dims: Dims, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

fn once(graph: &ModelGraph, params: &ParamSet<f32>, image: &Tensor<f32>) -> Result<f64> {
    let t = Instant::now();
    let r = run_graph(graph, params, &[("image", image.clone())], RunOptions::default())?;
    let ms = t.elapsed().as_secs_f64() * 1e3;
    std::hint::black_box(r);
    Ok(ms)
}

/// Median-of-repeats wall time of an inference forward after `warmup` runs.
pub fn time_forward(
    graph: &ModelGraph,
    params: &ParamSet<f32>,
    input: Dims,
    warmup: usize,
    repeats: usize,
) -> Result<Timing> {
    let image = random_image(input, 7);
    for _ in 0..warmup {
        once(graph, params, &image)?;
    }
    let ms = (0..repeats.max(1))
        .map(|_| once(graph, params, &image))
        .collect::<Result<Vec<_>>>()?;
    Ok(Timing::from_samples(ms, input))
}

/// Times two graphs with interleaved runs so drift affects both equally.
pub fn time_pair(
    a: (&ModelGraph, &ParamSet<f32>),
    b: (&ModelGraph, &ParamSet<f32>),
    input: Dims,
    warmup: usize,
    repeats: usize,
) -> Result<(Timing, Timing)> {
    let image = random_image(input, 7);
    for _ in 0..warmup {
        once(a.0, a.1, &image)?;
        once(b.0, b.1, &image)?;
    }
    let (mut ta, mut tb) = (Vec::new(), Vec::new());
    for i in 0..repeats.max(1) {
        if i % 2 == 0 {
            ta.push(once(a.0, a.1, &image)?);
            tb.push(once(b.0, b.1, &image)?);
        } else {
            tb.push(once(b.0, b.1, &image)?);
            ta.push(once(a.0, a.1, &image)?);
        }
    }
    Ok((Timing::from_samples(ta, input), Timing::from_samples(tb, input)))
}
