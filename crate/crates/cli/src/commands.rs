use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use mfaranet::asfm::prune_graph;
use mfaranet::autodiff::suite::{end_to_end_check, run_op_suite};
use mfaranet::eval::{count_flops, fold_bn, time_forward, time_pair, CostReport, FlopsConvention};
use mfaranet::graph::{run_graph, ModelGraph, NodeOp, ParamSet, RunOptions};
use mfaranet::io::{
    colorize, gen_toy, read_dataset, read_image, read_weights_file, to_dataset, write_atomic, write_dataset,
    write_image, write_labels, write_weights_file, RunConfig,
};
use mfaranet::model::{build_fpn_model, build_mfaranet, check_input, inference_graph, predict, MfaranetConfig};
use mfaranet::ram::{offset_flops, AlignMode};
use mfaranet::supervision::{evaluate, train_loop, Dataset};
use mfaranet::{Dims, Error, Tensor};

use crate::{Command, Global};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numeric(String),
    Engine(Error),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 3,
            CliError::Engine(e) => match e {
                Error::Config(_) | Error::Unsupported(_) => 1,
                Error::NonFinite(_) => 3,
                _ => 2,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => f.write_str(m),
            CliError::Engine(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Engine(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Engine(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Args)]
pub struct GenToyArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples; defaults to the configured train count.
    #[arg(long)]
    count: Option<usize>,
    /// Image side; defaults to the configured image size.
    #[arg(long)]
    size: Option<usize>,
    /// Classes including background; defaults to the configured classes.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset directory; a seeded toy set is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation dataset directory.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Receives metrics.log, checkpoints and final.mfw.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured iteration count.
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Input PPM image.
    #[arg(long)]
    image: PathBuf,
    /// Prediction PGM.
    #[arg(long, default_value = "pred.pgm")]
    out: PathBuf,
    /// Colorized PPM; defaults to the prediction path with a `.ppm` extension.
    #[arg(long)]
    color: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory with images/ and labels/.
    #[arg(long)]
    data: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate only these scales.
    #[arg(long, value_parser = parse_scales)]
    scales: Option<Scales>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Input dims as CxHxW or NxCxHxW.
    #[arg(long, default_value = "3x1024x1024", value_parser = parse_dims)]
    input: Dims,
    /// Model preset, overriding the configuration.
    #[arg(long)]
    model: Option<String>,
    /// Classes, overriding the configuration.
    #[arg(long)]
    classes: Option<usize>,
    /// Count one MAC as two FLOPs.
    #[arg(long)]
    two_x: bool,
    /// Print the per-node `name params macs` table.
    #[arg(long)]
    table: bool,
    /// Compare against the FPN-like baseline.
    #[arg(long)]
    compare_fpn: bool,
    /// Compare against straightforward alignment.
    #[arg(long)]
    compare_sa: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random shapes per op.
    #[arg(long, default_value_t = 10)]
    shapes: usize,
    /// Per-op relative error tolerance.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Also check the whole tiny model.
    #[arg(long)]
    e2e: bool,
    /// Whole-model tolerance.
    #[arg(long, default_value_t = 1e-4)]
    e2e_tol: f64,
}

#[derive(Debug, Args)]
pub struct PruneInferArgs {
    /// Kept scales, e.g. `2` or `1,2,3,4`.
    #[arg(long, value_parser = parse_scales)]
    scales: Scales,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = "pred.pgm")]
    out: PathBuf,
    #[arg(long)]
    color: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FoldBnArgs {
    /// Folded weight file.
    #[arg(long)]
    out: PathBuf,
    /// Dims of the random probe input.
    #[arg(long, default_value = "3x96x96", value_parser = parse_dims)]
    input: Dims,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "3x96x96", value_parser = parse_dims)]
    input: Dims,
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Compare against a pruned graph keeping these scales.
    #[arg(long, value_parser = parse_scales)]
    scales: Option<Scales>,
    /// Compare against the batch-norm-folded graph.
    #[arg(long)]
    fold: bool,
}

fn parse_dims(s: &str) -> std::result::Result<Dims, String> {
    let v: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse().map_err(|_| format!("bad dimension `{p}` in `{s}`")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [c, h, w] => Ok(Dims::new(1, c, h, w)),
        [n, c, h, w] => Ok(Dims::new(n, c, h, w)),
        _ => Err(format!("expected CxHxW or NxCxHxW, got `{s}`")),
    }
}

/// Comma-separated scale list for `--scales`.
#[derive(Debug, Clone)]
pub struct Scales(Vec<usize>);

fn parse_scales(s: &str) -> std::result::Result<Scales, String> {
    s.split(',')
        .map(|p| match p.trim().parse() {
            Ok(k @ 1..=4) => Ok(k),
            _ => Err(format!("scales are integers in 1..=4, got `{p}`")),
        })
        .collect::<std::result::Result<_, _>>()
        .map(Scales)
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::from_text(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.trainer.seed = s;
    }
    Ok(cfg)
}

fn seed(g: &Global, cfg: &RunConfig) -> u64 {
    g.seed.unwrap_or(cfg.trainer.seed)
}

fn model_config(cfg: &RunConfig, preset: Option<&str>, classes: Option<usize>) -> Result<MfaranetConfig> {
    let classes = classes.unwrap_or(cfg.model.classes);
    Ok(match preset {
        Some(p) => RunConfig::preset(p, classes)?.model,
        None => MfaranetConfig {
            classes,
            ..cfg.model.clone()
        },
    })
}

/// Parameters for `graph`: from `--weights`, or freshly initialized.
fn params_for(g: &Global, graph: &ModelGraph, seed: u64, required: bool) -> Result<ParamSet<f32>> {
    match &g.weights {
        Some(p) => Ok(read_weights_file(p, graph)?.params),
        None if required => Err(CliError::Usage("this command needs --weights FILE".into())),
        None => Ok(ParamSet::init(graph, seed)),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())).into())
}

fn read_ppm(path: &Path) -> Result<mfaranet::io::RgbImage> {
    let bytes = read_file(path)?;
    read_image(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())).into())
}

fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    Ok(to_dataset(&read_dataset(dir)?, &cfg.norm))
}

pub fn run(g: &Global, cmd: Command) -> Result<()> {
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(g)?;
    match cmd {
        Command::GenToy(a) => gen_toy_cmd(g, &cfg, a),
        Command::Train(a) => train_cmd(&cfg, a),
        Command::Infer(a) => infer_cmd(g, &cfg, &a.image, &a.out, a.color.as_deref(), None),
        Command::Eval(a) => eval_cmd(g, &cfg, a),
        Command::Analyze(a) => analyze_cmd(&cfg, a),
        Command::Gradcheck(a) => gradcheck_cmd(g, &cfg, a),
        Command::PruneInfer(a) => infer_cmd(g, &cfg, &a.image, &a.out, a.color.as_deref(), Some(&a.scales.0)),
        Command::FoldBn(a) => fold_bn_cmd(g, &cfg, a),
        Command::Bench(a) => bench_cmd(g, &cfg, a),
    }
}

fn gen_toy_cmd(g: &Global, cfg: &RunConfig, a: GenToyArgs) -> Result<()> {
    let count = a.count.unwrap_or(cfg.train_count);
    let size = a.size.unwrap_or(cfg.image_size);
    let classes = a.classes.unwrap_or(cfg.model.classes);
    let ds = gen_toy(seed(g, cfg), count, size, classes)?;
    write_dataset(&ds, &a.out)?;
    println!("wrote {count} samples of {size}x{size} to {}", a.out.display());
    println!(
        "skipped {} shapes after {} placement attempts",
        ds.skipped(),
        mfaranet::io::toy::PLACEMENT_ATTEMPTS
    );
    Ok(())
}

fn train_cmd(cfg: &RunConfig, a: TrainArgs) -> Result<()> {
    let mut tc = cfg.trainer.clone();
    if let Some(n) = a.iters {
        tc.max_iter = n;
    }
    tc.out_dir = Some(a.out.clone());
    std::fs::create_dir_all(&a.out)?;
    let (train, val) = match &a.data {
        Some(dir) => (
            load_dataset(dir, cfg)?,
            a.val.as_deref().map(|v| load_dataset(v, cfg)).transpose()?,
        ),
        None => {
            let ds = gen_toy(
                tc.seed,
                cfg.train_count + cfg.val_count,
                cfg.image_size,
                cfg.model.classes,
            )?;
            let all = ds.to_dataset(&cfg.norm);
            let split = |r: std::ops::Range<usize>| Dataset {
                images: all.images[r.clone()].to_vec(),
                labels: all.labels[r].to_vec(),
            };
            let n = cfg.train_count;
            let val = (cfg.val_count > 0).then(|| split(n..n + cfg.val_count));
            (split(0..n), val)
        }
    };
    let graph = build_mfaranet(&cfg.model)?;
    let mut params = ParamSet::init(&graph, tc.seed);
    write_atomic(&a.out.join("config.txt"), cfg.to_text().as_bytes())?;
    let report = train_loop(&graph, &mut params, &train, val.as_ref(), &tc, &cfg.loss)?;
    if let Some(last) = report.records.last() {
        println!("iterations {} final loss {:.6}", last.iter, last.loss.total);
    }
    if let Some((first, last)) = report.smoothed_endpoints(20) {
        println!(
            "smoothed loss first {first:.6} last {last:.6} drop {:.2}%",
            100.0 * (1.0 - last / first)
        );
    }
    for (iter, miou) in &report.val {
        println!("val iter {iter} miou {miou:.6}");
    }
    println!("weights {}", a.out.join("final.mfw").display());
    Ok(())
}

fn infer_cmd(
    g: &Global,
    cfg: &RunConfig,
    image: &Path,
    out: &Path,
    color: Option<&Path>,
    scales: Option<&[usize]>,
) -> Result<()> {
    let full = inference_graph(&build_mfaranet(&cfg.model)?)?;
    let graph = match scales {
        Some(k) => prune_graph(&full, k)?,
        None => full,
    };
    let params = params_for(g, &graph, seed(g, cfg), true)?;
    let x = cfg.norm.apply(&read_ppm(image)?);
    check_input(x.dims(), 3)?;
    let pred = predict(&graph, &params, &x)?;
    write_atomic(out, &write_labels(&pred))?;
    let color = color
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("ppm"));
    write_atomic(&color, &write_image(&colorize(&pred, cfg.model.classes)))?;
    println!("prediction {}", out.display());
    println!("colorized {}", color.display());
    Ok(())
}

fn eval_cmd(g: &Global, cfg: &RunConfig, a: EvalArgs) -> Result<()> {
    let full = inference_graph(&build_mfaranet(&cfg.model)?)?;
    let graph = match &a.scales {
        Some(k) => prune_graph(&full, &k.0)?,
        None => full,
    };
    let params = params_for(g, &graph, seed(g, cfg), true)?;
    let data = load_dataset(&a.data, cfg)?;
    let cm = evaluate(&graph, &params, &data, cfg.model.classes, cfg.loss.ignore_label)?;
    let rep = cm.miou()?;
    let mut text = format!("images {}\nmiou {:.6}\n", data.len(), rep.miou);
    for (k, iou) in rep.per_class.iter().enumerate() {
        match iou {
            Some(v) => writeln!(text, "class {k} iou {v:.6}"),
            None => writeln!(text, "class {k} absent"),
        }
        .expect("string write");
    }
    print!("{text}");
    if let Some(p) = &a.out {
        write_atomic(p, text.as_bytes())?;
    }
    Ok(())
}

fn cost(graph: &ModelGraph, input: Dims, conv: FlopsConvention) -> Result<CostReport> {
    Ok(count_flops(graph, &[("image", input)], conv)?)
}

fn summary(label: &str, r: &CostReport) -> String {
    format!(
        "{label} params {} macs {} flops {}",
        r.total_params(),
        r.total_macs(),
        r.total_flops()
    )
}

/// MACs of the offset-predicting convolutions, counted from the graph.
fn offset_conv_macs(graph: &ModelGraph, r: &CostReport, prefix: &str) -> u64 {
    let convs: std::collections::HashSet<&str> = graph
        .nodes()
        .iter()
        .filter(|n| matches!(n.op, NodeOp::Conv { .. }) && n.name.starts_with(prefix))
        .map(|n| n.name.as_str())
        .collect();
    r.macs_where(|n| convs.contains(n))
}

fn analyze_cmd(cfg: &RunConfig, a: AnalyzeArgs) -> Result<()> {
    check_input(a.input, 3)?;
    let conv = if a.two_x {
        FlopsConvention::TwoXMacs
    } else {
        FlopsConvention::Macs
    };
    let model = model_config(cfg, a.model.as_deref(), a.classes)?;
    let graph = inference_graph(&build_mfaranet(&model)?)?;
    let main = cost(&graph, a.input, conv)?;
    println!("input {}", a.input);
    if a.table {
        print!("{}", main.to_lines());
    }
    println!("{}", summary("mfaranet", &main));
    println!(
        "backbone params {}",
        main.params_where(|n| n.starts_with("stem.") || n.starts_with("stage"))
    );
    if a.compare_fpn {
        let fpn = cost(&build_fpn_model(&model)?, a.input, conv)?;
        println!("{}", summary("fpn", &fpn));
        println!(
            "macs_ratio mfaranet/fpn {:.4}",
            main.total_macs() as f64 / fpn.total_macs() as f64
        );
    }
    if a.compare_sa {
        let sa_model = MfaranetConfig {
            align: AlignMode::Straightforward,
            ..model.clone()
        };
        let sa_graph = inference_graph(&build_mfaranet(&sa_model)?)?;
        let sa = cost(&sa_graph, a.input, conv)?;
        println!("{}", summary("straightforward", &sa));
        let f = offset_flops(model.dch() as u64, (a.input.h / 16) as u64, (a.input.w / 16) as u64);
        println!(
            "offset_macs formula ram {} sa {} ratio {}",
            f.ram_macs, f.sa_macs, f.ratio
        );
        let ram_c = offset_conv_macs(&graph, &main, "ram.offset.");
        let sa_c = offset_conv_macs(&sa_graph, &sa, "ram.sa.offset.");
        let counted = num_rational::Ratio::new(ram_c, sa_c);
        println!("offset_macs counted ram {ram_c} sa {sa_c} ratio {counted}");
    }
    Ok(())
}

fn gradcheck_cmd(g: &Global, cfg: &RunConfig, a: GradcheckArgs) -> Result<()> {
    let s = seed(g, cfg);
    let suite = run_op_suite(a.shapes, s)?;
    let mut failed = Vec::new();
    for e in &suite {
        let ok = e.passes(a.tol);
        println!(
            "op {} cases {} max_rel_err {:.3e} {}",
            e.name,
            e.cases,
            e.max_rel_err,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(e.name.to_string());
        }
    }
    if a.e2e {
        let r = end_to_end_check(s, 60, 1e-6)?;
        let ok = r.passes(a.e2e_tol);
        println!(
            "model coords {} max_rel_err {:.3e} {}",
            r.checked,
            r.max_rel_err,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push("model".into());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

fn fold_bn_cmd(g: &Global, cfg: &RunConfig, a: FoldBnArgs) -> Result<()> {
    let graph = inference_graph(&build_mfaranet(&cfg.model)?)?;
    let params = params_for(g, &graph, seed(g, cfg), true)?;
    let (folded, fparams) = fold_bn(&graph, &params)?;
    let count = |gr: &ModelGraph| {
        gr.nodes()
            .iter()
            .filter(|n| matches!(n.op, NodeOp::BatchNorm { .. }))
            .count()
    };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed(g, cfg));
    let x = Tensor::from_fn(a.input, |_| rand::Rng::gen_range(&mut rng, -1.0f32..1.0));
    let before = run_graph(&graph, &params, &[("image", x.clone())], RunOptions::default())?;
    let after = run_graph(&folded, &fparams, &[("image", x)], RunOptions::default())?;
    let diff = before
        .outputs
        .iter()
        .map(|(k, v)| after.output(k).map(|w| v.max_abs_diff(w)))
        .collect::<mfaranet::Result<Vec<f32>>>()?
        .into_iter()
        .fold(0.0f32, f32::max);
    write_weights_file(&a.out, &fparams)?;
    println!("folded {} batch norms", count(&graph) - count(&folded));
    println!("max_abs_diff {diff:.3e}");
    println!("weights {}", a.out.display());
    Ok(())
}

fn bench_cmd(g: &Global, cfg: &RunConfig, a: BenchArgs) -> Result<()> {
    check_input(a.input, 3)?;
    let model = model_config(cfg, a.model.as_deref(), None)?;
    let graph = inference_graph(&build_mfaranet(&model)?)?;
    let params = params_for(g, &graph, seed(g, cfg), false)?;
    let mut other: Option<(String, ModelGraph, ParamSet<f32>)> = None;
    if let Some(Scales(k)) = &a.scales {
        let pruned = prune_graph(&graph, k)?;
        let p = params.restricted_to(&pruned)?;
        other = Some((format!("pruned {k:?}"), pruned, p));
    } else if a.fold {
        let (fg, fp) = fold_bn(&graph, &params)?;
        other = Some(("folded".into(), fg, fp));
    }
    match other {
        None => {
            let t = time_forward(&graph, &params, a.input, a.warmup, a.repeats)?;
            println!("full {t}");
        }
        Some((label, og, op)) => {
            let (ta, tb) = time_pair((&graph, &params), (&og, &op), a.input, a.warmup, a.repeats)?;
            println!("full {ta}");
            println!("{label} {tb}");
            println!("speedup {:.2}%", 100.0 * (1.0 - tb.median_ms / ta.median_ms));
        }
    }
    Ok(())
}
