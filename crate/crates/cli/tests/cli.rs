use std::path::Path;
use std::process::{Command, Output};

use mfaranet::io::RunConfig;

fn mfaranet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfaranet"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value<'a>(text: &'a str, line_prefix: &str, key: &str) -> &'a str {
    let line = text.lines().find(|l| l.starts_with(line_prefix)).unwrap();
    let mut it = line.split_whitespace();
    it.find(|w| *w == key).unwrap();
    it.next().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["--bogus", "analyze"][..],
        &["infer", "--image", "x.ppm"],
        &["prune-infer", "--scales", "5", "--image", "x.ppm"],
        &["analyze", "--input", "3x10"],
        &["--threads", "0", "analyze"],
    ] {
        assert_eq!(mfaranet(dir.path(), args).status.code(), Some(1), "{args:?}");
    }
    std::fs::write(dir.path().join("bad.cfg"), "dch = many\n").unwrap();
    assert_eq!(
        mfaranet(dir.path(), &["--config", "bad.cfg", "analyze"]).status.code(),
        Some(1)
    );
    assert_eq!(mfaranet(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let w = mfaranet(p, &["train", "--out", "run", "--iters", "0"]);
    assert!(w.status.success(), "{}", String::from_utf8_lossy(&w.stderr));
    let o = mfaranet(p, &["--weights", "run/final.mfw", "infer", "--image", "absent.ppm"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.ppm"));
    std::fs::write(p.join("junk.mfw"), b"not a weight file").unwrap();
    assert_eq!(
        mfaranet(p, &["--weights", "junk.mfw", "fold-bn", "--out", "f.mfw"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        mfaranet(p, &["eval", "--weights", "run/final.mfw", "--data", "nowhere"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn analyze_reports_standard_costs() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfaranet(
        dir.path(),
        &[
            "analyze",
            "--model",
            "standard",
            "--classes",
            "19",
            "--compare-fpn",
            "--compare-sa",
        ],
    );
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(value(&text, "mfaranet", "params"), "13219990");
    assert_eq!(value(&text, "backbone", "params"), "11176512");
    let ours: u64 = value(&text, "mfaranet", "macs").parse().unwrap();
    let fpn: u64 = value(&text, "fpn", "macs").parse().unwrap();
    assert!(ours < fpn);
    assert_eq!(value(&text, "offset_macs formula", "ratio"), "7/16");
    assert_eq!(value(&text, "offset_macs counted", "ratio"), "7/16");
    let two = stdout(&mfaranet(
        dir.path(),
        &["analyze", "--model", "standard", "--classes", "19", "--two-x"],
    ));
    let flops: u64 = value(&two, "mfaranet", "flops").parse().unwrap();
    assert_eq!(flops, 2 * ours);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfaranet(dir.path(), &["gradcheck", "--shapes", "2", "--e2e"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().count() > 10);
    assert!(text.lines().all(|l| l.ends_with("PASS")), "{text}");
}

#[test]
fn pipeline_writes_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(
        p.join("run.cfg"),
        "classes = 4\nbatch_size = 2\nimage_size = 64\ncrop = 64\n",
    )
    .unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "run.cfg"];
        all.extend_from_slice(args);
        let o = mfaranet(p, &all);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    run(&["gen-toy", "--out", "data", "--count", "3"]);
    assert!(p.join("data/manifest.txt").exists());
    let log = run(&["train", "--data", "data", "--out", "run", "--iters", "2"]);
    assert!(log.contains("iterations 2"));
    assert_eq!(
        std::fs::read_to_string(p.join("run/metrics.log"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    let saved = RunConfig::from_text(&std::fs::read_to_string(p.join("run/config.txt")).unwrap()).unwrap();
    assert_eq!(saved.model.classes, 4);

    run(&[
        "--weights",
        "run/final.mfw",
        "prune-infer",
        "--scales",
        "2",
        "--image",
        "data/images/00000.ppm",
        "--out",
        "q.pgm",
    ]);
    let pgm = std::fs::read(p.join("q.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n255\n"));
    assert!(pgm[pgm.len() - 64 * 64..].iter().all(|&v| v < 4));
    assert!(std::fs::read(p.join("q.ppm")).unwrap().starts_with(b"P6\n64 64\n255\n"));

    run(&[
        "--weights",
        "run/final.mfw",
        "infer",
        "--image",
        "data/images/00000.ppm",
        "--out",
        "full.pgm",
        "--color",
        "c.ppm",
    ]);
    assert!(p.join("c.ppm").exists());
    let eval = run(&[
        "--weights",
        "run/final.mfw",
        "eval",
        "--data",
        "data",
        "--scales",
        "1,2",
    ]);
    assert!(eval.starts_with("images 3\nmiou "));
    assert_eq!(eval.lines().filter(|l| l.starts_with("class ")).count(), 4);

    let fold = run(&["--weights", "run/final.mfw", "fold-bn", "--out", "folded.mfw"]);
    let diff: f64 = value(&fold, "max_abs_diff", "max_abs_diff").parse().unwrap();
    assert!(diff <= 1e-3);
    let bench = run(&[
        "bench",
        "--repeats",
        "2",
        "--warmup",
        "0",
        "--scales",
        "3",
        "--input",
        "3x64x64",
    ]);
    assert!(bench.lines().any(|l| l.starts_with("speedup")));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let toy = RunConfig::from_text(&std::fs::read_to_string(root.join("toy.cfg")).unwrap()).unwrap();
    assert_eq!(toy.to_text(), RunConfig::preset("toy", 6).unwrap().to_text());
    let std_cfg = RunConfig::from_text(&std::fs::read_to_string(root.join("standard.cfg")).unwrap()).unwrap();
    assert_eq!(std_cfg.model.classes, 19);
    assert_eq!(std_cfg.model.dch(), 128);
}
