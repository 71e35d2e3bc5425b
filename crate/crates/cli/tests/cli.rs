//! Behaviour of the `abm` binary: file formats, exit codes and determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use abm_core::data::Bitmap;

const TINY: &str = "\
encoder.blocks=2
encoder.layers=1
encoder.growth=4
encoder.stem_channels=4
encoder.channels=8
encoder.downsample=4
decoder.hidden=8
decoder.attn_dim=12
attention.channels=2
attention.ks=3
attention.kl=5
batch_size=4
epochs=2
val_fraction=0
max_decode_len=10
";

fn abm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = abm(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Dataset plus a tiny trained model, shared by the read-only tests.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    ok(&["gen-data", "--out", s(&data), "--count", "6", "--seed", "2"]);
    ok(&["train", "--data", s(&data), "--out", s(&run), "--config", s(&cfg), "--quiet"]);
    Fixture { _dir: dir, data, run }
}

fn label_lines(data: &Path) -> Vec<(String, String)> {
    fs::read_to_string(data.join("labels.txt"))
        .unwrap()
        .lines()
        .map(|l| {
            let (a, b) = l.split_once('\t').unwrap();
            (a.to_string(), b.to_string())
        })
        .collect()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in walk(dir) {
        out.push((e.strip_prefix(dir).unwrap().display().to_string(), fs::read(&e).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files
}

#[test]
fn gen_data_is_deterministic_and_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["gen-data", "--out", s(out), "--count", "50", "--seed", "7", "--min-len", "3", "--max-len", "8"]);
    }
    assert_eq!(tree(&a), tree(&b));
    let labels = label_lines(&a);
    assert_eq!(labels.len(), 50);
    for (_, l) in &labels {
        let n = l.split(' ').count();
        assert!((3..=8).contains(&n), "{l}");
    }
    let vocab = fs::read_to_string(a.join("vocab.txt")).unwrap();
    assert_eq!(vocab.lines().take(3).collect::<Vec<_>>(), ["<sos>", "<eos>", "<pad>"]);

    let zero = abm(&["gen-data", "--out", s(&dir.path().join("c")), "--count", "0"]);
    assert_eq!(code(&zero), 2);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["gen-data", "--out", s(&data), "--count", "2"]);
    let out = s(&dir.path().join("o")).to_string();
    let bad = abm(&["train", "--data", s(&data), "--out", &out, "--variant", "bidirectional"]);
    assert_eq!(code(&bad), 2);
    let msg = String::from_utf8_lossy(&bad.stderr);
    for v in ["uni-l2r", "uni-r2l", "aum", "abm"] {
        assert!(msg.contains(v), "{msg}");
    }
    let unknown = abm(&["train", "--data", s(&data), "--out", &out, "--set", "warp=9"]);
    assert_eq!(code(&unknown), 2);
    assert_eq!(code(&abm(&["train", "--data", s(&data)])), 2);
    assert_eq!(code(&abm(&["frobnicate"])), 2);
    let mismatch = abm(&["train", "--data", s(&data), "--out", &out, "--ks", "3,5", "--kl-kernel", "7,9,11"]);
    assert_eq!(code(&mismatch), 2);
}

#[test]
fn training_writes_checkpoints_logs_and_one_result_row() {
    let f = fixture();
    for name in ["best.abmc", "last.abmc", "inference.abmc", "train_log.csv", "config.txt", "results.csv"] {
        assert!(f.run.join(name).is_file(), "{name} missing");
    }
    let log = fs::read_to_string(f.run.join("train_log.csv")).unwrap();
    assert!(log.lines().any(|l| l == "# encoder.blocks=2"));
    assert!(log.lines().any(|l| l == "# variant=abm"));
    let body: Vec<&str> = log.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body[0], "epoch,step,ce_l2r,ce_r2l,kl,total");
    // 6 samples in batches of 4 for 2 epochs.
    assert_eq!(body.len() - 1, 4);
    let results = fs::read_to_string(f.run.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 2);
    assert!(results.lines().nth(1).unwrap().starts_with("run,abm,0.5,3,5,2,"));
}

#[test]
fn eval_reports_ordered_rates_and_respects_branches() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("report.csv");
    let preds = dir.path().join("preds.tsv");
    let text = ok(&[
        "eval",
        "--checkpoint",
        s(&f.run.join("last.abmc")),
        "--data",
        s(&f.data),
        "--csv",
        s(&csv),
        "--predictions",
        s(&preds),
    ]);
    assert!(text.starts_with("branch l2r\n"));
    let value = |key: &str| -> f64 {
        let line = text.lines().find(|l| l.split_whitespace().next() == Some(key)).unwrap();
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    assert!(value("exprate") <= value("le1") && value("le1") <= value("le2"));
    for key in ["prefix2", "suffix2", "prefix5", "suffix5", "wer", "samples"] {
        value(key);
    }
    assert!(fs::read_to_string(&csv).unwrap().contains("exprate"));
    assert_eq!(fs::read_to_string(&preds).unwrap().lines().count(), 6);

    let r2l = ok(&["eval", "--checkpoint", s(&f.run.join("last.abmc")), "--data", s(&f.data), "--branch", "r2l"]);
    assert!(r2l.starts_with("branch r2l\n"));
    let slim = abm(&["eval", "--checkpoint", s(&f.run.join("inference.abmc")), "--data", s(&f.data), "--branch", "r2l"]);
    assert_eq!(code(&slim), 4, "{}", String::from_utf8_lossy(&slim.stderr));
}

#[test]
fn infer_handles_beams_blank_images_and_missing_files() {
    let f = fixture();
    let ck = f.run.join("last.abmc");
    let (id, _) = &label_lines(&f.data)[0];
    let image = f.data.join("images").join(format!("{id}.png"));
    let greedy = ok(&["infer", "--checkpoint", s(&ck), "--image", s(&image)]);
    let beam1 = ok(&["infer", "--checkpoint", s(&ck), "--image", s(&image), "--beam", "1"]);
    assert_eq!(greedy, beam1);
    assert_eq!(greedy.lines().count(), 1);
    ok(&["infer", "--checkpoint", s(&ck), "--image", s(&image), "--beam", "3"]);

    let dir = tempfile::tempdir().unwrap();
    let blank = dir.path().join("blank.png");
    Bitmap::new(40, 60).save(&blank).unwrap();
    let out = ok(&["infer", "--checkpoint", s(&ck), "--image", s(&blank)]);
    assert!(out.split_whitespace().count() <= 10);

    let missing = abm(&["infer", "--checkpoint", s(&ck), "--image", s(&dir.path().join("nope.png"))]);
    assert_eq!(code(&missing), 3);
    let garbage = dir.path().join("garbage.abmc");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&abm(&["infer", "--checkpoint", s(&garbage), "--image", s(&image)])), 4);
    let mut truncated = fs::read(&ck).unwrap();
    truncated.truncate(truncated.len() - 5);
    let cut = dir.path().join("cut.abmc");
    fs::write(&cut, truncated).unwrap();
    assert_eq!(code(&abm(&["infer", "--checkpoint", s(&cut), "--image", s(&image)])), 4);
}

#[test]
fn attention_dumps_are_distributions_on_the_feature_grid() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (id, _) = &label_lines(&f.data)[1];
    let image_path = f.data.join("images").join(format!("{id}.png"));
    let summary = ok(&[
        "dump-attention",
        "--checkpoint",
        s(&f.run.join("last.abmc")),
        "--image",
        s(&image_path),
        "--out",
        s(dir.path()),
        "--pgm",
    ]);
    let steps: usize = summary.split(' ').next().unwrap().parse().unwrap();
    let grid = summary.split("grid ").nth(1).unwrap().split(',').next().unwrap();
    let (h, w) = grid.split_once('x').unwrap();
    let (h, w): (usize, usize) = (h.parse().unwrap(), w.parse().unwrap());
    let image = Bitmap::load(&image_path).unwrap();
    assert_eq!((h, w), (image.height.div_ceil(4), image.width.div_ceil(4)));

    let decoded = summary.split("decoded: ").nth(1).unwrap().trim();
    let decoded_len = decoded.split_whitespace().count();
    let txt: Vec<PathBuf> = walk(dir.path()).into_iter().filter(|p| p.extension().unwrap() == "txt").collect();
    assert_eq!(txt.len(), steps);
    // One file per symbol plus the end-marker step, unless decoding hit the cap.
    assert!(steps == decoded_len + 1 || (steps == decoded_len && steps == 10), "{steps} vs {decoded_len}");
    for p in &txt {
        let text = fs::read_to_string(p).unwrap();
        let mut lines = text.lines();
        assert!(!lines.next().unwrap().is_empty());
        let rows: Vec<Vec<f64>> = lines.map(|l| l.split(' ').map(|v| v.parse().unwrap()).collect()).collect();
        assert_eq!(rows.len(), h);
        assert!(rows.iter().all(|r| r.len() == w));
        let total: f64 = rows.iter().flatten().sum();
        assert!((total - 1.0).abs() <= 1e-4, "{}: {total}", p.display());
        let pgm = Bitmap::load(&p.with_extension("pgm")).unwrap();
        assert_eq!((pgm.height, pgm.width), (h, w));
    }
}

#[test]
fn feature_dumps_have_one_row_per_target_symbol() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let dump = |name: &str, branch: &str| {
        let path = dir.path().join(name);
        ok(&[
            "dump-features",
            "--checkpoint",
            s(&f.run.join("last.abmc")),
            "--data",
            s(&f.data),
            "--out",
            s(&path),
            "--branch",
            branch,
        ]);
        fs::read_to_string(path).unwrap()
    };
    let a = dump("a.csv", "l2r");
    assert_eq!(a, dump("b.csv", "l2r"));
    let labels = label_lines(&f.data);
    let total: usize = labels.iter().map(|(_, l)| l.split(' ').count()).sum();
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines.len() - 1, total);
    // attn_dim 12 gives 6 maxout features after id, step and gold.
    assert!(lines.iter().all(|l| l.split(',').count() == 3 + 6));
    let first: Vec<&str> = labels[0].1.split(' ').collect();
    assert_eq!(lines[1].split(',').nth(2).unwrap(), first[0]);

    let r = dump("r.csv", "r2l");
    assert_eq!(r.lines().nth(1).unwrap().split(',').nth(2).unwrap(), *first.last().unwrap());
}

#[test]
fn sabotaged_tanh_derivative_fails_the_gradient_check() {
    let o = abm(&["gradcheck", "--sabotage-tanh", "--tolerance", "1e-4"]);
    assert_eq!(code(&o), 5);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l.ends_with("FAIL")));
}
