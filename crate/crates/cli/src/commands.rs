use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use abm_core::checkpoint::{checkpoint_of, restore, Progress, Restored};
use abm_core::config::parse_pairs;
use abm_core::data::dataset::{load_dataset, split};
use abm_core::data::{gen_synthetic, load_dir, synthetic_vocabulary, write_synthetic, Bitmap, DatasetPaths, SynthConfig};
use abm_core::data::{Sample, Vocabulary};
use abm_core::decoder::Direction;
use abm_core::metrics::EvalReport;
use abm_core::model::gradient_check_case;
use abm_core::tensor::gradcheck::GradCheckOptions;
use abm_core::tensor::tape::fault::sabotage_tanh_derivative;
use abm_core::trainer::{fit, predict_all, EpochSummary, FitOptions};
use abm_core::{Checkpoint, ObjectiveSettings, Tape, TrainConfig, Variant};

use crate::args::*;
use crate::error::{io_err, CliError};

type Out<'a> = &'a mut dyn Write;

fn emit(out: Out<'_>, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| io_err(Path::new("<stdout>"), e))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn gen_data(a: &GenDataArgs, out: Out<'_>) -> Result<(), CliError> {
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let config = SynthConfig {
        min_len: a.min_len,
        max_len: a.max_len,
        max_depth: a.max_depth,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let samples = gen_synthetic(&config, a.count, a.seed)?;
    write_synthetic(&a.out, &samples, &synthetic_vocabulary())?;
    emit(out, &format!("wrote {} samples to {}\n", samples.len(), a.out.display()))
}

fn parse_list<T: std::str::FromStr>(flag: &str, text: &str) -> Result<Vec<T>, CliError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{flag}: cannot parse {t:?}")))
        })
        .collect()
}

/// Base configuration: defaults, then the file, then `--set`, then the
/// named scalar flags.
fn base_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut c = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        c.apply_text(&text)?;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {kv:?}")))?;
        c.set(k.trim(), v)?;
    }
    if let Some(v) = &a.variant {
        c.variant = v.parse().map_err(|e: abm_core::Error| CliError::Usage(e.to_string()))?;
    }
    if let Some(t) = a.temperature {
        c.temperature = t;
    }
    if let Some(e) = a.epochs {
        c.epochs = e;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    Ok(c)
}

/// Expands the comma lists into one configuration per setting: every λ
/// crossed with every kernel pair.
pub fn sweep_configs(a: &TrainArgs) -> Result<Vec<TrainConfig>, CliError> {
    let base = base_config(a)?;
    let lambdas = match &a.lambda {
        Some(l) => parse_list::<f64>("--lambda", l)?,
        None => vec![base.lambda],
    };
    let small = match &a.ks {
        Some(k) => parse_list::<usize>("--ks", k)?,
        None => vec![base.attention.small_kernel],
    };
    let large = match &a.kl_kernel {
        Some(k) => parse_list::<usize>("--kl-kernel", k)?,
        None => vec![base.attention.large_kernel.unwrap_or(0)],
    };
    let pairs: Vec<(usize, usize)> = match (small.len(), large.len()) {
        (n, m) if n == m => small.iter().copied().zip(large.iter().copied()).collect(),
        (1, _) => large.iter().map(|&l| (small[0], l)).collect(),
        (_, 1) => small.iter().map(|&s| (s, large[0])).collect(),
        (n, m) => {
            return Err(CliError::Usage(format!(
                "--ks has {n} entries and --kl-kernel {m}; give equal counts or a single value"
            )))
        }
    };
    let mut out = Vec::new();
    for &lambda in &lambdas {
        for &(ks, kl) in &pairs {
            let mut c = base.clone();
            c.lambda = lambda;
            c.attention.small_kernel = ks;
            c.attention.large_kernel = (kl > 0).then_some(kl);
            c.validate()?;
            out.push(c);
        }
    }
    Ok(out)
}

pub const RESULTS_HEADER: &str = "run,variant,lambda,ks,kl,epochs_run,best_epoch,best_val_wer,best_val_exprate,stop";

pub fn train(a: &TrainArgs, out: Out<'_>) -> Result<(), CliError> {
    let configs = sweep_configs(a)?;
    let (vocab, samples) = load_dir(&a.data)?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!("{} holds no samples", a.data.display())));
    }
    create_dir(&a.out)?;
    let sweep = configs.len() > 1;
    let mut results = String::from(RESULTS_HEADER);
    results.push('\n');
    emit(out, &format!("{RESULTS_HEADER}\n"))?;
    for (i, config) in configs.iter().enumerate() {
        let run = if sweep { format!("run{i:02}") } else { "run".to_string() };
        let dir = if sweep { a.out.join(&run) } else { a.out.clone() };
        create_dir(&dir)?;
        let echo: String = config.pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        write_file(&dir.join("config.txt"), &echo)?;
        if !a.quiet {
            eprint!("{}", echo.lines().map(|l| format!("# {l}\n")).collect::<String>());
        }
        let (train_set, val_set) = match &a.val_data {
            Some(p) => {
                let paths = DatasetPaths::new(p);
                (samples.clone(), load_dataset(&paths.images, &paths.labels, &vocab)?)
            }
            None if config.val_fraction > 0.0 => split(&samples, config.val_fraction, config.seed),
            None => (samples.clone(), Vec::new()),
        };
        let quiet = a.quiet;
        let mut progress = |s: &EpochSummary| {
            if !quiet {
                eprintln!(
                    "[{run}] epoch {:>4} lr {:.4} loss {:.4} val_wer {:.2} val_exprate {:.2}{} ({:.1}s)",
                    s.epoch,
                    s.lr,
                    s.mean_loss,
                    s.val_wer,
                    s.val_exprate,
                    if s.improved { " *" } else { "" },
                    s.seconds
                );
            }
        };
        let result = fit::<f32>(
            config,
            &vocab,
            &train_set,
            &val_set,
            FitOptions {
                checkpoint: Some(dir.join("best.abmc")),
                log: Some(dir.join("train_log.csv")),
                on_epoch: Some(&mut progress),
            },
        )?;
        let last_epoch = result.epochs.last().map_or(0, |e| e.epoch);
        checkpoint_of(
            &result.last,
            config,
            &vocab,
            Progress {
                epoch: last_epoch,
                best_wer: result.best_wer,
            },
            false,
        )
        .save(&dir.join("last.abmc"))?;
        checkpoint_of(
            &result.best,
            config,
            &vocab,
            Progress {
                epoch: result.best_epoch,
                best_wer: result.best_wer,
            },
            true,
        )
        .save(&dir.join("inference.abmc"))?;
        let best_exprate = result
            .epochs
            .iter()
            .find(|e| e.epoch == result.best_epoch)
            .map_or(0.0, |e| e.val_exprate);
        let row = format!(
            "{run},{},{},{},{},{},{},{:.4},{:.2},{:?}\n",
            config.variant,
            config.lambda,
            config.attention.small_kernel,
            config.attention.large_kernel.unwrap_or(0),
            result.epochs.len(),
            result.best_epoch,
            result.best_wer,
            best_exprate,
            result.stop
        );
        results.push_str(&row);
        emit(out, &row)?;
    }
    write_file(&a.out.join("results.csv"), &results)
}

fn load_model(path: &Path) -> Result<Restored<f32>, CliError> {
    let ck = Checkpoint::load(path)?;
    Ok(restore::<f32>(&ck, false)?)
}

fn load_labelled(data: &Path, vocab: &Vocabulary) -> Result<Vec<Sample>, CliError> {
    let paths = DatasetPaths::new(data);
    Ok(load_dataset(&paths.images, &paths.labels, vocab)?)
}

fn detok(vocab: &Vocabulary, ids: &[u32]) -> Result<String, CliError> {
    Ok(vocab.detokenize(ids)?)
}

pub fn eval(a: &EvalArgs, out: Out<'_>) -> Result<(), CliError> {
    let r = load_model(&a.checkpoint)?;
    if let Some(b) = &a.branch {
        r.model.branch(b)?;
    }
    let samples = load_labelled(&a.data, &r.vocab)?;
    let max_len = a.max_len.unwrap_or(r.config.max_decode_len);
    let preds = predict_all(&r.model, &samples, a.branch.as_deref(), a.beam, max_len)?;
    let refs: Vec<Vec<u32>> = samples.iter().map(|s| s.target.clone()).collect();
    let report = EvalReport::compute(&preds, &refs)?;
    let branch = a.branch.clone().unwrap_or_else(|| r.model.primary().name.clone());
    emit(out, &format!("branch {branch}\n"))?;
    emit(out, &report.to_table())?;
    if let Some(p) = &a.csv {
        write_file(p, &report.to_csv())?;
    }
    if let Some(p) = &a.predictions {
        let mut text = String::new();
        for (s, pred) in samples.iter().zip(&preds) {
            let _ = writeln!(text, "{}\t{}", s.id, detok(&r.vocab, pred)?);
        }
        write_file(p, &text)?;
    }
    Ok(())
}

pub fn infer(a: &InferArgs, out: Out<'_>) -> Result<(), CliError> {
    let r = load_model(&a.checkpoint)?;
    let image = Bitmap::load(&a.image)?;
    let max_len = a.max_len.unwrap_or(r.config.max_decode_len);
    let d = r.model.recognize(&image, a.branch.as_deref(), a.beam, max_len)?;
    emit(out, &format!("{}\n", detok(&r.vocab, &d.tokens)?))
}

fn marker_or_token(vocab: &Vocabulary, id: u32) -> String {
    vocab.token(id).map_or_else(|| format!("#{id}"), str::to_string)
}

pub fn dump_attention(a: &DumpAttentionArgs, out: Out<'_>) -> Result<(), CliError> {
    let r = load_model(&a.checkpoint)?;
    let image = Bitmap::load(&a.image)?;
    let max_len = a.max_len.unwrap_or(r.config.max_decode_len);
    let d = r.model.recognize(&image, a.branch.as_deref(), None, max_len)?;
    let fmap = r.model.encode(&mut Tape::inference(), &image, None)?;
    let (h, w) = (fmap.height, fmap.width);
    create_dir(&a.out)?;
    for (step, (alpha, &token)) in d.alphas.iter().zip(&d.emitted).enumerate() {
        let mut text = marker_or_token(&r.vocab, token);
        text.push('\n');
        for row in alpha.chunks(w) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.8}")).collect();
            text.push_str(&line.join(" "));
            text.push('\n');
        }
        write_file(&a.out.join(format!("step_{step:03}.txt")), &text)?;
        if a.pgm {
            let peak = alpha.iter().cloned().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
            let mut heat = Bitmap::new(h, w);
            for (i, v) in alpha.iter().enumerate() {
                heat.set(i / w, i % w, (v / peak) as f32);
            }
            heat.save(&a.out.join(format!("step_{step:03}.pgm")))?;
        }
    }
    emit(
        out,
        &format!(
            "{} steps, grid {h}x{w}, decoded: {}\n",
            d.alphas.len(),
            detok(&r.vocab, &d.tokens)?
        ),
    )
}

pub fn dump_features(a: &DumpFeaturesArgs, out: Out<'_>) -> Result<(), CliError> {
    let r = load_model(&a.checkpoint)?;
    let branch = match &a.branch {
        Some(b) => r.model.branch(b)?,
        None => r.model.primary(),
    };
    let samples = load_labelled(&a.data, &r.vocab)?;
    let dim = r.model.config.decoder.attn_dim / 2;
    let mut text = String::from("id,step,gold");
    for i in 0..dim {
        let _ = write!(text, ",f{i}");
    }
    text.push('\n');
    let mut rows = 0;
    for s in &samples {
        let mut tape = Tape::inference();
        let fmap = r.model.encode(&mut tape, &s.image, None)?;
        let o = branch.decode_teacher_forced(&mut tape, &r.model.store, &fmap, &s.target)?;
        let n = s.target.len();
        for (step, f) in o.features.iter().take(n).enumerate() {
            let gold = match branch.direction {
                Direction::L2R => s.target[step],
                Direction::R2L => s.target[n - 1 - step],
            };
            let _ = write!(text, "{},{step},{}", s.id, marker_or_token(&r.vocab, gold));
            for v in tape.value(*f).data() {
                let _ = write!(text, ",{v}");
            }
            text.push('\n');
            rows += 1;
        }
    }
    write_file(&a.out, &text)?;
    emit(out, &format!("{rows} rows of {dim} features from branch {}\n", branch.name))
}

pub fn gradcheck(a: &GradcheckArgs, out: Out<'_>) -> Result<(), CliError> {
    let mut variant = Variant::Abm;
    let mut objective = ObjectiveSettings::default();
    let mut seed = 0;
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut c = TrainConfig::default();
        for (k, v) in parse_pairs(&text)? {
            match k.as_str() {
                "variant" | "lambda" | "temperature" | "seed" => c.set(&k, &v)?,
                _ => return Err(CliError::Usage(format!("key {k:?} does not apply to gradcheck; the tiny model is fixed"))),
            }
        }
        variant = c.variant;
        objective.lambda = c.lambda;
        objective.temperature = c.temperature;
        seed = c.seed;
    }
    if let Some(s) = a.seed {
        seed = s;
    }
    let (model, image, target) = gradient_check_case(variant, seed)?;
    let mut options = GradCheckOptions {
        refine_above: Some(a.tolerance),
        ..Default::default()
    };
    if a.full {
        options.full_check_limit = usize::MAX;
    }
    let started = std::time::Instant::now();
    sabotage_tanh_derivative(a.sabotage_tanh);
    let report = model.gradient_check(&image, &target, &objective, options);
    sabotage_tanh_derivative(false);
    let report = report?;
    let width = report.entries.iter().map(|e| e.name.len()).max().unwrap_or(0);
    let mut text = format!(
        "gradcheck variant={variant} seed={seed} lambda={} temperature={} tolerance={:e}\n",
        objective.lambda, objective.temperature, a.tolerance
    );
    for e in &report.entries {
        let _ = writeln!(
            text,
            "{:<width$}  coords {:>4}  refined {:>3}  max_rel_error {:.3e}  {}",
            e.name,
            e.coords_checked,
            e.refined,
            e.max_rel_error,
            if e.max_rel_error < a.tolerance { "PASS" } else { "FAIL" }
        );
    }
    let failures = report.failures(a.tolerance).len();
    let _ = writeln!(
        text,
        "{} tensors, {} failed, max_rel_error {:.3e}, {:.1}s",
        report.entries.len(),
        failures,
        report.max_rel_error(),
        started.elapsed().as_secs_f64()
    );
    emit(out, &text)?;
    if failures > 0 {
        return Err(CliError::GradCheck(format!("{failures} tensors exceed {:e}", a.tolerance)));
    }
    Ok(())
}
