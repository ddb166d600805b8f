//! Subcommand implementations: baseline training, pruning runs, the
//! random-walk control, report rendering, and FLOP queries.

use std::fs;
use std::path::{Path, PathBuf};

use prunetree::engine::{self, EngineConfig, Method, RunResult};
use prunetree::engine::rundir::RunDir;
use prunetree::nn::dataset::Dataset;
use prunetree::nn::idx::load_idx_pair;
use prunetree::nn::synth::{synthetic_dataset, Split};
use prunetree::nn::{count_flops, init_model, load_checkpoint, save_checkpoint, train, NetworkSpec};
use prunetree::Error;

use crate::config::{DatasetConfig, RunConfig};
use crate::CliError;

pub struct Loaded {
    pub train: Dataset,
    pub heldout: Dataset,
    pub spec: NetworkSpec,
}

fn load_data(cfg: &RunConfig) -> Result<Loaded, CliError> {
    let (train, heldout, classes) = match &cfg.dataset {
        DatasetConfig::Synthetic {
            seed,
            classes,
            train_samples,
            heldout_samples,
            image_size,
        } => {
            let train = synthetic_dataset(*seed, *classes, *train_samples, *image_size, Split::Train)?;
            let heldout =
                synthetic_dataset(*seed, *classes, *heldout_samples, *image_size, Split::Heldout)?;
            (train, heldout, *classes)
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = load_idx_pair(train_images, train_labels)?;
            let heldout = load_idx_pair(test_images, test_labels)?;
            let classes = train.observed_classes().max(heldout.observed_classes());
            (train, heldout, classes)
        }
    };
    let (_, c, h, w) = train.images.shape();
    if c != cfg.arch.input_channels {
        return Err(Error::validation(format!(
            "dataset has {} channels but arch.input_channels is {}",
            c, cfg.arch.input_channels
        ))
        .into());
    }
    let spec = cfg.spec(h, w, classes)?;
    train.validate(classes)?;
    heldout.validate(classes)?;
    Ok(Loaded { train, heldout, spec })
}

fn resolve_out(cfg: &RunConfig, out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    out.or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: set out_dir in the config or pass --out".to_string()))
}

fn apply_seed(engine: &mut EngineConfig, seed: Option<u64>) {
    if let Some(seed) = seed {
        engine.seed = seed;
    }
}

pub fn cmd_train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    apply_seed(&mut cfg.engine, seed);
    let out = resolve_out(&cfg, out)?;
    let data = load_data(&cfg)?;

    let mut model = init_model(&data.spec, cfg.engine.seed)?;
    let report = train(&mut model, &data.train, &cfg.train)?;
    let train_acc = model.evaluate(&data.train)?;
    let heldout_acc = model.evaluate(&data.heldout)?;

    fs::create_dir_all(&out)?;
    let ckpt = out.join("baseline.prnet");
    save_checkpoint(&model, &ckpt)?;
    let summary = serde_json::json!({
        "epochs_run": report.epochs_run,
        "final_loss": report.final_loss,
        "train_accuracy": train_acc,
        "heldout_accuracy": heldout_acc,
        "flops_per_sample": count_flops(&data.spec),
        "params": data.spec.param_count(),
        "seed": cfg.engine.seed,
    });
    fs::write(out.join("baseline.json"), format!("{:#}\n", summary))?;

    println!("trained {} epochs, final loss {:.4}", report.epochs_run, report.final_loss.unwrap_or(f64::NAN));
    println!("train accuracy {:.4}", train_acc);
    println!("heldout accuracy {:.4}", heldout_acc);
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn run_engine(
    cfg: &RunConfig,
    data: &Loaded,
    model: &prunetree::nn::ModelState,
    engine_cfg: &EngineConfig,
    out: &Path,
) -> Result<RunResult, CliError> {
    let rundir = RunDir::create(out, cfg.keep_iterates)?;
    let tune = cfg.tune();
    let result = engine::run(model, &data.train, &data.heldout, engine_cfg, &tune, &mut |rec, m| {
        rundir.observe(rec, m)
    })?;
    rundir.finish(&result)?;
    Ok(result)
}

fn fmt_delta(pp: f64) -> String {
    if pp >= 0.0 {
        format!("(+) {:.2}", pp)
    } else {
        format!("(-) {:.2}", -pp)
    }
}

fn final_stats(result: &RunResult) -> (f64, f64) {
    let final_acc = result
        .records
        .last()
        .map(|r| r.accuracy_after)
        .unwrap_or(result.baseline_accuracy);
    let reduction = result.records.last().map(|r| r.flop_reduction_pct).unwrap_or(0.0);
    let delta_pp = 100.0 * (final_acc - result.baseline_accuracy);
    (reduction, delta_pp)
}

fn print_run_summary(result: &RunResult, out: &Path) {
    let (reduction, delta_pp) = final_stats(result);
    println!("trace {}", result.compact_trace());
    println!("runs {}", engine::rle_trace(&result.records));
    println!(
        "final: {:.2}% FLOP reduction, delta accuracy {} pp",
        reduction,
        fmt_delta(delta_pp)
    );
    if let Some(best) = &result.best_positive {
        let red = result
            .records
            .iter()
            .find(|r| r.k == best.iteration)
            .map(|r| r.flop_reduction_pct)
            .unwrap_or(0.0);
        println!(
            "best positive: {:.2}% FLOP reduction, delta accuracy {} pp (iteration {})",
            red,
            fmt_delta(100.0 * (best.accuracy - result.baseline_accuracy)),
            best.iteration
        );
    }
    println!("run directory {}", out.display());
}

fn load_matching_checkpoint(
    checkpoint: &Path,
    spec: &NetworkSpec,
) -> Result<prunetree::nn::ModelState, CliError> {
    let model = load_checkpoint(checkpoint)?;
    if model.spec.canonical_text() != spec.canonical_text() {
        return Err(Error::validation(format!(
            "checkpoint {} was trained for a different architecture than the config",
            checkpoint.display()
        ))
        .into());
    }
    Ok(model)
}

pub fn cmd_prune(
    config: &Path,
    checkpoint: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    apply_seed(&mut cfg.engine, seed);
    let out = resolve_out(&cfg, out)?;
    let data = load_data(&cfg)?;
    let model = load_matching_checkpoint(checkpoint, &data.spec)?;
    let result = run_engine(&cfg, &data, &model, &cfg.engine, &out)?;
    print_run_summary(&result, &out);
    Ok(())
}

/// Random-walk control: several full runs at consecutive seeds plus a mean
/// row, each in its own subdirectory.
pub fn cmd_baseline(
    config: &Path,
    checkpoint: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    runs: usize,
) -> Result<(), CliError> {
    if runs == 0 {
        return Err(CliError::Config("--runs must be at least 1".to_string()));
    }
    let mut cfg = RunConfig::load(config)?;
    apply_seed(&mut cfg.engine, seed);
    cfg.engine.method = Method::RandomWalk;
    let out = resolve_out(&cfg, out)?;
    let data = load_data(&cfg)?;
    let model = load_matching_checkpoint(checkpoint, &data.spec)?;

    fs::create_dir_all(&out)?;
    let base_seed = cfg.engine.seed;
    let mut csv = String::from("seed,flop_reduction_pct,final_accuracy,delta_acc_pp\n");
    let mut sums = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..runs {
        let mut engine_cfg = cfg.engine.clone();
        engine_cfg.seed = base_seed + i as u64;
        let dir = out.join(format!("rw_{}", engine_cfg.seed));
        let result = run_engine(&cfg, &data, &model, &engine_cfg, &dir)?;
        let (reduction, delta_pp) = final_stats(&result);
        let final_acc = result
            .records
            .last()
            .map(|r| r.accuracy_after)
            .unwrap_or(result.baseline_accuracy);
        println!(
            "seed {}: trace {} -> {:.2}% FLOP reduction, delta {} pp",
            engine_cfg.seed,
            result.compact_trace(),
            reduction,
            fmt_delta(delta_pp)
        );
        csv.push_str(&format!(
            "{},{:.2},{:.4},{:.3}\n",
            engine_cfg.seed, reduction, final_acc, delta_pp
        ));
        sums.0 += reduction;
        sums.1 += final_acc;
        sums.2 += delta_pp;
    }
    let n = runs as f64;
    csv.push_str(&format!(
        "mean,{:.2},{:.4},{:.3}\n",
        sums.0 / n,
        sums.1 / n,
        sums.2 / n
    ));
    fs::write(out.join("aggregate.csv"), &csv)?;
    println!(
        "mean over {} runs: {:.2}% FLOP reduction, delta {} pp",
        runs,
        sums.0 / n,
        fmt_delta(sums.2 / n)
    );
    println!("aggregate {}", out.join("aggregate.csv").display());
    Ok(())
}

struct ReportRow {
    name: String,
    method: String,
    delta_pp: f64,
    reduction: f64,
}

fn read_trace_row(dir: &Path) -> Result<ReportRow, CliError> {
    let path = dir.join("trace.json");
    let bad = |reason: String| CliError::Lib(Error::ingest(dir.to_path_buf(), reason));
    let text = fs::read_to_string(&path)
        .map_err(|e| bad(format!("cannot read trace.json: {}", e)))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| bad(format!("trace.json is not valid JSON: {}", e)))?;
    let method = match doc["method"].as_str() {
        Some("cka_guided") => "cka".to_string(),
        Some("random_walk") => "random-walk".to_string(),
        Some(other) => other.to_string(),
        None => return Err(bad("trace.json has no method field".to_string())),
    };
    let baseline = doc["baseline_accuracy"]
        .as_f64()
        .ok_or_else(|| bad("trace.json has no baseline_accuracy".to_string()))?;
    let final_acc = doc["final_accuracy"].as_f64().unwrap_or(baseline);
    let reduction = doc["flop_reduction_pct"]
        .as_f64()
        .ok_or_else(|| bad("trace.json has no flop_reduction_pct".to_string()))?;
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(ReportRow {
        name,
        method,
        delta_pp: 100.0 * (final_acc - baseline),
        reduction,
    })
}

pub fn cmd_report(run_dirs: &[PathBuf], csv_out: Option<PathBuf>) -> Result<(), CliError> {
    if run_dirs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".to_string()));
    }
    let mut rows = Vec::new();
    for dir in run_dirs {
        rows.push(read_trace_row(dir)?);
    }
    rows.sort_by(|a, b| {
        a.reduction
            .partial_cmp(&b.reduction)
            .unwrap()
            .then_with(|| a.name.cmp(&b.name))
    });

    // Mark the best delta within each 10-point reduction band.
    let mut best_in_band: Vec<bool> = vec![false; rows.len()];
    let bands: Vec<i64> = rows.iter().map(|r| (r.reduction / 10.0).floor() as i64).collect();
    for band in bands.iter().copied().collect::<std::collections::BTreeSet<_>>() {
        let best = rows
            .iter()
            .enumerate()
            .filter(|(i, _)| bands[*i] == band)
            .max_by(|(_, a), (_, b)| a.delta_pp.partial_cmp(&b.delta_pp).unwrap());
        if let Some((i, _)) = best {
            best_in_band[i] = true;
        }
    }

    println!("{:<24} {:<12} {:>10} {:>10}", "run", "method", "delta acc", "FLOPs red.");
    for (i, row) in rows.iter().enumerate() {
        println!(
            "{:<24} {:<12} {:>10} {:>9.2}% {}",
            row.name,
            row.method,
            fmt_delta(row.delta_pp),
            row.reduction,
            if best_in_band[i] { "*" } else { "" }
        );
    }

    let mut csv = String::from("run,method,delta_acc_pp,flop_reduction_pct\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{:.3},{:.2}\n",
            row.name, row.method, row.delta_pp, row.reduction
        ));
    }
    match csv_out {
        Some(path) => {
            fs::write(&path, &csv)?;
            println!("csv {}", path.display());
        }
        None => print!("\n{}", csv),
    }
    Ok(())
}

pub fn cmd_flops(config: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let spec = match &cfg.dataset {
        DatasetConfig::Synthetic { classes, image_size, .. } => {
            cfg.spec(*image_size, *image_size, *classes)?
        }
        DatasetConfig::Idx { .. } => {
            let data = load_data(&cfg)?;
            data.spec
        }
    };
    println!("flops/sample {}", count_flops(&spec));
    println!("params {}", spec.param_count());
    Ok(())
}
