//! Command implementations. Each returns the process exit code on success.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use sprc_core::checkpoint;
use sprc_core::dataset::{generate_synthetic, Dataset, SyntheticSpec, CORPUS_FILE, META_FILE, TRIPLETS_FILE, VOCAB_FILE};
use sprc_core::evaluation::{
    self, grouped_recall, edit_kind_labels, rerank_two_stage, CrossAttentionScorer, DataSource, EvalOptions,
    IdentityScorer, Retriever, ScorerTraining, SweepAxis,
};
use sprc_core::training::{self, Precision, TrainConfig, TrainContext, TrainState};
use sprc_core::{Error, Real};

use crate::manifest::Recorder;
use crate::{Common, EvalArgs, SweepArgs, SynthArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Maps an error chain to the documented exit codes.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_code(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 1;
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn core_code(e: &Error) -> u8 {
    match e {
        Error::AtStep { source, .. } => core_code(source),
        Error::Numeric(_) => 3,
        Error::Config(_) | Error::Shape(_) | Error::Length { .. } | Error::Domain(_) => 2,
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::Vocabulary { .. }
        | Error::Referential(_)
        | Error::Format(_)
        | Error::Truncated { .. }
        | Error::Version { .. }
        | Error::Json(_) => 1,
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e).into())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    sprc_core::dataset::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn load_train_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_toml(&read_text(p)?).with_context(|| format!("config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = common.precision {
        cfg.precision = p;
    }
    Ok(cfg.validated()?)
}

pub fn synth(args: &SynthArgs, argv: &[String]) -> Result<u8> {
    let mut rec = Recorder::start("synth", argv);
    let mut spec: SyntheticSpec = match &args.common.config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = args.common.seed {
        spec.seed = s;
    }
    if let Some(n) = args.corpus_size {
        spec.corpus_size = n;
    }
    if let Some(n) = args.n_triplets {
        spec.n_triplets = n;
    }
    let task = generate_synthetic(&spec)?;
    let mut ds = Dataset::from_task(&task);
    if let Some(kinds) = &args.kinds {
        ds.triplets = task.filter_kinds(kinds);
        ds.meta.n_triplets = ds.triplets.len();
    }
    let out = &args.common.out;
    ds.save(out)?;
    for f in [CORPUS_FILE, TRIPLETS_FILE, VOCAB_FILE, META_FILE] {
        rec.output(out.join(f));
    }
    let labels = edit_kind_labels(&ds.triplets, &ds.vocab);
    println!("images\t{}", ds.corpus.len());
    println!("triplets\t{}", ds.triplets.len());
    for kind in ["ADD", "REMOVE", "MODIFY"] {
        println!("{kind}\t{}", labels.iter().filter(|l| *l == kind).count());
    }
    rec.finish(out, serde_json::to_value(&spec)?, Some(spec.seed))?;
    Ok(0)
}

pub fn train(args: &TrainArgs, argv: &[String]) -> Result<u8> {
    let precision = match (&args.resume, args.common.precision) {
        (_, Some(p)) => p,
        (Some(ckpt), None) => checkpoint_precision(ckpt)?,
        (None, None) => load_train_config(&args.common)?.precision,
    };
    match precision {
        Precision::F32 => train_as::<f32>(args, argv),
        Precision::F64 => train_as::<f64>(args, argv),
    }
}

fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dtype, _) = checkpoint::read_header(&bytes)?;
    Ok(dtype.parse()?)
}

fn train_as<T: Real>(args: &TrainArgs, argv: &[String]) -> Result<u8> {
    let mut rec = Recorder::start("train", argv);
    let dataset = Dataset::load(&args.data)?;
    let mut state: TrainState<T> = match &args.resume {
        Some(p) => {
            let s = checkpoint::load(p)?;
            log::info!("resuming from {} at step {}", p.display(), s.step);
            s
        }
        None => {
            let cfg = load_train_config(&args.common)?;
            let model = cfg.model_config(&dataset);
            TrainState::init(cfg, model)?
        }
    };
    state.config.precision = if T::DTYPE == "f32" { Precision::F32 } else { Precision::F64 };
    let out = &args.common.out;
    create_dir(out)?;
    let (train_set, held_out) =
        training::split_triplets(&dataset.triplets, state.config.holdout_fraction, state.config.seed);
    log::info!(
        "{} training triplets, {} held out; mechanism {}, {} steps",
        train_set.len(),
        held_out.len(),
        state.config.mechanism,
        state.config.steps
    );
    let ctx = TrainContext::new(&dataset, train_set, &state.params)?;

    let metrics_path = out.join(METRICS_FILE);
    if args.resume.is_none() && metrics_path.exists() {
        fs::remove_file(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    }
    let file = OpenOptions::new().create(true).append(true).open(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = BufWriter::new(file);
    let mut write_err = None;
    let outcome = training::run(&mut state, &ctx, args.stop_after, |r| {
        if let Err(e) = serde_json::to_string(r).map(|line| writeln!(log, "{line}")) {
            write_err = Some(e.to_string());
        }
        if r.step % 100 == 0 {
            log::info!("step {} Lc {:.4} La {:.4} L {:.4} lr {:.2e}", r.step, r.lc, r.la, r.loss, r.lr);
        }
        Ok(())
    });
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    rec.output(&metrics_path);
    if let Some(e) = write_err {
        return Err(Error::Format(format!("writing {}: {e}", metrics_path.display())).into());
    }
    outcome?;

    let ckpt = out.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, &state)?;
    rec.output(&ckpt);
    println!("step\t{}", state.step);
    rec.finish(out, serde_json::to_value(&state.config)?, Some(state.config.seed))?;
    Ok(0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    /// Triplets withheld from training (falls back to training triplets when none are).
    Heldout,
    Train,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Rerank {
    Identity,
    CrossAttention,
}

pub fn eval(args: &EvalArgs, argv: &[String]) -> Result<u8> {
    let precision = match args.common.precision {
        Some(p) => p,
        None => checkpoint_precision(&args.checkpoint)?,
    };
    match precision {
        Precision::F32 => eval_as::<f32>(args, argv),
        Precision::F64 => eval_as::<f64>(args, argv),
    }
}

fn eval_as<T: Real>(args: &EvalArgs, argv: &[String]) -> Result<u8> {
    let mut rec = Recorder::start("eval", argv);
    let state: TrainState<T> = checkpoint::load(&args.checkpoint)?;
    let dataset = Dataset::load(&args.data)?;
    let cfg = &state.config;
    let (train_set, held_out) = training::split_triplets(&dataset.triplets, cfg.holdout_fraction, cfg.seed);
    let triplets = match args.split {
        Split::Heldout if held_out.is_empty() => {
            log::warn!("no held-out triplets (holdout_fraction = 0); evaluating on the training triplets");
            train_set.clone()
        }
        Split::Heldout => held_out,
        Split::Train => train_set.clone(),
        Split::All => dataset.triplets.clone(),
    };
    let mechanism = args.mechanism.unwrap_or(cfg.mechanism);
    let mode = args.prompt_mode.unwrap_or(cfg.prompt_mode);
    let mut retriever = Retriever::new(&dataset.corpus, &state.params, mechanism, mode)?;
    retriever.exclude_reference = !args.keep_reference;
    let mut results = retriever.rank_all(&triplets)?;

    let mut failures = Vec::new();
    match args.rerank {
        None => {}
        Some(Rerank::Identity) => {
            let o = rerank_two_stage(&results, &triplets, args.top_m, &IdentityScorer)?;
            results = o.results;
            failures = o.failures;
        }
        Some(Rerank::CrossAttention) => {
            let mut scorer = CrossAttentionScorer::new(&retriever, cfg.seed);
            let opts = ScorerTraining { top_m: args.top_m, seed: cfg.seed, ..ScorerTraining::default() };
            let losses = scorer.train(&train_set, &opts)?;
            log::info!("re-rank scorer training loss per epoch: {losses:?}");
            let o = rerank_two_stage(&results, &triplets, args.top_m, &scorer)?;
            results = o.results;
            failures = o.failures;
        }
    }
    if !failures.is_empty() {
        log::warn!("{} queries kept their first-stage order after scorer failures", failures.len());
    }

    let labels = edit_kind_labels(&triplets, &dataset.vocab);
    let table = grouped_recall(&results, &labels, &args.ks, &args.subset_ks)?;
    let out = &args.common.out;
    create_dir(out)?;
    let csv = table.to_csv()?;
    let csv_path = out.join("recall.csv");
    write_text(&csv_path, &csv)?;
    let json_path = out.join("recall.json");
    write_text(&json_path, &(serde_json::to_string_pretty(&table)? + "\n"))?;
    let rank_path = out.join("rankings.jsonl");
    let mut lines = String::new();
    for r in &results {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    write_text(&rank_path, &lines)?;
    for p in [&csv_path, &json_path, &rank_path] {
        rec.output(p);
    }
    print!("{csv}");
    let echo = serde_json::json!({
        "train_config": cfg,
        "checkpoint": args.checkpoint,
        "data": args.data,
        "mechanism": mechanism,
        "prompt_mode": mode,
        "ks": args.ks,
        "subset_ks": args.subset_ks,
        "split": format!("{:?}", args.split).to_lowercase(),
        "rerank": args.rerank.map(|r| format!("{r:?}").to_lowercase()),
        "top_m": args.top_m,
        "queries": triplets.len(),
        "rerank_failures": failures.len(),
    });
    rec.finish(out, echo, Some(cfg.seed))?;
    Ok(0)
}

pub fn sweep(args: &SweepArgs, argv: &[String]) -> Result<u8> {
    let axis: SweepAxis = args.axis.parse()?;
    let base = load_train_config(&args.common)?;
    match base.precision {
        Precision::F32 => sweep_as::<f32>(args, axis, &base, argv),
        Precision::F64 => sweep_as::<f64>(args, axis, &base, argv),
    }
}

fn sweep_as<T: Real>(args: &SweepArgs, axis: SweepAxis, base: &TrainConfig, argv: &[String]) -> Result<u8> {
    let mut rec = Recorder::start("sweep", argv);
    let fixed;
    let source = match &args.data {
        Some(dir) => {
            fixed = Dataset::load(dir)?;
            DataSource::Fixed(&fixed)
        }
        None => {
            let spec: SyntheticSpec = match &args.synthetic {
                Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                None => SyntheticSpec::default(),
            };
            DataSource::Synthetic { spec, kinds: args.kinds.clone() }
        }
    };
    let workers = evaluation::sweep_workers();
    let table = evaluation::sweep::<T>(axis, &args.values, base, &args.seeds, &source, &EvalOptions::default(), workers)?;

    let out = &args.common.out;
    create_dir(out)?;
    for row in &table.rows {
        for cell in &row.cells {
            let dir = cell_dir(out, axis, &cell.value, cell.seed);
            create_dir(&dir)?;
            let metrics = dir.join(METRICS_FILE);
            let mut f = BufWriter::new(File::create(&metrics).map_err(|e| Error::io(&metrics, e))?);
            for r in &cell.records {
                writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&metrics, e))?;
            }
            f.flush().map_err(|e| Error::io(&metrics, e))?;
            rec.output(&metrics);
            let summary = dir.join("cell.json");
            write_text(&summary, &(serde_json::to_string_pretty(cell)? + "\n"))?;
            rec.output(&summary);
        }
    }
    let csv = table.to_csv()?;
    let csv_path = out.join("sweep.csv");
    write_text(&csv_path, &csv)?;
    let json_path = out.join("sweep.json");
    write_text(&json_path, &(table.to_json()? + "\n"))?;
    rec.output(&csv_path);
    rec.output(&json_path);
    print!("{csv}");
    let failures = table.failures();
    let echo = serde_json::json!({
        "base_config": base,
        "axis": axis,
        "values": args.values,
        "seeds": args.seeds,
        "data": args.data,
        "synthetic": args.synthetic,
        "kinds": args.kinds.as_ref().map(|k| k.iter().map(|k| k.token()).collect::<Vec<_>>()),
        "workers": workers,
        "failed_cells": failures,
    });
    rec.finish(out, echo, None)?;
    if failures > 0 {
        eprintln!("{failures} sweep cell(s) failed; see sweep.csv");
        return Ok(4);
    }
    Ok(0)
}

fn cell_dir(out: &Path, axis: SweepAxis, value: &str, seed: u64) -> PathBuf {
    let axis = serde_json::to_value(axis).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    let safe: String = value.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '-' }).collect();
    out.join("cells").join(format!("{axis}={safe}")).join(format!("seed{seed}"))
}
