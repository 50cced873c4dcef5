//! Command-line front end for the fleet feature-alignment pipeline.
//!
//! One static binary with subcommands; every run writes a config-echo file
//! with the fully resolved configuration, progress goes to stderr, results
//! go to files. Exit codes: 2 configuration error, 3 data error,
//! 4 training divergence, 1 internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use fleet_align::config::{self, Config};
use fleet_align::data::{clean, fit_normalization, split_dataset, write_csv, SplitSpec};
use fleet_align::error::Error;
use fleet_align::fleet::{
    generate_fleet, report, results_from_jsonl, results_to_jsonl, run_pair_model,
    select_source_by_mmd, sweep, Fleet, REPRESENTATIVE_CHANNELS,
};
use fleet_align::trainer::ArchitectureKind;

#[derive(Parser)]
#[command(name = "fleet-align", version, about = "Unsupervised feature alignment for one-class fleet monitoring")]
struct Cli {
    /// Configuration file (flat `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. --set kind=hafas (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory (default "out").
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Parallel training workers; overrides the config's `workers`.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean and normalize the datasets listed in the fleet manifest.
    Prepare,
    /// Train one (source, target) pair and write the model bundle.
    Train,
    /// Train and evaluate every (target, source, architecture) triple.
    Sweep,
    /// Pick the closest source for a target by two-channel MMD.
    SelectSource,
    /// Generate the synthetic fleet (CSVs plus manifest).
    GenerateFleet,
    /// Render report tables from a results file.
    Report,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_)
        | Error::EmptyDataset(_)
        | Error::UnknownChannel(_)
        | Error::ConstantChannel(_)
        | Error::Io(_)
        | Error::Csv(_) => 3,
        Error::Divergence(_) | Error::NonFinite { .. } | Error::FeatureCollapse => 4,
        Error::Shape { .. } => 1,
    }
}

fn resolved_config(cli: &Cli) -> Result<Config, Error> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::new(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string());
    }
    if let Some(workers) = cli.workers {
        cfg.set("workers", &workers.to_string());
    }
    if let Some(out) = &cli.out {
        cfg.set("out", &out.to_string_lossy());
    }
    Ok(cfg)
}

fn out_dir(cfg: &Config) -> Result<PathBuf, Error> {
    let dir = PathBuf::from(cfg.get_str("out", "out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = resolved_config(cli)?;
    let out = out_dir(&cfg)?;
    cfg.write_echo(&out.join("config-echo.txt"))?;
    match cli.command {
        Command::GenerateFleet => cmd_generate_fleet(&cfg, &out),
        Command::Prepare => cmd_prepare(&cfg, &out),
        Command::Train => cmd_train(&cfg, &out),
        Command::Sweep => cmd_sweep(&cfg, &out),
        Command::SelectSource => cmd_select_source(&cfg, &out),
        Command::Report => cmd_report(&cfg, &out),
    }
}

fn manifest_path(cfg: &Config) -> Result<PathBuf, Error> {
    Ok(PathBuf::from(cfg.require("data.manifest")?))
}

fn cmd_generate_fleet(cfg: &Config, out: &Path) -> Result<(), Error> {
    let fc = config::fleet_settings(cfg)?;
    eprintln!(
        "generating {} units x {} rows ({} targets), seed {}",
        fc.units, fc.rows_per_unit, fc.targets, fc.seed
    );
    let (fleet, meta) = generate_fleet::<f64>(&fc)?;
    fleet.save(out)?;
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Data(format!("meta serialization: {e}")))?;
    std::fs::write(out.join("generator-meta.json"), meta_json)?;
    eprintln!("fleet written to {}", out.display());
    Ok(())
}

fn cmd_prepare(cfg: &Config, out: &Path) -> Result<(), Error> {
    let sc = config::sweep_settings(cfg)?;
    let fleet = Fleet::<f64>::load(&manifest_path(cfg)?)?;
    for (info, ds) in &fleet.units {
        let cleaned = clean(ds)?;
        let window = match info.detection {
            Some(_) => sc.target_train_window,
            None => sc
                .source_train_window
                .unwrap_or(fleet_align::data::Window::Rows(cleaned.nrows())),
        };
        let spec = SplitSpec {
            train_window: window,
            validation_fraction: sc.validation_fraction,
            blackout: sc.blackout,
            detection_time: info.detection,
        };
        let splits = split_dataset(&cleaned, &spec)?;
        let params = fit_normalization(&splits.train)?;
        write_csv(&cleaned, &out.join(format!("{}.clean.csv", info.unit_id)))?;
        let normalized = fleet_align::data::apply_normalization(&cleaned, &params)?;
        write_csv(&normalized, &out.join(format!("{}.norm.csv", info.unit_id)))?;
        params.save(&out.join(format!("{}.params", info.unit_id)))?;
        eprintln!(
            "prepared {}: {} rows kept, train window {} rows",
            info.unit_id,
            cleaned.nrows(),
            splits.indices.validation.end
        );
    }
    Ok(())
}

fn cmd_train(cfg: &Config, out: &Path) -> Result<(), Error> {
    let kind = ArchitectureKind::parse(cfg.require("kind")?)?;
    let sc = config::sweep_settings(cfg)?;
    let template = config::architecture_spec(cfg, kind)?;
    let fleet = Fleet::<f64>::load(&manifest_path(cfg)?)?;
    let target_id = cfg.require("pair.target")?;
    let source_id = cfg.require("pair.source")?;
    let (t_info, t_ds) = fleet.unit(target_id)?;
    let (_, s_ds) = fleet.unit(source_id)?;
    let run_seed = fleet_align::seed::derive(
        sc.master_seed,
        &[target_id, source_id, kind.name()],
    );
    let mut sc = sc;
    sc.template = template;
    eprintln!("training {kind} on pair ({source_id} -> {target_id}), seed {run_seed}");
    let started = Instant::now();
    let (model, evaluation) =
        run_pair_model(s_ds, t_ds, t_info.detection, kind, &sc, run_seed)?;
    let runtime_ms = started.elapsed().as_millis();
    model.save(&out.join("model.bundle"))?;
    let record = serde_json::json!({
        "config_hash": cfg.hash_hex(),
        "kind": kind.name(),
        "target": target_id,
        "source": source_id,
        "seed": run_seed,
        "threshold": model.threshold,
        "history": model.history,
        "evaluation": evaluation,
        "runtime_ms": runtime_ms,
    });
    std::fs::write(
        out.join("run.json"),
        serde_json::to_string_pretty(&record)
            .map_err(|e| Error::Data(format!("record serialization: {e}")))?,
    )?;
    eprintln!(
        "done in {runtime_ms} ms; FPR {:?}, detected {}",
        evaluation.as_ref().map(|e| e.fpr),
        evaluation.as_ref().map(|e| e.fault_detected).unwrap_or(false)
    );
    Ok(())
}

fn cmd_sweep(cfg: &Config, out: &Path) -> Result<(), Error> {
    let sc = config::sweep_settings(cfg)?;
    let fleet = Fleet::<f64>::load(&manifest_path(cfg)?)?;
    eprintln!(
        "sweeping {} targets x {} sources x {} architectures",
        fleet.targets().count(),
        fleet.sources().count(),
        sc.architectures.len()
    );
    let started = Instant::now();
    let results = sweep(&fleet, &sc);
    eprintln!(
        "{} runs in {:.1} s ({} failures)",
        results.len(),
        started.elapsed().as_secs_f64(),
        results.iter().filter(|r| r.error.is_some()).count()
    );
    std::fs::write(out.join("results.jsonl"), results_to_jsonl(&results))?;
    let rep = report(&results, None)?;
    std::fs::write(out.join("table1_aligned_counts.csv"), rep.aligned_counts_csv())?;
    std::fs::write(out.join("table2_best_fpr.csv"), rep.best_fpr_csv())?;
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&rep)
            .map_err(|e| Error::Data(format!("report serialization: {e}")))?,
    )?;
    eprintln!("results written to {}", out.display());
    Ok(())
}

fn cmd_select_source(cfg: &Config, out: &Path) -> Result<(), Error> {
    let sc = config::sweep_settings(cfg)?;
    let fleet = Fleet::<f64>::load(&manifest_path(cfg)?)?;
    let channels = (
        cfg.get_str("mmd.channel_a", REPRESENTATIVE_CHANNELS.0),
        cfg.get_str("mmd.channel_b", REPRESENTATIVE_CHANNELS.1),
    );
    let targets: Vec<String> = match cfg.get("pair.target") {
        Some(t) => vec![t.to_string()],
        None => fleet.targets().map(|(i, _)| i.unit_id.clone()).collect(),
    };
    let mut selection = String::from("target,source\n");
    let mut values = String::from("target,source,mmd\n");
    for target in &targets {
        let (chosen, stats) = select_source_by_mmd(
            &fleet,
            target,
            (&channels.0, &channels.1),
            sc.target_train_window,
            sc.source_train_window,
            sc.master_seed,
        )?;
        eprintln!("target {target}: selected {chosen}");
        selection.push_str(&format!("{target},{chosen}\n"));
        for (s, v) in stats {
            values.push_str(&format!("{target},{s},{v}\n"));
        }
    }
    std::fs::write(out.join("selection.csv"), selection)?;
    std::fs::write(out.join("mmd_values.csv"), values)?;
    Ok(())
}

fn cmd_report(cfg: &Config, out: &Path) -> Result<(), Error> {
    let results_path = PathBuf::from(cfg.require("results")?);
    let text = std::fs::read_to_string(&results_path)?;
    let results = results_from_jsonl(&text)?;
    let selection: Option<Vec<(String, String)>> = match cfg.get("selection") {
        None => None,
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            Some(
                text.lines()
                    .skip(1)
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| {
                        l.split_once(',')
                            .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                            .ok_or_else(|| Error::Data(format!("bad selection line: {l}")))
                    })
                    .collect::<Result<Vec<_>, Error>>()?,
            )
        }
    };
    let rep = report(&results, selection.as_deref())?;
    std::fs::write(out.join("table1_aligned_counts.csv"), rep.aligned_counts_csv())?;
    std::fs::write(out.join("table2_best_fpr.csv"), rep.best_fpr_csv())?;
    if let Some(csv) = rep.mmd_selection_csv() {
        std::fs::write(out.join("table3_mmd_selection.csv"), csv)?;
    }
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&rep)
            .map_err(|e| Error::Data(format!("report serialization: {e}")))?,
    )?;
    eprintln!("tables written to {}", out.display());
    Ok(())
}
