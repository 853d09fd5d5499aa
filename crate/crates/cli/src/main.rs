//! `casp` — experiment runner: dataset generation, backbone pretraining,
//! the full session protocol, gradient checks, sweeps and reports.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or I/O error,
//! 3 numerical divergence.

mod artifacts;
mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use casp_core::checkpoint;
use casp_core::data;
use casp_core::error::Error as CoreError;
use casp_core::gradcheck::{run_gradcheck, GradCheckConfig};
use casp_core::plan::plan_sessions;
use casp_core::proto::PrototypeMatrix;
use casp_core::train::{
    compute_metrics, pretrain_backbone, run_fscil, run_sessions, ExperimentConfig,
};
use casp_core::vit::BackboneParams;

use artifacts::{
    checkpoint_from_state, csv_mean_overall, metrics_csv, state_from_checkpoint, summary_json,
    write_text, SummaryJson,
};
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "casp",
    about = "Desk-scale prompt-tuning FSCIL lab",
    version
)]
struct Cli {
    /// JSON config file; command-line flags override file keys
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the base-session training seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: $CASP_OUT_DIR, else ./out)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Deterministic execution (fixed-order reductions, seeded streams)
    #[arg(long, global = true)]
    deterministic: Option<bool>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic glyph dataset file
    GenData {
        #[arg(long)]
        classes: Option<u32>,
        #[arg(long = "per-class")]
        per_class: Option<u32>,
        #[arg(long)]
        size: Option<u16>,
        /// Dataset seed (distinct from the training seed)
        #[arg(long = "data-seed")]
        data_seed: Option<u64>,
        /// Output file (default: <out>/dataset.cdsf)
        #[arg(long = "file")]
        file: Option<PathBuf>,
    },
    /// Pretrain a backbone and write its checkpoint
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "pretrain")]
        tag: String,
    },
    /// Run pretrain → base session → incremental sessions and write metrics
    Fscil {
        #[arg(long)]
        data: PathBuf,
        /// Reuse a pretrained backbone checkpoint
        #[arg(long = "pretrain-ckpt")]
        pretrain_ckpt: Option<PathBuf>,
        /// Resume from a post-base checkpoint: only sessions and evaluation
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Component switches, e.g. cagp=off,pcap=off,cdap=off,mtm=off
        #[arg(long)]
        toggle: Option<String>,
        /// Number of consecutive training seeds to run
        #[arg(long, default_value_t = 1)]
        seeds: u32,
        #[arg(long, default_value = "run")]
        tag: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "lambda-mix")]
        lambda_mix: Option<f64>,
        #[arg(long = "split-layer")]
        split_layer: Option<usize>,
        #[arg(long = "beta-alpha")]
        beta_alpha: Option<f64>,
        #[arg(long)]
        dropout: Option<f64>,
    },
    /// Finite-difference check of every trainable tensor on a tiny model
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        /// Cap checked elements per tensor (0 = all)
        #[arg(long = "max-elems", default_value_t = 0)]
        max_elems: usize,
        /// Test fixture: negate the named tensor's analytic gradient
        #[arg(long)]
        sabotage: Option<String>,
    },
    /// Render the session-accuracy SVG and ablation table from summaries
    Report {
        /// Long-form sweep CSV to scatter-plot as well
        #[arg(long)]
        sweep: Option<PathBuf>,
        /// Summary JSON files
        inputs: Vec<PathBuf>,
    },
    /// Grid sweep over mixing hyperparameters, one process per cell
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "lambda-mix", default_value = "0,0.05,0.5")]
        lambda_mix: String,
        #[arg(long = "split-layer", default_value = "0")]
        split_layer: String,
        #[arg(long = "beta-alpha", default_value = "1.0")]
        beta_alpha: String,
        #[arg(long, default_value = "0.1")]
        dropout: String,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long = "pretrain-ckpt")]
        pretrain_ckpt: Option<PathBuf>,
        #[arg(long, default_value = "sweep")]
        tag: String,
    },
}

struct AppError {
    message: String,
    code: u8,
}

impl AppError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            code: 2,
        }
    }

    fn check(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            code: 1,
        }
    }
}

impl From<CoreError> for AppError {
    fn from(err: CoreError) -> Self {
        let code = match err {
            CoreError::Divergence { .. } => 3,
            _ => 2,
        };
        Self {
            message: err.to_string(),
            code,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn out_dir(cli_out: &Option<PathBuf>) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| std::env::var_os("CASP_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, AppError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path).map_err(AppError::usage)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(d) = cli.deterministic {
        cfg.deterministic = d;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), AppError> {
    let outdir = out_dir(&cli.out);
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::GenData {
            classes,
            per_class,
            size,
            data_seed,
            file,
        } => cmd_gen_data(&outdir, cfg, *classes, *per_class, *size, *data_seed, file.as_ref()),
        Command::Pretrain { data, epochs, tag } => {
            cmd_pretrain(&outdir, cfg, data, *epochs, tag)
        }
        Command::Fscil {
            data,
            pretrain_ckpt,
            resume,
            toggle,
            seeds,
            tag,
            epochs,
            lambda_mix,
            split_layer,
            beta_alpha,
            dropout,
        } => {
            let mut cfg = cfg;
            if let Some(t) = toggle {
                cfg.apply_toggles(t).map_err(AppError::usage)?;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(l) = lambda_mix {
                cfg.mtm.lambda_mix = *l;
            }
            if let Some(s) = split_layer {
                cfg.mtm.split_layer = *s;
            }
            if let Some(a) = beta_alpha {
                cfg.mtm.beta_alpha = *a;
            }
            if let Some(d) = dropout {
                cfg.prompts.dropout_rate = *d;
            }
            cmd_fscil(&outdir, cfg, data, pretrain_ckpt, resume, *seeds, tag)
        }
        Command::Gradcheck {
            tol,
            max_elems,
            sabotage,
        } => cmd_gradcheck(*tol, *max_elems, sabotage),
        Command::Report { sweep, inputs } => cmd_report(&outdir, sweep, inputs),
        Command::Sweep {
            data,
            lambda_mix,
            split_layer,
            beta_alpha,
            dropout,
            jobs,
            pretrain_ckpt,
            tag,
        } => cmd_sweep(
            &cli,
            &outdir,
            cfg,
            data,
            lambda_mix,
            split_layer,
            beta_alpha,
            dropout,
            *jobs,
            pretrain_ckpt,
            tag,
        ),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), AppError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| AppError::usage(format!("cannot create {}: {e}", dir.display())))
}

// ── gen-data ────────────────────────────────────────────────────────────

fn cmd_gen_data(
    outdir: &Path,
    mut cfg: RunConfig,
    classes: Option<u32>,
    per_class: Option<u32>,
    size: Option<u16>,
    data_seed: Option<u64>,
    file: Option<&PathBuf>,
) -> Result<(), AppError> {
    if let Some(c) = classes {
        cfg.dataset.classes = c;
    }
    if let Some(p) = per_class {
        cfg.dataset.per_class = p;
    }
    if let Some(s) = size {
        cfg.dataset.size = s;
    }
    if let Some(s) = data_seed {
        cfg.dataset.seed = s;
    }
    let dataset = data::generate(&cfg.dataset.spec())?;
    let bytes = data::encode_cdsf(&dataset);
    ensure_dir(outdir)?;
    let path = file
        .cloned()
        .unwrap_or_else(|| outdir.join("dataset.cdsf"));
    std::fs::write(&path, &bytes)
        .map_err(|e| AppError::usage(format!("cannot write {}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    println!(
        "wrote {} records to {} sha256 {hex}",
        dataset.len(),
        path.display()
    );
    Ok(())
}

// ── pretrain ────────────────────────────────────────────────────────────

fn load_dataset(path: &Path) -> Result<data::Dataset, AppError> {
    data::read_cdsf(path).map_err(AppError::from)
}

fn cmd_pretrain(
    outdir: &Path,
    mut cfg: RunConfig,
    datafile: &Path,
    epochs: Option<usize>,
    tag: &str,
) -> Result<(), AppError> {
    if let Some(e) = epochs {
        cfg.pretrain.epochs = e;
    }
    let dataset = load_dataset(datafile)?;
    let plan = plan_sessions(&dataset, &cfg.protocol.protocol(), cfg.plan_seed)?;
    let out = pretrain_backbone(&dataset, &plan, cfg.model.vit(), &cfg.pretrain.train())?;
    let mut backbone = out.backbone;
    backbone.set_frozen(true);
    ensure_dir(outdir)?;
    let path = outdir.join(format!("{tag}.casp"));
    let ckpt = checkpoint_from_state(
        &backbone,
        None,
        &PrototypeMatrix::new(cfg.model.dim),
        &cfg.echo(),
        cfg.pretrain.seed,
        0,
    );
    checkpoint::save(&path, &ckpt)?;
    println!(
        "pretrained backbone: holdout accuracy {:.4}, final loss {:.6}, saved {}",
        out.holdout_accuracy,
        out.final_loss,
        path.display()
    );
    Ok(())
}

fn load_pretrained(path: &Path, cfg: &RunConfig) -> Result<BackboneParams<f32>, AppError> {
    let ckpt = checkpoint::load(path)?;
    let restored = state_from_checkpoint(&ckpt)?;
    if restored.config.model != cfg.model {
        return Err(AppError::usage(format!(
            "pretrain checkpoint model section does not match the requested model ({})",
            path.display()
        )));
    }
    Ok(restored.backbone)
}

// ── fscil ───────────────────────────────────────────────────────────────

fn run_one_seed(
    outdir: &Path,
    cfg: &RunConfig,
    dataset: &data::Dataset,
    tag: &str,
    pretrained: Option<BackboneParams<f32>>,
) -> Result<SummaryJson, AppError> {
    let exp: ExperimentConfig = cfg.experiment();
    let outcome = run_fscil(dataset, &cfg.protocol.protocol(), &exp, pretrained)?;
    let seed = cfg.train.seed;
    let echo = cfg.echo();

    let csv_name = format!("metrics_{tag}_s{seed}.csv");
    let csv = metrics_csv(&echo, seed, &outcome.rows);
    write_text(&outdir.join(&csv_name), &csv)?;

    let holdout = if outcome.pretrain_holdout_accuracy.is_nan() {
        None
    } else {
        Some(outcome.pretrain_holdout_accuracy)
    };
    let summary = summary_json(
        cfg,
        tag,
        seed,
        &outcome.rows,
        &outcome.summary,
        &csv_name,
        holdout,
    );
    let json_text = serde_json::to_string_pretty(&summary)
        .map_err(|e| AppError::usage(format!("summary serialization: {e}")))?;
    write_text(&outdir.join(format!("summary_{tag}_s{seed}.json")), &json_text)?;

    // resume point: frozen state plus base prototypes only
    let mut base_only = PrototypeMatrix::new(exp.vit.dim);
    let mut rows = Vec::new();
    for i in 0..outcome.prototypes.len() {
        if outcome.prototypes.session_of()[i] == 0 {
            rows.push((
                outcome.prototypes.class_ids()[i],
                outcome.prototypes.row(i).to_vec(),
            ));
        }
    }
    base_only
        .append_session(rows, 0)
        .map_err(AppError::from)?;
    let ckpt = checkpoint_from_state(
        &outcome.backbone,
        outcome.prompts.as_ref(),
        &base_only,
        &echo,
        seed,
        0,
    );
    checkpoint::save(&outdir.join(format!("checkpoint_{tag}_s{seed}.casp")), &ckpt)?;
    let final_ckpt = checkpoint_from_state(
        &outcome.backbone,
        outcome.prompts.as_ref(),
        &outcome.prototypes,
        &echo,
        seed,
        0,
    );
    checkpoint::save(&outdir.join(format!("final_{tag}_s{seed}.casp")), &final_ckpt)?;

    println!(
        "{tag} s{seed}: A_B {:.4} A_N {} A_L {:.4} A_avg {:.4}",
        summary.a_b,
        summary
            .a_n
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".into()),
        summary.a_l,
        summary.a_avg
    );
    Ok(summary)
}

fn resume_sessions(
    outdir: &Path,
    datafile: &Path,
    resume: &Path,
    tag: &str,
) -> Result<(), AppError> {
    let dataset = load_dataset(datafile)?;
    let ckpt = checkpoint::load(resume)?;
    let restored = state_from_checkpoint(&ckpt)?;
    let cfg = restored.config.clone();
    let plan = plan_sessions(&dataset, &cfg.protocol.protocol(), cfg.plan_seed)?;
    let toggles = cfg.toggles.toggles();
    let mut prototypes = restored.prototypes;
    let (rows, per_class_last) = run_sessions(
        &dataset,
        &plan,
        &restored.backbone,
        restored.prompts.as_ref(),
        toggles,
        &mut prototypes,
    )?;
    let novel = plan.novel_classes_up_to(plan.incremental.len());
    let last: Vec<u32> = plan.incremental.last().cloned().unwrap_or_default();
    let summary = compute_metrics(&rows, &per_class_last, &novel, &last)?;

    let seed = cfg.train.seed;
    let echo = cfg.echo();
    ensure_dir(outdir)?;
    let csv_name = format!("metrics_{tag}_s{seed}.csv");
    write_text(&outdir.join(&csv_name), &metrics_csv(&echo, seed, &rows))?;
    let sj = summary_json(&cfg, tag, seed, &rows, &summary, &csv_name, None);
    write_text(
        &outdir.join(format!("summary_{tag}_s{seed}.json")),
        &serde_json::to_string_pretty(&sj)
            .map_err(|e| AppError::usage(format!("summary serialization: {e}")))?,
    )?;
    println!(
        "{tag} s{seed} (resumed): A_B {:.4} A_L {:.4} A_avg {:.4}",
        summary.a_b, summary.a_l, summary.a_avg
    );
    Ok(())
}

fn cmd_fscil(
    outdir: &Path,
    cfg: RunConfig,
    datafile: &Path,
    pretrain_ckpt: &Option<PathBuf>,
    resume: &Option<PathBuf>,
    seeds: u32,
    tag: &str,
) -> Result<(), AppError> {
    ensure_dir(outdir)?;
    if let Some(resume) = resume {
        return resume_sessions(outdir, datafile, resume, tag);
    }
    if seeds == 0 {
        return Err(AppError::usage("--seeds must be at least 1"));
    }
    let dataset = load_dataset(datafile)?;
    let mut shared_backbone = match pretrain_ckpt {
        Some(p) => Some(load_pretrained(p, &cfg)?),
        None => None,
    };
    // one pretraining serves every training seed
    if seeds > 1 && shared_backbone.is_none() {
        let plan = plan_sessions(&dataset, &cfg.protocol.protocol(), cfg.plan_seed)?;
        let out = pretrain_backbone(&dataset, &plan, cfg.model.vit(), &cfg.pretrain.train())?;
        let mut b = out.backbone;
        b.set_frozen(true);
        println!(
            "shared pretrain: holdout accuracy {:.4}",
            out.holdout_accuracy
        );
        shared_backbone = Some(b);
    }

    let base_seed = cfg.train.seed;
    let mut summaries = Vec::with_capacity(seeds as usize);
    for i in 0..seeds {
        let mut cfg_i = cfg.clone();
        cfg_i.train.seed = base_seed + i as u64;
        let summary = run_one_seed(outdir, &cfg_i, &dataset, tag, shared_backbone.clone())?;
        summaries.push(summary);
    }
    if seeds > 1 {
        write_aggregate(outdir, &cfg, tag, &summaries)?;
    }
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn write_aggregate(
    outdir: &Path,
    cfg: &RunConfig,
    tag: &str,
    summaries: &[SummaryJson],
) -> Result<(), AppError> {
    let collect = |f: &dyn Fn(&SummaryJson) -> f64| -> Vec<f64> {
        summaries.iter().map(f).collect()
    };
    let (ab_m, ab_s) = mean_std(&collect(&|s| s.a_b));
    let (al_m, al_s) = mean_std(&collect(&|s| s.a_l));
    let (avg_m, avg_s) = mean_std(&collect(&|s| s.a_avg));
    let an: Vec<f64> = summaries.iter().filter_map(|s| s.a_n).collect();
    let agg = serde_json::json!({
        "tag": tag,
        "seeds": summaries.iter().map(|s| s.seed).collect::<Vec<_>>(),
        "a_b": {"mean": ab_m, "std": ab_s},
        "a_n": if an.len() == summaries.len() {
            let (m, s) = mean_std(&an);
            serde_json::json!({"mean": m, "std": s})
        } else {
            serde_json::Value::Null
        },
        "a_l": {"mean": al_m, "std": al_s},
        "a_avg": {"mean": avg_m, "std": avg_s},
        "config": cfg,
    });
    write_text(
        &outdir.join(format!("aggregate_{tag}.json")),
        &serde_json::to_string_pretty(&agg)
            .map_err(|e| AppError::usage(format!("aggregate serialization: {e}")))?,
    )?;
    println!(
        "aggregate over {} seeds: A_B {ab_m:.4}±{ab_s:.4} A_L {al_m:.4}±{al_s:.4} A_avg {avg_m:.4}±{avg_s:.4}",
        summaries.len()
    );
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────────

fn cmd_gradcheck(tol: f64, max_elems: usize, sabotage: &Option<String>) -> Result<(), AppError> {
    let report = run_gradcheck(&GradCheckConfig {
        tolerance: tol,
        step: 1e-3,
        max_elements_per_tensor: max_elems,
        sabotage: sabotage.clone(),
    })?;
    let mut worst: f64 = 0.0;
    for c in &report.components {
        worst = worst.max(c.max_rel_err);
        println!(
            "{:<34} max_rel {:>10.3e}  ({} elems)  {}",
            c.name,
            c.max_rel_err,
            c.checked,
            if c.pass { "PASS" } else { "FAIL" }
        );
    }
    if report.pass {
        println!("GRADCHECK PASS (worst {worst:.3e} < tol {tol:.1e})");
        Ok(())
    } else {
        let names: Vec<&str> = report
            .failing()
            .iter()
            .map(|c| c.name.as_str())
            .collect();
        Err(AppError::check(format!(
            "GRADCHECK FAIL (worst {worst:.3e} ≥ tol {tol:.1e}): {}",
            names.join(", ")
        )))
    }
}

// ── report ──────────────────────────────────────────────────────────────

fn cmd_report(
    outdir: &Path,
    sweep: &Option<PathBuf>,
    inputs: &[PathBuf],
) -> Result<(), AppError> {
    if inputs.is_empty() {
        return Err(AppError::usage("report needs at least one summary JSON"));
    }
    let mut runs = Vec::with_capacity(inputs.len());
    for path in inputs {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::usage(format!("cannot read {}: {e}", path.display())))?;
        let summary: SummaryJson = serde_json::from_str(&text)
            .map_err(|e| AppError::usage(format!("malformed summary {}: {e}", path.display())))?;
        // cross-check: the CSV column must average to the JSON's a_avg
        let csv_path = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&summary.csv);
        let csv_text = std::fs::read_to_string(&csv_path)
            .map_err(|e| AppError::usage(format!("cannot read {}: {e}", csv_path.display())))?;
        let recomputed = csv_mean_overall(&csv_text)?;
        if (recomputed - summary.a_avg).abs() > 1e-9 {
            return Err(AppError::check(format!(
                "A_avg mismatch for {}: csv mean {recomputed} vs json {}",
                path.display(),
                summary.a_avg
            )));
        }
        runs.push(summary);
    }
    ensure_dir(outdir)?;
    let svg = report::sessions_svg(&runs)?;
    write_text(&outdir.join("sessions.svg"), &svg)?;
    let table = report::ablation_table(&runs);
    write_text(&outdir.join("ablation.md"), &table)?;
    print!("{table}");

    if let Some(sweep_path) = sweep {
        let text = std::fs::read_to_string(sweep_path)
            .map_err(|e| AppError::usage(format!("cannot read {}: {e}", sweep_path.display())))?;
        let mut rows = Vec::new();
        for line in text.lines() {
            if line.starts_with('#') || line.starts_with("lambda_mix,") || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(AppError::usage(format!("bad sweep row: {line}")));
            }
            let a_l: f64 = fields[4]
                .parse()
                .map_err(|e| AppError::usage(format!("bad a_l in `{line}`: {e}")))?;
            rows.push((
                format!("λ={} l={}", fields[0], fields[1]),
                a_l,
            ));
        }
        let svg = report::sweep_svg(&rows, "sweep over mixing hyperparameters")?;
        write_text(&outdir.join("sweep_points.svg"), &svg)?;
        println!("sweep plot: {} cells", rows.len());
    }
    println!("report written to {}", outdir.display());
    Ok(())
}

// ── sweep ───────────────────────────────────────────────────────────────

fn parse_grid<T: std::str::FromStr>(name: &str, spec: &str) -> Result<Vec<T>, AppError>
where
    T::Err: std::fmt::Display,
{
    let vals: Result<Vec<T>, AppError> = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| AppError::usage(format!("bad {name} value `{s}`: {e}")))
        })
        .collect();
    let vals = vals?;
    if vals.is_empty() {
        return Err(AppError::usage(format!("{name} grid is empty")));
    }
    Ok(vals)
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    cli: &Cli,
    outdir: &Path,
    cfg: RunConfig,
    datafile: &Path,
    lambda_spec: &str,
    split_spec: &str,
    alpha_spec: &str,
    dropout_spec: &str,
    jobs: usize,
    pretrain_ckpt: &Option<PathBuf>,
    tag: &str,
) -> Result<(), AppError> {
    let lambdas: Vec<f64> = parse_grid("lambda-mix", lambda_spec)?;
    let splits: Vec<usize> = parse_grid("split-layer", split_spec)?;
    let alphas: Vec<f64> = parse_grid("beta-alpha", alpha_spec)?;
    let dropouts: Vec<f64> = parse_grid("dropout", dropout_spec)?;
    let jobs = jobs.max(1);
    ensure_dir(outdir)?;

    let exe = std::env::current_exe()
        .map_err(|e| AppError::usage(format!("cannot locate own binary: {e}")))?;
    let mut cells = Vec::new();
    for &l in &lambdas {
        for &s in &splits {
            for &a in &alphas {
                for &d in &dropouts {
                    cells.push((l, s, a, d));
                }
            }
        }
    }

    let seed = cfg.train.seed;
    let mut commands = Vec::new();
    for (i, &(l, s, a, d)) in cells.iter().enumerate() {
        let cell_dir = outdir.join(format!("cell{i:03}"));
        let mut cmd = std::process::Command::new(&exe);
        cmd.arg("--out").arg(&cell_dir);
        if let Some(cfg_path) = &cli.config {
            cmd.arg("--config").arg(cfg_path);
        }
        cmd.arg("--seed").arg(seed.to_string());
        cmd.arg("fscil")
            .arg("--data")
            .arg(datafile)
            .arg("--tag")
            .arg(format!("cell{i:03}"))
            .arg("--toggle")
            .arg("mtm=on")
            .arg("--lambda-mix")
            .arg(l.to_string())
            .arg("--split-layer")
            .arg(s.to_string())
            .arg("--beta-alpha")
            .arg(a.to_string())
            .arg("--dropout")
            .arg(d.to_string());
        if let Some(p) = pretrain_ckpt {
            cmd.arg("--pretrain-ckpt").arg(p);
        }
        commands.push((i, cell_dir, cmd));
    }

    // fixed-size waves of worker processes; each cell is fully deterministic
    for wave in commands.chunks_mut(jobs) {
        let mut children = Vec::new();
        for (i, _, cmd) in wave.iter_mut() {
            let child = cmd
                .spawn()
                .map_err(|e| AppError::usage(format!("cannot spawn cell {i}: {e}")))?;
            children.push((*i, child));
        }
        for (i, mut child) in children {
            let status = child
                .wait()
                .map_err(|e| AppError::usage(format!("cell {i} wait: {e}")))?;
            if !status.success() {
                return Err(AppError::usage(format!(
                    "sweep cell {i} failed with {status}"
                )));
            }
        }
    }

    let mut csv = String::new();
    csv.push_str(&format!("# config: {}\n", cfg.echo()));
    csv.push_str(&format!("# seed: {seed}\n"));
    csv.push_str("lambda_mix,split_layer,beta_alpha,dropout_rate,a_l\n");
    for (i, &(l, s, a, d)) in cells.iter().enumerate() {
        let summary_path = outdir
            .join(format!("cell{i:03}"))
            .join(format!("summary_cell{i:03}_s{seed}.json"));
        let text = std::fs::read_to_string(&summary_path).map_err(|e| {
            AppError::usage(format!("missing cell summary {}: {e}", summary_path.display()))
        })?;
        let summary: SummaryJson = serde_json::from_str(&text)
            .map_err(|e| AppError::usage(format!("bad cell summary: {e}")))?;
        csv.push_str(&format!(
            "{l},{s},{a},{d},{}\n",
            artifacts::format_acc(summary.a_l)
        ));
    }
    let csv_path = outdir.join(format!("sweep_{tag}.csv"));
    write_text(&csv_path, &csv)?;
    println!("sweep grid of {} cells written to {}", cells.len(), csv_path.display());
    Ok(())
}
