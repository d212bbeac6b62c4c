use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crossmatch::ablation::{generate_rows, run_ablation, GridSpec};
use crossmatch::datasets::{load_folder, save_folder, synth_generate, SampleRecord, SynthSpec};
use crossmatch::manifest::{fingerprint_records, RunManifest};
use crossmatch::metrics::table_row;
use crossmatch::model::UNet;
use crossmatch::plot::plot_run;
use crossmatch::trainer::{fit_records, load_checkpoint, EvalSet, FitOptions, Method};
use crossmatch::{Error, Result};

/// Semi-supervised segmentation: data synthesis, training, evaluation,
/// ablation grids and plots.
#[derive(Parser)]
#[command(name = "crossmatch", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset as `images/` and `masks/` PNG folders.
    Synth {
        /// TOML synthetic-data spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's sample count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model; writes logs, checkpoints and a manifest into `--out`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Folder with `images/` and `masks/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// One encoder call per view and one decoder call per stream.
        #[arg(long)]
        naive: bool,
        /// crossmatch, fixmatch, dualstream or supervised_only.
        #[arg(long)]
        method: Option<String>,
        /// Held-out folder evaluated during and after training.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Stop (and checkpoint) after this many completed steps.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Evaluate a checkpoint on a labeled folder.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `<ckpt>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid and write the consolidated table.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only list the rows.
        #[arg(long)]
        dry_run: bool,
    },
    /// Write one SVG per logged series of a run directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_labeled(dir: &Path, num_classes: usize) -> Result<Vec<SampleRecord>> {
    let masks = dir.join("masks");
    let recs = load_folder(&dir.join("images"), masks.is_dir().then_some(masks.as_path()), num_classes)?;
    if recs.is_empty() {
        return Err(Error::data(format!("no samples found under {}", dir.display())));
    }
    Ok(recs)
}

fn cmd_synth(spec: &Path, out: &Path, count: Option<usize>) -> Result<()> {
    let mut spec: SynthSpec = toml::from_str(&read(spec)?)?;
    if let Some(n) = count {
        spec.count = n;
    }
    let recs = synth_generate(&spec)?;
    save_folder(&recs, out)?;
    RunManifest::new("synth", &spec, fingerprint_records(&recs), spec.seed)?.write(out)?;
    log::info!("wrote {} samples to {}", recs.len(), out.display());
    Ok(())
}

struct TrainArgs {
    config: PathBuf,
    data: PathBuf,
    out: PathBuf,
    resume: Option<PathBuf>,
    naive: bool,
    method: Option<String>,
    val: Option<PathBuf>,
    stop_at: Option<usize>,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = crossmatch::trainer::RunConfig::load(&a.config)?;
    if let Some(m) = &a.method {
        cfg.train.method = m.parse::<Method>()?;
    }
    if a.naive {
        cfg.train.naive_mode = true;
    }
    cfg.validate()?;
    let records = load_labeled(&a.data, cfg.net.num_classes)?;
    let val = match &a.val {
        Some(v) => Some(EvalSet::from_records(&load_labeled(v, cfg.net.num_classes)?)?),
        None => None,
    };
    write(&a.out.join("config.toml"), &cfg.to_toml()?)?;
    let res = fit_records(
        &cfg,
        &records,
        &FitOptions {
            out_dir: Some(&a.out),
            resume: a.resume.as_deref(),
            stop_at: a.stop_at,
            val: val.as_ref(),
        },
    )?;
    if let Some(m) = &res.final_metrics {
        write(&a.out.join("final_metrics.json"), &serde_json::to_string_pretty(m)?)?;
        println!("{}", m.table(cfg.train.method.name()));
    }
    log::info!("finished at step {}", res.state.step);
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let (state, cfg) = load_checkpoint(ckpt, None)?;
    let net = UNet::new(cfg.net.clone())?;
    let set = EvalSet::from_records(&load_labeled(data, cfg.net.num_classes)?)?;
    let report = set.evaluate(&net, &state.params, cfg.train.eval_chunk)?;
    let out = out.map_or_else(|| ckpt.join("eval"), Path::to_path_buf);
    write(&out.join("metrics.json"), &serde_json::to_string_pretty(&report)?)?;
    write(
        &out.join("metrics.jsonl"),
        &(serde_json::to_string(&report.summary_json(Some(state.step)))? + "\n"),
    )?;
    let label = format!("{}@{}", cfg.train.method.name(), state.step);
    let table = report.table(&label);
    write(&out.join("table.md"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_ablate(grid: &Path, out: &Path, dry_run: bool) -> Result<()> {
    let spec = GridSpec::from_toml(&read(grid)?)?;
    if dry_run {
        for (i, r) in generate_rows(&spec)?.iter().enumerate() {
            println!("{i:3} {:<12} {}{}", r.grid.name(), r.label(), if r.full { " *" } else { "" });
        }
        return Ok(());
    }
    let data = spec
        .data
        .as_ref()
        .ok_or_else(|| Error::config("grid file has no [data] section"))?;
    let root = grid.parent().unwrap_or(Path::new("."));
    let (records, val) = data.load(root, spec.base.net.num_classes)?;
    RunManifest::new("ablate", &spec, fingerprint_records(&records), spec.base.train.seed)?.write(out)?;
    let table = run_ablation(&spec, &records, val.as_ref(), Some(out))?;
    print!("{}", table.markdown());
    for r in table.full_rows() {
        if let Some(m) = &r.metrics {
            log::info!("full row: {}", table_row(&r.row.label(), m));
        }
    }
    Ok(())
}

fn configure_threads() {
    if let Ok(v) = std::env::var("CROSSMATCH_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the thread pool: {e}");
                }
            }
            _ => log::warn!("ignoring CROSSMATCH_THREADS={v:?}; expected a positive integer"),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { spec, out, count } => cmd_synth(&spec, &out, count),
        Cmd::Train { config, data, out, resume, naive, method, val, stop_at } => cmd_train(TrainArgs {
            config,
            data,
            out,
            resume,
            naive,
            method,
            val,
            stop_at,
        }),
        Cmd::Eval { ckpt, data, out } => cmd_eval(&ckpt, &data, out.as_deref()),
        Cmd::Ablate { grid, out, dry_run } => cmd_ablate(&grid, &out, dry_run),
        Cmd::Plot { run, out } => {
            let files = plot_run(&run, &out)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    configure_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
