//! `nnmobile` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nnmobile::augment::{apply_sample_augs, eval_transform};
use nnmobile::checkpoint::Checkpoint;
use nnmobile::config::RunConfig;
use nnmobile::data::synth_generate;
use nnmobile::img::Image;
use nnmobile::model::{Model, ModelConfig, REFERENCE_PARAMS_M};
use nnmobile::rng::{self, Stream};
use nnmobile::train::{self, Dataset, RunOptions};
use nnmobile::{gradcheck, study, Error, Result};

#[derive(Parser)]
#[command(name = "nnmobile", version, about = "Train, evaluate and ablate retinal grading CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Record the run as deterministic.
        #[arg(long)]
        deterministic: bool,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Image directory; defaults to the manifest's directory.
        #[arg(long)]
        root: Option<PathBuf>,
        /// JSON report path; defaults to `<ckpt>.eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// k-fold cross-validation over the training manifest.
    Crossval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Cumulative ablation ladder.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// `table1` or a comma-separated list of ilrb, da, d, o, af.
        #[arg(long, default_value = "table1")]
        grid: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and the full block.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic fundus-like dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Save a PNG strip: the eval view followed by augmented samples.
    AugmentPreview {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "augment_preview.png")]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trainable parameter count of a preset.
    Params {
        #[arg(long, default_value = "mbv2")]
        preset: String,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long)]
        width: Option<f64>,
    },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else if e.is_data_error() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Train {
            config,
            deterministic,
            resume,
            output,
        } => cmd_train(&config, deterministic, resume.as_deref(), output),
        Command::Eval {
            ckpt,
            manifest,
            root,
            out,
        } => cmd_eval(&ckpt, &manifest, root, out),
        Command::Crossval { config, k, output } => {
            let cfg = RunConfig::load(&config)?;
            let dir = output.unwrap_or_else(|| cfg.output_dir.join("crossval"));
            let report = study::crossval(&cfg, k, Some(&dir))?;
            print!("{}", report.to_text());
            println!("report: {}", dir.join("crossval.json").display());
            Ok(if report.failed_folds().is_empty() { 0 } else { 1 })
        }
        Command::Ablate {
            config,
            grid,
            output,
        } => {
            let cfg = RunConfig::load(&config)?;
            let dir = output.unwrap_or_else(|| cfg.output_dir.join("ablation"));
            let table = study::ablate(&cfg, &grid, Some(&dir))?;
            print!("{}", table.to_text());
            println!("table: {}", dir.join("ablation.json").display());
            Ok(if table.rows.iter().all(|r| r.error.is_none()) { 0 } else { 1 })
        }
        Command::Gradcheck { cases, seed } => {
            let report = gradcheck::run(cases, seed, None)?;
            print!("{}", report.to_text());
            if report.passed() {
                println!("all {} ops pass", report.ops.len());
                Ok(0)
            } else {
                println!("FAILED: {}", report.failures().join(", "));
                Ok(3)
            }
        }
        Command::Synth {
            out,
            per_class,
            classes,
            seed,
            size,
        } => {
            let m = synth_generate(&out, per_class, classes, size, seed)?;
            println!(
                "wrote {} images in {} classes to {}",
                m.len(),
                m.num_classes,
                out.display()
            );
            Ok(0)
        }
        Command::AugmentPreview {
            config,
            image,
            out,
            count,
            seed,
        } => {
            let cfg = RunConfig::load(&config)?;
            let img = Image::open(&image)?;
            let mut tiles = vec![eval_transform(&img, &cfg.aug)];
            for i in 0..count {
                let mut r = rng::stream(seed, Stream::Preview, &[i as u64]);
                tiles.push(apply_sample_augs(&img, &cfg.aug, &mut r));
            }
            strip(&tiles).save_png(&out)?;
            println!("wrote {} ({} augmented samples)", out.display(), count);
            Ok(0)
        }
        Command::Params {
            preset,
            classes,
            width,
        } => {
            let mut cfg = ModelConfig::preset(&preset, classes)?;
            if let Some(w) = width {
                cfg.width_multiplier = w;
            }
            let n = Model::<f32>::build(&cfg, 0)?.count_params();
            println!("{}", param_line(n));
            Ok(0)
        }
    }
}

fn param_line(n: usize) -> String {
    let m = n as f64 / 1e6;
    format!(
        "trainable parameters: {n} ({m:.3}M; reference {REFERENCE_PARAMS_M}M, deviation {:+.1}%)",
        100.0 * (m - REFERENCE_PARAMS_M) / REFERENCE_PARAMS_M
    )
}

/// Tiles side by side with a 2-pixel white gutter.
fn strip(tiles: &[Image]) -> Image {
    let h = tiles.iter().map(|t| t.height).max().unwrap_or(1);
    let gap = 2;
    let w: usize = tiles.iter().map(|t| t.width + gap).sum::<usize>() - gap;
    let mut out = Image::filled(h, w, [1.0; 3]);
    let mut x0 = 0;
    for t in tiles {
        for c in 0..3 {
            for y in 0..t.height {
                for x in 0..t.width {
                    out.set(c, y, x0 + x, t.at(c, y, x));
                }
            }
        }
        x0 += t.width + gap;
    }
    out
}

fn cmd_train(
    config: &Path,
    deterministic: bool,
    resume: Option<&Path>,
    output: Option<PathBuf>,
) -> Result<u8> {
    let mut cfg = RunConfig::load(config)?;
    cfg.deterministic |= deterministic;
    if let Some(o) = output {
        cfg.output_dir = o;
    }
    let ckpt = resume.map(Checkpoint::load).transpose()?;
    let opts = RunOptions {
        output_dir: Some(cfg.output_dir.clone()),
        stop_after: None,
    };
    log::info!("config {} -> {}", cfg.hash(), cfg.output_dir.display());
    let trainer = train::train_run(&cfg, ckpt.as_ref(), &opts)?;
    let log = &trainer.log;
    println!("{}", param_line(log.param_count));
    println!(
        "epochs: {}  best epoch: {}  best score: {}",
        log.epochs.len(),
        log.best_epoch.map_or("-".into(), |e| e.to_string()),
        log.best_score.map_or("-".into(), |s| format!("{s:.6}"))
    );
    if let Some(r) = &log.final_report {
        println!("final evaluation ({:?} split):", log.eval_split);
        print!("{}", r.to_text());
    }
    println!("artifacts: {}", cfg.output_dir.display());
    Ok(0)
}

fn cmd_eval(ckpt: &Path, manifest: &Path, root: Option<PathBuf>, out: Option<PathBuf>) -> Result<u8> {
    let c = Checkpoint::load(ckpt)?;
    let (cfg, mut model, stats) = train::load_for_eval(&c)?;
    let root = root.unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default());
    let m = train::load_manifest(&cfg, manifest, &root)?;
    let data = Dataset::load(&m, cfg.aug.resize)?;
    let report = train::evaluate(&mut model, &stats, &cfg.aug, &data, cfg.batch_size)?;
    print!("{}", report.to_text());
    let out = out.unwrap_or_else(|| {
        let mut p = ckpt.as_os_str().to_owned();
        p.push(".eval.json");
        PathBuf::from(p)
    });
    train::write_text(&out, &report.to_json())?;
    println!("report: {}", out.display());
    Ok(0)
}
