//! `spips` command-line driver.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use spips_core::backbone::{alexnet_random, load_backbone, BackboneSpec};
use spips_core::datasets::{
    decode_image, load_2afc_manifest, load_jnd_manifest, synth_2afc, write_heatmap,
};
use spips_core::deep::deep_maps;
use spips_core::evalstats::{eval_2afc, eval_jnd, CorrelationReport};
use spips_core::fusion::{init_head, Ablation, FusionHead};
use spips_core::pipeline::{scales_for, score_images};
use spips_core::traditional::{msssim_map, psnr_map, ssim_map};
use spips_core::trainer::{metrics_path, train, write_metrics, Optimizer, TrainConfig};
use spips_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "spips",
    version,
    about = "Full-reference image quality scoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    NoSemantic,
    NoTradition,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoSemantic => Ablation::NoSemantic,
            AblationArg::NoTradition => Ablation::NoTradition,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Subcommand)]
enum Command {
    /// Score an image against its reference (lower is better)
    Score {
        #[arg(long)]
        eval: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Backbone weights (.spwt)
        #[arg(long)]
        weights: PathBuf,
        /// Fusion head (.spht)
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write one grayscale heatmap per quality map
    Maps {
        #[arg(long)]
        eval: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Generate a synthetic 2AFC corpus
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a fusion head on a 2AFC manifest
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "full")]
        ablation: AblationArg,
        #[arg(long, value_enum, default_value = "adam")]
        optimizer: OptimizerArg,
        /// Directory for cached quality maps
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Correlate comparator output with 2AFC judgments per category
    Eval2afc {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Correlate scores with JND difference fractions per category
    Evaljnd {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write a randomly initialized AlexNet feature stack as .spwt
    InitBackbone {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write an untrained fusion head for a backbone
    InitHead {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// MS-SSIM scales the head expects (3 suits 64×64 images)
        #[arg(long, default_value_t = 3)]
        scales: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "full")]
        ablation: AblationArg,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(if e.is_numeric() { 4 } else { 3 })
        }
    }
}

fn backbone(path: &Path) -> Result<BackboneSpec> {
    load_backbone(path)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Score {
            eval,
            reference,
            weights,
            head,
            json,
        } => {
            let spec = backbone(&weights)?;
            let head = FusionHead::load(&head)?;
            let s = score_images(
                &spec,
                &head,
                &decode_image(&eval)?,
                &decode_image(&reference)?,
            )?;
            if json {
                let out = json!({
                    "score": s.score,
                    "lambdas": s.lambdas,
                    "f_trad": s.f_trad_mean,
                    "f_percept": s.f_percept_mean,
                    "f_semantic": s.f_semantic_mean,
                });
                println!("{out}");
            } else {
                println!("{:.6}", s.score);
            }
        }
        Command::Maps {
            eval,
            reference,
            weights,
            outdir,
        } => {
            let spec = backbone(&weights)?;
            let (e, r) = (decode_image(&eval)?, decode_image(&reference)?);
            let scales = scales_for(&r)?;
            std::fs::create_dir_all(&outdir).map_err(|err| io_err(&outdir, err))?;
            write_heatmap(&psnr_map(&e, &r)?.map, outdir.join("psnr.png"))?;
            write_heatmap(&ssim_map(&e, &r)?.map, outdir.join("ssim.png"))?;
            let ms = msssim_map(&e, &r, scales)?;
            for j in 0..scales {
                write_heatmap(
                    &ms.map.channel(j)?,
                    outdir.join(format!("msssim_s{}.png", j + 1)),
                )?;
            }
            let deep = deep_maps(&spec.extract_features(&e)?, &spec.extract_features(&r)?)?;
            for (l, m) in deep.iter().enumerate() {
                write_heatmap(&m.map, outdir.join(format!("deep_l{}.png", l + 1)))?;
            }
            eprintln!(
                "wrote {} heatmaps to {}",
                2 + scales + deep.len(),
                outdir.display()
            );
        }
        Command::Synth { out, n, seed } => {
            let manifest = synth_2afc(&out, n, seed)?;
            eprintln!("wrote {n} samples, manifest {}", manifest.display());
        }
        Command::Train {
            manifest,
            weights,
            out,
            epochs,
            lr,
            batch,
            seed,
            ablation,
            optimizer,
            cache_dir,
        } => {
            let spec = backbone(&weights)?;
            let samples = load_2afc_manifest(&manifest)?;
            let cfg = TrainConfig {
                epochs,
                batch_size: batch,
                learning_rate: lr,
                seed,
                ablation: ablation.into(),
                optimizer: match optimizer {
                    OptimizerArg::Adam => Optimizer::Adam,
                    OptimizerArg::Sgd => Optimizer::Sgd,
                },
                cache_dir,
                ..TrainConfig::default()
            };
            let (head, report) = train(&spec, &samples, &cfg)?;
            head.save(&out)?;
            let metrics = metrics_path(&out);
            write_metrics(&metrics, &report)?;
            eprintln!(
                "trained on {} samples ({} held out); kept epoch {}; held-out 2AFC accuracy {:.4}",
                report.n_train,
                report.n_val,
                report.best_epoch + 1,
                report.final_accuracy
            );
            eprintln!("wrote {} and {}", out.display(), metrics.display());
        }
        Command::Eval2afc {
            manifest,
            weights,
            head,
            json,
        } => {
            let spec = backbone(&weights)?;
            let head = FusionHead::load(&head)?;
            let samples = load_2afc_manifest(&manifest)?;
            print_report(&eval_2afc(&head, &spec, &samples)?, json);
        }
        Command::Evaljnd {
            manifest,
            weights,
            head,
            json,
        } => {
            let spec = backbone(&weights)?;
            let head = FusionHead::load(&head)?;
            let samples = load_jnd_manifest(&manifest)?;
            print_report(&eval_jnd(&head, &spec, &samples)?, json);
        }
        Command::InitBackbone { out, seed } => {
            alexnet_random(seed).save(&out)?;
            eprintln!("wrote {}", out.display());
        }
        Command::InitHead {
            weights,
            out,
            scales,
            seed,
            ablation,
        } => {
            let spec = backbone(&weights)?;
            init_head(&spec, scales, ablation.into(), seed)?.save(&out)?;
            eprintln!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn print_report(report: &CorrelationReport, json: bool) {
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if json {
        let out = serde_json::to_string(&report.categories).expect("report serializes");
        println!("{out}");
        return;
    }
    println!(
        "{:<8} {:>8} {:>8} {:>8} {:>6} {:>8}",
        "category", "plcc", "srcc", "krcc", "n", "acc2afc"
    );
    for (cat, s) in &report.categories {
        let acc = s
            .acc2afc
            .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        println!(
            "{:<8} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>8}",
            cat.name(),
            s.plcc,
            s.srcc,
            s.krcc,
            s.n,
            acc
        );
    }
}
