use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use srsqueeze::data::{synth, ImageSet};
use srsqueeze::distill::{run_distillation_logged, KDConfig, Teacher};
use srsqueeze::eval::evaluate;
use srsqueeze::model::{
    approx_param_count, estimate_flops, estimate_flops_with, srwt, FlopConvention, ParamCount,
};
use srsqueeze::pipeline::{read_json, run_workflow_with, write_json, RunConfig, RunOptions};
use srsqueeze::planner::{plan, verify_plan, CompressionPlan, RoundingMode};
use srsqueeze::prune::{run_pruning_logged, PruneConfig, PruneReport};
use srsqueeze::train::{pretrain_logged, JsonLines, PretrainConfig};
use srsqueeze::{exec, ModelConfig, Result, SRModel};

#[derive(Parser)]
#[command(
    name = "srsqueeze",
    version,
    about = "Compress EDSR-style super-resolution networks"
)]
struct Cli {
    /// Run kernels on one thread even when built with parallelism.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct Arch {
    #[arg(long = "nc")]
    n_c: usize,
    #[arg(long = "nl")]
    n_l: usize,
    #[arg(long = "nb")]
    n_b: usize,
    #[arg(long, default_value_t = 2)]
    scale: usize,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
}

impl Arch {
    fn config(self) -> ModelConfig {
        ModelConfig {
            kernel: self.kernel,
            ..ModelConfig::new(self.n_c, self.n_l, self.n_b, self.scale)
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic set of synthetic HR training images.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a fresh model with the Charbonnier loss.
    Pretrain {
        #[command(flatten)]
        arch: Arch,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = PretrainConfig::default().iters)]
        iters: usize,
        #[arg(long, default_value_t = PretrainConfig::default().batch)]
        batch: usize,
        #[arg(long, default_value_t = PretrainConfig::default().patch)]
        patch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Sparsity fine-tuning; reports the measured density d.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = PruneConfig::default().lambda)]
        lambda: f64,
        #[arg(long, default_value_t = PruneConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = PruneConfig::default().steps_per_epoch)]
        steps_per_epoch: usize,
        #[arg(long, default_value_t = PruneConfig::default().lr)]
        lr: f64,
        #[arg(long, default_value_t = PruneConfig::default().batch)]
        batch: usize,
        #[arg(long, default_value_t = PruneConfig::default().patch)]
        patch: usize,
        /// Use only the first N images (file-name order).
        #[arg(long)]
        images: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Map a density to a compact architecture.
    Plan {
        #[command(flatten)]
        arch: Arch,
        #[arg(
            long,
            required_unless_present = "prune_report",
            conflicts_with = "prune_report"
        )]
        density: Option<f64>,
        /// Take the density from a prune report instead.
        #[arg(long)]
        prune_report: Option<PathBuf>,
        /// nearest, floor, ceil, search or paper-compat.
        #[arg(long, default_value = "search")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the planned student against a teacher.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        /// Plan JSON whose target is the student architecture.
        #[arg(long)]
        student_config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = KDConfig::default().alpha)]
        alpha: f32,
        #[arg(long, default_value_t = KDConfig::default().iterations)]
        iters: usize,
        #[arg(long, default_value_t = KDConfig::default().batch)]
        batch: usize,
        #[arg(long, default_value_t = KDConfig::default().patch)]
        patch: usize,
        #[arg(long, default_value_t = KDConfig::default().pyramid_levels)]
        levels: usize,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// PSNR/SSIM on the Y channel against bicubic.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        hr: PathBuf,
        /// Must match the model's scale when given.
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        border: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact and approximate parameter counts plus FLOPs at 1280x720.
    Count {
        #[command(flatten)]
        arch: Arch,
        /// Count a multiply-add as two operations.
        #[arg(long)]
        two_per_mac: bool,
    },
    /// Run the whole workflow from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Reuse stages completed by an earlier attempt in the same directory.
        #[arg(long)]
        resume: bool,
    },
}

fn load_set(dir: &Path, images: Option<usize>) -> Result<ImageSet> {
    let set = ImageSet::load_dir(dir)?;
    Ok(match images {
        Some(n) => set.take(n),
        None => set,
    })
}

/// Run `f` with an optional JSON-lines sink.
fn with_log<T: serde::Serialize, R>(
    path: Option<&Path>,
    f: impl FnOnce(&mut dyn FnMut(&T) -> Result<()>) -> Result<R>,
) -> Result<R> {
    match path {
        Some(p) => {
            let mut lines = JsonLines::create(p)?;
            let r = f(&mut |rec| lines.append(rec))?;
            lines.finish()?;
            Ok(r)
        }
        None => f(&mut |_| Ok(())),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.sequential {
        exec::set_parallel(false);
    }
    match cli.command {
        Command::Synth {
            out,
            count,
            size,
            seed,
        } => {
            synth::write_dataset(&out, count, size, size, seed)?;
            info!("wrote {count} images to {}", out.display());
        }
        Command::Pretrain {
            arch,
            data,
            iters,
            batch,
            patch,
            seed,
            out,
            log,
        } => {
            let cfg = PretrainConfig {
                iters,
                batch,
                patch,
                seed,
                ..PretrainConfig::default()
            };
            let set = load_set(&data, None)?;
            let model = with_log(log.as_deref(), |on| {
                pretrain_logged(arch.config(), &set, &cfg, on)
            })?;
            srwt::save(&model, &out)?;
            info!(
                "saved {} parameters to {}",
                model.param_count().total,
                out.display()
            );
        }
        Command::Prune {
            model,
            data,
            lambda,
            epochs,
            steps_per_epoch,
            lr,
            batch,
            patch,
            images,
            seed,
            out,
            report,
            log,
        } => {
            let cfg = PruneConfig {
                lambda,
                epochs,
                steps_per_epoch,
                lr,
                batch,
                patch,
                seed,
                ..PruneConfig::default()
            };
            let mut m = srwt::load(&model)?;
            let set = load_set(&data, images)?;
            let rep = with_log(log.as_deref(), |on| {
                run_pruning_logged(&mut m, &set, &cfg, on)
            })?;
            srwt::save(&m, &out)?;
            write_json(&report, &rep)?;
            println!("d = {}", rep.density);
        }
        Command::Plan {
            arch,
            density,
            prune_report,
            mode,
            out,
        } => {
            let d = match (density, prune_report) {
                (Some(d), _) => d,
                (None, Some(p)) => read_json::<PruneReport>(&p)?.density,
                (None, None) => unreachable!("clap requires one of them"),
            };
            let p = plan(&arch.config(), d, mode.parse::<RoundingMode>()?)?;
            for w in &p.warnings {
                log::warn!("{w:?}");
            }
            write_json(&out, &p)?;
            let v = verify_plan(&p)?;
            println!(
                "({}, {}, {}) -> ({}, {}, {}); deep ratio {:.4}, deviation {:+.4}",
                p.source.n_c,
                p.source.n_l,
                p.source.n_b,
                p.target.n_c,
                p.target.n_l,
                p.target.n_b,
                v.exact_ratio,
                v.exact_deviation
            );
        }
        Command::Distill {
            teacher,
            student_config,
            data,
            alpha,
            iters,
            batch,
            patch,
            levels,
            images,
            seed,
            out,
            log,
        } => {
            let cfg = KDConfig {
                alpha,
                iterations: iters,
                batch,
                patch,
                pyramid_levels: levels,
                seed,
                ..KDConfig::default()
            };
            let t = srwt::load(&teacher)?;
            let p: CompressionPlan = read_json(&student_config)?;
            let mut student = SRModel::build(p.target, seed)?;
            let set = load_set(&data, images)?;
            let summary = with_log(log.as_deref(), |on| {
                run_distillation_logged(&mut student, Teacher::Model(&t), &set, &cfg, on)
            })?;
            srwt::save(&student, &out)?;
            print_json(&summary)?;
        }
        Command::Eval {
            model,
            hr,
            scale,
            border,
            out,
        } => {
            let m = srwt::load(&model)?;
            if let Some(s) = scale {
                if s != m.config().scale {
                    return Err(srsqueeze::Error::Config(format!(
                        "--scale {s} but {} is a x{} model",
                        model.display(),
                        m.config().scale
                    )));
                }
            }
            let res = evaluate(&m, &ImageSet::load_dir(&hr)?, border)?;
            match out {
                Some(p) => {
                    write_json(&p, &res)?;
                    println!(
                        "PSNR {:.3} dB (bicubic {:.3}), SSIM {:.4}",
                        res.mean_psnr.0, res.mean_bicubic_psnr.0, res.mean_ssim
                    );
                }
                None => print_json(&res)?,
            }
        }
        Command::Count { arch, two_per_mac } => {
            let cfg = arch.config();
            cfg.validate()?;
            let convention = if two_per_mac {
                FlopConvention::TwoPerMac
            } else {
                FlopConvention::MacAsFlop
            };
            print_json(&serde_json::json!({
                "config": cfg,
                "exact": ParamCount::for_config(&cfg),
                "approx_deep": approx_param_count(&cfg),
                "flops_1280x720": estimate_flops_with(&cfg, 720, 1280, convention),
                "flop_convention": convention,
                "macs_1280x720": estimate_flops(&cfg, 720, 1280),
            }))?;
        }
        Command::Run { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let report = run_workflow_with(
                &cfg,
                RunOptions {
                    resume,
                    fail_before: None,
                },
            )?;
            info!(
                "report written to {}",
                cfg.paths.out.join("report.json").display()
            );
            if let Some(e) = &report.eval {
                println!(
                    "teacher {:.3} dB, student {:.3} dB, bicubic {:.3} dB",
                    e.teacher.mean_psnr.0, e.student.mean_psnr.0, e.student.mean_bicubic_psnr.0
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
