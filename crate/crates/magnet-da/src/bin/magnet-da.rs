//! Command-line surface: dataset generation, training, evaluation,
//! experiments, and numeric self-checks.
//!
//! Exit codes: 0 success, 2 usage error, 3 runtime or data error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use magnet_da::checkpoint::{load_model, save_model};
use magnet_da::cli::{apply_overrides, parse_config_text, RunManifest};
use magnet_da::data::{
    generate_shapes, read_dataset, split_dataset, write_dataset, Domain, DomainPair,
};
use magnet_da::error::{MagnetError, Result};
use magnet_da::network::{MagnetModel, NetworkConfig};
use magnet_da::train::{
    evaluate, loss_trace_csv, results_csv, run_experiment, train, Method, RunResult, TaskSpec,
    TrainConfig,
};
use magnet_da::verify;

#[derive(Parser)]
#[command(
    name = "magnet-da",
    version,
    about = "Desk-scale unsupervised domain adaptation with multi-level MMD matching"
)]
struct Cli {
    /// Suppress informational output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape dataset and write it as a DMDS file.
    Gen {
        /// Rendering modality: photo, cad or sketch.
        #[arg(long)]
        domain: String,
        /// Number of shape classes.
        #[arg(long, value_parser = clap::value_parser!(u32).range(2..=8))]
        classes: u32,
        /// Number of images.
        #[arg(long)]
        n: usize,
        /// Image side length (16, 32 or 64).
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output DMDS path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a labeled source and an unlabeled target dataset.
    Train {
        /// Labeled source DMDS file.
        #[arg(long)]
        source: PathBuf,
        /// Target DMDS file (labels, if present, are quarantined for
        /// evaluation only).
        #[arg(long)]
        target: PathBuf,
        /// Optional key = value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (model.dmck, loss.csv, manifest.txt).
        #[arg(long)]
        out: PathBuf,
        /// Method variant: magnet, source-only, no-entropy, no-mmd, single-tap.
        #[arg(long, default_value = "magnet")]
        method: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Evaluate a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate task datasets and run method variants over repeated seeds.
    Experiment {
        /// Comma-separated tasks like cad2photo, sketch2photo, photo2photo
        /// (same-domain tasks use a stratified 70/30 split).
        #[arg(long, default_value = "cad2photo,sketch2photo")]
        tasks: String,
        /// Comma-separated method variants.
        #[arg(long, default_value = "magnet,source-only")]
        methods: String,
        #[arg(long, value_parser = clap::value_parser!(u32).range(2..=8), default_value_t = 6)]
        classes: u32,
        /// Images per domain.
        #[arg(long, default_value_t = 1200)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Seed for dataset generation (fixed across repetitions).
        #[arg(long, default_value_t = 42)]
        data_seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Worker threads (0 = available parallelism).
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the vectorized MMD against the scalar triple-loop reference.
    Mmdcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Maximum sample size per side.
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Maximum feature dimension.
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference checks of every layer and loss gradient.
    Gradcheck {
        /// Restrict to one component (see `gradcheck --list`).
        #[arg(long)]
        component: Option<String>,
        #[arg(long, default_value_t = 5)]
        seed: u64,
        /// Corrupt one analytic gradient per component; the check must FAIL.
        #[arg(long)]
        corrupt: bool,
        /// List component names and exit.
        #[arg(long)]
        list: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(3)
        }
    }
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("usage error: {msg}");
    ExitCode::from(2)
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> Result<ExitCode> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Gen {
            domain,
            classes,
            n,
            size,
            seed,
            out,
        } => {
            if ![16, 32, 64].contains(&size) {
                return Ok(usage_error("--size must be 16, 32 or 64"));
            }
            if n < classes as usize {
                return Ok(usage_error("--n must be at least --classes"));
            }
            let domain = match Domain::parse(&domain) {
                Ok(d) => d,
                Err(e) => return Ok(usage_error(&e.to_string())),
            };
            let ds = generate_shapes(domain, classes as usize, n, size, seed)?;
            write_dataset(&ds, &out)?;
            if !quiet {
                println!(
                    "wrote {} images ({size}x{size}, {} classes, domain {}) to {}",
                    ds.len(),
                    ds.num_classes(),
                    ds.domain_tag,
                    out.display()
                );
                let counts = ds.per_class_counts().expect("generated labels");
                for (name, count) in ds.class_names.iter().zip(counts) {
                    println!("class {name}: {count}");
                }
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Train {
            source,
            target,
            config,
            out,
            method,
            seed,
            iterations,
            batch_size,
        } => {
            let method = Method::parse(&method)?;
            let source_ds = read_dataset(&source)?;
            let target_ds = read_dataset(&target)?;
            let shape = source_ds.images.shape().to_vec();
            let mut network = NetworkConfig::new(shape[1], shape[2], source_ds.num_classes());
            let mut train_cfg = TrainConfig::default();
            if let Some(path) = &config {
                let text = std::fs::read_to_string(path)?;
                apply_overrides(&mut train_cfg, &mut network, &parse_config_text(&text)?)?;
            }
            if let Some(s) = seed {
                train_cfg.seed = s;
            }
            if let Some(it) = iterations {
                train_cfg.iterations = it;
            }
            if let Some(b) = batch_size {
                train_cfg.batch_size = b;
            }
            let train_cfg = method.apply(&train_cfg);
            let pair = DomainPair::new(source_ds, target_ds)?;

            std::fs::create_dir_all(&out)?;
            let mut manifest = RunManifest::new(
                &command_line(),
                &train_cfg,
                &network,
                &[
                    ("source", &source.display().to_string()),
                    ("target", &target.display().to_string()),
                ],
                &out.display().to_string(),
            );
            manifest
                .entries
                .insert("method".into(), method.label().into());
            manifest.write(&out.join("manifest.txt"))?;

            let mut model = MagnetModel::new(network, train_cfg.seed)?;
            let result = train(&mut model, &pair, &train_cfg)?;

            save_model(&model, &out.join("model.dmck"))?;
            std::fs::write(out.join("loss.csv"), loss_trace_csv(&result))?;
            manifest.complete(&result);
            manifest.write(&out.join("manifest.txt"))?;
            if !quiet {
                println!(
                    "done: source_acc={:.4} target_acc={:.4} best_target_acc={:.4} wall_s={:.1}",
                    result.source_acc,
                    result.final_target_acc,
                    result.best_target_acc,
                    result.wall_s
                );
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Eval { checkpoint, data } => {
            let mut model = load_model(&checkpoint)?;
            let ds = read_dataset(&data)?;
            let acc = evaluate(&mut model, &ds)?;
            println!("accuracy={acc:.4}");
            Ok(ExitCode::SUCCESS)
        }

        Command::Experiment {
            tasks,
            methods,
            classes,
            n,
            size,
            data_seed,
            config,
            seed,
            reps,
            iterations,
            workers,
            out,
        } => {
            if ![16, 32, 64].contains(&size) {
                return Ok(usage_error("--size must be 16, 32 or 64"));
            }
            let methods: Vec<Method> = methods
                .split(',')
                .map(|m| Method::parse(m.trim()))
                .collect::<Result<_>>()?;
            let mut network = NetworkConfig::new(1, size, classes as usize);
            let mut train_cfg = TrainConfig::default();
            if let Some(path) = &config {
                let text = std::fs::read_to_string(path)?;
                apply_overrides(&mut train_cfg, &mut network, &parse_config_text(&text)?)?;
            }
            if let Some(s) = seed {
                train_cfg.seed = s;
            }
            if let Some(r) = reps {
                train_cfg.repetitions = r;
            }
            if let Some(it) = iterations {
                train_cfg.iterations = it;
            }

            let task_specs: Result<Vec<TaskSpec>> = tasks
                .split(',')
                .map(|t| build_task(t.trim(), classes as usize, n, size, data_seed))
                .collect();
            let task_specs = task_specs?;

            std::fs::create_dir_all(&out)?;
            let mut manifest = RunManifest::new(
                &command_line(),
                &train_cfg,
                &network,
                &[("tasks", &tasks), ("data_seed", &data_seed.to_string())],
                &out.display().to_string(),
            );
            manifest.write(&out.join("manifest.txt"))?;

            let result = run_experiment(&task_specs, &network, &train_cfg, &methods, workers)?;

            std::fs::write(out.join("results.csv"), results_csv(&result))?;
            for record in &result.records {
                let trace = RunResult {
                    logs: record.logs.clone(),
                    final_target_acc: record.target_acc,
                    best_target_acc: record.best_target_acc,
                    source_acc: record.source_acc,
                    seed: record.seed,
                    wall_s: record.wall_s,
                    config: train_cfg.clone(),
                };
                std::fs::write(
                    out.join(format!(
                        "trace_{}_{}_{}.csv",
                        record.task,
                        record.method.label(),
                        record.seed
                    )),
                    loss_trace_csv(&trace),
                )?;
                manifest.entries.insert(
                    format!(
                        "result.{}.{}.{}.target_acc",
                        record.task,
                        record.method.label(),
                        record.seed
                    ),
                    format!("{:?}", record.target_acc),
                );
            }
            manifest.entries.insert("status".into(), "complete".into());
            manifest.write(&out.join("manifest.txt"))?;

            if !quiet {
                for task in &task_specs {
                    for &method in &methods {
                        if let Some((mean, std)) = result.mean_target_acc(&task.name, method) {
                            println!(
                                "{} {}: target_acc {:.4} +/- {:.4}",
                                task.name,
                                method.label(),
                                mean,
                                std
                            );
                        }
                    }
                }
                println!("results written to {}", out.display());
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Mmdcheck { trials, n, d, seed } => {
            if trials == 0 || n == 0 || d == 0 {
                return Ok(usage_error("--trials, --n and --d must be >= 1"));
            }
            let report = verify::mmd_check(trials, n, d, seed)?;
            let verdict = if report.pass { "PASS" } else { "FAIL" };
            println!(
                "mmdcheck: trials={} max_dev={:.3e} {} {:.0e} {verdict}",
                report.trials,
                report.max_dev,
                if report.pass { "<" } else { ">=" },
                report.threshold,
            );
            if report.pass {
                Ok(ExitCode::SUCCESS)
            } else {
                Err(MagnetError::Contract(format!(
                    "mmdcheck failed: max deviation {:.3e}",
                    report.max_dev
                )))
            }
        }

        Command::Gradcheck {
            component,
            seed,
            corrupt,
            list,
        } => {
            if list {
                for name in verify::gradcheck_component_names() {
                    println!("{name}");
                }
                return Ok(ExitCode::SUCCESS);
            }
            if let Some(c) = &component {
                if !verify::gradcheck_component_names().contains(&c.as_str()) {
                    return Ok(usage_error(&format!(
                        "unknown component {c:?} (see --list)"
                    )));
                }
            }
            let summaries = verify::gradcheck_components(component.as_deref(), seed, corrupt)?;
            let mut all_pass = true;
            for s in &summaries {
                let verdict = if s.pass() { "PASS" } else { "FAIL" };
                println!(
                    "gradcheck {}: max_rel_err={:.3e} tol={:.0e} {verdict}",
                    s.component, s.max_rel_err, s.tol,
                );
                all_pass &= s.pass();
            }
            if all_pass {
                println!("gradcheck: PASS");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("gradcheck: FAIL");
                Err(MagnetError::Contract(
                    "gradient check failed (see report above)".into(),
                ))
            }
        }
    }
}

/// Build a named task like `cad2photo`; same-domain tasks split 70/30.
fn build_task(
    name: &str,
    classes: usize,
    n: usize,
    size: usize,
    data_seed: u64,
) -> Result<TaskSpec> {
    let Some((src, tgt)) = name.split_once('2') else {
        return Err(MagnetError::Parameter(format!(
            "task {name:?} is not of the form <source>2<target>"
        )));
    };
    let src_domain = Domain::parse(src)?;
    let tgt_domain = Domain::parse(tgt)?;
    let pair = if src_domain == tgt_domain {
        let full = generate_shapes(src_domain, classes, n, size, data_seed)?;
        let (train_part, test_part) = split_dataset(&full, 0.7, data_seed)?;
        DomainPair::new(train_part, test_part)?
    } else {
        let source = generate_shapes(src_domain, classes, n, size, data_seed)?;
        let target = generate_shapes(tgt_domain, classes, n, size, data_seed)?;
        DomainPair::new(source, target)?
    };
    Ok(TaskSpec {
        name: name.to_string(),
        pair,
    })
}
