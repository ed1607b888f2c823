//! Command-line harness for the task-specific distillation engine.
//!
//! Every subcommand is driven by one versioned TOML configuration (or
//! its defaults) and writes artifacts into `--out`. Runs are
//! deterministic: the same config, seed, and `--threads 1` produce
//! byte-identical outputs. Errors exit nonzero with a single
//! `error: ...` line on stderr.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use taskdistill_core::data::{build_augmented, generate_task, AugmentedDataset, Interpolation, TaskData};
use taskdistill_core::harness::{
    export_pca, head_regime_for, head_spec_for, read_results_json, render_text,
    run_ablation_data_routing, run_ablation_loss_routing, run_matrix, tune, write_pca_csv,
    write_pca_variance_csv, write_report_files, ExperimentConfig, MatrixOutcome, Procedure,
};
use taskdistill_core::nn::{EncoderSpec, Model, PretrainedEncoder};
use taskdistill_core::train::{
    distill, evaluate_accuracy, finetune, pretrain_encoder, probe, TrainConfig, TrainOutcome,
};
use taskdistill_core::Result;

#[derive(Parser)]
#[command(
    name = "taskdistill",
    version,
    about = "Task-specific knowledge distillation engine and experiment harness",
    propagate_version = true
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (TOML, versioned by schema_version);
    /// built-in defaults are used when absent.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the data seed and the single-run training seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads for experiment cells; 1 = fully deterministic
    /// sequential mode, 0 = one per core.
    #[arg(long, global = true, value_name = "INT", default_value_t = 1)]
    threads: usize,
    /// Force half-synthetic, half-original batches wherever the
    /// synthetic pool is sampled.
    #[arg(long, global = true)]
    strict_batches: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Arch {
    Teacher,
    Student,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Teacher => "teacher",
            Arch::Student => "student",
        })
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the benchmark task and write all splits as JSON.
    GenData {
        /// Also materialize the synthetic mixing pool.
        #[arg(long)]
        with_pool: bool,
    },
    /// Pretrain an encoder on the coarse-label corpus and save it.
    Pretrain {
        /// Which architecture to pretrain.
        #[arg(long, value_enum, default_value_t = Arch::Teacher)]
        arch: Arch,
    },
    /// Train a fresh head on a frozen pretrained encoder.
    Probe {
        #[arg(long, value_enum, default_value_t = Arch::Teacher)]
        arch: Arch,
        /// Reuse a saved encoder checkpoint instead of pretraining one.
        #[arg(long, value_name = "PATH")]
        encoder: Option<PathBuf>,
    },
    /// Train a pretrained encoder end-to-end on the task.
    Finetune {
        #[arg(long, value_enum, default_value_t = Arch::Student)]
        arch: Arch,
        /// Reuse a saved encoder checkpoint instead of pretraining one.
        #[arg(long, value_name = "PATH")]
        encoder: Option<PathBuf>,
    },
    /// Distill a student from a probed teacher.
    Distill {
        /// Reuse a saved teacher model instead of probing one.
        #[arg(long, value_name = "PATH")]
        teacher: Option<PathBuf>,
        /// Mix the synthetic pool into the distillation term.
        #[arg(long)]
        synthetic: bool,
    },
    /// Grid-search learning rate and weight decay for one procedure.
    Grid {
        /// One of: probe-teacher, probe-student, finetune-teacher,
        /// finetune-student, distill, self-distill.
        #[arg(long, default_value = "distill")]
        procedure: String,
    },
    /// Run the experiment matrix and write report files.
    Matrix,
    /// Run one ablation table and write report files.
    Ablation {
        #[command(subcommand)]
        table: AblationTable,
    },
    /// Project embeddings of originals and synthetics onto principal
    /// components and export the coordinates.
    PcaExport {
        /// Number of leading task classes to fit on (default: all).
        #[arg(long, value_name = "INT")]
        classes: Option<usize>,
        /// Number of principal components to keep.
        #[arg(long, value_name = "INT", default_value_t = 2)]
        components: usize,
        /// Reuse a saved model checkpoint instead of probing a teacher.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
    },
    /// Re-render report files from a saved results.json.
    Report {
        /// A results.json produced by matrix or ablation.
        results: PathBuf,
    },
}

#[derive(Subcommand)]
enum AblationTable {
    /// Synthetic-data routing: which split feeds which loss term.
    DataRouting,
    /// Loss routing: task term, distillation term, or both, each with
    /// and without the synthetic pool.
    LossRouting,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(global: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.task_seed = seed;
    }
    for tc in [
        &mut cfg.pretrain,
        &mut cfg.probe,
        &mut cfg.finetune,
        &mut cfg.distill,
    ] {
        if let Some(seed) = global.seed {
            tc.seed = seed;
        }
        if global.strict_batches {
            tc.strict_batches = true;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn encoder_spec_for(cfg: &ExperimentConfig, arch: Arch) -> &EncoderSpec {
    match arch {
        Arch::Teacher => &cfg.teacher_encoder,
        Arch::Student => &cfg.student_encoder,
    }
}

/// Load a saved encoder or pretrain one for the given architecture.
fn obtain_encoder(
    cfg: &ExperimentConfig,
    task: &TaskData,
    arch: Arch,
    checkpoint: &Option<PathBuf>,
) -> Result<PretrainedEncoder> {
    match checkpoint {
        Some(path) => PretrainedEncoder::load(path),
        None => pretrain_encoder(&task.pretrain, encoder_spec_for(cfg, arch), &cfg.pretrain),
    }
}

/// Probe an encoder on the task with the configured head family.
fn probe_encoder(
    cfg: &ExperimentConfig,
    task: &TaskData,
    enc: &PretrainedEncoder,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let hs = head_spec_for(
        cfg.head_kind,
        enc.spec.output_dim,
        task.train.num_classes,
        head_regime_for(&enc.spec, cfg),
    );
    probe(enc, &task.train, &task.val, hs, train_cfg)
}

/// Build the configured synthetic pool; the latent-space mixer borrows
/// the given model as its frozen encoder.
fn build_pool(
    cfg: &ExperimentConfig,
    task: &TaskData,
    latent_model: Option<&Model>,
) -> Result<AugmentedDataset> {
    let latent = match cfg.mixer.interpolation {
        Interpolation::ConvexPixel => None,
        Interpolation::EncoderLatent => latent_model,
    };
    build_augmented(
        &task.train,
        &cfg.mixer,
        cfg.synthetic_multiplier,
        cfg.task_seed,
        latent,
    )
}

fn report_outcome(out_dir: &Path, outcome: &MatrixOutcome) -> Result<()> {
    write_report_files(out_dir, outcome)?;
    print!("{}", render_text(outcome));
    println!();
    for name in ["report.txt", "report.csv", "runs.csv", "results.json"] {
        println!("wrote {}", out_dir.join(name).display());
    }
    let wall: f64 = outcome.table.rows.iter().map(|r| r.wall_time_s).sum();
    eprintln!("total cell time: {wall:.1}s");
    Ok(())
}

fn summarize_run(label: &str, out: &TrainOutcome, test_accuracy: f64) {
    let val = out.log.last().map_or(0.0, |r| r.val_accuracy);
    println!(
        "{label}: val {val:.6}  test {test_accuracy:.6}  \
         synthetic-in-task {}  synthetic-in-kd {}  label-reads {}",
        out.instr.synthetic_in_task, out.instr.synthetic_in_kd, out.instr.label_reads
    );
}

fn procedure_from_name(name: &str) -> Result<Procedure> {
    Ok(match name {
        "probe-teacher" => Procedure::ProbeTeacher,
        "probe-student" => Procedure::ProbeStudent,
        "finetune-teacher" => Procedure::FinetuneTeacher,
        "finetune-student" => Procedure::FinetuneStudent,
        "distill" => Procedure::Distill,
        "distill-sd" | "distill+sd" => Procedure::DistillSd,
        "self-distill" => Procedure::SelfDistill,
        other => {
            return Err(taskdistill_core::Error::Config(format!(
                "unknown procedure `{other}`"
            )))
        }
    })
}

fn run(cli: Cli) -> Result<()> {
    let global = &cli.global;
    let cfg = load_config(global)?;
    let out_dir = &global.out;

    match &cli.cmd {
        Cmd::GenData { with_pool } => {
            let task = generate_task(&cfg.task, cfg.task_seed)?;
            fs::create_dir_all(out_dir)?;
            #[derive(serde::Serialize)]
            struct TaskExport<'a> {
                schema_version: u32,
                seed: u64,
                task: &'a TaskData,
            }
            let path = out_dir.join("task.json");
            let json = serde_json::to_string_pretty(&TaskExport {
                schema_version: 1,
                seed: cfg.task_seed,
                task: &task,
            })
            .map_err(|e| taskdistill_core::Error::Export(e.to_string()))?;
            fs::write(&path, json + "\n")?;
            println!(
                "task: {} pretrain / {} train / {} val / {} test samples, {} classes -> {}",
                task.pretrain.len(),
                task.train.len(),
                task.val.len(),
                task.test.len(),
                task.train.num_classes,
                path.display()
            );
            if *with_pool {
                let latent_model;
                let latent = match cfg.mixer.interpolation {
                    Interpolation::ConvexPixel => None,
                    Interpolation::EncoderLatent => {
                        let enc = pretrain_encoder(
                            &task.pretrain,
                            &cfg.teacher_encoder,
                            &cfg.pretrain,
                        )?;
                        latent_model = probe_encoder(&cfg, &task, &enc, &cfg.probe)?.model;
                        Some(&latent_model)
                    }
                };
                let pool = build_augmented(
                    &task.train,
                    &cfg.mixer,
                    cfg.synthetic_multiplier,
                    cfg.task_seed,
                    latent,
                )?;
                #[derive(serde::Serialize)]
                struct PoolExport<'a> {
                    schema_version: u32,
                    multiplier: usize,
                    synthetics: &'a [taskdistill_core::data::Sample],
                }
                let pool_path = out_dir.join("pool.json");
                let json = serde_json::to_string_pretty(&PoolExport {
                    schema_version: 1,
                    multiplier: pool.multiplier,
                    synthetics: &pool.synthetics,
                })
                .map_err(|e| taskdistill_core::Error::Export(e.to_string()))?;
                fs::write(&pool_path, json + "\n")?;
                println!(
                    "pool: {} synthetic samples -> {}",
                    pool.synthetics.len(),
                    pool_path.display()
                );
            }
        }

        Cmd::Pretrain { arch } => {
            let task = generate_task(&cfg.task, cfg.task_seed)?;
            let enc = pretrain_encoder(&task.pretrain, encoder_spec_for(&cfg, *arch), &cfg.pretrain)?;
            fs::create_dir_all(out_dir)?;
            let path = out_dir.join(format!("encoder-{arch}-{}.json", enc.seed));
            enc.save(&path)?;
            println!(
                "pretrained {arch} encoder (seed {}, checksum {:016x}) -> {}",
                enc.seed,
                enc.checksum(),
                path.display()
            );
        }

        Cmd::Probe { arch, encoder } => {
            let task = generate_task(&cfg.task, cfg.task_seed)?;
            let enc = obtain_encoder(&cfg, &task, *arch, encoder)?;
            let outcome = probe_encoder(&cfg, &task, &enc, &cfg.probe)?;
            let test = evaluate_accuracy(&outcome.model, &task.test)?;
            fs::create_dir_all(out_dir)?;
            let path = out_dir.join(format!("probe-{arch}-{}.json", cfg.probe.seed));
            outcome.model.save(&path)?;
            summarize_run(&format!("probe {arch} seed {}", cfg.probe.seed), &outcome, test);
            println!("saved {}", path.display());
        }

        Cmd::Finetune { arch, encoder } => {
            let task = generate_task(&cfg.task, cfg.task_seed)?;
            let enc = obtain_encoder(&cfg, &task, *arch, encoder)?;
            let hs = head_spec_for(
                cfg.head_kind,
                enc.spec.output_dim,
                task.train.num_classes,
                head_regime_for(&enc.spec, &cfg),
            );
            let model = Model::assemble(&enc, hs, cfg.finetune.seed, false)?;
            let outcome = finetune(model, &task.train, &task.val, &cfg.finetune)?;
            let test = evaluate_accuracy(&outcome.model, &task.test)?;
            fs::create_dir_all(out_dir)?;
            let path = out_dir.join(format!("finetune-{arch}-{}.json", cfg.finetune.seed));
            outcome.model.save(&path)?;
            summarize_run(
                &format!("finetune {arch} seed {}", cfg.finetune.seed),
                &outcome,
                test,
            );
            println!("saved {}", path.display());
        }

        Cmd::Distill { teacher, synthetic } => {
            let task = generate_task(&cfg.task, cfg.task_seed)?;
            let teacher_model = match teacher {
                Some(path) => Model::load(path)?,
                None => {
                    let mut pretrain_cfg = cfg.pretrain.clone();
                    pretrain_cfg.seed = cfg.teacher_seeds[0];
                    let mut probe_cfg = cfg.probe.clone();
                    probe_cfg.seed = cfg.teacher_seeds[0];
                    let enc =
                        pretrain_encoder(&task.pretrain, &cfg.teacher_encoder, &pretrain_cfg)?;
                    probe_encoder(&cfg, &task, &enc, &probe_cfg)?.model
                }
            };
            let student_enc =
                pretrain_encoder(&task.pretrain, &cfg.student_encoder, &cfg.pretrain)?;
            let aug = if *synthetic {
                build_pool(&cfg, &task, Some(&teacher_model))?
            } else {
                AugmentedDataset::originals_only(task.train.clone())
            };
            let hs = head_spec_for(
                cfg.head_kind,
                student_enc.spec.output_dim,
                task.train.num_classes,
                taskdistill_core::nn::HeadRegime::Student,
            );
            let student = Model::assemble(&student_enc, hs, cfg.distill.seed, false)?;
            let outcome = distill(student, &teacher_model, &aug, &task.val, &cfg.distill)?;
            let test = evaluate_accuracy(&outcome.model, &task.test)?;
            fs::create_dir_all(out_dir)?;
            let path = out_dir.join(format!("distilled-{}.json", cfg.distill.seed));
            outcome.model.save(&path)?;
            summarize_run(&format!("distill seed {}", cfg.distill.seed), &outcome, test);
            println!("saved {}", path.display());
        }

        Cmd::Grid { procedure } => {
            let proc = procedure_from_name(procedure)?;
            let (lr, wd) = tune(&cfg, proc, global.threads)?;
            println!("{}: lr {lr:e}  weight_decay {wd:e}", proc.name());
        }

        Cmd::Matrix => {
            let outcome = run_matrix(&cfg, global.threads)?;
            report_outcome(out_dir, &outcome)?;
        }

        Cmd::Ablation { table } => {
            let outcome = match table {
                AblationTable::DataRouting => run_ablation_data_routing(&cfg, global.threads)?,
                AblationTable::LossRouting => run_ablation_loss_routing(&cfg, global.threads)?,
            };
            report_outcome(out_dir, &outcome)?;
        }

        Cmd::PcaExport {
            classes,
            components,
            model,
        } => {
            let task = generate_task(&cfg.task, cfg.task_seed)?;
            let model = match model {
                Some(path) => Model::load(path)?,
                None => {
                    let mut pretrain_cfg = cfg.pretrain.clone();
                    pretrain_cfg.seed = cfg.teacher_seeds[0];
                    let mut probe_cfg = cfg.probe.clone();
                    probe_cfg.seed = cfg.teacher_seeds[0];
                    let enc =
                        pretrain_encoder(&task.pretrain, &cfg.teacher_encoder, &pretrain_cfg)?;
                    probe_encoder(&cfg, &task, &enc, &probe_cfg)?.model
                }
            };
            let aug = build_pool(&cfg, &task, Some(&model))?;
            let num_classes = task.train.num_classes;
            let subset: Vec<usize> = (0..classes.unwrap_or(num_classes).min(num_classes)).collect();
            let export = export_pca(&model, &aug, &subset, *components)?;
            fs::create_dir_all(out_dir)?;
            let coords = out_dir.join("pca.csv");
            let variance = out_dir.join("pca-variance.csv");
            write_pca_csv(&coords, &export)?;
            write_pca_variance_csv(&variance, &export)?;
            println!(
                "pca: {} rows on {} components over {} classes",
                export.rows.len(),
                components,
                subset.len()
            );
            println!("wrote {}", coords.display());
            println!("wrote {}", variance.display());
        }

        Cmd::Report { results } => {
            let outcome = read_results_json(results)?;
            report_outcome(out_dir, &outcome)?;
        }
    }
    Ok(())
}
