//! Experiment orchestration: versioned configuration, grid search,
//! multi-seed scheduling, statistical aggregation, report tables, and
//! the principal-component export.

pub mod pca;
pub mod report;
pub mod runs;

pub use pca::{export_pca, fit_pca, write_pca_csv, write_pca_variance_csv, PcaExport, PcaModel};
pub use report::{read_results_json, render_text, write_report_files, ReportRow, ReportTable};
pub use runs::{
    head_regime_for, head_spec_for, map_cells, run_ablation_data_routing, run_ablation_loss_routing,
    run_matrix, tune, CellResult, MatrixOutcome,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{MixerSpec, TaskGenConfig};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::nn::{EncoderSpec, HeadKind};
use crate::train::TrainConfig;

/// Re-export: test-set evaluation lives with the engine, the harness is
/// its main consumer.
pub use crate::train::evaluate_accuracy as evaluate;

/// Learning-rate / weight-decay candidate lists for the grid search.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lr: vec![1e-3, 3e-3, 1e-2],
            weight_decay: vec![1e-4, 1e-3],
        }
    }
}

/// The experiment rows the matrix knows how to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Procedure {
    ProbeTeacher,
    FinetuneTeacher,
    ProbeStudent,
    FinetuneStudent,
    Distill,
    #[serde(rename = "distill-sd", alias = "distill+sd")]
    DistillSd,
    SelfDistill,
}

impl Procedure {
    pub fn name(self) -> &'static str {
        match self {
            Procedure::ProbeTeacher => "probe-teacher",
            Procedure::FinetuneTeacher => "finetune-teacher",
            Procedure::ProbeStudent => "probe-student",
            Procedure::FinetuneStudent => "finetune-student",
            Procedure::Distill => "distill",
            Procedure::DistillSd => "distill+sd",
            Procedure::SelfDistill => "self-distill",
        }
    }
}

/// Everything one experiment needs, loadable from a versioned
/// structured-text file. The defaults describe the reference setup: a
/// 10x-width teacher probed on the generated task, a small-budget
/// student (20 train samples per class), and built-in mixing for the
/// synthetic pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task: TaskGenConfig,
    pub task_seed: u64,
    pub teacher_encoder: EncoderSpec,
    pub student_encoder: EncoderSpec,
    /// Prediction-head family used for teacher and student heads.
    pub head_kind: HeadKind,
    pub pretrain: TrainConfig,
    pub probe: TrainConfig,
    pub finetune: TrainConfig,
    pub distill: TrainConfig,
    pub mixer: MixerSpec,
    /// Synthetic pool size as a multiple of the train split.
    pub synthetic_multiplier: usize,
    pub grid: GridSpec,
    /// Run the grid search per procedure before the final runs.
    pub tune: bool,
    /// Student seeds; also the probe/finetune row seeds.
    pub seeds: Vec<u64>,
    /// Teacher pretrain/probe seeds for the distillation rows.
    pub teacher_seeds: Vec<u64>,
    /// Student runs per teacher in distillation rows (uses the first
    /// `runs_per_teacher` entries of `seeds`).
    pub runs_per_teacher: usize,
    pub procedures: Vec<Procedure>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // The reference task: 20 fine-grained classes (4 per superclass)
        // with wide within-class noise, so 20 labeled samples per class
        // leave real headroom between direct finetuning and the probed
        // teacher's soft structure.
        let task = TaskGenConfig {
            num_classes: 20,
            train_per_class: 20,
            offset_scale: 1.2,
            noise_sigma: 1.8,
            ..TaskGenConfig::default()
        };
        let pretrain = TrainConfig {
            epochs: 30,
            batch_size: 32,
            loss: LossConfig {
                kind: LossKind::TaskOnly,
                ..LossConfig::default()
            },
            augmentation: crate::data::AugmentationSpec {
                mixup_alpha: 0.0,
                ..crate::data::AugmentationSpec::default()
            },
            use_synthetic_for_kd: false,
            use_synthetic_for_task: false,
            ..TrainConfig::default()
        };
        let probe = TrainConfig {
            epochs: 30,
            ..pretrain.clone()
        };
        let finetune = TrainConfig {
            epochs: 80,
            ..pretrain.clone()
        };
        let distill = TrainConfig {
            epochs: 80,
            loss: LossConfig {
                kind: LossKind::Combined,
                alpha: 0.5,
                temperature: 2.0,
                ..LossConfig::default()
            },
            use_synthetic_for_kd: true,
            use_synthetic_for_task: false,
            ..pretrain.clone()
        };
        ExperimentConfig {
            schema_version: 1,
            task,
            task_seed: 0,
            teacher_encoder: EncoderSpec {
                input_dim: 32,
                hidden_widths: vec![640],
                activation: Default::default(),
                output_dim: 320,
            },
            student_encoder: EncoderSpec {
                input_dim: 32,
                hidden_widths: vec![64],
                activation: Default::default(),
                output_dim: 32,
            },
            head_kind: HeadKind::Mlp,
            pretrain,
            probe,
            finetune,
            distill,
            mixer: MixerSpec::default(),
            synthetic_multiplier: 1,
            grid: GridSpec::default(),
            tune: true,
            seeds: vec![0, 1, 2],
            teacher_seeds: vec![0, 1, 2],
            runs_per_teacher: 3,
            procedures: vec![
                Procedure::ProbeTeacher,
                Procedure::FinetuneTeacher,
                Procedure::ProbeStudent,
                Procedure::FinetuneStudent,
                Procedure::Distill,
                Procedure::DistillSd,
                Procedure::SelfDistill,
            ],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != 1 {
            return Err(Error::Config(format!(
                "unsupported config schema_version {}, expected 1",
                self.schema_version
            )));
        }
        self.task.validate()?;
        self.teacher_encoder.validate()?;
        self.student_encoder.validate()?;
        for (name, enc) in [
            ("teacher", &self.teacher_encoder),
            ("student", &self.student_encoder),
        ] {
            if enc.input_dim != self.task.d_in {
                return Err(Error::Config(format!(
                    "{name} encoder expects {} input dims, task generates {}",
                    enc.input_dim, self.task.d_in
                )));
            }
        }
        for (name, tc) in [
            ("pretrain", &self.pretrain),
            ("probe", &self.probe),
            ("finetune", &self.finetune),
            ("distill", &self.distill),
        ] {
            tc.validate()
                .map_err(|e| Error::Config(format!("[{name}] {e}")))?;
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if self.teacher_seeds.is_empty() {
            return Err(Error::Config("teacher_seeds must be non-empty".into()));
        }
        if self.runs_per_teacher == 0 || self.runs_per_teacher > self.seeds.len() {
            return Err(Error::Config(format!(
                "runs_per_teacher {} must lie in [1, {}] (one student seed per run)",
                self.runs_per_teacher,
                self.seeds.len()
            )));
        }
        if self.synthetic_multiplier == 0 {
            return Err(Error::Config(
                "synthetic_multiplier must be at least 1".into(),
            ));
        }
        if self.tune && (self.grid.lr.is_empty() || self.grid.weight_decay.is_empty()) {
            return Err(Error::Config(
                "tuning requested but the grid has an empty candidate list".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Mean and 95% half-width (1.96 times the population standard
/// deviation) of a metric list. The list is summed in a canonical
/// order, so the result is exactly permutation-invariant.
pub fn aggregate(metrics: &[f64]) -> Result<(f64, f64)> {
    if metrics.is_empty() {
        return Err(Error::Contract("aggregate over an empty metric list".into()));
    }
    let mut sorted = metrics.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, 1.96 * var.sqrt()))
}

/// Grid search over the cross product of candidates. `run_point` trains
/// one run and returns its validation accuracy; the best point wins,
/// with ties broken by smaller learning rate, then smaller decay.
/// Failed points are skipped; if every point fails the error lists all
/// of them.
pub fn run_grid<F>(grid: &GridSpec, mut run_point: F) -> Result<(f64, f64)>
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    if grid.lr.is_empty() || grid.weight_decay.is_empty() {
        return Err(Error::Config(
            "grid needs at least one lr and one weight_decay candidate".into(),
        ));
    }
    let mut points: Vec<(f64, f64)> = grid
        .lr
        .iter()
        .flat_map(|&lr| grid.weight_decay.iter().map(move |&wd| (lr, wd)))
        .collect();
    // Ascending order makes the "keep the current best on ties" rule
    // select the smallest lr, then the smallest decay.
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut best: Option<(f64, f64, f64)> = None;
    let mut failures = Vec::new();
    for (lr, wd) in points {
        match run_point(lr, wd) {
            Ok(acc) => {
                if best.is_none_or(|(b, _, _)| acc > b) {
                    best = Some((acc, lr, wd));
                }
            }
            Err(e) => failures.push(format!("lr={lr} weight_decay={wd}: {e}")),
        }
    }
    match best {
        Some((_, lr, wd)) => Ok((lr, wd)),
        None => Err(Error::GridAllFailed(failures)),
    }
}
