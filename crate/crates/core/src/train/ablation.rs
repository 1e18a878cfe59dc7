//! Fixed-budget train-and-evaluate runs over experiment grids.

use crate::backbone::{synthetic_corpus, synthetic_pretrain, ModelConfig, PretrainConfig};
use crate::data::{curate, CurationConfig};
use crate::env::{collect, Baselines, CollectPolicy, MazeConfig};
use crate::error::Result;
use crate::par::Exec;
use crate::trajmod::{DecisionModel, LossMode};

use super::{train, TrainConfig, TrainEval, TrainOptions};

/// One cell of an experiment grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationSpec {
    pub pretrain: bool,
    /// Noisy-expert data (`sigma`) instead of the noiseless expert.
    pub noise: bool,
    pub mode: LossMode,
    pub model: ModelConfig,
    /// Training windows kept after curation.
    pub data_size: usize,
}

/// Settings shared by every cell.
#[derive(Clone, Debug)]
pub struct AblationBase {
    pub maze: MazeConfig,
    pub curation: CurationConfig,
    pub training: TrainConfig,
    pub baselines: Baselines,
    pub episodes: usize,
    pub sigma: f32,
    pub pretrain_steps: usize,
    pub seed: u64,
    pub exec: Exec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub params: usize,
    pub windows: usize,
    pub best_return: f64,
    pub best_score: f64,
    pub steps_to_best: usize,
}

pub const ABLATION_CSV_HEADER: &str =
    "pretrain,noise,mode,d_model,n_layers,n_heads,params,data_size,windows,best_return,best_score,steps_to_best";

impl AblationRow {
    pub fn csv_line(&self) -> String {
        let s = &self.spec;
        format!(
            "{},{},{},{},{},{},{},{},{},{:.4},{:.4},{}",
            s.pretrain,
            s.noise,
            s.mode.as_str(),
            s.model.d_model,
            s.model.n_layers,
            s.model.n_heads,
            self.params,
            s.data_size,
            self.windows,
            self.best_return,
            self.best_score,
            self.steps_to_best
        )
    }
}

/// Collects, curates, optionally pretrains, trains for the fixed step
/// budget of `base.training` and reports the best evaluation.
pub fn ablation_run(spec: &AblationSpec, base: &AblationBase) -> Result<AblationRow> {
    let policy = if spec.noise {
        CollectPolicy::Noisy { sigma: base.sigma }
    } else {
        CollectPolicy::Expert
    };
    let data = collect(&base.maze, policy, base.episodes, base.seed, base.exec)?;
    let curation = CurationConfig {
        mode: spec.mode,
        max_windows: Some(spec.data_size),
        ..base.curation.clone()
    };
    let curation = if spec.mode == LossMode::None {
        curation.uncurated()
    } else {
        curation
    };
    let (windows, _) = curate(&data, &curation, base.seed, base.exec)?;

    let mut model = DecisionModel::new(&spec.model, base.seed)?;
    if spec.pretrain && base.pretrain_steps > 0 {
        let corpus = synthetic_corpus(&model.vocab, 64, spec.model.max_positions.min(48), base.seed);
        let cfg = PretrainConfig {
            seed: base.seed,
            exec: base.exec,
            ..Default::default()
        };
        synthetic_pretrain(&model.backbone, &mut model.params, &corpus, base.pretrain_steps, &cfg)?;
    }
    let opts = TrainOptions {
        config: base.training.clone(),
        mode: spec.mode,
        window: curation.window,
        seed: base.seed,
        exec: base.exec,
        eval: Some(TrainEval {
            maze: base.maze.clone(),
            baselines: base.baselines,
            seed: base.seed.wrapping_add(1_000_003),
        }),
        out_dir: None,
        config_hash: String::new(),
    };
    let report = train(&mut model, &windows, &opts)?;
    Ok(AblationRow {
        spec: spec.clone(),
        params: model.param_count(),
        windows: windows.len(),
        best_return: report.best_return.unwrap_or(f64::NAN),
        best_score: report.best_score.unwrap_or(f64::NAN),
        steps_to_best: report.best_step.unwrap_or(0),
    })
}

#[derive(Clone, Debug)]
pub struct ScaleSweep {
    pub rows: Vec<AblationRow>,
    /// Best return of the largest model is nondecreasing in data size.
    pub largest_model_monotone: bool,
}

impl ScaleSweep {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    pub fn monotonicity_report(&self) -> String {
        let largest = self.rows.iter().map(|r| r.params).max().unwrap_or(0);
        let series: Vec<String> = self
            .rows
            .iter()
            .filter(|r| r.params == largest)
            .map(|r| format!("{}:{:.2}", r.spec.data_size, r.best_return))
            .collect();
        format!(
            "largest model ({largest} params) best return by data size: {} -> {}",
            series.join(" "),
            if self.largest_model_monotone {
                "nondecreasing"
            } else {
                "not monotone"
            }
        )
    }
}

/// Every model size against every data size, in row-major order.
pub fn scale_sweep(models: &[ModelConfig], data_sizes: &[usize], template: &AblationSpec, base: &AblationBase) -> Result<ScaleSweep> {
    let mut rows = Vec::with_capacity(models.len() * data_sizes.len());
    for m in models {
        for &n in data_sizes {
            let spec = AblationSpec {
                model: m.clone(),
                data_size: n,
                ..template.clone()
            };
            rows.push(ablation_run(&spec, base)?);
        }
    }
    let largest = rows.iter().map(|r| r.params).max().unwrap_or(0);
    let mut series: Vec<&AblationRow> = rows.iter().filter(|r| r.params == largest).collect();
    series.sort_by_key(|r| r.spec.data_size);
    let largest_model_monotone = series.windows(2).all(|p| p[1].best_return >= p[0].best_return);
    Ok(ScaleSweep {
        rows,
        largest_model_monotone,
    })
}
