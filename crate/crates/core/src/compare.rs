//! Paired training runs that compare integration strategies and position
//! policies under identical initialization, data order and noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{train, LossCurve, TrainConfig, TrainOutcome};
use crate::model::{Dit, Integration, ModelConfig};
use crate::rope::PositionMode;
use crate::tasks::{Dataset, TaskKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub curve: LossCurve,
    /// Mean loss of the last logging window.
    pub final_loss: f64,
}

/// Trains one arm: `base` re-derived under `config` with adapters seeded by
/// `seed`, then trained with `cfg.seed = seed`.
pub fn run_arm(base: &Dit, config: &ModelConfig, dataset: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    let model = base.derive(config.clone(), seed)?;
    train(&model, dataset, &TrainConfig { seed, ..cfg.clone() })
}

fn arm(name: &str, out: &TrainOutcome) -> Result<Arm> {
    let final_loss = out
        .curve
        .final_loss()
        .ok_or_else(|| Error::Argument("comparison needs at least one training step".into()))?;
    Ok(Arm {
        name: name.to_string(),
        curve: out.curve.clone(),
        final_loss,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationVerdict {
    UnifiedLower,
    AddingLower,
    Tie,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationRun {
    pub seed: u64,
    pub unified: Arm,
    pub adding: Arm,
    pub verdict: IntegrationVerdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationReport {
    pub task: TaskKind,
    pub steps: usize,
    pub runs: Vec<IntegrationRun>,
    /// Seeds whose unified arm ended strictly lower.
    pub unified_lower: usize,
}

/// Unified-sequence versus feature-adding on an aligned task. `on_arm` sees
/// every trained arm as `(seed, integration, outcome)`.
pub fn compare_integrations(
    base: &Dit,
    template: &ModelConfig,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seeds: &[u64],
    mut on_arm: impl FnMut(u64, Integration, &TrainOutcome),
) -> Result<IntegrationReport> {
    dataset.spec.validate()?;
    if dataset.spec.alignment != PositionMode::Aligned {
        return Err(Error::Config(format!(
            "integration comparison needs an aligned task, {:?} is not",
            dataset.spec.kind
        )));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut arms = Vec::with_capacity(2);
        for integration in [Integration::UnifiedSequence, Integration::FeatureAdding] {
            let config = ModelConfig {
                integration,
                position_mode: PositionMode::Aligned,
                ..template.clone()
            };
            let out = run_arm(base, &config, dataset, cfg, seed)?;
            on_arm(seed, integration, &out);
            arms.push(out);
        }
        let unified = arm("unified", &arms[0])?;
        let adding = arm("adding", &arms[1])?;
        let verdict = if unified.final_loss < adding.final_loss {
            IntegrationVerdict::UnifiedLower
        } else if adding.final_loss < unified.final_loss {
            IntegrationVerdict::AddingLower
        } else {
            IntegrationVerdict::Tie
        };
        log::info!("seed {seed}: unified {:.5} adding {:.5}", unified.final_loss, adding.final_loss);
        runs.push(IntegrationRun {
            seed,
            unified,
            adding,
            verdict,
        });
    }
    Ok(IntegrationReport {
        task: dataset.spec.kind,
        steps: cfg.steps,
        unified_lower: runs.iter().filter(|r| r.verdict == IntegrationVerdict::UnifiedLower).count(),
        runs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionVerdict {
    ShiftedFaster,
    SharedFaster,
    Tie,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionRun {
    pub seed: u64,
    pub shifted: Arm,
    pub shared: Arm,
    /// First logged step at which each arm is at or below the shared arm's
    /// final loss.
    pub shifted_steps: Option<usize>,
    pub shared_steps: Option<usize>,
    pub verdict: PositionVerdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionReport {
    pub task: TaskKind,
    pub steps: usize,
    pub runs: Vec<PositionRun>,
    /// Seeds whose shifted arm reached the shared arm's final loss in fewer
    /// steps than the shared arm itself.
    pub shifted_faster: usize,
}

/// Shifted (`Δ = (0, W)`) versus shared condition positions on a non-aligned
/// task. `on_arm` sees `(seed, position_mode, outcome)`.
pub fn compare_positions(
    base: &Dit,
    template: &ModelConfig,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seeds: &[u64],
    mut on_arm: impl FnMut(u64, PositionMode, &TrainOutcome),
) -> Result<PositionReport> {
    dataset.spec.validate()?;
    if dataset.spec.alignment != PositionMode::NonAligned {
        return Err(Error::Config(format!(
            "position comparison needs a non-aligned task, {:?} is aligned",
            dataset.spec.kind
        )));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut arms = Vec::with_capacity(2);
        for mode in [PositionMode::NonAligned, PositionMode::Aligned] {
            let config = ModelConfig {
                integration: Integration::UnifiedSequence,
                position_mode: mode,
                ..template.clone()
            };
            let out = run_arm(base, &config, dataset, cfg, seed)?;
            on_arm(seed, mode, &out);
            arms.push(out);
        }
        let shifted = arm("shifted", &arms[0])?;
        let shared = arm("shared", &arms[1])?;
        let a = shifted.curve.steps_to_reach(shared.final_loss);
        let b = shared.curve.steps_to_reach(shared.final_loss);
        let verdict = match (a, b) {
            (Some(a), Some(b)) if a < b => PositionVerdict::ShiftedFaster,
            (Some(a), Some(b)) if a == b => PositionVerdict::Tie,
            _ => PositionVerdict::SharedFaster,
        };
        log::info!(
            "seed {seed}: shifted {:.5} (reaches shared at {a:?}) shared {:.5}",
            shifted.final_loss,
            shared.final_loss
        );
        runs.push(PositionRun {
            seed,
            shifted,
            shared,
            shifted_steps: a,
            shared_steps: b,
            verdict,
        });
    }
    Ok(PositionReport {
        task: dataset.spec.kind,
        steps: cfg.steps,
        shifted_faster: runs.iter().filter(|r| r.verdict == PositionVerdict::ShiftedFaster).count(),
        runs,
    })
}

fn arm_lines(seed: u64, arms: [&Arm; 2]) -> String {
    arms.iter().map(|a| a.curve.to_lines(&format!("{}/{seed}", a.name))).collect()
}

impl IntegrationReport {
    /// Gnuplot-friendly `step arm/seed loss` lines.
    pub fn to_lines(&self) -> String {
        self.runs.iter().map(|r| arm_lines(r.seed, [&r.unified, &r.adding])).collect()
    }
}

impl PositionReport {
    pub fn to_lines(&self) -> String {
        self.runs.iter().map(|r| arm_lines(r.seed, [&r.shifted, &r.shared])).collect()
    }
}
