//! Controllability evaluation on held-out toy pairs and attention diagnostics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{diag_dominance, Modality};
use crate::error::{Error, Result};
use crate::flow::{latent_noise, sample, FlowSample};
use crate::model::{Dit, ForwardInput, Integration};
use crate::tasks::{
    edge_f1, extract_edges, extract_gray, pixel_mse, subject_fidelity, Dataset, EdgeMap, Image, Pair,
    PairSource, TaskKind, EVAL_OFFSET,
};

/// Default flow time for attention probes.
pub const PROBE_T: f64 = 0.9;

/// Held-out pair `i` of a dataset.
pub fn held_out(dataset: &Dataset, i: u64) -> Pair {
    dataset.pair(EVAL_OFFSET + i)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    EdgeF1,
    Mse,
    SubjectFidelity,
}

impl Metric {
    pub fn for_task(kind: TaskKind) -> Self {
        match kind {
            TaskKind::EdgeToImage => Metric::EdgeF1,
            TaskKind::Colorization => Metric::Mse,
            TaskKind::SubjectRelocation => Metric::SubjectFidelity,
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != Metric::Mse
    }
}

/// Condition-fidelity score of one generated image against its pair.
pub fn score(generated: &Image, pair: &Pair) -> Result<f64> {
    match Metric::for_task(pair.meta.task) {
        Metric::EdgeF1 => {
            let truth = edge_map_of(&pair.condition)?;
            edge_f1(&extract_edges(generated), &truth)
        }
        Metric::Mse => pixel_mse(&extract_gray(generated), &pair.condition),
        Metric::SubjectFidelity => subject_fidelity(generated, &pair.meta),
    }
}

fn edge_map_of(img: &Image) -> Result<EdgeMap> {
    let bits = (0..img.height() * img.width())
        .map(|k| img.pixel(k / img.width(), k % img.width())[0] > 0.5)
        .collect();
    EdgeMap::new(img.height(), img.width(), bits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub metric: Metric,
    pub gamma: f64,
    pub n_steps: usize,
    pub per_sample: Vec<f64>,
    /// Mean of `per_sample`; `None` when no samples were drawn.
    pub aggregate: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub n: usize,
    pub gamma: f64,
    pub n_steps: usize,
    pub seed: u64,
}

/// Per-sample sampler seed.
fn sample_seed(seed: u64, i: u64) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(i)
}

/// Samples `n` held-out pairs and scores each against its condition.
pub fn evaluate(model: &Dit, dataset: &Dataset, s: &EvalSettings) -> Result<EvalReport> {
    dataset.spec.validate()?;
    if model.config().integration != Integration::None
        && model.config().position_mode != dataset.spec.alignment
    {
        return Err(Error::Config(format!(
            "model positions are {:?} but {:?} is {:?}",
            model.config().position_mode,
            dataset.spec.kind,
            dataset.spec.alignment
        )));
    }
    let per_sample = (0..s.n as u64)
        .map(|i| {
            let pair = held_out(dataset, i);
            let img = sample(model, &pair.text, Some(&pair.condition), s.gamma, s.n_steps, sample_seed(s.seed, i))?;
            score(&img, &pair)
        })
        .collect::<Result<Vec<f64>>>()?;
    let aggregate = (!per_sample.is_empty()).then(|| per_sample.iter().sum::<f64>() / per_sample.len() as f64);
    Ok(EvalReport {
        task: dataset.spec.kind,
        metric: Metric::for_task(dataset.spec.kind),
        gamma: s.gamma,
        n_steps: s.n_steps,
        per_sample,
        aggregate,
    })
}

/// Forward input for held-out pair `i` noised to time `t`.
pub fn probe_input(model: &Dit, pair: &Pair, t: f64, seed: u64) -> Result<(FlowSample, crate::Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x1 = latent_noise(model, &mut rng)?;
    let x0 = model.codec().encode_image(&pair.target)?;
    let cond = model.codec().encode_image(&pair.condition)?;
    Ok((FlowSample::new(x0, x1, t)?, cond))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    /// Mean over samples, blocks and heads.
    pub mean: f64,
    /// Mean over samples and heads, per block.
    pub per_block: Vec<f64>,
    /// `1 / N`, the score of a uniform block.
    pub uniform: f64,
}

/// Diagonal dominance of the row-renormalized image-to-condition attention
/// block, averaged over `n` held-out pairs noised to time `t`.
pub fn dominance(model: &Dit, dataset: &Dataset, n: usize, t: f64, gamma: f64, seed: u64) -> Result<DominanceReport> {
    if model.config().integration != Integration::UnifiedSequence {
        return Err(Error::Config("attention diagnostics need unified-sequence integration".into()));
    }
    if n == 0 {
        return Err(Error::Argument("dominance needs at least one sample".into()));
    }
    let blocks = model.config().n_blocks();
    let mut per_block = vec![0.0; blocks];
    for i in 0..n as u64 {
        let pair = held_out(dataset, i);
        let (fs, cond) = probe_input(model, &pair, t, sample_seed(seed, i))?;
        let maps = model.attention_maps(ForwardInput {
            noisy: &fs.xt,
            t,
            text: &pair.text,
            cond: Some(&cond),
            gamma,
        })?;
        for (b, map) in maps.iter().enumerate() {
            let mut s = 0.0;
            for h in 0..map.heads() {
                s += diag_dominance(&map.conditional_block(h, Modality::NoisyImage, Modality::CondImage)?)?;
            }
            per_block[b] += s / map.heads() as f64;
        }
    }
    per_block.iter_mut().for_each(|v| *v /= n as f64);
    Ok(DominanceReport {
        mean: per_block.iter().sum::<f64>() / blocks as f64,
        per_block,
        uniform: 1.0 / model.config().n_tokens() as f64,
    })
}

/// Total attention mass image tokens put on condition tokens, summed over
/// blocks and heads, for one fixed input.
pub fn cross_mass(model: &Dit, input: ForwardInput<'_>) -> Result<f64> {
    model
        .attention_maps(input)?
        .iter()
        .map(|m| m.cross_mass(Modality::NoisyImage, Modality::CondImage))
        .sum()
}
