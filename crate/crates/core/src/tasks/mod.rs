//! Procedural toy datasets: two spatially aligned tasks (edge-to-image,
//! colorization) and one non-aligned task (subject relocation).

mod image;
mod metrics;
mod scene;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use image::Image;
pub use metrics::{
    edge_f1, extract_edges, extract_gray, find_blobs, pixel_mse, subject_fidelity, Blob, EdgeMap,
    COLOR_TOLERANCE, EDGE_THRESHOLD, FOREGROUND_DISTANCE,
};
pub use scene::{ShapeKind, ShapeSpec, ToyScene};

use crate::error::{Error, Result};
use crate::rope::PositionMode;

pub const IMAGE_SIDE: usize = 16;
/// Indices at or above this are reserved for held-out evaluation.
pub const EVAL_OFFSET: u64 = 1 << 32;
pub const TEXT_LEN: usize = 4;

/// Text-token vocabulary layout.
pub mod tokens {
    pub const PAD: usize = 0;
    pub const TASK_EDGE: usize = 1;
    pub const TASK_COLOR: usize = 2;
    pub const TASK_RELOCATE: usize = 3;
    pub const SCENE_BG: usize = 4;
    pub const RELOCATE_BG: usize = 8;
    pub const SHAPE_COLOR: usize = 12;
    pub const LOCATION: usize = 18;
    /// One past the largest id in use.
    pub const USED: usize = 27;
}

/// Dark backgrounds of the aligned tasks.
pub const SCENE_BACKGROUNDS: [[f64; 3]; 4] = [
    [0.05, 0.05, 0.10],
    [0.12, 0.02, 0.06],
    [0.02, 0.10, 0.06],
    [0.08, 0.08, 0.08],
];

/// Bright shape and subject colors, all with luminance above 0.74.
pub const SHAPE_COLORS: [[f64; 3]; 6] = [
    [1.00, 0.90, 0.20],
    [0.30, 1.00, 1.00],
    [1.00, 0.60, 1.00],
    [0.95, 0.95, 0.95],
    [0.55, 1.00, 0.45],
    [1.00, 0.70, 0.30],
];

/// Relocation backgrounds, disjoint from [`SHAPE_COLORS`].
pub const RELOCATE_BACKGROUNDS: [[f64; 3]; 4] = [
    [0.30, 0.18, 0.10],
    [0.10, 0.15, 0.35],
    [0.12, 0.30, 0.15],
    [0.30, 0.30, 0.36],
];

/// Plain backdrop of relocation conditions.
pub const NEUTRAL: [f64; 3] = [0.5, 0.5, 0.5];

/// Subject centers for the eight non-central cells of a 3x3 layout.
pub const LOCATIONS: [(f64, f64); 8] = [
    (4.0, 4.0),
    (4.0, 8.0),
    (4.0, 12.0),
    (8.0, 4.0),
    (8.0, 12.0),
    (12.0, 4.0),
    (12.0, 8.0),
    (12.0, 12.0),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    EdgeToImage,
    Colorization,
    SubjectRelocation,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::EdgeToImage,
        TaskKind::Colorization,
        TaskKind::SubjectRelocation,
    ];

    pub fn alignment(self) -> PositionMode {
        match self {
            TaskKind::SubjectRelocation => PositionMode::NonAligned,
            _ => PositionMode::Aligned,
        }
    }

    fn id(self) -> u64 {
        match self {
            TaskKind::EdgeToImage => 1,
            TaskKind::Colorization => 2,
            TaskKind::SubjectRelocation => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub alignment: PositionMode,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            alignment: kind.alignment(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alignment != self.kind.alignment() {
            return Err(Error::Config(format!(
                "{:?} is {:?}, not {:?}",
                self.kind,
                self.kind.alignment(),
                self.alignment
            )));
        }
        Ok(())
    }
}

/// Generator record for one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub task: TaskKind,
    pub seed: u64,
    pub index: u64,
    pub background: [f64; 3],
    pub shapes: Vec<ShapeSpec>,
    /// Relocated subject as drawn in the target.
    pub subject: Option<ShapeSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub condition: Image,
    pub target: Image,
    pub text: Vec<usize>,
    pub meta: PairMeta,
}

fn color_token(color: &[f64; 3]) -> usize {
    let k = SHAPE_COLORS.iter().position(|c| c == color).unwrap_or(0);
    tokens::SHAPE_COLOR + k
}

/// Deterministic pair `index` of `spec` under `seed`.
pub fn gen_pair(spec: TaskSpec, seed: u64, index: u64) -> Pair {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_add(spec.kind.id().wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    rng.set_stream(index);
    let side = IMAGE_SIDE;
    match spec.kind {
        TaskKind::EdgeToImage | TaskKind::Colorization => {
            let bg_k = rng.gen_range(0..SCENE_BACKGROUNDS.len());
            let count = rng.gen_range(1..=2);
            let shapes: Vec<ShapeSpec> = (0..count)
                .map(|_| {
                    let color = SHAPE_COLORS[rng.gen_range(0..SHAPE_COLORS.len())];
                    scene::random_shape(&mut rng, side, color)
                })
                .collect();
            let task_tok = if spec.kind == TaskKind::EdgeToImage {
                tokens::TASK_EDGE
            } else {
                tokens::TASK_COLOR
            };
            let text = vec![
                task_tok,
                tokens::SCENE_BG + bg_k,
                color_token(&shapes[0].color),
                shapes.get(1).map_or(tokens::PAD, |s| color_token(&s.color)),
            ];
            let scene = ToyScene::render(side, side, SCENE_BACKGROUNDS[bg_k], shapes);
            let condition = if spec.kind == TaskKind::EdgeToImage {
                extract_edges(&scene.canvas).to_image()
            } else {
                extract_gray(&scene.canvas)
            };
            Pair {
                condition,
                text,
                meta: PairMeta {
                    task: spec.kind,
                    seed,
                    index,
                    background: scene.background,
                    shapes: scene.shapes,
                    subject: None,
                },
                target: scene.canvas,
            }
        }
        TaskKind::SubjectRelocation => {
            let kind = ShapeKind::ALL[rng.gen_range(0..3)];
            let size = rng.gen_range(5..=7usize);
            let color = SHAPE_COLORS[rng.gen_range(0..SHAPE_COLORS.len())];
            let bg_k = rng.gen_range(0..RELOCATE_BACKGROUNDS.len());
            let loc = rng.gen_range(0..LOCATIONS.len());
            let centered = ShapeSpec {
                kind,
                center: (side as f64 / 2.0, side as f64 / 2.0),
                size,
                color,
            };
            let moved = ShapeSpec {
                center: LOCATIONS[loc],
                ..centered
            };
            let condition = ToyScene::render(side, side, NEUTRAL, vec![centered]).canvas;
            let scene = ToyScene::render(side, side, RELOCATE_BACKGROUNDS[bg_k], vec![moved]);
            Pair {
                condition,
                text: vec![
                    tokens::TASK_RELOCATE,
                    tokens::RELOCATE_BG + bg_k,
                    tokens::LOCATION + loc,
                    tokens::PAD,
                ],
                meta: PairMeta {
                    task: spec.kind,
                    seed,
                    index,
                    background: scene.background,
                    shapes: scene.shapes,
                    subject: Some(moved),
                },
                target: scene.canvas,
            }
        }
    }
}

/// Indexed source of training pairs.
pub trait PairSource: Send + Sync {
    fn pair(&self, index: u64) -> Pair;
}

/// One task under one data seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub seed: u64,
}

impl Dataset {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        Self {
            spec: TaskSpec::new(kind),
            seed,
        }
    }
}

impl PairSource for Dataset {
    fn pair(&self, index: u64) -> Pair {
        gen_pair(self.spec, self.seed, index)
    }
}

/// Round-robin interleaving of several datasets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mixture(pub Vec<Dataset>);

impl PairSource for Mixture {
    fn pair(&self, index: u64) -> Pair {
        let k = self.0.len() as u64;
        self.0[(index % k) as usize].pair(index / k)
    }
}

#[derive(Serialize)]
struct ManifestLine<'a> {
    seed: u64,
    index: u64,
    task: TaskKind,
    metadata: &'a PairMeta,
}

/// Writes one JSON object per pair: `seed`, `index`, `task`, `metadata`.
pub fn write_manifest<W: Write>(out: &mut W, pairs: &[Pair]) -> Result<()> {
    for p in pairs {
        let line = ManifestLine {
            seed: p.meta.seed,
            index: p.meta.index,
            task: p.meta.task,
            metadata: &p.meta,
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
