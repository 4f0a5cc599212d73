//! Acceptance run. Every criterion is checked at its stated tolerance and
//! reported on one `PASS`/`FAIL` line; the process exits nonzero if any fail.
//!
//! The training criteria share one pretrained base model and reuse arms
//! where a criterion only needs a model another criterion already trained.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use common::checks::{
    base_preservation, bias_neutrality, closed_form_lora, cross_mass_curve, random_config, rope_properties,
    serialization,
};
use common::{gradient_suite, GRAD_TOL};
use tokenctl::checkpoint::Checkpoint;
use tokenctl::compare::{compare_integrations, compare_positions, run_arm};
use tokenctl::eval::{dominance, evaluate, EvalSettings, PROBE_T};
use tokenctl::flow::{train_with, TrainConfig, TrainTarget};
use tokenctl::model::{AdapterDepth, Dit, Integration, ModelConfig};
use tokenctl::tasks::{Dataset, Mixture, TaskKind};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const MAJORITY: usize = 4;

const BASE_STEPS: usize = 20_000;
const BASE_LR: f64 = 1e-3;
const BASE_SEED: u64 = 99;
const BASE_DATA_SEED: u64 = 1000;

const ADAPTER_STEPS: usize = 3000;
const ADAPTER_LR: f64 = 5e-3;
const DATA_SEED: u64 = 0;
/// Training length of the models scored for controllability, attention and
/// strength. Comparisons and ablations use `ADAPTER_STEPS`.
const TRAINED_STEPS: usize = 12_000;

const EVAL_N: usize = 200;
const EVAL_STEPS: usize = 20;
const EVAL_SEED: u64 = 7;
const DOMINANCE_N: usize = 20;

const F1_FLOOR: f64 = 0.5;
const MSE_FRACTION: f64 = 0.25;
const DOMINANCE_FACTOR: f64 = 3.0;
/// Drop from the first logging window to the window ending at step 2000 on
/// the seed-0 unified arm. The fixed-seed run measures 21.2%.
const LOSS_REDUCTION: f64 = 0.15;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Report {
    lines: Vec<(u8, Outcome)>,
    extra_failures: usize,
}

impl Report {
    fn record(&mut self, id: u8, name: &'static str, f: impl FnOnce() -> Outcome) {
        let t0 = Instant::now();
        let o = f();
        let line = format!(
            "{} criterion {id:>2} {name}: {} ({:.0}s)\n",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
        // Bypasses any output capture so the line always reaches the log.
        let mut out = std::io::stdout().lock();
        out.write_all(line.as_bytes()).unwrap();
        out.flush().unwrap();
        self.lines.push((id, o));
    }
}

impl Report {
    /// Supplementary check outside the numbered criteria.
    fn note(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} check {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.extra_failures += usize::from(!pass);
    }
}

fn progress(msg: &str) {
    let mut err = std::io::stderr().lock();
    writeln!(err, "  .. {msg}").unwrap();
}

fn adapter_cfg() -> TrainConfig {
    TrainConfig {
        steps: ADAPTER_STEPS,
        lr: ADAPTER_LR,
        loss_log_every: 250,
        ..TrainConfig::default()
    }
}

fn trained(base: &Dit, ds: &Dataset) -> Dit {
    let cfg = TrainConfig {
        steps: TRAINED_STEPS,
        ..adapter_cfg()
    };
    run_arm(base, &ModelConfig::default(), ds, &cfg, SEEDS[0]).unwrap().model
}

fn eval(model: &Dit, ds: &Dataset, gamma: f64) -> f64 {
    let s = EvalSettings {
        n: EVAL_N,
        gamma,
        n_steps: EVAL_STEPS,
        seed: EVAL_SEED,
    };
    evaluate(model, ds, &s).unwrap().aggregate.unwrap()
}

/// Unconditional base pretrained on the targets of every task.
fn pretrain_base() -> Dit {
    let cfg = ModelConfig {
        integration: Integration::None,
        ..ModelConfig::default()
    };
    let init = Dit::new(cfg, 0).unwrap();
    let mix = Mixture(TaskKind::ALL.iter().map(|&k| Dataset::new(k, BASE_DATA_SEED)).collect());
    let tc = TrainConfig {
        steps: BASE_STEPS,
        lr: BASE_LR,
        seed: BASE_SEED,
        target: TrainTarget::Base,
        loss_log_every: 1000,
        ..TrainConfig::default()
    };
    let out = train_with(&init, &mix, &tc, |p, _| {
        if p.step % 5000 == 0 {
            progress(&format!("base step {} loss {:.4}", p.step, p.loss));
        }
    })
    .unwrap();
    out.model
}

/// Fresh model with no training at all.
fn untrained(config: ModelConfig) -> Dit {
    Dit::new(config, 0).unwrap()
}

fn majority(count: usize) -> bool {
    count >= MAJORITY
}

fn main() {
    let mut report = Report { lines: Vec::new(), extra_failures: 0 };

    report.record(1, "gradient suite", || {
        let t0 = Instant::now();
        let suite = gradient_suite(20);
        let secs = t0.elapsed().as_secs_f64();
        let (worst_name, worst) = suite
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, e)| (n.clone(), *e))
            .unwrap();
        outcome(
            worst < GRAD_TOL && secs < 60.0,
            format!("{} cases x 20 seeds, worst {worst_name} {worst:.2e} < {GRAD_TOL:e}, {secs:.1}s < 60s", suite.len()),
        )
    });

    report.record(2, "bias neutrality", || {
        let runs: Vec<(bool, f64)> = (0..100).map(bias_neutrality).collect();
        let exact = runs.iter().filter(|r| r.0).count();
        let worst = runs.iter().map(|r| r.1).fold(0.0, f64::max);
        outcome(
            exact == runs.len() && worst < 1e-10,
            format!("gamma=1 bit-exact {exact}/100, gamma=0 worst {worst:.2e} < 1e-10"),
        )
    });

    report.record(3, "base preservation", || {
        let runs: Vec<(bool, bool, bool)> = (0..100).map(base_preservation).collect();
        let gates = runs.iter().filter(|r| r.0).count();
        let zero = runs.iter().filter(|r| r.1).count();
        let none = runs.iter().filter(|r| r.2).count();
        outcome(
            gates == 100 && zero == 100 && none == 100,
            format!("bit-identical: closed gates {gates}/100, zero-init {zero}/100, integration none {none}/100"),
        )
    });

    report.record(4, "rope relative position", || {
        let runs: Vec<(f64, f64)> = (0..200).map(rope_properties).collect();
        let rel = runs.iter().map(|r| r.0).fold(0.0, f64::max);
        let norm = runs.iter().map(|r| r.1).fold(0.0, f64::max);
        outcome(
            rel < 1e-10 && norm < 1e-12,
            format!("worst relative {rel:.2e} < 1e-10, worst pair norm {norm:.2e} < 1e-12"),
        )
    });

    report.record(5, "parameter accounting", || {
        let mismatches = (0..200)
            .filter(|&s| {
                let cfg = random_config(s);
                Dit::new(cfg.clone(), s).unwrap().count_trainable().lora_params != closed_form_lora(&cfg)
            })
            .count();
        let count = untrained(ModelConfig::default()).count_trainable();
        outcome(
            mismatches == 0 && count.ratio < 0.02,
            format!(
                "closed form mismatches {mismatches}/200; default {} / {} = {:.2}% < 2%",
                count.lora_params,
                count.base_params,
                100.0 * count.ratio
            ),
        )
    });

    let t0 = Instant::now();
    progress(&format!("pretraining base for {BASE_STEPS} steps"));
    let base = pretrain_base();
    progress(&format!("base ready in {:.0}s", t0.elapsed().as_secs_f64()));
    let edges = Dataset::new(TaskKind::EdgeToImage, DATA_SEED);
    let edge_cfg = ModelConfig::default();
    let mut unified: BTreeMap<u64, Dit> = BTreeMap::new();
    let mut first_curve = None;

    report.record(6, "unified sequence vs feature adding", || {
        let r = compare_integrations(&base, &edge_cfg, &edges, &adapter_cfg(), &SEEDS, |seed, integration, out| {
            progress(&format!("seed {seed} {integration:?} final {:.4}", out.curve.final_loss().unwrap()));
            if integration == Integration::UnifiedSequence {
                unified.insert(seed, out.model.clone());
                if seed == SEEDS[0] {
                    first_curve = Some(out.curve.clone());
                }
            }
        })
        .unwrap();
        let finals: Vec<String> = r
            .runs
            .iter()
            .map(|run| format!("{:.3}/{:.3}", run.unified.final_loss, run.adding.final_loss))
            .collect();
        outcome(
            majority(r.unified_lower),
            format!(
                "unified lower in {}/5 seeds after {ADAPTER_STEPS} steps (unified/adding {})",
                r.unified_lower,
                finals.join(" ")
            ),
        )
    });

    let curve = first_curve.expect("criterion 6 trained seed 0");
    let first = curve.first().unwrap();
    let at_2000 = curve.points.iter().find(|p| p.step == 2000).map(|p| p.loss).unwrap();
    let drop = 1.0 - at_2000 / first;
    report.note(
        "training loss reduction",
        drop >= LOSS_REDUCTION,
        format!("seed 0 loss {first:.4} -> {at_2000:.4} by step 2000, drop {:.1}% >= {:.0}%", 100.0 * drop, 100.0 * LOSS_REDUCTION),
    );

    report.record(7, "shifted vs shared positions", || {
        let relocation = Dataset::new(TaskKind::SubjectRelocation, DATA_SEED);
        let r = compare_positions(&base, &ModelConfig::default(), &relocation, &adapter_cfg(), &SEEDS, |seed, mode, out| {
            progress(&format!("seed {seed} {mode:?} final {:.4}", out.curve.final_loss().unwrap()));
        })
        .unwrap();
        let steps: Vec<String> = r
            .runs
            .iter()
            .map(|run| {
                let show = |s: Option<usize>| s.map_or("-".to_string(), |s| s.to_string());
                format!("{}/{}", show(run.shifted_steps), show(run.shared_steps))
            })
            .collect();
        outcome(
            majority(r.shifted_faster),
            format!(
                "shifted faster in {}/5 seeds (steps to shared final, shifted/shared {})",
                r.shifted_faster,
                steps.join(" ")
            ),
        )
    });

    progress(&format!("training edge and colorization models for {TRAINED_STEPS} steps"));
    let trained_edge = trained(&base, &edges);
    let trained_f1 = eval(&trained_edge, &edges, 1.0);

    report.record(8, "controllability", || {
        let fresh_f1 = eval(&untrained(edge_cfg.clone()), &edges, 1.0);
        let colors = Dataset::new(TaskKind::Colorization, DATA_SEED);
        let colorizer = trained(&base, &colors);
        let trained_mse = eval(&colorizer, &colors, 1.0);
        let fresh_mse = eval(&untrained(ModelConfig::default()), &colors, 1.0);
        outcome(
            trained_f1 >= F1_FLOOR && trained_f1 > fresh_f1 && trained_mse < MSE_FRACTION * fresh_mse,
            format!(
                "edge F1 {trained_f1:.3} >= {F1_FLOOR} and > untrained {fresh_f1:.3}; \
                 colorization MSE {trained_mse:.4} < {MSE_FRACTION} x untrained {fresh_mse:.4}"
            ),
        )
    });

    report.record(9, "attention diagnostics", || {
        let trained = dominance(&trained_edge, &edges, DOMINANCE_N, PROBE_T, 1.0, EVAL_SEED).unwrap();
        let fresh = dominance(&untrained(edge_cfg.clone()), &edges, DOMINANCE_N, PROBE_T, 1.0, EVAL_SEED).unwrap();
        outcome(
            trained.mean >= DOMINANCE_FACTOR * fresh.mean,
            format!(
                "dominance at t={PROBE_T}: trained {:.4} vs untrained {:.4} (1/N = {:.4}), ratio {:.2} >= {DOMINANCE_FACTOR}",
                trained.mean,
                fresh.mean,
                fresh.uniform,
                trained.mean / fresh.mean
            ),
        )
    });

    report.record(10, "gamma sweep", || {
        let f1: Vec<f64> = [0.0, 0.5]
            .iter()
            .map(|&g| eval(&trained_edge, &edges, g))
            .chain([trained_f1])
            .collect();
        let f1_monotone = f1.windows(2).all(|w| w[0] <= w[1]);
        let gammas = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0];
        let mass_monotone = (0..100)
            .filter(|&s| cross_mass_curve(s, &gammas).windows(2).all(|w| w[0] <= w[1]))
            .count();
        outcome(
            f1_monotone && mass_monotone == 100,
            format!(
                "edge F1 at gamma 0/0.5/1 = {:.3}/{:.3}/{:.3}; cross mass nondecreasing on {mass_monotone}/100 inputs",
                f1[0], f1[1], f1[2]
            ),
        )
    });

    report.record(11, "ablation orderings", || {
        let mut rank_wins = 0;
        let mut ranks = Vec::new();
        for &seed in &SEEDS {
            let finals: Vec<f64> = [1, 16]
                .iter()
                .map(|&r| {
                    let cfg = ModelConfig { lora_rank: r, ..ModelConfig::default() };
                    run_arm(&base, &cfg, &edges, &adapter_cfg(), seed).unwrap().curve.final_loss().unwrap()
                })
                .collect();
            progress(&format!("seed {seed} rank 1/16 final {:.4}/{:.4}", finals[0], finals[1]));
            rank_wins += usize::from(finals[1] <= finals[0]);
            ranks.push(format!("{:.3}/{:.3}", finals[0], finals[1]));
        }
        let mut depth_wins = 0;
        let mut depths = Vec::new();
        for &seed in &SEEDS {
            let cfg = ModelConfig { adapter_depth: AdapterDepth::EarlyOnly, ..ModelConfig::default() };
            let early = run_arm(&base, &cfg, &edges, &adapter_cfg(), seed).unwrap().model;
            let early = eval(&early, &edges, 1.0);
            let full = eval(&unified[&seed], &edges, 1.0);
            progress(&format!("seed {seed} early/full F1 {early:.3}/{full:.3}"));
            depth_wins += usize::from(early < full);
            depths.push(format!("{early:.3}/{full:.3}"));
        }
        outcome(
            majority(rank_wins) && majority(depth_wins),
            format!(
                "rank 16 <= rank 1 in {rank_wins}/5 (final loss r1/r16 {}); early-only F1 below full in {depth_wins}/5 (early/full {})",
                ranks.join(" "),
                depths.join(" ")
            ),
        )
    });

    report.record(12, "serialization", || {
        let runs: Vec<(bool, bool, bool)> = (0..20).map(serialization).collect();
        let ok = runs.iter().filter(|r| r.0 && r.1 && r.2).count();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trained.odit");
        Checkpoint::from_model(&trained_edge, None).save(&path).unwrap();
        let trained_ok = Checkpoint::load(&path).unwrap().model().unwrap() == trained_edge;
        outcome(
            ok == runs.len() && trained_ok,
            format!("random models {ok}/20 round-trip and reattach exactly; trained model reload equal: {trained_ok}"),
        )
    });

    let failed: Vec<u8> = report.lines.iter().filter(|l| !l.1.pass).map(|l| l.0).collect();
    println!(
        "acceptance: {}/{} criteria pass{}",
        report.lines.len() - failed.len(),
        report.lines.len(),
        if failed.is_empty() { String::new() } else { format!("; failing {failed:?}") }
    );
    if !failed.is_empty() || report.extra_failures > 0 {
        std::process::exit(1);
    }
}
