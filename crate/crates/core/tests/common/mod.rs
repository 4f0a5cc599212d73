//! Finite-difference gradient suite shared by the `gradcheck` target and
//! the acceptance run in `tokenctl-validation`.
#![allow(dead_code)]

pub mod checks;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokenctl::flow::{flow_loss, sample_gradients, FlowSample, PreparedSample, TrainTarget};
use tokenctl::model::{Dit, InitScheme, Integration, ModelConfig};
use tokenctl::rope::{Position2D, PositionMode};
use tokenctl::{Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// `‖g_tape - g_fd‖ / max(‖g_tape‖, ‖g_fd‖)` over every input element.
pub fn rel_err<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone().with_grad(true))).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|g| g.into_data()).unwrap_or_else(|| vec![0.0; x.numel()]);
        for e in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[e] += FD_STEP;
            let plus = eval(&xs);
            xs[i].data_mut()[e] -= 2.0 * FD_STEP;
            let numeric = (plus - eval(&xs)) / (2.0 * FD_STEP);
            diff += (analytic[e] - numeric).powi(2);
            na += analytic[e].powi(2);
            nn += numeric.powi(2);
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
}

/// Scalar readout `mean(out * w)` with fixed random weights.
fn readout(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = randn(tape.value(out).shape(), seed ^ 0xABCD);
    let w = tape.constant(w);
    let y = tape.mul(out, w)?;
    tape.mean(y)
}

type OpCase = fn(u64) -> f64;

fn unary(seed: u64, shape: &[usize], op: fn(&mut Tape, Var) -> Result<Var>) -> f64 {
    rel_err(&[randn(shape, seed)], |t, v| {
        let y = op(t, v[0])?;
        readout(t, y, seed)
    })
}

fn binary(seed: u64, a: &[usize], b: &[usize], op: fn(&mut Tape, Var, Var) -> Result<Var>) -> f64 {
    rel_err(&[randn(a, seed), randn(b, seed + 1000)], |t, v| {
        let y = op(t, v[0], v[1])?;
        readout(t, y, seed)
    })
}

fn positions(n: usize, seed: u64) -> Vec<Position2D> {
    let mut r = rng(seed ^ 0x5151);
    (0..n).map(|_| Position2D::new(r.gen_range(0..6), r.gen_range(0..6))).collect()
}

fn attention_case(seed: u64, bias: Option<Tensor>) -> f64 {
    let (n, d) = (5, 8);
    let inputs = [randn(&[n, d], seed), randn(&[n, d], seed + 1), randn(&[n, d], seed + 2)];
    rel_err(&inputs, |t, v| {
        let y = t.attention(v[0], v[1], v[2], 2, bias.as_ref())?;
        readout(t, y, seed)
    })
}

/// Every differentiable tape op with a name.
pub fn op_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        ("matmul", |s| binary(s, &[3, 4], &[4, 5], |t, a, b| t.matmul(a, b))),
        ("add", |s| binary(s, &[3, 4], &[3, 4], |t, a, b| t.add(a, b))),
        ("sub", |s| binary(s, &[3, 4], &[3, 4], |t, a, b| t.sub(a, b))),
        ("mul", |s| binary(s, &[3, 4], &[3, 4], |t, a, b| t.mul(a, b))),
        ("scale", |s| unary(s, &[3, 4], |t, a| t.scale(a, -1.7))),
        ("reshape", |s| unary(s, &[3, 4], |t, a| t.reshape(a, &[2, 6]))),
        ("add_row", |s| binary(s, &[3, 4], &[4], |t, a, b| t.add_row(a, b))),
        ("mul_row", |s| binary(s, &[3, 4], &[4], |t, a, b| t.mul_row(a, b))),
        ("row_scale", |s| {
            unary(s, &[3, 4], |t, a| t.row_scale(a, Arc::from(vec![1.0, 0.0, 0.5])))
        }),
        ("layernorm", |s| unary(s, &[3, 6], |t, a| t.layernorm(a, None, 1e-6))),
        ("layernorm_affine", |s| {
            rel_err(&[randn(&[3, 6], s), randn(&[6], s + 1), randn(&[6], s + 2)], |t, v| {
                let y = t.layernorm(v[0], Some((v[1], v[2])), 1e-6)?;
                readout(t, y, s)
            })
        }),
        ("silu", |s| unary(s, &[3, 4], |t, a| t.silu(a))),
        ("gelu", |s| unary(s, &[3, 4], |t, a| t.gelu(a))),
        ("softmax", |s| unary(s, &[3, 5], |t, a| t.softmax(a))),
        ("concat_rows", |s| binary(s, &[2, 4], &[3, 4], |t, a, b| t.concat_rows(&[a, b]))),
        ("slice_rows", |s| unary(s, &[5, 3], |t, a| t.slice_rows(a, 1, 3))),
        ("split_rows", |s| {
            unary(s, &[5, 3], |t, a| {
                let parts = t.split_rows(a, &[2, 3])?;
                let x = t.scale(parts[0], 2.0)?;
                t.concat_rows(&[parts[1], x])
            })
        }),
        ("gather_rows", |s| unary(s, &[4, 3], |t, a| t.gather_rows(a, &[2, 0, 2, 3]))),
        ("mean_rows", |s| unary(s, &[4, 3], |t, a| t.mean_rows(a))),
        ("mean", |s| unary(s, &[4, 3], |t, a| t.mean(a))),
        ("mse", |s| {
            let target = Arc::new(randn(&[3, 4], s + 7));
            rel_err(&[randn(&[3, 4], s)], move |t, v| t.mse(v[0], target.clone()))
        }),
        ("rope", |s| {
            let pos = positions(4, s);
            rel_err(&[randn(&[4, 16], s)], move |t, v| {
                let y = t.rope(v[0], &pos, 8, 10_000.0)?;
                readout(t, y, s)
            })
        }),
        ("attention", |s| attention_case(s, None)),
        ("attention_bias", |s| {
            let mut b = randn(&[5, 5], s + 9);
            b.data_mut()[3] = f64::NEG_INFINITY;
            b.data_mut()[7] = f64::NEG_INFINITY;
            attention_case(s, Some(b))
        }),
    ]
}

pub fn tiny_config(integration: Integration, dual: usize, single: usize) -> ModelConfig {
    ModelConfig {
        image_size: 4,
        patch_size: 2,
        channels: 1,
        d_model: 8,
        n_heads: 2,
        n_dual_blocks: dual,
        n_single_blocks: single,
        mlp_ratio: 2,
        vocab: 5,
        text_len: 2,
        text_dim: 6,
        time_freq_dim: 4,
        lora_rank: 2,
        integration,
        position_mode: PositionMode::Aligned,
        ..ModelConfig::default()
    }
}

/// End-to-end flow-loss gradient check on a one-block `d = 8` model for the
/// chosen trainable set. Up to `per_tensor` coordinates of every trainable
/// tensor are perturbed.
pub fn model_case(cfg: ModelConfig, target: TrainTarget, seed: u64, per_tensor: usize) -> f64 {
    let mut model = Dit::with_init(cfg.clone(), seed, InitScheme::Dense).unwrap();
    model.randomize_adapters(seed + 1, 0.3);
    let n = cfg.n_tokens();
    let d = cfg.d_model;
    let mut r = rng(seed ^ 0x77);
    let t: f64 = r.gen_range(0.05..0.95);
    let gamma = [1.0, 0.6, 1.8][(seed % 3) as usize];
    let flow = FlowSample::new(randn(&[n, d], seed + 10), randn(&[n, d], seed + 11), t).unwrap();
    let cond = (cfg.integration != Integration::None).then(|| randn(&[n, d], seed + 12));
    let text = vec![r.gen_range(0..cfg.vocab), r.gen_range(0..cfg.vocab)];
    let sample = PreparedSample { flow, text, cond };
    let (_, grads) = sample_gradients(&model, &sample, target, gamma).unwrap();
    let loss = |m: &Dit| flow_loss(m, &sample.flow, &sample.text, sample.cond.as_ref(), gamma).unwrap();

    let tensors: Vec<(String, Tensor)> = match target {
        TrainTarget::Base => model.params().iter().map(|(k, v)| (k.clone(), (**v).clone())).collect(),
        TrainTarget::Adapters => model
            .adapters()
            .iter()
            .flat_map(|(k, a)| [(k.param_name("down"), (*a.down).clone()), (k.param_name("up"), (*a.up).clone())])
            .collect(),
    };
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (name, value) in &tensors {
        let g = grads.get(name).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; value.numel()]);
        for _ in 0..per_tensor.min(value.numel()) {
            let e = r.gen_range(0..value.numel());
            let eval = |delta: f64| {
                let mut m = model.clone();
                let mut v = value.clone();
                v.data_mut()[e] += delta;
                set(&mut m, name, v);
                loss(&m)
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            diff += (g[e] - numeric).powi(2);
            na += g[e].powi(2);
            nn += numeric.powi(2);
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
}

fn set(m: &mut Dit, name: &str, v: Tensor) {
    if let Some(rest) = name.strip_prefix("lora.") {
        let key = *m
            .adapters()
            .keys()
            .find(|k| rest.starts_with(&format!("{}.{}.", k.block, k.binding)))
            .expect("adapter exists");
        let factor = rest.rsplit('.').next().unwrap();
        m.set_adapter_factor(&key, factor, v).unwrap();
    } else {
        m.set_param(name, v).unwrap();
    }
}

/// Named end-to-end model cases.
pub fn model_cases() -> Vec<(&'static str, ModelConfig, TrainTarget)> {
    vec![
        ("dual_block_base", tiny_config(Integration::UnifiedSequence, 1, 0), TrainTarget::Base),
        ("dual_block_adapters", tiny_config(Integration::UnifiedSequence, 1, 0), TrainTarget::Adapters),
        ("single_block_base", tiny_config(Integration::UnifiedSequence, 0, 1), TrainTarget::Base),
        ("single_block_adapters", tiny_config(Integration::UnifiedSequence, 0, 1), TrainTarget::Adapters),
        ("feature_adding_adapters", tiny_config(Integration::FeatureAdding, 1, 0), TrainTarget::Adapters),
        ("no_condition_base", tiny_config(Integration::None, 1, 0), TrainTarget::Base),
    ]
}

/// Worst relative error of every op and model case over `seeds` seeds.
pub fn gradient_suite(seeds: u64) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (name, case) in op_cases() {
        out.push((name.to_string(), (0..seeds).map(case).fold(0.0, f64::max)));
    }
    for (name, cfg, target) in model_cases() {
        let worst = (0..seeds).map(|s| model_case(cfg.clone(), target, s, 3)).fold(0.0, f64::max);
        out.push((name.to_string(), worst));
    }
    out
}
