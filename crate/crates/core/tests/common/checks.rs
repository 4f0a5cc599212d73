//! Seeded property checks shared by the proptest suite and the acceptance
//! target. Each returns the measured quantity so callers pick the tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokenctl::attention::{attention_map, mma, AttentionWeights, BiasSpec, BlockLengths, Modality, TokenSequence};
use tokenctl::checkpoint::Checkpoint;
use tokenctl::lora::{AdapterSet, Binding};
use tokenctl::model::{AdapterDepth, Dit, ForwardInput, InitScheme, Integration, ModelConfig};
use tokenctl::rope::{assign_positions, rope_rotate, Position2D, PositionMode, PositionPolicy};
use tokenctl::Tensor;

use super::{randn, tiny_config};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random `[text; image; cond]` sequence on a `g x g` grid with assigned positions.
pub fn random_sequence(seed: u64, text: usize, g: u32, d: usize, mode: PositionMode) -> TokenSequence {
    let n = (g * g) as usize;
    let emb = randn(&[text + 2 * n, d], seed);
    let seq = TokenSequence::new(emb, BlockLengths::new(text, n, n), (g, g)).unwrap();
    assign_positions(&seq, PositionPolicy::for_mode(mode, g)).unwrap()
}

/// `(gamma = 1 equals no bias bit-exactly, max |X rows| error of gamma = 0 vs
/// the reduced sequence)`.
pub fn bias_neutrality(seed: u64) -> (bool, f64) {
    let mut r = rng(seed);
    let d = 16;
    let heads = 2;
    let mode = if seed % 2 == 0 { PositionMode::Aligned } else { PositionMode::NonAligned };
    let seq = random_sequence(seed, r.gen_range(1..4), r.gen_range(1..4), d, mode);
    let w = AttentionWeights::random(d, heads, &mut r);
    let one = mma(&seq, &w, Some(BiasSpec::new(1.0).unwrap())).unwrap();
    let none = mma(&seq, &w, None).unwrap();
    let exact = one.data() == none.data();
    let zero = mma(&seq, &w, Some(BiasSpec::new(0.0).unwrap())).unwrap();
    let reduced = mma(&seq.without_condition().unwrap(), &w, None).unwrap();
    let l = seq.lengths();
    let x = l.range(Modality::NoisyImage);
    let err = zero
        .slice_rows(x.start, x.len())
        .unwrap()
        .max_abs_diff(&reduced.slice_rows(x.start, x.len()).unwrap());
    (exact, err)
}

/// Total X-to-condition attention mass at each of `gammas` for one input.
pub fn cross_mass_curve(seed: u64, gammas: &[f64]) -> Vec<f64> {
    let mut r = rng(seed);
    let seq = random_sequence(seed, 2, 2, 8, PositionMode::Aligned);
    let w = AttentionWeights::random(8, 2, &mut r);
    gammas
        .iter()
        .map(|&g| {
            attention_map(&seq, &w, Some(BiasSpec::new(g).unwrap()))
                .unwrap()
                .cross_mass(Modality::NoisyImage, Modality::CondImage)
                .unwrap()
        })
        .collect()
}

fn random_input(cfg: &ModelConfig, seed: u64) -> (Tensor, f64, Vec<usize>, Tensor) {
    let mut r = rng(seed ^ 0xFACE);
    let n = cfg.n_tokens();
    let noisy = randn(&[n, cfg.d_model], seed);
    let cond = randn(&[n, cfg.d_model], seed + 1);
    let text = (0..cfg.text_len).map(|_| r.gen_range(0..cfg.vocab)).collect();
    (noisy, r.gen(), text, cond)
}

fn without_adapters(m: &Dit) -> Dit {
    let params = m.params().iter().map(|(k, v)| (k.clone(), (**v).clone())).collect();
    Dit::from_parts(m.config().clone(), m.codec().clone(), params, AdapterSet::new()).unwrap()
}

fn forward(m: &Dit, input: &(Tensor, f64, Vec<usize>, Tensor), gamma: f64) -> Tensor {
    let cond = (m.config().integration != Integration::None).then_some(&input.3);
    m.forward(ForwardInput {
        noisy: &input.0,
        t: input.1,
        text: &input.2,
        cond,
        gamma,
    })
    .unwrap()
}

/// `(closed gates, zero-init adapters, integration None)` each leave the
/// output bit-identical to the never-adapted model for this input seed.
pub fn base_preservation(seed: u64) -> (bool, bool, bool) {
    let input = random_input(&tiny_config(Integration::None, 1, 1), seed);
    let gamma = [1.0, 0.5, 2.0][(seed % 3) as usize];

    // Trained-looking adapters on a model that has no condition tokens: every
    // gate is closed.
    let mut none = Dit::with_init(tiny_config(Integration::None, 1, 1), seed, InitScheme::Dense).unwrap();
    none.randomize_adapters(seed + 1, 0.5);
    let gates = forward(&none, &input, gamma).data() == forward(&without_adapters(&none), &input, gamma).data();

    // Freshly installed adapters on the unified path.
    let fresh = Dit::with_init(tiny_config(Integration::UnifiedSequence, 1, 1), seed, InitScheme::Dense).unwrap();
    let zero_init = forward(&fresh, &input, gamma).data() == forward(&without_adapters(&fresh), &input, gamma).data();

    // Integration None ignores condition and adapters alike.
    let plain = Dit::with_init(tiny_config(Integration::None, 1, 1), seed, InitScheme::Dense).unwrap();
    let reference = forward(&without_adapters(&plain), &input, 1.0);
    let none_ok = forward(&none, &input, gamma).data() == reference.data();
    (gates, zero_init, none_ok)
}

/// `(relative-position error, worst pair-norm error)` for random vectors and
/// positions shifted by a common offset.
pub fn rope_properties(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let d_head = 4 * r.gen_range(1..5);
    let base = [10_000.0, 100.0, 2.5][(seed % 3) as usize];
    let pos = |r: &mut ChaCha8Rng| Position2D::new(r.gen_range(0..40), r.gen_range(0..40));
    let (p1, p2) = (pos(&mut r), pos(&mut r));
    let shift = pos(&mut r);
    let q = randn(&[1, 1, d_head], seed + 1);
    let k = randn(&[1, 1, d_head], seed + 2);
    let dot = |a: Position2D, b: Position2D| {
        let qa = rope_rotate(&q, &[a], base).unwrap();
        let kb = rope_rotate(&k, &[b], base).unwrap();
        qa.data().iter().zip(kb.data()).map(|(x, y)| x * y).sum::<f64>()
    };
    let rel = (dot(p1, p2) - dot(p1.offset(shift), p2.offset(shift))).abs();

    let x = randn(&[2, 3, d_head], seed + 3);
    let ps: Vec<Position2D> = (0..3).map(|_| pos(&mut r)).collect();
    let y = rope_rotate(&x, &ps, base).unwrap();
    let norm_err = x
        .data()
        .chunks(2)
        .zip(y.data().chunks(2))
        .map(|(a, b)| (a[0].hypot(a[1]) - b[0].hypot(b[1])).abs())
        .fold(0.0, f64::max);
    (rel, norm_err)
}

/// Random valid config for parameter accounting.
pub fn random_config(seed: u64) -> ModelConfig {
    let mut r = rng(seed);
    let heads = r.gen_range(1..4);
    let d_head = 4 * r.gen_range(3..6);
    let bindings: Vec<Binding> = Binding::ALL.iter().copied().filter(|_| r.gen_bool(0.6)).collect();
    ModelConfig {
        image_size: 8,
        patch_size: 2,
        channels: 3,
        d_model: heads * d_head,
        n_heads: heads,
        n_dual_blocks: r.gen_range(0..3),
        n_single_blocks: r.gen_range(1..3),
        mlp_ratio: r.gen_range(1..4),
        vocab: 7,
        text_len: 3,
        text_dim: r.gen_range(2..20),
        time_freq_dim: 2 * r.gen_range(1..8),
        lora_rank: r.gen_range(1..9),
        lora_alpha: None,
        adapter_bindings: bindings,
        adapter_depth: if r.gen_bool(0.5) { AdapterDepth::Full } else { AdapterDepth::EarlyOnly },
        ..ModelConfig::default()
    }
}

/// Hand count of adapter parameters straight from the config.
pub fn closed_form_lora(cfg: &ModelConfig) -> usize {
    let blocks = match cfg.adapter_depth {
        AdapterDepth::Full => cfg.n_dual_blocks + cfg.n_single_blocks,
        AdapterDepth::EarlyOnly => cfg.n_dual_blocks,
    };
    let d = cfg.d_model;
    let h = d * cfg.mlp_ratio;
    let per_block: usize = cfg
        .adapter_bindings
        .iter()
        .map(|b| {
            let (din, dout) = match b {
                Binding::WQ | Binding::WK | Binding::WV | Binding::WO => (d, d),
                Binding::NormScale | Binding::NormShift => (1, d),
                Binding::MlpIn => (d, h),
                Binding::MlpOut => (h, d),
            };
            cfg.lora_rank * (din + dout)
        })
        .sum();
    blocks * per_block
}

/// `(bytes re-serialize identically, restored model equal, adapter-only
/// export on a fresh base reproduces outputs exactly)`.
pub fn serialization(seed: u64) -> (bool, bool, bool) {
    let cfg = tiny_config(Integration::UnifiedSequence, 1, 1);
    let mut model = Dit::with_init(cfg.clone(), seed, InitScheme::Dense).unwrap();
    model.randomize_adapters(seed + 1, 0.3);
    let bytes = Checkpoint::from_model(&model, None).to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    let bytes_ok = back.to_bytes().unwrap() == bytes;
    let model_ok = back.model().unwrap() == model;

    let adapters = Checkpoint::from_bytes(&Checkpoint::adapters_only(&model).to_bytes().unwrap()).unwrap();
    let fresh_base = Dit::with_init(cfg, seed, InitScheme::Dense).unwrap();
    let attached = adapters.attach(&fresh_base).unwrap();
    let input = random_input(model.config(), seed + 5);
    let outputs_ok = forward(&attached, &input, 1.0).data() == forward(&model, &input, 1.0).data();
    (bytes_ok, model_ok, outputs_ok)
}
