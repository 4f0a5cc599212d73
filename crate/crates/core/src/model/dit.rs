use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Integration, ModelConfig, PatchCodec};
use crate::attention::{build_bias, rotary_attention, AttentionMap, BiasSpec, BlockLengths};
use crate::error::{dim_err, Error, Result};
use crate::lora::{apply_delta, AdapterKey, AdapterSet, AdapterVars, Binding, GatePolicy, LoraAdapter, ParamCount};
use crate::rope::{grid_positions, Position2D, PositionPolicy};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;
const TIME_SCALE: f64 = 1000.0;
const CODEC_STREAM: u64 = 1;
const ADAPTER_STREAM: u64 = 2;

/// Weight initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Modulation and output layers start at zero, so every block begins as
    /// the identity (the usual choice for training from scratch).
    AdaLnZero,
    /// Every weight random; used where a zero-initialized network would make
    /// a behavioural check vacuous.
    Dense,
}

/// Which parameters a forward pass exposes to the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapters,
}

fn stream_names(cfg: &ModelConfig, block: usize) -> &'static [&'static str] {
    if block < cfg.n_dual_blocks {
        &["txt", "img"]
    } else {
        &["joint"]
    }
}

/// Name and shape of every base parameter, in initialization order.
pub fn base_param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let h = cfg.d_hidden();
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let linear = |out: &mut Vec<(String, Vec<usize>)>, name: &str, din: usize, dout: usize| {
        out.push((format!("{name}.w"), vec![din, dout]));
        out.push((format!("{name}.b"), vec![dout]));
    };
    linear(&mut out, "time_in.fc1", cfg.time_freq_dim, d);
    linear(&mut out, "time_in.fc2", d, d);
    linear(&mut out, "vec_in.fc1", cfg.text_dim, d);
    linear(&mut out, "vec_in.fc2", d, d);
    out.push(("txt_emb".into(), vec![cfg.vocab, cfg.text_dim]));
    linear(&mut out, "txt_in", cfg.text_dim, d);
    linear(&mut out, "img_in", d, d);
    for b in 0..cfg.n_blocks() {
        for s in stream_names(cfg, b) {
            let p = format!("blocks.{b}.{s}");
            linear(&mut out, &format!("{p}.mod"), d, 6 * d);
            out.push((format!("{p}.norm1.scale"), vec![d]));
            out.push((format!("{p}.norm1.shift"), vec![d]));
            for proj in ["q", "k", "v", "o"] {
                linear(&mut out, &format!("{p}.{proj}"), d, d);
            }
            out.push((format!("{p}.norm2.scale"), vec![d]));
            out.push((format!("{p}.norm2.shift"), vec![d]));
            linear(&mut out, &format!("{p}.mlp_in"), d, h);
            linear(&mut out, &format!("{p}.mlp_out"), h, d);
        }
    }
    linear(&mut out, "final.mod", d, 2 * d);
    linear(&mut out, "final.out", d, d);
    out
}

fn init_param<R: rand::Rng>(name: &str, shape: &[usize], scheme: InitScheme, rng: &mut R) -> Tensor {
    let zero_init = name.contains(".mod.") || name.starts_with("final.out.");
    if name.ends_with(".scale") {
        return match scheme {
            InitScheme::AdaLnZero => Tensor::full(shape, 1.0),
            InitScheme::Dense => Tensor::randn(shape, 0.1, rng).map(|v| 1.0 + v),
        };
    }
    if name.ends_with(".shift") {
        return match scheme {
            InitScheme::AdaLnZero => Tensor::zeros(shape),
            InitScheme::Dense => Tensor::randn(shape, 0.1, rng),
        };
    }
    if name == "txt_emb" {
        return Tensor::randn(shape, 1.0, rng);
    }
    match (scheme, zero_init, name.ends_with(".b")) {
        (InitScheme::AdaLnZero, true, _) | (InitScheme::AdaLnZero, false, true) => Tensor::zeros(shape),
        (InitScheme::Dense, _, true) => Tensor::randn(shape, 0.1, rng),
        _ => {
            let std = if zero_init { 0.5 } else { 1.0 } / (shape[0] as f64).sqrt();
            Tensor::randn(shape, std, rng)
        }
    }
}

/// Inputs of one denoiser evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ForwardInput<'a> {
    /// Noisy latent tokens `[N, d]`.
    pub noisy: &'a Tensor,
    pub t: f64,
    pub text: &'a [usize],
    /// Condition latent tokens `[N, d]`.
    pub cond: Option<&'a Tensor>,
    pub gamma: f64,
}

/// Result of a forward pass recorded on a tape.
pub struct ForwardTrace {
    pub velocity: Var,
    /// Attention node and block layout of every block's main attention.
    pub attention: Vec<(Var, BlockLengths)>,
}

/// Registers model parameters on a tape on first use.
pub struct ParamBinder {
    trainable: Trainable,
    vars: BTreeMap<String, Var>,
    adapters: BTreeMap<AdapterKey, Option<AdapterVars>>,
}

impl ParamBinder {
    pub fn new(trainable: Trainable) -> Self {
        Self {
            trainable,
            vars: BTreeMap::new(),
            adapters: BTreeMap::new(),
        }
    }

    fn param(&mut self, tape: &mut Tape, model: &Dit, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = model
            .params
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))?;
        let v = tape.shared(t.clone(), self.trainable == Trainable::Base);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn adapter(&mut self, tape: &mut Tape, model: &Dit, key: AdapterKey) -> Option<AdapterVars> {
        if let Some(v) = self.adapters.get(&key) {
            return *v;
        }
        let vars = model.adapters.get(&key).filter(|a| a.enabled).map(|a| {
            let rg = self.trainable == Trainable::Adapters;
            let down = tape.shared(a.down.clone(), rg);
            let up = tape.shared(a.up.clone(), rg);
            if rg {
                self.vars.insert(key.param_name("down"), down);
                self.vars.insert(key.param_name("up"), up);
            }
            AdapterVars {
                down,
                up,
                scale: a.scale(),
            }
        });
        self.adapters.insert(key, vars);
        vars
    }

    /// Gradients of every trainable parameter touched by the forward pass.
    pub fn gradients(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        let wanted = |name: &str| match self.trainable {
            Trainable::Nothing => false,
            Trainable::Base => !name.starts_with("lora."),
            Trainable::Adapters => name.starts_with("lora."),
        };
        self.vars
            .iter()
            .filter(|(n, _)| wanted(n))
            .filter_map(|(n, &v)| grads.get(v).map(|g| (n.clone(), g)))
            .collect()
    }
}

/// A token stream inside a block: hidden states, parameter prefix and gates.
struct Stream {
    x: Var,
    prefix: String,
    gates: GatePolicy,
}

/// Toy diffusion transformer with frozen base weights and gated adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct Dit {
    config: ModelConfig,
    codec: PatchCodec,
    params: BTreeMap<String, Arc<Tensor>>,
    adapters: AdapterSet,
}

impl Dit {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_init(config, seed, InitScheme::AdaLnZero)
    }

    pub fn with_init(config: ModelConfig, seed: u64, scheme: InitScheme) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = base_param_shapes(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = init_param(&name, &shape, scheme, &mut rng);
                (name, Arc::new(t))
            })
            .collect();
        let codec = PatchCodec::orthonormal(
            config.patch_size,
            config.channels,
            config.d_model,
            seed ^ CODEC_STREAM.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        )?;
        let mut model = Self {
            config,
            codec,
            params,
            adapters: AdapterSet::new(),
        };
        model.install_adapters(seed)?;
        Ok(model)
    }

    /// Assembles a model from existing parts, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        codec: PatchCodec,
        params: BTreeMap<String, Tensor>,
        adapters: AdapterSet,
    ) -> Result<Self> {
        config.validate()?;
        let expected = base_param_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} base tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == &shape[..] => {}
                Some(t) => {
                    return dim_err(format!("{name} has shape {:?}, expected {shape:?}", t.shape()))
                }
                None => return Err(Error::Format(format!("missing base tensor {name}"))),
            }
        }
        if codec.patch_dim() != config.patch_dim() || codec.d_model() != config.d_model {
            return dim_err("codec does not match the model config");
        }
        let model = Self {
            config,
            codec,
            params: params.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            adapters: AdapterSet::new(),
        };
        let mut model = model;
        for (key, a) in adapters {
            model.set_adapter(key, a)?;
        }
        Ok(model)
    }

    /// Replaces all adapters with fresh ones per the config (zero `up`).
    pub fn install_adapters(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ADAPTER_STREAM);
        let cfg = &self.config;
        let mut set = AdapterSet::new();
        for block in cfg.adapted_blocks() {
            for &binding in &cfg.adapter_bindings {
                let (din, dout) = binding.shape(cfg.d_model, cfg.d_hidden());
                let a = LoraAdapter::init(din, dout, cfg.lora_rank, cfg.alpha(), &mut rng)?;
                set.insert(AdapterKey::new(block, binding), a);
            }
        }
        self.adapters = set;
        Ok(())
    }

    /// Same frozen base and codec under a new adapter/integration config,
    /// with freshly initialized adapters.
    pub fn derive(&self, config: ModelConfig, adapter_seed: u64) -> Result<Self> {
        config.validate()?;
        if base_signature(&config) != base_signature(&self.config) {
            return Err(Error::Config(
                "derived config changes the base architecture".into(),
            ));
        }
        let mut m = Self {
            config,
            codec: self.codec.clone(),
            params: self.params.clone(),
            adapters: AdapterSet::new(),
        };
        m.install_adapters(adapter_seed)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn codec(&self) -> &PatchCodec {
        &self.codec
    }

    pub fn params(&self) -> &BTreeMap<String, Arc<Tensor>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|t| &**t)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return dim_err(format!(
                "{name}: shape {:?} does not match {:?}",
                value.shape(),
                slot.shape()
            ));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    pub fn adapter(&self, key: &AdapterKey) -> Option<&LoraAdapter> {
        self.adapters.get(key)
    }

    pub fn set_adapter(&mut self, key: AdapterKey, adapter: LoraAdapter) -> Result<()> {
        let cfg = &self.config;
        if key.block >= cfg.n_blocks() {
            return Err(Error::Config(format!("adapter block {} out of range", key.block)));
        }
        let (din, dout) = key.binding.shape(cfg.d_model, cfg.d_hidden());
        if adapter.d_in() != din || adapter.d_out() != dout {
            return dim_err(format!(
                "adapter {}/{} is {}x{}, expected {din}x{dout}",
                key.block,
                key.binding,
                adapter.d_in(),
                adapter.d_out()
            ));
        }
        self.adapters.insert(key, adapter);
        Ok(())
    }

    /// Writes a new factor (`"down"` or `"up"`) into an installed adapter.
    pub fn set_adapter_factor(&mut self, key: &AdapterKey, factor: &str, value: Tensor) -> Result<()> {
        let a = self
            .adapters
            .get_mut(key)
            .ok_or_else(|| Error::State(format!("no adapter at {}/{}", key.block, key.binding)))?;
        let slot = match factor {
            "down" => &mut a.down,
            "up" => &mut a.up,
            _ => return Err(Error::Argument(format!("unknown adapter factor {factor}"))),
        };
        if slot.shape() != value.shape() {
            return dim_err(format!("adapter factor shape {:?}", value.shape()));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    /// Overwrites every adapter's `up` factor with Gaussian noise, turning the
    /// no-op initialization into an active adapter.
    pub fn randomize_adapters(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for a in self.adapters.values_mut() {
            a.up = Arc::new(Tensor::randn(a.up.shape(), std, &mut rng));
        }
    }

    pub fn count_trainable(&self) -> ParamCount {
        let lora_params: usize = self.adapters.values().map(LoraAdapter::param_count).sum();
        let base_params: usize = self.params.values().map(|t| t.numel()).sum();
        ParamCount {
            lora_params,
            base_params,
            ratio: lora_params as f64 / base_params as f64,
        }
    }

    /// Copy with the adapters of the listed bindings disabled in every block.
    pub fn ablate(&self, targets: &[Binding]) -> Result<Self> {
        for t in targets {
            if !self.adapters.keys().any(|k| k.binding == *t) {
                return Err(Error::Config(format!("no installed adapter binding {t}")));
            }
        }
        let mut m = self.clone();
        for (k, a) in m.adapters.iter_mut() {
            if targets.contains(&k.binding) {
                a.enabled = false;
            }
        }
        Ok(m)
    }

    /// Copy with every adapter re-enabled.
    pub fn restore(&self) -> Self {
        let mut m = self.clone();
        m.adapters.values_mut().for_each(|a| a.enabled = true);
        m
    }

    /// Velocity prediction `[N, d]` for the noisy latent.
    pub fn forward(&self, input: ForwardInput<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(Trainable::Nothing);
        let trace = self.forward_on(&mut tape, &mut binder, input)?;
        Ok(tape.value(trace.velocity).clone())
    }

    /// Attention maps of every block for one forward pass.
    pub fn attention_maps(&self, input: ForwardInput<'_>) -> Result<Vec<AttentionMap>> {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(Trainable::Nothing);
        let trace = self.forward_on(&mut tape, &mut binder, input)?;
        trace
            .attention
            .into_iter()
            .map(|(v, lengths)| {
                let probs = tape
                    .attention_probs(v)
                    .ok_or_else(|| Error::State("attention node missing".into()))?;
                AttentionMap::new(probs, lengths)
            })
            .collect()
    }

    /// Positions of `[text; image; cond]` under the configured policy.
    pub fn positions(&self, with_cond: bool) -> Result<Vec<Position2D>> {
        let g = self.config.grid();
        let grid = grid_positions(g, g);
        let mut out = vec![Position2D::ORIGIN; self.config.text_len];
        out.extend(grid.iter().copied());
        if with_cond {
            let policy = PositionPolicy::for_mode(self.config.position_mode, g);
            policy.validate(g, g)?;
            out.extend(grid.iter().map(|p| p.offset(policy.delta)));
        }
        Ok(out)
    }

    fn check_input(&self, input: &ForwardInput<'_>) -> Result<()> {
        let cfg = &self.config;
        let want = [cfg.n_tokens(), cfg.d_model];
        if input.noisy.shape() != want {
            return dim_err(format!(
                "noisy latent {:?}, expected {want:?}",
                input.noisy.shape()
            ));
        }
        if let Some(c) = input.cond {
            if c.shape() != want {
                return dim_err(format!("condition latent {:?}, expected {want:?}", c.shape()));
            }
        }
        if input.text.len() != cfg.text_len {
            return Err(Error::Argument(format!(
                "expected {} text tokens, got {}",
                cfg.text_len,
                input.text.len()
            )));
        }
        if let Some(&id) = input.text.iter().find(|&&id| id >= cfg.vocab) {
            return Err(Error::Argument(format!("text token {id} outside vocabulary")));
        }
        if !input.t.is_finite() {
            return Err(Error::Argument(format!("timestep {} is not finite", input.t)));
        }
        BiasSpec::new(input.gamma)?;
        if cfg.integration != Integration::None && input.cond.is_none() {
            return Err(Error::Argument(format!(
                "{:?} integration needs a condition",
                cfg.integration
            )));
        }
        Ok(())
    }

    /// Builds the forward pass on `tape`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        input: ForwardInput<'_>,
    ) -> Result<ForwardTrace> {
        self.check_input(&input)?;
        let cfg = &self.config;
        let (m, n) = (cfg.text_len, cfg.n_tokens());

        // Global conditioning vector from timestep and pooled text.
        let tf = tape.constant(timestep_features(input.t, cfg.time_freq_dim));
        let te = self.mlp2(tape, binder, "time_in", tf)?;
        let table = binder.param(tape, self, "txt_emb")?;
        let emb = tape.gather_rows(table, input.text)?;
        let pooled = tape.mean_rows(emb)?;
        let pe = self.mlp2(tape, binder, "vec_in", pooled)?;
        let vec = tape.add(te, pe)?;
        let svec = tape.silu(vec)?;

        let mut txt = self.linear(tape, binder, "txt_in", emb)?;
        let noisy = tape.constant(input.noisy.clone());
        let mut img = self.linear(tape, binder, "img_in", noisy)?;
        let cond = match (cfg.integration, input.cond) {
            (Integration::None, _) | (_, None) => None,
            (_, Some(c)) => {
                let c = tape.constant(c.clone());
                Some(self.linear(tape, binder, "img_in", c)?)
            }
        };

        let mut attention = Vec::new();
        match (cfg.integration, cond) {
            (Integration::UnifiedSequence, Some(c)) => {
                let lengths = BlockLengths::new(m, n, n);
                let positions = self.positions(true)?;
                let bias = if input.gamma == 1.0 {
                    None
                } else {
                    Some(build_bias(BiasSpec::new(input.gamma)?, lengths)?)
                };
                let mut ic = tape.concat_rows(&[img, c])?;
                let mut joint = None;
                for b in 0..cfg.n_blocks() {
                    let streams = if b < cfg.n_dual_blocks {
                        vec![
                            self.stream(b, "txt", txt, GatePolicy::split(m, 0)),
                            self.stream(b, "img", ic, GatePolicy::split(n, n)),
                        ]
                    } else {
                        let x = match joint {
                            Some(x) => x,
                            None => tape.concat_rows(&[txt, ic])?,
                        };
                        vec![self.stream(b, "joint", x, GatePolicy::split(m + n, n))]
                    };
                    let (out, att) =
                        self.block(tape, binder, b, streams, svec, &positions, bias.as_ref())?;
                    attention.push((att, lengths));
                    if b < cfg.n_dual_blocks {
                        txt = out[0];
                        ic = out[1];
                    } else {
                        joint = Some(out[0]);
                    }
                }
                let joint = match joint {
                    Some(x) => x,
                    None => tape.concat_rows(&[txt, ic])?,
                };
                img = tape.slice_rows(joint, m, n)?;
            }
            (integration, cond) => {
                let lengths = BlockLengths::new(m, n, 0);
                let positions = self.positions(false)?;
                let grid = grid_positions(cfg.grid(), cfg.grid());
                let mut c = if integration == Integration::FeatureAdding { cond } else { None };
                for b in 0..cfg.n_blocks() {
                    if let Some(cv) = c {
                        let added = tape.scale(cv, cfg.feature_scale)?;
                        img = tape.add(img, added)?;
                    }
                    let dual = b < cfg.n_dual_blocks;
                    let streams = if dual {
                        vec![
                            self.stream(b, "txt", txt, GatePolicy::split(m, 0)),
                            self.stream(b, "img", img, GatePolicy::split(n, 0)),
                        ]
                    } else {
                        let x = tape.concat_rows(&[txt, img])?;
                        vec![self.stream(b, "joint", x, GatePolicy::split(m + n, 0))]
                    };
                    let (out, att) = self.block(tape, binder, b, streams, svec, &positions, None)?;
                    attention.push((att, lengths));
                    if dual {
                        txt = out[0];
                        img = out[1];
                    } else {
                        let parts = tape.split_rows(out[0], &[m, n])?;
                        txt = parts[0];
                        img = parts[1];
                    }
                    if let Some(cv) = c {
                        let name = if dual { "img" } else { "joint" };
                        let s = vec![self.stream(b, name, cv, GatePolicy::split(0, n))];
                        let (out, _) = self.block(tape, binder, b, s, svec, &grid, None)?;
                        c = Some(out[0]);
                    }
                }
            }
        }

        // Final modulated norm and projection on the image tokens.
        let fm = self.linear(tape, binder, "final.mod", svec)?;
        let fm = tape.reshape(fm, &[2, cfg.d_model])?;
        let shift = tape.slice_rows(fm, 0, 1)?;
        let scale = tape.slice_rows(fm, 1, 1)?;
        let h = tape.layernorm(img, None, LN_EPS)?;
        let h = modulate(tape, h, shift, scale)?;
        let velocity = self.linear(tape, binder, "final.out", h)?;
        Ok(ForwardTrace {
            velocity,
            attention,
        })
    }

    fn stream(&self, block: usize, name: &str, x: Var, gates: GatePolicy) -> Stream {
        Stream {
            x,
            prefix: format!("blocks.{block}.{name}"),
            gates,
        }
    }

    fn linear(&self, tape: &mut Tape, binder: &mut ParamBinder, name: &str, x: Var) -> Result<Var> {
        let w = binder.param(tape, self, &format!("{name}.w"))?;
        let b = binder.param(tape, self, &format!("{name}.b"))?;
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }

    fn mlp2(&self, tape: &mut Tape, binder: &mut ParamBinder, name: &str, x: Var) -> Result<Var> {
        let h = self.linear(tape, binder, &format!("{name}.fc1"), x)?;
        let h = tape.silu(h)?;
        self.linear(tape, binder, &format!("{name}.fc2"), h)
    }

    /// Linear projection with the block's gated adapter for `binding`.
    #[allow(clippy::too_many_arguments)]
    fn adapted(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        block: usize,
        binding: Binding,
        name: &str,
        x: Var,
        gates: &GatePolicy,
    ) -> Result<Var> {
        let w = binder.param(tape, self, &format!("{name}.w"))?;
        let b = binder.param(tape, self, &format!("{name}.b"))?;
        let h = tape.matmul(x, w)?;
        let a = if gates.any_open() {
            binder.adapter(tape, self, AdapterKey::new(block, binding))
        } else {
            None
        };
        let h = apply_delta(tape, x, h, a.as_ref(), gates)?;
        tape.add_row(h, b)
    }

    /// Layer norm, then the (possibly adapted) affine of `norm`.
    fn norm_affine(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        block: usize,
        s: &Stream,
        norm: &str,
        adapt: bool,
    ) -> Result<Var> {
        let scale = binder.param(tape, self, &format!("{}.{norm}.scale", s.prefix))?;
        let shift = binder.param(tape, self, &format!("{}.{norm}.shift", s.prefix))?;
        let h = tape.layernorm(s.x, None, LN_EPS)?;
        let mut out = tape.mul_row(h, scale)?;
        let open = adapt && s.gates.any_open();
        if open {
            if let Some(a) = binder.adapter(tape, self, AdapterKey::new(block, Binding::NormScale)) {
                let delta = a.delta(tape)?;
                let d = tape.mul_row(h, delta)?;
                let d = tape.row_scale(d, s.gates.shared())?;
                out = tape.add(out, d)?;
            }
        }
        out = tape.add_row(out, shift)?;
        if open {
            if let Some(a) = binder.adapter(tape, self, AdapterKey::new(block, Binding::NormShift)) {
                let delta = a.delta(tape)?;
                let rows = tape.value(s.x).rows();
                let zeros = tape.constant(Tensor::zeros(&[rows, self.config.d_model]));
                let d = tape.add_row(zeros, delta)?;
                let d = tape.row_scale(d, s.gates.shared())?;
                out = tape.add(out, d)?;
            }
        }
        Ok(out)
    }

    /// One transformer block over one (single) or two (dual) streams that
    /// attend jointly. Returns updated streams and the attention node.
    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        b: usize,
        streams: Vec<Stream>,
        svec: Var,
        positions: &[Position2D],
        bias: Option<&Tensor>,
    ) -> Result<(Vec<Var>, Var)> {
        let d = self.config.d_model;
        let mut mods = Vec::with_capacity(streams.len());
        let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
        for s in &streams {
            let mv = self.linear(tape, binder, &format!("{}.mod", s.prefix), svec)?;
            let mv = tape.reshape(mv, &[6, d])?;
            let rows = tape.split_rows(mv, &[1; 6])?;
            let h = self.norm_affine(tape, binder, b, s, "norm1", true)?;
            let h = modulate(tape, h, rows[0], rows[1])?;
            let p = &s.prefix;
            qs.push(self.adapted(tape, binder, b, Binding::WQ, &format!("{p}.q"), h, &s.gates)?);
            ks.push(self.adapted(tape, binder, b, Binding::WK, &format!("{p}.k"), h, &s.gates)?);
            vs.push(self.adapted(tape, binder, b, Binding::WV, &format!("{p}.v"), h, &s.gates)?);
            mods.push(rows);
        }
        let join = |tape: &mut Tape, parts: &[Var]| -> Result<Var> {
            if parts.len() == 1 {
                Ok(parts[0])
            } else {
                tape.concat_rows(parts)
            }
        };
        let q = join(tape, &qs)?;
        let k = join(tape, &ks)?;
        let v = join(tape, &vs)?;
        let att = rotary_attention(
            tape,
            q,
            k,
            v,
            positions,
            self.config.n_heads,
            self.config.rope_base,
            bias,
        )?;
        let lens: Vec<usize> = streams.iter().map(|s| tape.value(s.x).rows()).collect();
        let parts = if lens.len() == 1 {
            vec![att]
        } else {
            tape.split_rows(att, &lens)?
        };

        let mut outs = Vec::with_capacity(streams.len());
        for ((s, part), rows) in streams.iter().zip(parts).zip(&mods) {
            let p = &s.prefix;
            let o = self.adapted(tape, binder, b, Binding::WO, &format!("{p}.o"), part, &s.gates)?;
            let o = tape.mul_row(o, rows[2])?;
            let x = tape.add(s.x, o)?;
            let s2 = Stream {
                x,
                prefix: s.prefix.clone(),
                gates: s.gates.clone(),
            };
            let h = self.norm_affine(tape, binder, b, &s2, "norm2", false)?;
            let h = modulate(tape, h, rows[3], rows[4])?;
            let h = self.adapted(tape, binder, b, Binding::MlpIn, &format!("{p}.mlp_in"), h, &s.gates)?;
            let h = tape.gelu(h)?;
            let h = self.adapted(tape, binder, b, Binding::MlpOut, &format!("{p}.mlp_out"), h, &s.gates)?;
            let h = tape.mul_row(h, rows[5])?;
            outs.push(tape.add(x, h)?);
        }
        Ok((outs, att))
    }
}

/// `h * (1 + scale) + shift` with `[1, d]` modulation rows.
fn modulate(tape: &mut Tape, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let d = tape.value(h).cols();
    let ones = tape.constant(Tensor::full(&[1, d], 1.0));
    let s1 = tape.add(scale, ones)?;
    let h = tape.mul_row(h, s1)?;
    tape.add_row(h, shift)
}

/// Sinusoidal timestep features `[1, dim]`: cosines then sines.
pub(crate) fn timestep_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let args: Vec<f64> = (0..half)
        .map(|k| TIME_SCALE * t * (-(10_000f64.ln()) * k as f64 / half as f64).exp())
        .collect();
    let data = args.iter().map(|a| a.cos()).chain(args.iter().map(|a| a.sin())).collect();
    Tensor::new(vec![1, dim], data).expect("feature width")
}

/// Config with every field that does not affect the base weights normalized.
fn base_signature(cfg: &ModelConfig) -> ModelConfig {
    let d = ModelConfig::default();
    ModelConfig {
        lora_rank: d.lora_rank,
        lora_alpha: None,
        adapter_bindings: d.adapter_bindings,
        adapter_depth: d.adapter_depth,
        integration: d.integration,
        position_mode: d.position_mode,
        feature_scale: d.feature_scale,
        ..cfg.clone()
    }
}
