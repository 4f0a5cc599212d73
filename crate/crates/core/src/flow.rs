//! Rectified-flow objective, Adam with decoupled weight decay, the training
//! loop with gradient accumulation, and the Euler sampler.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::lora::AdapterKey;
use crate::model::{Dit, ForwardInput, Integration, ParamBinder, Trainable};
use crate::tape::{Tape, Var};
use crate::tasks::{Image, PairSource};
use crate::tensor::Tensor;

/// One point on the straight path between data `x0` and noise `x1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub xt: Tensor,
    pub v_target: Tensor,
}

impl FlowSample {
    pub fn new(x0: Tensor, x1: Tensor, t: f64) -> Result<Self> {
        if x0.shape() != x1.shape() {
            return dim_err(format!("x0 {:?} vs x1 {:?}", x0.shape(), x1.shape()));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("flow time {t} outside [0, 1]")));
        }
        let xt = x0.zip_with(&x1, |a, b| (1.0 - t) * a + t * b)?;
        let v_target = x1.sub(&x0)?;
        Ok(Self {
            x0,
            x1,
            t,
            xt,
            v_target,
        })
    }
}

/// Mean squared error between the predicted and target velocity.
pub fn flow_loss(
    model: &Dit,
    sample: &FlowSample,
    text: &[usize],
    cond: Option<&Tensor>,
    gamma: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new(Trainable::Nothing);
    let loss = flow_loss_on(model, &mut tape, &mut binder, sample, text, cond, gamma)?;
    Ok(tape.value(loss).data()[0])
}

/// [`flow_loss`] recorded on a tape for differentiation.
pub fn flow_loss_on(
    model: &Dit,
    tape: &mut Tape,
    binder: &mut ParamBinder,
    sample: &FlowSample,
    text: &[usize],
    cond: Option<&Tensor>,
    gamma: f64,
) -> Result<Var> {
    let trace = model.forward_on(
        tape,
        binder,
        ForwardInput {
            noisy: &sample.xt,
            t: sample.t,
            text,
            cond,
            gamma,
        },
    )?;
    tape.mse(trace.velocity, Arc::new(sample.v_target.clone()))
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Advances the step counter; call once before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updated value of `param` given its gradient.
    pub fn update(&mut self, name: &str, param: &Tensor, grad: &[f64]) -> Tensor {
        let n = param.numel();
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut out = param.clone();
        for (((p, g), mi), vi) in out.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *p -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
        }
        out
    }
}


/// Parameters a training run updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTarget {
    /// Gated adapters only; the base stays frozen.
    Adapters,
    /// Every base weight (pretraining the unconditional model).
    Base,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub micro_batch: usize,
    pub accum_steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss_log_every: usize,
    pub weight_decay: f64,
    pub gamma: f64,
    pub target: TrainTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            micro_batch: 1,
            accum_steps: 1,
            lr: 1e-3,
            seed: 0,
            loss_log_every: 100,
            weight_decay: 0.01,
            gamma: 1.0,
            target: TrainTarget::Adapters,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.micro_batch == 0 || self.accum_steps == 0 || self.loss_log_every == 0 {
            return Err(Error::Config(
                "micro_batch, accum_steps and loss_log_every must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config("gamma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accum_steps
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    /// Optimizer steps completed at the end of the window.
    pub step: usize,
    pub loss: f64,
}

/// Mean training loss per logging window.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    pub fn final_loss(&self) -> Option<f64> {
        self.points.last().map(|p| p.loss)
    }

    pub fn first(&self) -> Option<f64> {
        self.points.first().map(|p| p.loss)
    }

    /// First logged step whose window mean is at or below `target`.
    pub fn steps_to_reach(&self, target: f64) -> Option<usize> {
        self.points.iter().find(|p| p.loss <= target).map(|p| p.step)
    }

    /// Tab-separated `step arm loss` lines.
    pub fn to_lines(&self, arm: &str) -> String {
        self.points
            .iter()
            .map(|p| format!("{}\t{arm}\t{:e}\n", p.step, p.loss))
            .collect()
    }
}

/// Everything a training sample needs, drawn from the source and the RNG.
pub struct PreparedSample {
    pub flow: FlowSample,
    pub text: Vec<usize>,
    pub cond: Option<Tensor>,
}

/// Unit Gaussian noise in patch space, projected to latent tokens.
pub fn latent_noise<R: Rng + ?Sized>(model: &Dit, rng: &mut R) -> Result<Tensor> {
    let cfg = model.config();
    let eps = Tensor::randn(&[cfg.n_tokens(), cfg.patch_dim()], 1.0, rng);
    model.codec().project(&eps)
}

/// Sample `counter` of a run: data index `counter`, with flow time and noise
/// from stream `counter` of the run seed.
pub fn prepare_sample(
    model: &Dit,
    source: &dyn PairSource,
    seed: u64,
    counter: u64,
) -> Result<PreparedSample> {
    let pair = source.pair(counter);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(counter);
    let mut t: f64 = rng.gen();
    while t == 0.0 {
        t = rng.gen();
    }
    let x1 = latent_noise(model, &mut rng)?;
    let x0 = model.codec().encode_image(&pair.target)?;
    let cond = match model.config().integration {
        Integration::None => None,
        _ => Some(model.codec().encode_image(&pair.condition)?),
    };
    Ok(PreparedSample {
        flow: FlowSample::new(x0, x1, t)?,
        text: pair.text,
        cond,
    })
}

/// Names and current values of the parameters `target` trains.
fn trainable_params(model: &Dit, target: TrainTarget) -> Vec<(String, Tensor)> {
    match target {
        TrainTarget::Base => model
            .params()
            .iter()
            .map(|(n, t)| (n.clone(), (**t).clone()))
            .collect(),
        TrainTarget::Adapters => model
            .adapters()
            .iter()
            .filter(|(_, a)| a.enabled)
            .flat_map(|(k, a)| {
                [
                    (k.param_name("down"), (*a.down).clone()),
                    (k.param_name("up"), (*a.up).clone()),
                ]
            })
            .collect(),
    }
}

fn parse_adapter_name(name: &str) -> Option<(AdapterKey, &str)> {
    let mut it = name.strip_prefix("lora.")?.split('.');
    let block = it.next()?.parse().ok()?;
    let binding = it.next()?.parse().ok()?;
    let factor = it.next()?;
    Some((AdapterKey::new(block, binding), factor))
}

fn write_param(model: &mut Dit, name: &str, value: Tensor) -> Result<()> {
    match parse_adapter_name(name) {
        Some((key, factor)) => model.set_adapter_factor(&key, factor, value),
        None => model.set_param(name, value),
    }
}

/// Loss and gradients of one prepared sample.
pub fn sample_gradients(
    model: &Dit,
    sample: &PreparedSample,
    target: TrainTarget,
    gamma: f64,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let trainable = match target {
        TrainTarget::Base => Trainable::Base,
        TrainTarget::Adapters => Trainable::Adapters,
    };
    let mut binder = ParamBinder::new(trainable);
    let loss = flow_loss_on(
        model,
        &mut tape,
        &mut binder,
        &sample.flow,
        &sample.text,
        sample.cond.as_ref(),
        gamma,
    )?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, binder.gradients(&grads)))
}

pub struct TrainOutcome {
    pub model: Dit,
    pub curve: LossCurve,
    pub optimizer: Adam,
}

/// Trains `model` on `source`. Gradients are averaged over
/// `micro_batch * accum_steps` samples before every optimizer step.
pub fn train(model: &Dit, source: &dyn PairSource, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, source, cfg, |_, _| {})
}

/// [`train`] with a callback after every logged window.
pub fn train_with(
    model: &Dit,
    source: &dyn PairSource,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LossPoint, &Dit),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = model.clone();
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay);
    let mut curve = LossCurve::default();
    let batch = cfg.effective_batch();
    let inv = 1.0 / batch as f64;
    let (mut window_sum, mut window_n) = (0.0, 0usize);

    for step in 0..cfg.steps {
        let params = trainable_params(&model, cfg.target);
        let mut acc: BTreeMap<String, Vec<f64>> = params
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        for k in 0..batch {
            let counter = (step * batch + k) as u64;
            let sample = prepare_sample(&model, source, cfg.seed, counter)?;
            let (loss, grads) = match sample_gradients(&model, &sample, cfg.target, cfg.gamma) {
                Ok(r) => r,
                Err(Error::NonFinite { op }) => {
                    return Err(Error::Diverged {
                        step,
                        detail: format!("non-finite value in {op}"),
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss = {loss}"),
                });
            }
            window_sum += loss;
            window_n += 1;
            for (name, g) in grads {
                if let Some(buf) = acc.get_mut(&name) {
                    buf.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b * inv);
                }
            }
        }
        opt.begin_step();
        for (name, value) in &params {
            let updated = opt.update(name, value, &acc[name]);
            write_param(&mut model, name, updated)?;
        }
        let done = step + 1;
        if done % cfg.loss_log_every == 0 || done == cfg.steps {
            let point = LossPoint {
                step: done,
                loss: window_sum / window_n as f64,
            };
            curve.points.push(point);
            on_log(&point, &model);
            window_sum = 0.0;
            window_n = 0;
        }
    }
    Ok(TrainOutcome {
        model,
        curve,
        optimizer: opt,
    })
}

/// Euler integration of `dx/dt = -v(x, t)` from `t = 1` to `t = 0`.
pub fn euler<F>(x1: Tensor, n_steps: usize, mut velocity: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if n_steps == 0 {
        return Err(Error::Argument("sampling needs at least one step".into()));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = x1;
    for s in 0..n_steps {
        let t = 1.0 - s as f64 * dt;
        let v = velocity(&x, t)?;
        x = x.zip_with(&v, |a, b| a - dt * b)?;
    }
    Ok(x)
}

/// Latent sample from seeded noise.
pub fn sample_latent(
    model: &Dit,
    text: &[usize],
    cond: Option<&Tensor>,
    gamma: f64,
    n_steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x1 = latent_noise(model, &mut rng)?;
    let cond = match model.config().integration {
        Integration::None => None,
        _ => cond,
    };
    euler(x1, n_steps, |x, t| {
        model.forward(ForwardInput {
            noisy: x,
            t,
            text,
            cond,
            gamma,
        })
    })
}

/// Decoded image sample; `cond` is encoded with the model's own codec.
pub fn sample(
    model: &Dit,
    text: &[usize],
    cond: Option<&Image>,
    gamma: f64,
    n_steps: usize,
    seed: u64,
) -> Result<Image> {
    let cond = cond.map(|c| model.codec().encode_image(c)).transpose()?;
    let z = sample_latent(model, text, cond.as_ref(), gamma, n_steps, seed)?;
    model.codec().decode_image(&z)
}
