//! Finite-difference oracle shared by the unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Relative error `|g_tape - g_fd| / max(|g_tape|, |g_fd|)` (vector 2-norms)
/// between tape gradients and central differences with `h = 1e-5`.
pub fn check_grad<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(x.clone().with_grad(true)))
        .collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();

    let h = 1e-5;
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (idx, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[idx])
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; x.numel()]);
        for e in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[idx].data_mut()[e] += h;
            let plus = eval(&xs);
            xs[idx].data_mut()[e] -= 2.0 * h;
            let minus = eval(&xs);
            let numeric = (plus - minus) / (2.0 * h);
            diff += (analytic[e] - numeric).powi(2);
            na += analytic[e].powi(2);
            nn += numeric.powi(2);
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
}
