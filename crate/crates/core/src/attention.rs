//! Multi-modal attention over the unified `[text; image; condition]` sequence,
//! with the additive strength bias and attention-map diagnostics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::Linear;
use crate::rope::{Position2D, DEFAULT_ROPE_BASE};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    NoisyImage,
    CondImage,
}

/// Block sizes `(M, N, N_c)` of a unified sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLengths {
    pub text: usize,
    pub image: usize,
    pub cond: usize,
}

impl BlockLengths {
    pub fn new(text: usize, image: usize, cond: usize) -> Self {
        Self { text, image, cond }
    }

    pub fn total(&self) -> usize {
        self.text + self.image + self.cond
    }

    pub fn range(&self, m: Modality) -> std::ops::Range<usize> {
        match m {
            Modality::Text => 0..self.text,
            Modality::NoisyImage => self.text..self.text + self.image,
            Modality::CondImage => self.text + self.image..self.total(),
        }
    }

    pub fn modality(&self, t: usize) -> Modality {
        if t < self.text {
            Modality::Text
        } else if t < self.text + self.image {
            Modality::NoisyImage
        } else {
            Modality::CondImage
        }
    }

    /// Per-token gate: 1 on condition tokens, 0 elsewhere.
    pub fn condition_gates(&self) -> Vec<f64> {
        (0..self.total())
            .map(|t| f64::from(u8::from(self.modality(t) == Modality::CondImage)))
            .collect()
    }
}

/// Token embeddings laid out as one contiguous text block, then the noisy
/// image grid, then (optionally) the condition grid of the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    embeddings: Tensor,
    lengths: BlockLengths,
    grid: (u32, u32),
    positions: Option<Vec<Position2D>>,
}

impl TokenSequence {
    pub fn new(embeddings: Tensor, lengths: BlockLengths, grid: (u32, u32)) -> Result<Self> {
        let (n, _) = embeddings.matrix_dims()?;
        if n != lengths.total() {
            return dim_err(format!(
                "{n} embeddings for block lengths {lengths:?}"
            ));
        }
        let cells = (grid.0 * grid.1) as usize;
        if lengths.image != cells {
            return dim_err(format!(
                "image block has {} tokens but the grid is {}x{}",
                lengths.image, grid.0, grid.1
            ));
        }
        if lengths.cond != 0 && lengths.cond != lengths.image {
            return dim_err("condition block must be empty or match the image block");
        }
        Ok(Self {
            embeddings,
            lengths,
            grid,
            positions: None,
        })
    }

    /// Assembles `[text; image; cond]` from separate blocks.
    pub fn from_parts(
        text: &Tensor,
        image: &Tensor,
        cond: Option<&Tensor>,
        grid: (u32, u32),
    ) -> Result<Self> {
        let mut parts = vec![text, image];
        parts.extend(cond);
        let embeddings = Tensor::concat_rows(&parts)?;
        let lengths = BlockLengths::new(
            text.rows(),
            image.rows(),
            cond.map_or(0, Tensor::rows),
        );
        Self::new(embeddings, lengths, grid)
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn lengths(&self) -> BlockLengths {
        self.lengths
    }

    pub fn grid(&self) -> (u32, u32) {
        self.grid
    }

    pub fn modalities(&self) -> Vec<Modality> {
        (0..self.lengths.total())
            .map(|t| self.lengths.modality(t))
            .collect()
    }

    pub fn positions(&self) -> Option<&[Position2D]> {
        self.positions.as_deref()
    }

    pub(crate) fn set_positions(&mut self, positions: Vec<Position2D>) {
        self.positions = Some(positions);
    }

    /// The `[text; image]` prefix, i.e. the sequence with its condition removed.
    pub fn without_condition(&self) -> Result<TokenSequence> {
        let keep = self.lengths.text + self.lengths.image;
        let mut out = TokenSequence::new(
            self.embeddings.slice_rows(0, keep)?,
            BlockLengths::new(self.lengths.text, self.lengths.image, 0),
            self.grid,
        )?;
        out.positions = self.positions.as_ref().map(|p| p[..keep].to_vec());
        Ok(out)
    }
}

/// Condition strength `gamma >= 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub gamma: f64,
}

impl BiasSpec {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma.is_nan() || gamma < 0.0 {
            return Err(Error::Domain(format!("strength gamma must be >= 0, got {gamma}")));
        }
        Ok(Self { gamma })
    }

    /// `log(gamma)`, with `gamma = 0` mapped to the mask value `-inf`.
    pub fn log_gamma(&self) -> f64 {
        if self.gamma == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.gamma.ln()
        }
    }
}

/// Additive attention bias `[n, n]`: `log(gamma)` wherever exactly one of the
/// query and key is a condition token, 0 elsewhere. Attention within each
/// token type is left unchanged.
pub fn build_bias(spec: BiasSpec, lengths: BlockLengths) -> Result<Tensor> {
    let spec = BiasSpec::new(spec.gamma)?;
    let n = lengths.total();
    let mut data = vec![0.0; n * n];
    let value = spec.log_gamma();
    if value != 0.0 {
        let cond = lengths.range(Modality::CondImage);
        for i in 0..n {
            let qi = cond.contains(&i);
            for j in 0..n {
                if qi != cond.contains(&j) {
                    data[i * n + j] = value;
                }
            }
        }
    }
    Tensor::new(vec![n, n], data)
}

/// Projection weights of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub rope_base: f64,
}

impl AttentionWeights {
    pub fn random<R: rand::Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::random(d, d, rng),
            k: Linear::random(d, d, rng),
            v: Linear::random(d, d, rng),
            o: Linear::random(d, d, rng),
            heads,
            rope_base: DEFAULT_ROPE_BASE,
        }
    }
}

/// Rotates `q` and `k` by their token positions and runs multi-head attention.
/// Returns the pre-output-projection attention result.
#[allow(clippy::too_many_arguments)]
pub fn rotary_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    positions: &[Position2D],
    heads: usize,
    rope_base: f64,
    bias: Option<&Tensor>,
) -> Result<Var> {
    let d = tape.value(q).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = tape.rope(q, positions, dh, rope_base)?;
    let k = tape.rope(k, positions, dh, rope_base)?;
    tape.attention(q, k, v, heads, bias)
}

fn mma_on_tape(
    seq: &TokenSequence,
    w: &AttentionWeights,
    bias: Option<BiasSpec>,
) -> Result<(Tape, Var, Var)> {
    let positions = seq
        .positions()
        .ok_or_else(|| Error::State("token positions have not been assigned".into()))?;
    let bias = bias
        .map(|b| build_bias(b, seq.lengths()))
        .transpose()?;
    let mut tape = Tape::new();
    let x = tape.constant(seq.embeddings().clone());
    let q = w.q.forward(&mut tape, x)?;
    let k = w.k.forward(&mut tape, x)?;
    let v = w.v.forward(&mut tape, x)?;
    let attn = rotary_attention(
        &mut tape,
        q,
        k,
        v,
        positions,
        w.heads,
        w.rope_base,
        bias.as_ref(),
    )?;
    let out = w.o.forward(&mut tape, attn)?;
    Ok((tape, attn, out))
}

/// Multi-modal attention over the whole sequence, `[n_total, d]`.
pub fn mma(seq: &TokenSequence, w: &AttentionWeights, bias: Option<BiasSpec>) -> Result<Tensor> {
    let (tape, _, out) = mma_on_tape(seq, w, bias)?;
    Ok(tape.value(out).clone())
}

/// Post-softmax attention probabilities `[heads, n_total, n_total]`.
pub fn attention_map(
    seq: &TokenSequence,
    w: &AttentionWeights,
    bias: Option<BiasSpec>,
) -> Result<AttentionMap> {
    let (tape, attn, _) = mma_on_tape(seq, w, bias)?;
    let probs = tape
        .attention_probs(attn)
        .ok_or_else(|| Error::State("attention node missing".into()))?;
    AttentionMap::new(probs, seq.lengths())
}

/// Snapshot of attention probabilities with modality-addressable blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    probs: Tensor,
    lengths: BlockLengths,
}

impl AttentionMap {
    pub fn new(probs: Tensor, lengths: BlockLengths) -> Result<Self> {
        let n = lengths.total();
        match probs.shape() {
            [_, a, b] if *a == n && *b == n => Ok(Self { probs, lengths }),
            s => dim_err(format!("attention map {s:?} does not match {n} tokens")),
        }
    }

    pub fn heads(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn lengths(&self) -> BlockLengths {
        self.lengths
    }

    /// Full `[n, n]` map of one head.
    pub fn head(&self, h: usize) -> Result<Tensor> {
        if h >= self.heads() {
            return dim_err(format!("head {h} out of range"));
        }
        let n = self.lengths.total();
        Tensor::new(vec![n, n], self.probs.data()[h * n * n..(h + 1) * n * n].to_vec())
    }

    /// Raw probabilities of queries in `from` attending to keys in `to`.
    pub fn block(&self, h: usize, from: Modality, to: Modality) -> Result<Tensor> {
        let full = self.head(h)?;
        let (rows, cols) = (self.lengths.range(from), self.lengths.range(to));
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            data.extend_from_slice(&full.row(r)[cols.clone()]);
        }
        Tensor::new(vec![rows.len(), cols.len()], data)
    }

    /// Like [`AttentionMap::block`], with each row rescaled to sum to 1 over
    /// the selected keys. Rows with no mass there stay zero.
    pub fn conditional_block(&self, h: usize, from: Modality, to: Modality) -> Result<Tensor> {
        let mut b = self.block(h, from, to)?;
        let cols = b.cols();
        for row in b.data_mut().chunks_mut(cols) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        Ok(b)
    }

    /// Total probability mass that queries in `from` put on keys in `to`.
    pub fn cross_mass(&self, from: Modality, to: Modality) -> Result<f64> {
        (0..self.heads())
            .map(|h| self.block(h, from, to).map(|b| b.sum()))
            .sum()
    }
}

/// Mean over rows of the probability at the aligned index (row r, column r).
pub fn diag_dominance(block: &Tensor) -> Result<f64> {
    let (r, c) = block.matrix_dims()?;
    if r != c {
        return dim_err(format!("diag_dominance needs a square block, got {r}x{c}"));
    }
    if r == 0 {
        return dim_err("diag_dominance of an empty block");
    }
    Ok((0..r).map(|i| block.at2(i, i)).sum::<f64>() / r as f64)
}

/// Dense matrix as text: a `rows cols` header line, then one line per row.
pub fn format_matrix(m: &Tensor) -> Result<String> {
    let (rows, cols) = m.matrix_dims()?;
    let mut s = format!("{rows} {cols}\n");
    for r in 0..rows {
        let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    Ok(s)
}

pub fn parse_matrix(text: &str) -> Result<Tensor> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty matrix file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Format(format!("bad header {header:?}"))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(Error::Format(format!("bad header {header:?}")));
    };
    let mut data = Vec::with_capacity(rows * cols);
    for line in lines.take(rows) {
        for tok in line.split_whitespace() {
            data.push(
                tok.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad value {tok:?}")))?,
            );
        }
    }
    Tensor::new(vec![rows, cols], data).map_err(|_| Error::Format("matrix body size".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::{assign_positions, PositionPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(m: usize, grid: (u32, u32), cond: bool, seed: u64) -> TokenSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (grid.0 * grid.1) as usize;
        let t = Tensor::randn(&[m, 8], 1.0, &mut rng);
        let x = Tensor::randn(&[n, 8], 1.0, &mut rng);
        let c = Tensor::randn(&[n, 8], 1.0, &mut rng);
        let s = TokenSequence::from_parts(&t, &x, cond.then_some(&c), grid).unwrap();
        assign_positions(&s, PositionPolicy::aligned()).unwrap()
    }

    #[test]
    fn bias_unit_gamma_is_zero() {
        let b = build_bias(BiasSpec::new(1.0).unwrap(), BlockLengths::new(2, 3, 3)).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gamma_two_blocks() {
        let b = build_bias(BiasSpec { gamma: 2.0 }, BlockLengths::new(1, 2, 2)).unwrap();
        let l2 = 2f64.ln();
        for i in 0..5 {
            for j in 0..5 {
                let cross = (i >= 3) != (j >= 3);
                let expect = if cross { l2 } else { 0.0 };
                assert_eq!(b.at2(i, j), expect, "({i},{j})");
            }
        }
    }

    #[test]
    fn negative_gamma_rejected() {
        assert!(matches!(BiasSpec::new(-0.5), Err(Error::Domain(_))));
        assert!(build_bias(BiasSpec { gamma: -1.0 }, BlockLengths::new(1, 1, 1)).is_err());
    }

    #[test]
    fn zero_gamma_masks_condition_columns() {
        let s = seq(2, (2, 2), true, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = AttentionWeights::random(8, 2, &mut rng);
        let map = attention_map(&s, &w, Some(BiasSpec { gamma: 0.0 })).unwrap();
        for h in 0..2 {
            let b = map.block(h, Modality::NoisyImage, Modality::CondImage).unwrap();
            assert!(b.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_token_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let s = TokenSequence::from_parts(&Tensor::zeros(&[0, 8]), &x, None, (1, 1)).unwrap();
        let s = assign_positions(&s, PositionPolicy::aligned()).unwrap();
        let w = AttentionWeights::random(8, 2, &mut rng);
        let out = mma(&s, &w, None).unwrap();
        let v = x.matmul(&w.v.w).unwrap().add(&w.v.b.clone().reshape(&[1, 8]).unwrap()).unwrap();
        let expect = v.matmul(&w.o.w).unwrap().add(&w.o.b.clone().reshape(&[1, 8]).unwrap()).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn unassigned_positions_are_a_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let s = TokenSequence::from_parts(&Tensor::zeros(&[0, 8]), &x, None, (2, 2)).unwrap();
        let w = AttentionWeights::random(8, 2, &mut rng);
        assert!(matches!(mma(&s, &w, None), Err(Error::State(_))));
    }

    #[test]
    fn diag_dominance_cases() {
        assert_eq!(diag_dominance(&Tensor::eye(4)).unwrap(), 1.0);
        let u = Tensor::full(&[4, 4], 0.25);
        assert!((diag_dominance(&u).unwrap() - 0.25).abs() < 1e-15);
        assert!(diag_dominance(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn matrix_text_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let back = parse_matrix(&format_matrix(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
