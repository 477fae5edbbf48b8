//! Attention building blocks: sinusoidal positions, single-head (optionally
//! multi-head) scaled dot-product attention, pre-norm cross-modal blocks, and
//! self-attention encoder stacks.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};
use rand::Rng;

const FFN_EXPANSION: usize = 4;
const LN_EPS: f64 = 1e-5;

/// Standard sinusoidal position table: sin on even columns, cos on odd,
/// frequency `10000^(-2i/dim)`.
pub fn positional_embedding(length: usize, dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::OddDimension(dim));
    }
    let mut data = vec![0.0; length * dim];
    for pos in 0..length {
        for i in 0..dim / 2 {
            let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
            let angle = pos as f64 * freq;
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(length, dim, data)
}

/// Attention output plus its (softmaxed) weight matrix for inspection.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub output: NodeId,
    pub weights: NodeId,
}

/// `softmax(Q K' / sqrt(d)) V` for `Q: [L_q, d]`, `K, V: [L_k, d]`.
pub fn scaled_dot_attention(tape: &mut Tape, q: NodeId, k: NodeId, v: NodeId) -> Result<Attention> {
    let (qs, ks, vs) = (
        tape.shape(q).to_vec(),
        tape.shape(k).to_vec(),
        tape.shape(v).to_vec(),
    );
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::ShapeMismatch(
            "attention expects [L, d] operands".into(),
        ));
    }
    if qs[1] != ks[1] || ks != vs {
        return Err(Error::ShapeMismatch(format!(
            "attention shapes: Q {qs:?}, K {ks:?}, V {vs:?}"
        )));
    }
    if ks[0] == 0 {
        return Err(Error::EmptySource);
    }
    let weights = attention_weights(tape, q, k)?;
    let output = tape.matmul(weights, v)?;
    Ok(Attention { output, weights })
}

fn attention_weights(tape: &mut Tape, q: NodeId, k: NodeId) -> Result<NodeId> {
    let d = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    tape.softmax(scaled, 1)
}

/// One cross-modal transformer layer: square projections, two layer-norm
/// pairs, and a 4x feed-forward. The attention dropout rate applies to the
/// softmaxed attention weights.
#[derive(Debug, Clone)]
pub struct CrossModalBlockParams {
    pub dim: usize,
    pub heads: usize,
    pub attn_dropout: f64,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln_attn_gamma: Tensor,
    pub ln_attn_beta: Tensor,
    pub ln_ffn_gamma: Tensor,
    pub ln_ffn_beta: Tensor,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
}

impl CrossModalBlockParams {
    pub fn init<R: Rng>(dim: usize, heads: usize, attn_dropout: f64, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut proj = || Tensor::uniform(vec![dim, dim], -bound, bound, rng);
        let (w_q, w_k, w_v, w_o) = (proj(), proj(), proj(), proj());
        let hidden = FFN_EXPANSION * dim;
        let w_1 = Tensor::uniform(vec![dim, hidden], -bound, bound, rng);
        let w_2 = Tensor::uniform(
            vec![hidden, dim],
            -1.0 / (hidden as f64).sqrt(),
            1.0 / (hidden as f64).sqrt(),
            rng,
        );
        CrossModalBlockParams {
            dim,
            heads,
            attn_dropout,
            w_q,
            w_k,
            w_v,
            w_o,
            ln_attn_gamma: ones(dim),
            ln_attn_beta: Tensor::zeros(vec![dim]),
            ln_ffn_gamma: ones(dim),
            ln_ffn_beta: Tensor::zeros(vec![dim]),
            w_1,
            b_1: Tensor::zeros(vec![hidden]),
            w_2,
            b_2: Tensor::zeros(vec![dim]),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        let hidden = FFN_EXPANSION * dim;
        CrossModalBlockParams {
            dim,
            heads: 1,
            attn_dropout: 0.0,
            w_q: Tensor::zeros(vec![dim, dim]),
            w_k: Tensor::zeros(vec![dim, dim]),
            w_v: Tensor::zeros(vec![dim, dim]),
            w_o: Tensor::zeros(vec![dim, dim]),
            ln_attn_gamma: ones(dim),
            ln_attn_beta: Tensor::zeros(vec![dim]),
            ln_ffn_gamma: ones(dim),
            ln_ffn_beta: Tensor::zeros(vec![dim]),
            w_1: Tensor::zeros(vec![dim, hidden]),
            b_1: Tensor::zeros(vec![hidden]),
            w_2: Tensor::zeros(vec![hidden, dim]),
            b_2: Tensor::zeros(vec![dim]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "head count {} must divide model dim {d}",
                self.heads
            )));
        }
        let hidden = FFN_EXPANSION * d;
        for (name, t, shape) in [
            ("w_q", &self.w_q, vec![d, d]),
            ("w_k", &self.w_k, vec![d, d]),
            ("w_v", &self.w_v, vec![d, d]),
            ("w_o", &self.w_o, vec![d, d]),
            ("w_1", &self.w_1, vec![d, hidden]),
            ("w_2", &self.w_2, vec![hidden, d]),
            ("b_1", &self.b_1, vec![hidden]),
            ("b_2", &self.b_2, vec![d]),
            ("ln_attn_gamma", &self.ln_attn_gamma, vec![d]),
            ("ln_attn_beta", &self.ln_attn_beta, vec![d]),
            ("ln_ffn_gamma", &self.ln_ffn_gamma, vec![d]),
            ("ln_ffn_beta", &self.ln_ffn_beta, vec![d]),
        ] {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "block {name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// A stack of blocks with a final layer norm; used both for self-attention
/// encoders (source == target) and cross-modal encoders (fixed source).
#[derive(Debug, Clone)]
pub struct EncoderStackParams {
    pub blocks: Vec<CrossModalBlockParams>,
    pub ln_final_gamma: Tensor,
    pub ln_final_beta: Tensor,
    /// Add sinusoidal position embeddings at stack entry.
    pub positions: bool,
}

impl EncoderStackParams {
    pub fn init<R: Rng>(
        dim: usize,
        layers: usize,
        heads: usize,
        attn_dropout: f64,
        rng: &mut R,
    ) -> Self {
        EncoderStackParams {
            blocks: (0..layers)
                .map(|_| CrossModalBlockParams::init(dim, heads, attn_dropout, rng))
                .collect(),
            ln_final_gamma: ones(dim),
            ln_final_beta: Tensor::zeros(vec![dim]),
            positions: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.ln_final_gamma.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidConfig("encoder stack needs >= 1 layer".into()));
        }
        let d = self.dim();
        for b in &self.blocks {
            b.validate()?;
            if b.dim != d {
                return Err(Error::ShapeMismatch(format!(
                    "encoder stack mixes dims {d} and {}",
                    b.dim
                )));
            }
        }
        Ok(())
    }
}

fn ones(d: usize) -> Tensor {
    Tensor::new(vec![d], vec![1.0; d]).expect("finite")
}

/// Block parameters bound onto a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    pub dim: usize,
    pub heads: usize,
    pub attn_dropout: f64,
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
    pub ln_attn_gamma: NodeId,
    pub ln_attn_beta: NodeId,
    pub ln_ffn_gamma: NodeId,
    pub ln_ffn_beta: NodeId,
    pub w_1: NodeId,
    pub b_1: NodeId,
    pub w_2: NodeId,
    pub b_2: NodeId,
}

/// Bound encoder stack.
#[derive(Debug, Clone)]
pub struct BoundStack {
    pub blocks: Vec<BoundBlock>,
    pub ln_final_gamma: NodeId,
    pub ln_final_beta: NodeId,
    pub positions: bool,
    pub dim: usize,
}

/// Pre-norm residual cross-modal block: the target attends to the source,
/// then passes through the feed-forward sublayer.
///
/// With all projection and feed-forward weights zero this is the identity on
/// `target`.
pub fn crossmodal_block(
    tape: &mut Tape,
    target: NodeId,
    source: NodeId,
    p: &BoundBlock,
    train: bool,
) -> Result<NodeId> {
    let (ts, ss) = (tape.shape(target).to_vec(), tape.shape(source).to_vec());
    if ts.len() != 2 || ss.len() != 2 || ts[1] != p.dim || ss[1] != p.dim {
        return Err(Error::ShapeMismatch(format!(
            "crossmodal block dim {}: target {ts:?}, source {ss:?}",
            p.dim
        )));
    }
    let tq = tape.layer_norm(target, p.ln_attn_gamma, p.ln_attn_beta, LN_EPS)?;
    let sk = tape.layer_norm(source, p.ln_attn_gamma, p.ln_attn_beta, LN_EPS)?;
    let q = tape.matmul(tq, p.w_q)?;
    let k = tape.matmul(sk, p.w_k)?;
    let v = tape.matmul(sk, p.w_v)?;
    let attn_out = if p.heads <= 1 {
        attention_with_dropout(tape, q, k, v, p.attn_dropout, train)?
    } else {
        let head_dim = p.dim / p.heads;
        let mut outs = Vec::with_capacity(p.heads);
        for h in 0..p.heads {
            let qh = tape.col_slice(q, h * head_dim, head_dim)?;
            let kh = tape.col_slice(k, h * head_dim, head_dim)?;
            let vh = tape.col_slice(v, h * head_dim, head_dim)?;
            outs.push(attention_with_dropout(tape, qh, kh, vh, p.attn_dropout, train)?);
        }
        tape.concat_cols(&outs)?
    };
    let projected = tape.matmul(attn_out, p.w_o)?;
    let x = tape.add(target, projected)?;

    let f = tape.layer_norm(x, p.ln_ffn_gamma, p.ln_ffn_beta, LN_EPS)?;
    let h1 = tape.matmul(f, p.w_1)?;
    let h1 = tape.add_row(h1, p.b_1)?;
    let h1 = tape.relu(h1)?;
    let h2 = tape.matmul(h1, p.w_2)?;
    let h2 = tape.add_row(h2, p.b_2)?;
    tape.add(x, h2)
}

fn attention_with_dropout(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    rate: f64,
    train: bool,
) -> Result<NodeId> {
    if tape.shape(k)[0] == 0 {
        return Err(Error::EmptySource);
    }
    let weights = attention_weights(tape, q, k)?;
    let weights = tape.dropout(weights, rate, train)?;
    tape.matmul(weights, v)
}

/// Self-attention encoder: position embeddings once at entry, `N` blocks
/// attending to themselves, final layer norm.
pub fn self_attention_encoder(
    tape: &mut Tape,
    seq: NodeId,
    p: &BoundStack,
    train: bool,
) -> Result<NodeId> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 2 || shape[1] != p.dim {
        return Err(Error::ShapeMismatch(format!(
            "encoder of dim {} got input {shape:?}",
            p.dim
        )));
    }
    if shape[0] == 0 {
        return Err(Error::EmptySequence);
    }
    let mut x = if p.positions {
        let pe = tape.constant(positional_embedding(shape[0], p.dim)?);
        tape.add(seq, pe)?
    } else {
        seq
    };
    for block in &p.blocks {
        x = crossmodal_block(tape, x, x, block, train)?;
    }
    tape.layer_norm(x, p.ln_final_gamma, p.ln_final_beta, LN_EPS)
}

/// Cross-modal encoder: sqrt(d)-scaled inputs plus position embeddings at
/// entry, then `N` blocks in which the running target attends to the fixed
/// (entry-processed) source, and a final layer norm.
pub fn crossmodal_encoder(
    tape: &mut Tape,
    target: NodeId,
    source: NodeId,
    p: &BoundStack,
    train: bool,
) -> Result<NodeId> {
    let (ts, ss) = (tape.shape(target).to_vec(), tape.shape(source).to_vec());
    if ts.len() != 2 || ss.len() != 2 || ts[1] != p.dim || ss[1] != p.dim {
        return Err(Error::ShapeMismatch(format!(
            "crossmodal encoder dim {}: target {ts:?}, source {ss:?}",
            p.dim
        )));
    }
    if ss[0] == 0 {
        return Err(Error::EmptySource);
    }
    if ts[0] == 0 {
        return Err(Error::EmptySequence);
    }
    let scale = (p.dim as f64).sqrt();
    let mut x = tape.scale(target, scale)?;
    let mut src = tape.scale(source, scale)?;
    if p.positions {
        let pe_t = tape.constant(positional_embedding(ts[0], p.dim)?);
        let pe_s = tape.constant(positional_embedding(ss[0], p.dim)?);
        x = tape.add(x, pe_t)?;
        src = tape.add(src, pe_s)?;
    }
    for block in &p.blocks {
        x = crossmodal_block(tape, x, src, block, train)?;
    }
    tape.layer_norm(x, p.ln_final_gamma, p.ln_final_beta, LN_EPS)
}

// ── binding helpers ─────────────────────────────────────────────────

use crate::tensor::Binder;

impl CrossModalBlockParams {
    pub fn bind(&self, tape: &mut Tape, binder: &mut Binder, prefix: &str) -> BoundBlock {
        BoundBlock {
            dim: self.dim,
            heads: self.heads,
            attn_dropout: self.attn_dropout,
            w_q: binder.leaf(tape, format!("{prefix}.w_q"), &self.w_q),
            w_k: binder.leaf(tape, format!("{prefix}.w_k"), &self.w_k),
            w_v: binder.leaf(tape, format!("{prefix}.w_v"), &self.w_v),
            w_o: binder.leaf(tape, format!("{prefix}.w_o"), &self.w_o),
            ln_attn_gamma: binder.leaf(tape, format!("{prefix}.ln_attn_gamma"), &self.ln_attn_gamma),
            ln_attn_beta: binder.leaf(tape, format!("{prefix}.ln_attn_beta"), &self.ln_attn_beta),
            ln_ffn_gamma: binder.leaf(tape, format!("{prefix}.ln_ffn_gamma"), &self.ln_ffn_gamma),
            ln_ffn_beta: binder.leaf(tape, format!("{prefix}.ln_ffn_beta"), &self.ln_ffn_beta),
            w_1: binder.leaf(tape, format!("{prefix}.w_1"), &self.w_1),
            b_1: binder.leaf(tape, format!("{prefix}.b_1"), &self.b_1),
            w_2: binder.leaf(tape, format!("{prefix}.w_2"), &self.w_2),
            b_2: binder.leaf(tape, format!("{prefix}.b_2"), &self.b_2),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.w_q"), &self.w_q);
        f(format!("{prefix}.w_k"), &self.w_k);
        f(format!("{prefix}.w_v"), &self.w_v);
        f(format!("{prefix}.w_o"), &self.w_o);
        f(format!("{prefix}.ln_attn_gamma"), &self.ln_attn_gamma);
        f(format!("{prefix}.ln_attn_beta"), &self.ln_attn_beta);
        f(format!("{prefix}.ln_ffn_gamma"), &self.ln_ffn_gamma);
        f(format!("{prefix}.ln_ffn_beta"), &self.ln_ffn_beta);
        f(format!("{prefix}.w_1"), &self.w_1);
        f(format!("{prefix}.b_1"), &self.b_1);
        f(format!("{prefix}.w_2"), &self.w_2);
        f(format!("{prefix}.b_2"), &self.b_2);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(format!("{prefix}.w_q"), &mut self.w_q);
        f(format!("{prefix}.w_k"), &mut self.w_k);
        f(format!("{prefix}.w_v"), &mut self.w_v);
        f(format!("{prefix}.w_o"), &mut self.w_o);
        f(format!("{prefix}.ln_attn_gamma"), &mut self.ln_attn_gamma);
        f(format!("{prefix}.ln_attn_beta"), &mut self.ln_attn_beta);
        f(format!("{prefix}.ln_ffn_gamma"), &mut self.ln_ffn_gamma);
        f(format!("{prefix}.ln_ffn_beta"), &mut self.ln_ffn_beta);
        f(format!("{prefix}.w_1"), &mut self.w_1);
        f(format!("{prefix}.b_1"), &mut self.b_1);
        f(format!("{prefix}.w_2"), &mut self.w_2);
        f(format!("{prefix}.b_2"), &mut self.b_2);
    }
}

impl EncoderStackParams {
    pub fn bind(&self, tape: &mut Tape, binder: &mut Binder, prefix: &str) -> BoundStack {
        BoundStack {
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.bind(tape, binder, &format!("{prefix}.block{i}")))
                .collect(),
            ln_final_gamma: binder.leaf(tape, format!("{prefix}.ln_final_gamma"), &self.ln_final_gamma),
            ln_final_beta: binder.leaf(tape, format!("{prefix}.ln_final_beta"), &self.ln_final_beta),
            positions: self.positions,
            dim: self.dim(),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.for_each(&format!("{prefix}.block{i}"), f);
        }
        f(format!("{prefix}.ln_final_gamma"), &self.ln_final_gamma);
        f(format!("{prefix}.ln_final_beta"), &self.ln_final_beta);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("{prefix}.block{i}"), f);
        }
        f(format!("{prefix}.ln_final_gamma"), &mut self.ln_final_gamma);
        f(format!("{prefix}.ln_final_beta"), &mut self.ln_final_beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fd_check_fn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn position_table_closed_forms() {
        let pe = positional_embedding(3, 6).unwrap();
        for i in 0..3 {
            assert_eq!(pe.at(&[0, 2 * i]), 0.0);
            assert_eq!(pe.at(&[0, 2 * i + 1]), 1.0);
        }
        let pe2 = positional_embedding(2, 2).unwrap();
        assert!((pe2.at(&[1, 0]) - 1.0f64.sin()).abs() < 1e-15);
        assert!((pe2.at(&[1, 1]) - 1.0f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn position_table_bounded_for_long_sequences() {
        let pe = positional_embedding(512, 16).unwrap();
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn position_table_odd_dim_rejected() {
        assert!(matches!(
            positional_embedding(4, 3),
            Err(Error::OddDimension(3))
        ));
    }

    #[test]
    fn single_source_row_broadcasts_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::normal(vec![3, 4], 1.0, &mut rng));
        let k = tape.constant(Tensor::normal(vec![1, 4], 1.0, &mut rng));
        let vt = Tensor::normal(vec![1, 4], 1.0, &mut rng);
        let v = tape.constant(vt.clone());
        let attn = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert!((tape.value(attn.output)[r * 4 + c] - vt.data()[c]).abs() < 1e-15);
            }
        }
        assert!(tape.value(attn.weights).iter().all(|&w| w == 1.0));
    }

    #[test]
    fn orthonormal_queries_at_scale_align_rows() {
        // Q == K == scaled identity: scores are diagonal-dominant, so each
        // output row approaches the matching V row.
        let d = 4;
        let scale = 100.0;
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = scale;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let vt = Tensor::normal(vec![d, d], 1.0, &mut rng);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::matrix(d, d, eye.clone()).unwrap());
        let k = tape.constant(Tensor::matrix(d, d, eye).unwrap());
        let v = tape.constant(vt.clone());
        let attn = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        for r in 0..d {
            for c in 0..d {
                assert!(
                    (tape.value(attn.output)[r * d + c] - vt.at(&[r, c])).abs() < 1e-9,
                    "row {r} not aligned"
                );
            }
        }
    }

    #[test]
    fn attention_rows_are_probabilities_and_outputs_in_v_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..25 {
            let lq = rng.gen_range(1..5);
            let lk = rng.gen_range(1..6);
            let d = 2 * rng.gen_range(1..4);
            let mut tape = Tape::new();
            let q = tape.constant(Tensor::normal(vec![lq, d], 1.5, &mut rng));
            let k = tape.constant(Tensor::normal(vec![lk, d], 1.5, &mut rng));
            let vt = Tensor::normal(vec![lk, d], 1.5, &mut rng);
            let v = tape.constant(vt.clone());
            let attn = scaled_dot_attention(&mut tape, q, k, v).unwrap();
            let w = tape.value(attn.weights);
            for r in 0..lq {
                let row = &w[r * lk..(r + 1) * lk];
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
            let out = tape.value(attn.output);
            for c in 0..d {
                let col: Vec<f64> = (0..lk).map(|r| vt.at(&[r, c])).collect();
                let (lo, hi) = (
                    col.iter().cloned().fold(f64::INFINITY, f64::min),
                    col.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                );
                for r in 0..lq {
                    let val = out[r * d + c];
                    assert!(
                        val >= lo - 1e-12 && val <= hi + 1e-12,
                        "output escapes convex hull of V column"
                    );
                }
            }
        }
    }

    #[test]
    fn attention_shape_and_empty_source_errors() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(vec![2, 4]));
        let k = tape.constant(Tensor::zeros(vec![3, 5]));
        let v = tape.constant(Tensor::zeros(vec![3, 5]));
        assert!(matches!(
            scaled_dot_attention(&mut tape, q, k, v),
            Err(Error::ShapeMismatch(_))
        ));
        let k0 = tape.constant(Tensor::zeros(vec![0, 4]));
        let v0 = tape.constant(Tensor::zeros(vec![0, 4]));
        assert!(matches!(
            scaled_dot_attention(&mut tape, q, k0, v0),
            Err(Error::EmptySource)
        ));
    }

    fn bind_one_block(p: &CrossModalBlockParams, tape: &mut Tape) -> BoundBlock {
        let mut binder = Binder::new();
        p.bind(tape, &mut binder, "b")
    }

    #[test]
    fn zero_weights_make_block_identity() {
        let p = CrossModalBlockParams::zeros(4);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let target = Tensor::normal(vec![3, 4], 1.0, &mut rng);
        let source = Tensor::normal(vec![5, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let b = bind_one_block(&p, &mut tape);
        let t = tape.constant(target.clone());
        let s = tape.constant(source);
        let out = crossmodal_block(&mut tape, t, s, &b, false).unwrap();
        assert_eq!(tape.value(out), target.data());
    }

    #[test]
    fn block_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let p = CrossModalBlockParams::init(4, 1, 0.0, &mut rng);
        let mut tape = Tape::new();
        let b = bind_one_block(&p, &mut tape);
        let t = tape.constant(Tensor::normal(vec![1, 4], 1.0, &mut rng));
        let s = tape.constant(Tensor::normal(vec![5, 4], 1.0, &mut rng));
        let out = crossmodal_block(&mut tape, t, s, &b, false).unwrap();
        assert_eq!(tape.shape(out), &[1, 4]);
    }

    #[test]
    fn block_gradients_flow_to_target_and_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let p = CrossModalBlockParams::init(4, 1, 0.0, &mut rng);
        let target = Tensor::normal(vec![2, 4], 1.0, &mut rng).with_grad();
        let source = Tensor::normal(vec![3, 4], 1.0, &mut rng).with_grad();
        let mut params = vec![target, source];
        let report = fd_check_fn(
            &mut params,
            &mut |tape, ids| {
                let b = bind_one_block(&p, tape);
                let out = crossmodal_block(tape, ids[0], ids[1], &b, false)?;
                let sq = tape.mul(out, out)?;
                tape.sum(sq)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);

        // both inputs actually receive nonzero gradient
        let mut tape = Tape::new();
        let b = bind_one_block(&p, &mut tape);
        let t = tape.param(&params[0]);
        let s = tape.param(&params[1]);
        let out = crossmodal_block(&mut tape, t, s, &b, false).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(t).unwrap().iter().any(|&g| g != 0.0));
        assert!(tape.grad(s).unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn block_parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let p = CrossModalBlockParams::init(4, 2, 0.0, &mut rng);
        let target = Tensor::normal(vec![2, 4], 1.0, &mut rng);
        let source = Tensor::normal(vec![3, 4], 1.0, &mut rng);
        let mut params: Vec<Tensor> = Vec::new();
        p.for_each("b", &mut |_, t| params.push(t.clone().with_grad()));
        let report = fd_check_fn(
            &mut params,
            &mut |tape, ids| {
                let b = BoundBlock {
                    dim: 4,
                    heads: 2,
                    attn_dropout: 0.0,
                    w_q: ids[0],
                    w_k: ids[1],
                    w_v: ids[2],
                    w_o: ids[3],
                    ln_attn_gamma: ids[4],
                    ln_attn_beta: ids[5],
                    ln_ffn_gamma: ids[6],
                    ln_ffn_beta: ids[7],
                    w_1: ids[8],
                    b_1: ids[9],
                    w_2: ids[10],
                    b_2: ids[11],
                };
                let t = tape.constant(target.clone());
                let s = tape.constant(source.clone());
                let out = crossmodal_block(tape, t, s, &b, false)?;
                let sq = tape.mul(out, out)?;
                tape.sum(sq)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn encoder_zero_weights_is_layernorm_of_input_plus_positions() {
        let dim = 4;
        let stack = EncoderStackParams {
            blocks: vec![CrossModalBlockParams::zeros(dim)],
            ln_final_gamma: ones(dim),
            ln_final_beta: Tensor::zeros(vec![dim]),
            positions: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let seq = Tensor::normal(vec![3, dim], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let b = stack.bind(&mut tape, &mut binder, "enc");
        let s = tape.constant(seq.clone());
        let out = self_attention_encoder(&mut tape, s, &b, false).unwrap();

        let s2 = tape.constant(seq);
        let pe = tape.constant(positional_embedding(3, dim).unwrap());
        let sum = tape.add(s2, pe).unwrap();
        let g = tape.constant(ones(dim));
        let bta = tape.constant(Tensor::zeros(vec![dim]));
        let expected = tape.layer_norm(sum, g, bta, LN_EPS).unwrap();
        let (a, e) = (tape.value(out).to_vec(), tape.value(expected).to_vec());
        for (x, y) in a.iter().zip(&e) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn encoder_handles_length_one_and_rejects_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let stack = EncoderStackParams::init(4, 2, 1, 0.0, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let b = stack.bind(&mut tape, &mut binder, "enc");
        let one = tape.constant(Tensor::normal(vec![1, 4], 1.0, &mut rng));
        let out = self_attention_encoder(&mut tape, one, &b, false).unwrap();
        assert_eq!(tape.shape(out), &[1, 4]);

        let empty = tape.constant(Tensor::zeros(vec![0, 4]));
        assert!(matches!(
            self_attention_encoder(&mut tape, empty, &b, false),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn self_attention_is_permutation_equivariant_without_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut stack = EncoderStackParams::init(4, 2, 1, 0.0, &mut rng);
        stack.positions = false;
        let seq = Tensor::normal(vec![5, 4], 1.0, &mut rng);
        let perm = [3usize, 0, 4, 1, 2];
        let permuted = Tensor::matrix(
            5,
            4,
            perm.iter()
                .flat_map(|&r| seq.data()[r * 4..(r + 1) * 4].to_vec())
                .collect(),
        )
        .unwrap();

        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let b = stack.bind(&mut tape, &mut binder, "enc");
            let s = tape.constant(input.clone());
            let out = self_attention_encoder(&mut tape, s, &b, false).unwrap();
            tape.value(out).to_vec()
        };
        let base = run(&seq);
        let shuffled = run(&permuted);
        for (i, &r) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!(
                    (shuffled[i * 4 + c] - base[r * 4 + c]).abs() < 1e-12,
                    "row {i} mismatch"
                );
            }
        }
    }

    #[test]
    fn bind_and_for_each_agree_on_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let stack = EncoderStackParams::init(4, 2, 1, 0.1, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        stack.bind(&mut tape, &mut binder, "enc");
        let bound: Vec<String> = binder.entries.iter().map(|(n, _)| n.clone()).collect();
        let mut listed = Vec::new();
        stack.for_each("enc", &mut |n, _| listed.push(n));
        assert_eq!(bound, listed);
    }
}
