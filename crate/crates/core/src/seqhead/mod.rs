//! Frequency-aware transformer over item-embedding sequences.
//!
//! Sequences are packed: only real tokens are stored, one row each, and a
//! [`Span`] marks where every sequence lives. Each sequence is right-aligned in
//! a `max_len` frame, so a token at offset `t` of a length-`T` sequence sits at
//! frame position `max_len − T + t`. Attention runs inside spans (equivalent
//! to masking left padding) and the low-pass filter sees the zero-padded frame.

mod filter;

use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionSpec, LinearMap, Mat, Span, Tape, Var};
use crate::embed::xavier_uniform;
use crate::error::{Error, Result};

pub use filter::{
    frequency_attention, high_frequency, is_low_bin, low_frequency, low_pass_matrix, max_cutoff,
    PackedLowPass,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnScale {
    /// Logits divided by the model dimension `d`.
    Literal,
    /// Logits divided by `√(d / heads)`.
    Sqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub depth: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Weight of the frequency branch against standard attention.
    pub alpha: f64,
    /// Number of retained low frequencies.
    pub cutoff: usize,
    pub dropout: f64,
    pub attn_scale: AttnScale,
    pub causal: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 2,
            max_len: 50,
            alpha: 0.7,
            cutoff: 3,
            dropout: 0.5,
            attn_scale: AttnScale::Literal,
            causal: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return fail(format!(
                "{} heads do not divide dimension {dim}",
                self.heads
            ));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        if self.cutoff == 0 || self.cutoff > max_cutoff(self.max_len) {
            return fail(format!(
                "cutoff {} outside 1..={} for max_len {}",
                self.cutoff,
                max_cutoff(self.max_len),
                self.max_len
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn logit_scale(&self, dim: usize) -> f64 {
        match self.attn_scale {
            AttnScale::Literal => 1.0 / dim as f64,
            AttnScale::Sqrt => 1.0 / ((dim / self.heads) as f64).sqrt(),
        }
    }
}

/// One input token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Item(usize),
    User(usize),
}

/// The last `max_len` items of `history`, or the user token followed by the
/// last `max_len − 1` items.
pub fn assemble_sequence(
    history: &[usize],
    user: Option<usize>,
    max_len: usize,
) -> Result<Vec<Token>> {
    if history.is_empty() {
        return Err(Error::Precondition(
            "cannot assemble an empty history".into(),
        ));
    }
    let room = max_len.saturating_sub(usize::from(user.is_some()));
    if room == 0 {
        return Err(Error::Config(format!(
            "max_len {max_len} leaves no room for items"
        )));
    }
    let tail = &history[history.len().saturating_sub(room)..];
    Ok(user
        .map(Token::User)
        .into_iter()
        .chain(tail.iter().map(|&i| Token::Item(i)))
        .collect())
}

/// Packed batch of token sequences.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    tokens: Vec<Token>,
    spans: Arc<[Span]>,
    positions: Arc<[usize]>,
    last_rows: Arc<[usize]>,
    max_len: usize,
}

impl SequenceBatch {
    pub fn new(sequences: &[Vec<Token>], max_len: usize) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut spans = Vec::with_capacity(sequences.len());
        let mut positions = Vec::new();
        for seq in sequences {
            if seq.is_empty() || seq.len() > max_len {
                return Err(Error::Dimension(format!(
                    "sequence length {} outside 1..={max_len}",
                    seq.len()
                )));
            }
            spans.push(Span {
                start: tokens.len(),
                len: seq.len(),
            });
            positions.extend(max_len - seq.len()..max_len);
            tokens.extend_from_slice(seq);
        }
        let last_rows: Vec<usize> = spans.iter().map(|s| s.end() - 1).collect();
        Ok(Self {
            tokens,
            spans: spans.into(),
            positions: positions.into(),
            last_rows: last_rows.into(),
            max_len,
        })
    }

    pub fn num_sequences(&self) -> usize {
        self.spans.len()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn spans(&self) -> &Arc<[Span]> {
        &self.spans
    }

    /// Frame position of every packed row.
    pub fn positions(&self) -> &Arc<[usize]> {
        &self.positions
    }

    /// Packed row of each sequence's last token.
    pub fn last_rows(&self) -> &Arc<[usize]> {
        &self.last_rows
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn has_user_tokens(&self) -> bool {
        self.tokens.iter().any(|t| matches!(t, Token::User(_)))
    }

    /// Row of each token in the stacked matrix `[items; users]`.
    pub fn source_rows(&self, num_items: usize) -> Vec<usize> {
        self.tokens
            .iter()
            .map(|t| match *t {
                Token::Item(i) => i,
                Token::User(u) => num_items + u,
            })
            .collect()
    }

    /// Left-padded `batch × max_len × d` view of packed rows and its mask.
    pub fn to_padded(&self, packed: &Mat) -> (Array3<f64>, Array2<bool>) {
        let d = packed.ncols();
        let mut out = Array3::zeros((self.spans.len(), self.max_len, d));
        let mut mask = Array2::from_elem((self.spans.len(), self.max_len), false);
        for (b, span) in self.spans.iter().enumerate() {
            for r in span.start..span.end() {
                let p = self.positions[r];
                mask[[b, p]] = true;
                for c in 0..d {
                    out[[b, p, c]] = packed[[r, c]];
                }
            }
        }
        (out, mask)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: Mat,
    pub wk: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    /// `1 × 1`
    pub beta: Mat,
    pub ln_gain: Mat,
    pub ln_bias: Mat,
}

impl BlockParams {
    pub fn xavier<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            wq: xavier_uniform(dim, dim, rng),
            wk: xavier_uniform(dim, dim, rng),
            w1: xavier_uniform(dim, 4 * dim, rng),
            b1: Mat::zeros((1, 4 * dim)),
            w2: xavier_uniform(4 * dim, dim, rng),
            b2: Mat::zeros((1, dim)),
            beta: Mat::zeros((1, 1)),
            ln_gain: Mat::ones((1, dim)),
            ln_bias: Mat::zeros((1, dim)),
        }
    }

    fn named(&self) -> [(&'static str, &Mat); 9] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("beta", &self.beta),
            ("ln_gain", &self.ln_gain),
            ("ln_bias", &self.ln_bias),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Mat); 9] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("beta", &mut self.beta),
            ("ln_gain", &mut self.ln_gain),
            ("ln_bias", &mut self.ln_bias),
        ]
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> BlockVars {
        let [wq, wk, w1, b1, w2, b2, beta, ln_gain, ln_bias] =
            self.named().map(|(_, m)| tape.leaf(m.clone(), trainable));
        BlockVars {
            wq,
            wk,
            w1,
            b1,
            w2,
            b2,
            beta,
            ln_gain,
            ln_bias,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub wq: Var,
    pub wk: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub beta: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

impl BlockVars {
    fn flatten(&self) -> [Var; 9] {
        [
            self.wq,
            self.wk,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.beta,
            self.ln_gain,
            self.ln_bias,
        ]
    }
}

/// Positional table, input LayerNorm and blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `max_len × d`
    pub pos: Mat,
    pub ln_gain: Mat,
    pub ln_bias: Mat,
    pub blocks: Vec<BlockParams>,
}

impl HeadParams {
    pub fn xavier<R: Rng + ?Sized>(config: &HeadConfig, dim: usize, rng: &mut R) -> Self {
        Self {
            pos: xavier_uniform(config.max_len, dim, rng),
            ln_gain: Mat::ones((1, dim)),
            ln_bias: Mat::zeros((1, dim)),
            blocks: (0..config.depth)
                .map(|_| BlockParams::xavier(dim, rng))
                .collect(),
        }
    }

    /// Tensors with checkpoint names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("pos".to_string(), &self.pos),
            ("emb_ln.gain".to_string(), &self.ln_gain),
            ("emb_ln.bias".to_string(), &self.ln_bias),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(
                b.named()
                    .into_iter()
                    .map(|(n, m)| (format!("block{l}.{n}"), m)),
            );
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = vec![
            ("pos".to_string(), &mut self.pos),
            ("emb_ln.gain".to_string(), &mut self.ln_gain),
            ("emb_ln.bias".to_string(), &mut self.ln_bias),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.named_mut()
                    .into_iter()
                    .map(|(n, m)| (format!("block{l}.{n}"), m)),
            );
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        HeadVars {
            pos: tape.leaf(self.pos.clone(), trainable),
            ln_gain: tape.leaf(self.ln_gain.clone(), trainable),
            ln_bias: tape.leaf(self.ln_bias.clone(), trainable),
            blocks: self
                .blocks
                .iter()
                .map(|b| b.bind(tape, trainable))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadVars {
    pub pos: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub blocks: Vec<BlockVars>,
}

impl HeadVars {
    /// Same order as [`HeadParams::named`].
    pub fn flatten(&self) -> Vec<Var> {
        let mut out = vec![self.pos, self.ln_gain, self.ln_bias];
        out.extend(self.blocks.iter().flat_map(BlockVars::flatten));
        out
    }
}

/// Validated configuration plus the cached low-pass frame matrix.
#[derive(Debug, Clone)]
pub struct HeadRuntime {
    pub config: HeadConfig,
    pub dim: usize,
    low_pass: Arc<Mat>,
}

impl HeadRuntime {
    pub fn new(config: HeadConfig, dim: usize) -> Result<Self> {
        config.validate(dim)?;
        let low_pass = Arc::new(low_pass_matrix(config.max_len, config.cutoff)?);
        Ok(Self {
            config,
            dim,
            low_pass,
        })
    }

    fn attention_spec(&self) -> AttentionSpec {
        AttentionSpec {
            heads: self.config.heads,
            scale: self.config.logit_scale(self.dim),
            causal: self.config.causal,
        }
    }

    /// `E = LayerNorm(S + P)` over packed rows.
    pub fn embed_on_tape(
        &self,
        tape: &mut Tape,
        vars: &HeadVars,
        tokens: Var,
        batch: &SequenceBatch,
    ) -> Var {
        let p = tape.gather(vars.pos, batch.positions().clone());
        let s = tape.add(tokens, p);
        tape.layer_norm(s, vars.ln_gain, vars.ln_bias)
    }

    /// One block; `dropout_rng` switches on training-mode dropout.
    pub fn block_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &BlockVars,
        x: Var,
        batch: &SequenceBatch,
        dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let alpha = self.config.alpha;
        let standard = (alpha < 1.0).then(|| {
            let q = tape.matmul(x, vars.wq);
            let k = tape.matmul(x, vars.wk);
            tape.attention(q, k, x, batch.spans().clone(), self.attention_spec(), None)
        });
        let frequency = if alpha > 0.0 {
            let op: Arc<dyn LinearMap> = Arc::new(PackedLowPass::new(
                self.low_pass.clone(),
                batch.spans().clone(),
            )?);
            let low = tape.linear_map(x, op);
            let high = tape.sub(x, low);
            let high = tape.scale_by(high, vars.beta);
            Some(tape.add(low, high))
        } else {
            None
        };
        let s = match (frequency, standard) {
            (Some(f), Some(a)) => {
                let f = tape.scale(f, alpha);
                let a = tape.scale(a, 1.0 - alpha);
                tape.add(f, a)
            }
            (Some(f), None) => f,
            (None, Some(a)) => a,
            (None, None) => unreachable!("alpha selects at least one branch"),
        };
        let h = tape.matmul(s, vars.w1);
        let h = tape.add_row(h, vars.b1);
        let h = tape.gelu(h);
        let h = tape.matmul(h, vars.w2);
        let mut ffn = tape.add_row(h, vars.b2);
        if let Some(rng) = dropout_rng {
            let p = self.config.dropout;
            if p > 0.0 {
                let keep = 1.0 / (1.0 - p);
                let mask = Mat::from_shape_simple_fn(tape.shape(ffn), || {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                });
                ffn = tape.mul_const(ffn, mask);
            }
        }
        let r = tape.add(x, ffn);
        Ok(tape.layer_norm(r, vars.ln_gain, vars.ln_bias))
    }

    /// Final-position representation of every sequence, `batch × d`.
    pub fn forward_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &HeadVars,
        tokens: Var,
        batch: &SequenceBatch,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        if batch.max_len() != self.config.max_len {
            return Err(Error::Dimension(format!(
                "batch frame {} differs from max_len {}",
                batch.max_len(),
                self.config.max_len
            )));
        }
        let mut x = self.embed_on_tape(tape, vars, tokens, batch);
        for block in &vars.blocks {
            x = self.block_on_tape(tape, block, x, batch, dropout_rng.as_deref_mut())?;
        }
        Ok(tape.gather(x, batch.last_rows().clone()))
    }

    /// Eval-mode final-position representations for packed token rows.
    pub fn forward(&self, params: &HeadParams, tokens: &Mat, batch: &SequenceBatch) -> Result<Mat> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let t = tape.constant(tokens.clone());
        let out =
            self.forward_on_tape::<rand::rngs::ThreadRng>(&mut tape, &vars, t, batch, None)?;
        Ok(tape.value(out).clone())
    }

    /// Eval-mode single block over one sequence of `T ≤ max_len` rows.
    pub fn block_forward(&self, params: &BlockParams, x: &Mat) -> Result<Mat> {
        let batch = SequenceBatch::new(&[vec![Token::Item(0); x.nrows()]], self.config.max_len)?;
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out =
            self.block_on_tape::<rand::rngs::ThreadRng>(&mut tape, &vars, xv, &batch, None)?;
        Ok(tape.value(out).clone())
    }
}

/// `Λ X` for one sequence, with `Λ = softmax(Q Kᵀ · scale)` per head.
pub fn standard_attention(x: &Mat, wq: &Mat, wk: &Mat, spec: AttentionSpec) -> Mat {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let q = tape.constant(x.dot(wq));
    let k = tape.constant(x.dot(wk));
    let span = [Span {
        start: 0,
        len: x.nrows(),
    }];
    let out = tape.attention(q, k, xv, &span[..], spec, None);
    tape.value(out).clone()
}

/// `ŷ = H x` for each row `x` of `last`; returns `batch × num_items`.
pub fn score_items(last: &Mat, items: &Mat) -> Mat {
    last.dot(&items.t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn assembly_layout_and_truncation() {
        let seq = assemble_sequence(&[3, 7], None, 4).unwrap();
        assert_eq!(seq, vec![Token::Item(3), Token::Item(7)]);
        let batch = SequenceBatch::new(std::slice::from_ref(&seq), 4).unwrap();
        let h = array![[1.0], [2.0]];
        let (padded, mask) = batch.to_padded(&h);
        assert_eq!(
            padded.slice(s![0, .., 0]).to_vec(),
            vec![0.0, 0.0, 1.0, 2.0]
        );
        assert_eq!(mask.row(0).to_vec(), vec![false, false, true, true]);

        let with_user = assemble_sequence(&[3, 7], Some(5), 4).unwrap();
        assert_eq!(
            with_user,
            vec![Token::User(5), Token::Item(3), Token::Item(7)]
        );
        let batch = SequenceBatch::new(&[with_user], 4).unwrap();
        assert_eq!(batch.positions().to_vec(), vec![1, 2, 3]);
        assert_eq!(batch.source_rows(10), vec![15, 3, 7]);

        let long: Vec<usize> = (0..60).collect();
        let seq = assemble_sequence(&long, None, 50).unwrap();
        assert_eq!(seq.len(), 50);
        assert_eq!(seq[0], Token::Item(10));
        assert_eq!(
            assemble_sequence(&long, Some(0), 50).unwrap()[1],
            Token::Item(11)
        );
        assert!(assemble_sequence(&[], None, 4).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(HeadConfig::default().validate(64).is_ok());
        let bad_heads = HeadConfig {
            heads: 3,
            ..HeadConfig::default()
        };
        assert!(bad_heads.validate(64).is_err());
        let bad_cut = HeadConfig {
            cutoff: 27,
            ..HeadConfig::default()
        };
        assert!(bad_cut.validate(64).is_err());
        assert_eq!(HeadConfig::default().logit_scale(64), 1.0 / 64.0);
        let sqrt = HeadConfig {
            attn_scale: AttnScale::Sqrt,
            ..HeadConfig::default()
        };
        assert_eq!(sqrt.logit_scale(64), 1.0 / 32f64.sqrt());
    }

    #[test]
    fn attention_trivial_weights() {
        // Zero query weights make every logit equal.
        let x = array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]];
        let spec = AttentionSpec {
            heads: 1,
            scale: 1.0,
            causal: false,
        };
        let out = standard_attention(&x, &Mat::zeros((2, 2)), &Mat::eye(2), spec);
        for r in 0..3 {
            assert!((out[[r, 0]] - 1.0).abs() < 1e-12 && (out[[r, 1]] - 1.0).abs() < 1e-12);
        }
        let causal = AttentionSpec {
            causal: true,
            ..spec
        };
        let out = standard_attention(&x, &Mat::eye(2), &Mat::eye(2), causal);
        assert_eq!(out.row(0), x.row(0));
    }

    #[test]
    fn alpha_zero_skips_the_frequency_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = HeadConfig {
            alpha: 0.0,
            max_len: 6,
            cutoff: 2,
            ..HeadConfig::default()
        };
        let rt = HeadRuntime::new(cfg, 4).unwrap();
        let mut params = BlockParams::xavier(4, &mut rng);
        let x = xavier_uniform(3, 4, &mut rng);
        let a = rt.block_forward(&params, &x).unwrap();
        params.beta[[0, 0]] = 0.9;
        let b = rt.block_forward(&params, &x).unwrap();
        assert_eq!(a, b);
    }
}
