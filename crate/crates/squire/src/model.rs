//! Masked Transformer encoder over (query, path prefix) with a tied
//! embedding matrix: the same `V×d` table embeds input tokens and projects
//! hidden states back to token logits.
//!
//! Layout follows the generation grammar: positions 0–1 hold the query
//! (h, r), later positions hold path tokens. The visibility mask lets every
//! position attend to the query and to its own prefix, never ahead.

use rand_chacha::ChaCha8Rng;

use crate::config::{Activation, ModelConfig};
use crate::kg::TokenId;
use crate::nn::{ParamId, Params, Real, Tape, Tensor, Var};
use crate::rng::{salt, stream};
use crate::{Error, Result};

/// Query positions at the front of every sequence.
pub const QUERY_LEN: usize = 2;

/// Additive attention mask: position `i` may attend to `j` iff
/// `j < query_len` or `j ≤ i`.
pub fn visibility_mask<T: Real>(seq_len: usize, query_len: usize) -> Tensor<T> {
    assert!(seq_len >= query_len, "seq_len {seq_len} < query_len {query_len}");
    let mut data = vec![T::zero(); seq_len * seq_len];
    for i in 0..seq_len {
        for j in 0..seq_len {
            if !(j < query_len || j <= i) {
                data[i * seq_len + j] = T::neg_infinity();
            }
        }
    }
    Tensor::from_vec(&[seq_len, seq_len], data)
}

#[derive(Debug)]
struct LayerParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
}

/// Transformer encoder with prefix-visibility masking and tied embeddings.
#[derive(Debug)]
pub struct SquireModel<T> {
    cfg: ModelConfig,
    params: Params<T>,
    embed: ParamId,
    pos: ParamId,
    layers: Vec<LayerParams>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w1: ParamId,
    head_b1: ParamId,
    head_w2: ParamId,
    head_b2: ParamId,
}

/// Attention matrices from one forward pass: `[layer][head]` row-stochastic
/// `L×L` matrices, zero where the visibility mask hides a position.
pub type AttentionTrace<T> = Vec<Vec<Tensor<T>>>;

impl<T: Real> SquireModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        assert_eq!(cfg.d_model % cfg.heads, 0, "d_model not divisible by heads");
        let d = cfg.d_model;
        let ff = cfg.ff_dim;
        let v = cfg.vocab_size;
        let mut params = Params::new();
        let mut counter = 0u64;
        let mut init = |params: &mut Params<T>, name: String, shape: &[usize], std: f64| {
            counter += 1;
            let mut rng = stream(seed, salt::INIT, counter);
            params.add(name, Tensor::randn(shape, std, &mut rng))
        };
        let xavier = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();

        let emb_std = (d as f64).powf(-0.5);
        let embed = init(&mut params, "embed".into(), &[v, d], emb_std);
        let pos = init(&mut params, "pos".into(), &[cfg.max_seq_len, d], emb_std);

        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerParams {
                ln1_g: params.add(p("ln1.g"), Tensor::full(&[d], T::one())),
                ln1_b: params.add(p("ln1.b"), Tensor::zeros(&[d])),
                wq: init(&mut params, p("wq"), &[d, d], xavier(d, d)),
                bq: params.add(p("bq"), Tensor::zeros(&[d])),
                wk: init(&mut params, p("wk"), &[d, d], xavier(d, d)),
                bk: params.add(p("bk"), Tensor::zeros(&[d])),
                wv: init(&mut params, p("wv"), &[d, d], xavier(d, d)),
                bv: params.add(p("bv"), Tensor::zeros(&[d])),
                wo: init(&mut params, p("wo"), &[d, d], xavier(d, d)),
                bo: params.add(p("bo"), Tensor::zeros(&[d])),
                ln2_g: params.add(p("ln2.g"), Tensor::full(&[d], T::one())),
                ln2_b: params.add(p("ln2.b"), Tensor::zeros(&[d])),
                ff_w1: init(&mut params, p("ff.w1"), &[d, ff], xavier(d, ff)),
                ff_b1: params.add(p("ff.b1"), Tensor::zeros(&[ff])),
                ff_w2: init(&mut params, p("ff.w2"), &[ff, d], xavier(ff, d)),
                ff_b2: params.add(p("ff.b2"), Tensor::zeros(&[d])),
            });
        }
        let lnf_g = params.add("lnf.g", Tensor::full(&[d], T::one()));
        let lnf_b = params.add("lnf.b", Tensor::zeros(&[d]));
        let head_w1 = init(&mut params, "head.w1".into(), &[d, d], xavier(d, d));
        let head_b1 = params.add("head.b1", Tensor::zeros(&[d]));
        let head_w2 = init(&mut params, "head.w2".into(), &[d, d], xavier(d, d));
        let head_b2 = params.add("head.b2", Tensor::zeros(&[d]));

        SquireModel {
            cfg,
            params,
            embed,
            pos,
            layers,
            lnf_g,
            lnf_b,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    fn act(&self, tape: &mut Tape<T>, x: Var) -> Var {
        match self.cfg.activation {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }

    const LN_EPS: f64 = 1e-5;

    fn layer_norm_affine(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
    ) -> Var {
        let g = tape.param(&self.params, gamma);
        let b = tape.param(&self.params, beta);
        let n = tape.layer_norm(x, T::from_f64(Self::LN_EPS));
        let scaled = tape.mul_row(n, g);
        tape.add_row(scaled, b)
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = tape.param(&self.params, w);
        let b = tape.param(&self.params, b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    /// Encode `tokens` into `L×d` hidden states (pre-norm stack, final LN).
    fn encode(
        &self,
        tape: &mut Tape<T>,
        tokens: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
        mut attn: Option<&mut AttentionTrace<T>>,
    ) -> Var {
        let len = tokens.len();
        assert!(len >= QUERY_LEN, "sequence needs the two query tokens");
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let mask = visibility_mask::<T>(len, QUERY_LEN);
        let head_scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let emb_table = tape.param(&self.params, self.embed);
        let pos_table = tape.param(&self.params, self.pos);
        let tok = tape.embed(emb_table, tokens);
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.embed(pos_table, &positions);
        let mut x = tape.add(tok, pos);
        if let Some(r) = rng.as_deref_mut() {
            x = tape.dropout(x, self.cfg.dropout, true, r);
        }

        for layer in &self.layers {
            let normed = self.layer_norm_affine(tape, x, layer.ln1_g, layer.ln1_b);
            let q = self.linear(tape, normed, layer.wq, layer.bq);
            let k = self.linear(tape, normed, layer.wk, layer.bk);
            let v = self.linear(tape, normed, layer.wv, layer.bv);

            let mut head_outs = Vec::with_capacity(heads);
            let mut head_probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let qh = tape.slice_cols(q, lo, hi);
                let kh = tape.slice_cols(k, lo, hi);
                let vh = tape.slice_cols(v, lo, hi);
                let scores = tape.matmul_nt(qh, kh);
                let scaled = tape.scale(scores, head_scale);
                let probs = tape.masked_softmax(scaled, &mask);
                if attn.is_some() {
                    head_probs.push(tape.value(probs).clone());
                }
                head_outs.push(tape.matmul(probs, vh));
            }
            if let Some(trace) = attn.as_deref_mut() {
                trace.push(head_probs);
            }
            let ctx = tape.concat_cols(&head_outs);
            let mut proj = self.linear(tape, ctx, layer.wo, layer.bo);
            if let Some(r) = rng.as_deref_mut() {
                proj = tape.dropout(proj, self.cfg.dropout, true, r);
            }
            x = tape.add(x, proj);

            let normed = self.layer_norm_affine(tape, x, layer.ln2_g, layer.ln2_b);
            let hidden = self.linear(tape, normed, layer.ff_w1, layer.ff_b1);
            let hidden = self.act(tape, hidden);
            let mut out = self.linear(tape, hidden, layer.ff_w2, layer.ff_b2);
            if let Some(r) = rng.as_deref_mut() {
                out = tape.dropout(out, self.cfg.dropout, true, r);
            }
            x = tape.add(x, out);
        }
        self.layer_norm_affine(tape, x, self.lnf_g, self.lnf_b)
    }

    /// d→d output MLP followed by the tied-embedding projection to logits.
    fn project_logits(&self, tape: &mut Tape<T>, hidden: Var) -> Var {
        let h1 = self.linear(tape, hidden, self.head_w1, self.head_b1);
        let h1 = self.act(tape, h1);
        let h2 = self.linear(tape, h1, self.head_w2, self.head_b2);
        let emb = tape.param(&self.params, self.embed);
        tape.matmul_nt(h2, emb)
    }

    fn check_input(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > self.cfg.max_seq_len {
            return Err(Error::Shape {
                op: "encode",
                detail: format!(
                    "sequence length {} exceeds max_seq_len {}",
                    tokens.len(),
                    self.cfg.max_seq_len
                ),
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("token id {t} outside vocabulary of {}", self.cfg.vocab_size),
            });
        }
        Ok(())
    }

    /// Next-token logits for query (h, r) and a path prefix.
    pub fn next_token_logits(
        &self,
        query: (TokenId, TokenId),
        prefix: &[TokenId],
    ) -> Result<Tensor<T>> {
        let tokens = input_tokens(query, prefix);
        self.check_input(&tokens)?;
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, &tokens, None, None);
        let last = tape.select_rows(enc, tokens.len() - 1, tokens.len());
        let logits = self.project_logits(&mut tape, last);
        Ok(tape.value(logits).clone())
    }

    /// Softmax over the full vocabulary; sums to 1.
    pub fn next_token_distribution(
        &self,
        query: (TokenId, TokenId),
        prefix: &[TokenId],
    ) -> Result<Vec<T>> {
        let logits = self.next_token_logits(query, prefix)?;
        let mut tape = Tape::new();
        let v = tape.constant(logits);
        let zero_mask = Tensor::zeros(&[1, self.cfg.vocab_size]);
        let probs = tape.masked_softmax(v, &zero_mask);
        Ok(tape.value(probs).data().to_vec())
    }

    /// Teacher-forced label-smoothed loss of one (query, path) pair.
    ///
    /// `masked_path` feeds the encoder; `target_path` supplies the labels.
    /// Positions flagged in `excluded` contribute zero loss but still count
    /// in the 1/|τ| normalizer.
    #[allow(clippy::too_many_arguments)]
    pub fn sequence_loss(
        &self,
        tape: &mut Tape<T>,
        query: (TokenId, TokenId),
        target_path: &[TokenId],
        masked_path: &[TokenId],
        excluded: &[bool],
        epsilon: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        assert_eq!(target_path.len(), masked_path.len());
        assert_eq!(target_path.len(), excluded.len());
        assert!(!target_path.is_empty(), "path must end with <eos>");
        let path_len = target_path.len();
        // Inputs stop before the last token; position k predicts τ_{k+1}.
        let tokens = input_tokens(query, &masked_path[..path_len - 1]);
        self.check_input(&tokens)?;

        let enc = self.encode(tape, &tokens, rng, None);
        let rows = tape.select_rows(enc, 1, tokens.len());
        let logits = self.project_logits(tape, rows);

        let targets: Vec<usize> = target_path.iter().map(|t| t.index()).collect();
        let weights: Vec<T> = excluded
            .iter()
            .map(|&e| if e { T::zero() } else { T::one() })
            .collect();
        let inv_len = T::from_f64(1.0 / path_len as f64);
        Ok(tape.label_smooth_ce(logits, &targets, &weights, T::from_f64(epsilon), inv_len))
    }

    /// Per-layer, per-head attention matrices for a (query, prefix) input.
    pub fn export_attention(
        &self,
        query: (TokenId, TokenId),
        prefix: &[TokenId],
    ) -> Result<AttentionTrace<T>> {
        let tokens = input_tokens(query, prefix);
        self.check_input(&tokens)?;
        let mut tape = Tape::new();
        let mut trace = Vec::new();
        self.encode(&mut tape, &tokens, None, Some(&mut trace));
        Ok(trace)
    }
}

/// Sequence layout: `[h, r, prefix…]`.
pub fn input_tokens(query: (TokenId, TokenId), prefix: &[TokenId]) -> Vec<usize> {
    let mut tokens = Vec::with_capacity(QUERY_LEN + prefix.len());
    tokens.push(query.0.index());
    tokens.push(query.1.index());
    tokens.extend(prefix.iter().map(|t| t.index()));
    tokens
}
