//! Beam-search path generation with length-normalized scoring, entity
//! ranking by max-score or self-consistency, and edge-constraint filtering.
//!
//! Generation is grammar-constrained but graph-free: positions alternate
//! relation/entity tokens and `<eos>` may only close a complete hop, yet the
//! emitted hops need not exist as edges — the model may "walk and complete".

use std::collections::{BTreeMap, HashSet};

use crate::kg::{Edge, EntityId, TokenId, Vocabulary};
use crate::model::SquireModel;
use crate::nn::{Real, Tensor};
use crate::Result;

/// One (possibly unfinished) decoded path.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Path tokens; finished hypotheses end with `<eos>`.
    pub tokens: Vec<TokenId>,
    /// Σ log p over the emitted tokens.
    pub sum_logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Length-normalized score: `sum_logprob / |τ|`, `<eos>` included in |τ|.
    pub fn score(&self) -> f64 {
        self.sum_logprob / self.tokens.len() as f64
    }

    /// Terminal entity of a finished hypothesis.
    pub fn tail(&self) -> EntityId {
        debug_assert!(self.finished && self.tokens.len() >= 2);
        EntityId(self.tokens[self.tokens.len() - 2].0)
    }

    /// Completed hops (`<eos>` excluded).
    pub fn hops(&self) -> usize {
        self.tokens.len() / 2
    }
}

/// Tokens the grammar permits at the next position.
///
/// Even positions are relation slots (`<eos>` allowed once a hop is complete,
/// and forced once `max_hops` hops are emitted); odd positions are entity
/// slots.
pub fn allowed_next_tokens(
    vocab: &Vocabulary,
    prefix_len: usize,
    max_hops: usize,
) -> Vec<TokenId> {
    if prefix_len % 2 == 1 {
        return vocab.entities().map(EntityId::token).collect();
    }
    let hops = prefix_len / 2;
    if hops >= max_hops {
        return vec![vocab.eos()];
    }
    let mut out: Vec<TokenId> = vocab.relations().collect();
    if hops >= 1 {
        out.push(vocab.eos());
    }
    out
}

/// Log-probabilities renormalized over the allowed token set.
pub fn allowed_log_probs<T: Real>(
    logits: &Tensor<T>,
    allowed: &[TokenId],
) -> Vec<(TokenId, f64)> {
    let row = logits.row(0);
    let vals: Vec<f64> = allowed.iter().map(|t| row[t.index()].to_f64()).collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    allowed
        .iter()
        .zip(vals)
        .map(|(&t, v)| (t, v - lse))
        .collect()
}

fn hypothesis_order(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.score()
        .partial_cmp(&a.score())
        .expect("scores are finite")
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search for query `(h, r)`: up to `beam_size` finished hypotheses of
/// ≤ `max_hops` hops, sorted by length-normalized score.
pub fn beam_search<T: Real>(
    model: &SquireModel<T>,
    vocab: &Vocabulary,
    query: (EntityId, TokenId),
    beam_size: usize,
    max_hops: usize,
) -> Result<Vec<Hypothesis>> {
    let prefixes = beam_prefixes(model, vocab, query, beam_size, max_hops, usize::MAX, true)?;
    let mut finished = prefixes.1;
    finished.sort_by(hypothesis_order);
    finished.truncate(beam_size);
    Ok(finished)
}

/// Beam expansion core. Runs `steps` expansion rounds (each adds one token),
/// collecting finished hypotheses when `allow_eos` permits. Returns (live,
/// finished).
#[allow(clippy::type_complexity)]
fn beam_prefixes<T: Real>(
    model: &SquireModel<T>,
    vocab: &Vocabulary,
    query: (EntityId, TokenId),
    beam_size: usize,
    max_hops: usize,
    steps: usize,
    allow_eos: bool,
) -> Result<(Vec<Hypothesis>, Vec<Hypothesis>)> {
    let q = (query.0.token(), query.1);
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        sum_logprob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let max_len = 2 * max_hops + 1;

    let mut step = 0;
    while !live.is_empty() && step < steps {
        step += 1;
        let mut expansions: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let mut allowed = allowed_next_tokens(vocab, hyp.tokens.len(), max_hops);
            if !allow_eos {
                allowed.retain(|&t| t != vocab.eos());
                if allowed.is_empty() {
                    continue;
                }
            }
            let logits = model.next_token_logits(q, &hyp.tokens)?;
            for (tok, lp) in allowed_log_probs(&logits, &allowed) {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                expansions.push(Hypothesis {
                    finished: tok == vocab.eos(),
                    sum_logprob: hyp.sum_logprob + lp,
                    tokens,
                });
            }
        }
        // Rank this step's expansions by running log-probability (equal
        // lengths), deterministic tie-break on the token sequence.
        expansions.sort_by(|a, b| {
            b.sum_logprob
                .partial_cmp(&a.sum_logprob)
                .expect("log-probs are finite")
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        expansions.truncate(beam_size);
        live = Vec::new();
        for hyp in expansions {
            if hyp.finished {
                finished.push(hyp);
            } else if hyp.tokens.len() < max_len {
                live.push(hyp);
            }
        }
    }
    Ok((live, finished))
}

/// Top-`beam_size` prefixes of exactly `hops` complete hops (no `<eos>`),
/// ranked by running log-probability.
pub fn beam_hop_prefixes<T: Real>(
    model: &SquireModel<T>,
    vocab: &Vocabulary,
    query: (EntityId, TokenId),
    beam_size: usize,
    hops: usize,
    max_hops: usize,
) -> Result<Vec<Hypothesis>> {
    let (live, _) = beam_prefixes(model, vocab, query, beam_size, max_hops, 2 * hops, false)?;
    Ok(live)
}

/// Entity ranking: scores sorted descending, ties by entity id ascending,
/// plus the best path that led to each entity.
#[derive(Clone, Debug, Default)]
pub struct RankingResult {
    pub ordered: Vec<(EntityId, f64)>,
    pub best_path: BTreeMap<EntityId, Vec<TokenId>>,
}

impl RankingResult {
    pub fn score_of(&self, e: EntityId) -> Option<f64> {
        self.ordered
            .iter()
            .find(|(ent, _)| *ent == e)
            .map(|(_, s)| *s)
    }
}

fn rank_by<F: Fn(&[&Hypothesis]) -> f64>(
    hypotheses: &[Hypothesis],
    entity_score: F,
) -> RankingResult {
    let mut groups: BTreeMap<EntityId, Vec<&Hypothesis>> = BTreeMap::new();
    for h in hypotheses.iter().filter(|h| h.finished) {
        groups.entry(h.tail()).or_default().push(h);
    }
    let mut ordered: Vec<(EntityId, f64)> = Vec::with_capacity(groups.len());
    let mut best_path = BTreeMap::new();
    for (&e, hyps) in &groups {
        ordered.push((e, entity_score(hyps)));
        let best = hyps
            .iter()
            .copied()
            .min_by(|a, b| hypothesis_order(a, b))
            .expect("group is nonempty");
        best_path.insert(e, best.tokens.clone());
    }
    // Stable over the BTreeMap's id order, so equal scores stay id-ascending.
    ordered.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("scores are finite"));
    RankingResult { ordered, best_path }
}

/// Entity score = max length-normalized path score.
pub fn rank_max(hypotheses: &[Hypothesis]) -> RankingResult {
    rank_by(hypotheses, |hyps| {
        hyps.iter()
            .map(|h| h.score())
            .fold(f64::NEG_INFINITY, f64::max)
    })
}

/// Self-consistency: entity score = Σ exp(sum_logprob) over its paths (raw
/// sequence probability, not length-normalized).
pub fn rank_self_consistency(hypotheses: &[Hypothesis]) -> RankingResult {
    rank_by(hypotheses, |hyps| {
        hyps.iter().map(|h| h.sum_logprob.exp()).sum()
    })
}

/// Keep hypotheses whose every hop, starting from the query head, is in
/// `allowed_edges`.
pub fn filter_by_edge_constraint(
    hypotheses: &[Hypothesis],
    head: EntityId,
    allowed_edges: &HashSet<Edge>,
) -> Vec<Hypothesis> {
    hypotheses
        .iter()
        .filter(|h| {
            let mut cur = head;
            for hop in h.tokens[..h.tokens.len().saturating_sub(1)].chunks(2) {
                if hop.len() < 2 {
                    return false;
                }
                let (rel, ent) = (hop[0], EntityId(hop[1].0));
                if !allowed_edges.contains(&(cur, rel, ent)) {
                    return false;
                }
                cur = ent;
            }
            true
        })
        .cloned()
        .collect()
}
