//! Filtered link-prediction metrics (MRR, Hits@N) and the edge-constraint
//! analysis.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::decode::{beam_search, filter_by_edge_constraint, rank_max, rank_self_consistency, RankingResult};
use crate::kg::{Edge, EntityId, KnowledgeGraph, TokenId};
use crate::model::SquireModel;
use crate::nn::Real;
use crate::{Error, Result};

/// Link-prediction report; `hits` keyed by N ∈ {1, 3, 10}.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub n_queries: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constraints: Option<BTreeMap<String, f64>>,
    #[serde(skip)]
    pub ranks: Vec<usize>,
}

/// Rank of `gold` under the filtered protocol: every other candidate `e`
/// with `(h, r, e)` known-true is removed, candidates tied with gold's score
/// count against it, and a gold absent from the ranking gets the pessimistic
/// rank `n_entities`.
pub fn filtered_rank(
    ranking: &RankingResult,
    query: (EntityId, TokenId),
    gold: EntityId,
    known_true: &HashSet<Edge>,
    n_entities: usize,
) -> usize {
    let (h, r) = query;
    let gold_score = match ranking.score_of(gold) {
        Some(s) => s,
        None => return n_entities,
    };
    let mut rank = 1;
    for &(e, score) in &ranking.ordered {
        if e == gold || known_true.contains(&(h, r, e)) {
            continue;
        }
        if score >= gold_score {
            rank += 1;
        }
    }
    rank
}

/// MRR and Hits@{1,3,10} over per-query ranks.
pub fn compute_metrics(ranks: &[usize]) -> Result<EvalReport> {
    if ranks.is_empty() {
        return Err(Error::Config("compute_metrics: no ranks".into()));
    }
    let n = ranks.len() as f64;
    let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(EvalReport {
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        hits1: hits(1),
        hits3: hits(3),
        hits10: hits(10),
        n_queries: ranks.len(),
        constraints: None,
        ranks: ranks.to_vec(),
    })
}

/// A directed link-prediction query with its gold answer.
#[derive(Copy, Clone, Debug)]
pub struct Query {
    pub head: EntityId,
    pub rel: TokenId,
    pub gold: EntityId,
}

/// Test triples as tail queries in both directions (tail via `r`, head via
/// `r⁻¹`).
pub fn queries_of_split(graph: &KnowledgeGraph, split: &[crate::kg::Triple]) -> Vec<Query> {
    let vocab = graph.vocab();
    split
        .iter()
        .flat_map(|t| {
            [
                Query {
                    head: t.head,
                    rel: t.rel,
                    gold: t.tail,
                },
                Query {
                    head: t.tail,
                    rel: vocab.inverse(t.rel),
                    gold: t.head,
                },
            ]
        })
        .collect()
}

#[derive(Copy, Clone, Debug)]
pub struct EvalOptions {
    pub beam_size: usize,
    pub max_hops: usize,
    pub self_consistency: bool,
}

/// Per-query outcome retained for reports and prediction dumps.
#[derive(Clone, Debug)]
pub struct QueryOutcome {
    pub query: Query,
    pub rank: usize,
    pub ranking: RankingResult,
}

/// Beam-search every query and rank under the filtered protocol.
pub fn evaluate_queries<T: Real>(
    model: &SquireModel<T>,
    graph: &KnowledgeGraph,
    queries: &[Query],
    opts: EvalOptions,
) -> Result<Vec<QueryOutcome>> {
    let vocab = graph.vocab();
    let n_entities = vocab.n_entities();
    queries
        .par_iter()
        .map(|&query| {
            let hyps = beam_search(
                model,
                vocab,
                (query.head, query.rel),
                opts.beam_size,
                opts.max_hops,
            )?;
            let ranking = if opts.self_consistency {
                rank_self_consistency(&hyps)
            } else {
                rank_max(&hyps)
            };
            let rank = filtered_rank(
                &ranking,
                (query.head, query.rel),
                query.gold,
                graph.known_true(),
                n_entities,
            );
            Ok(QueryOutcome {
                query,
                rank,
                ranking,
            })
        })
        .collect()
}

/// Full filtered evaluation of a query set.
pub fn evaluate<T: Real>(
    model: &SquireModel<T>,
    graph: &KnowledgeGraph,
    queries: &[Query],
    opts: EvalOptions,
) -> Result<EvalReport> {
    let outcomes = evaluate_queries(model, graph, queries, opts)?;
    let ranks: Vec<usize> = outcomes.iter().map(|o| o.rank).collect();
    compute_metrics(&ranks)
}

/// Hits@1 under each named edge constraint: hypotheses are filtered to
/// paths using only allowed edges, and gold is ranked among the survivors.
pub fn constraint_analysis<T: Real>(
    model: &SquireModel<T>,
    graph: &KnowledgeGraph,
    queries: &[Query],
    edge_sets: &[(String, HashSet<Edge>)],
    opts: EvalOptions,
) -> Result<BTreeMap<String, f64>> {
    let vocab = graph.vocab();
    let n_entities = vocab.n_entities();
    let per_query: Vec<Vec<usize>> = queries
        .par_iter()
        .map(|&query| {
            let hyps = beam_search(
                model,
                vocab,
                (query.head, query.rel),
                opts.beam_size,
                opts.max_hops,
            )?;
            let ranks = edge_sets
                .iter()
                .map(|(_, allowed)| {
                    let surviving = filter_by_edge_constraint(&hyps, query.head, allowed);
                    let ranking = if opts.self_consistency {
                        rank_self_consistency(&surviving)
                    } else {
                        rank_max(&surviving)
                    };
                    filtered_rank(
                        &ranking,
                        (query.head, query.rel),
                        query.gold,
                        graph.known_true(),
                        n_entities,
                    )
                })
                .collect();
            Ok(ranks)
        })
        .collect::<Result<_>>()?;

    let mut out = BTreeMap::new();
    for (i, (name, _)) in edge_sets.iter().enumerate() {
        let hits1 = per_query.iter().filter(|ranks| ranks[i] <= 1).count() as f64
            / queries.len().max(1) as f64;
        out.insert(name.clone(), hits1);
    }
    Ok(out)
}
