//! Training loop and the iterative data-aggregation strategy.
//!
//! Iteration 1 trains on the initial rule/random/fallback pairs for n
//! epochs. Each later round k ≤ N asks the model for its top-m prefixes of
//! exactly (k−1) hops per directed train triple, completes them with a
//! graph-valid continuation towards the tail, adds the resulting pairs (m
//! per triple per round, topping up with fresh full-path pairs when
//! prefixes admit no continuation), and trains for ⌈n/k⌉ more epochs — so
//! after round k the training set is k × its initial size.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::decode::beam_hop_prefixes;
use crate::eval::{evaluate, queries_of_split, EvalOptions};
use crate::kg::{EntityId, KnowledgeGraph, TokenId};
use crate::model::SquireModel;
use crate::nn::{lr_at, Real, Tape};
use crate::rng::{salt, stream};
use crate::rules::ChainRule;
use crate::sampler::{make_training_pairs, mask_entities, random_path, Provenance, QueryPathPair};
use crate::{Error, Result};

/// Aggregated query-path training set.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub pairs: Vec<QueryPathPair>,
    pub initial_size: usize,
}

/// One JSON-lines training log record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub iteration_k: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_mrr: Option<f64>,
}

/// Outcome of a training run.
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    /// Training-set size after each iteration's aggregation (index 0 = initial).
    pub round_sizes: Vec<usize>,
}

/// Learning-rate bookkeeping shared across iterative rounds.
pub struct Schedule {
    pub step: u64,
    pub planned_total: u64,
}

fn directed_train_triples(graph: &KnowledgeGraph) -> Vec<(EntityId, TokenId, EntityId)> {
    let vocab = graph.vocab();
    graph
        .train()
        .iter()
        .flat_map(|t| {
            [
                (t.head, t.rel, t.tail),
                (t.tail, vocab.inverse(t.rel), t.head),
            ]
        })
        .collect()
}

/// m pairs per directed train triple (forward and inverse queries alike).
pub fn build_initial_dataset(
    graph: &KnowledgeGraph,
    golden_rules: &[ChainRule],
    config: &TrainConfig,
) -> TrainingSet {
    let directed = directed_train_triples(graph);
    let pairs: Vec<QueryPathPair> = directed
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, &(h, rel, t))| {
            let mut rng = stream(config.seed, salt::PAIRS, i as u64);
            make_training_pairs(
                graph,
                h,
                rel,
                t,
                golden_rules,
                config.pairs_per_triple,
                config.max_hops,
                &mut rng,
            )
        })
        .collect();
    let initial_size = pairs.len();
    TrainingSet {
        pairs,
        initial_size,
    }
}

/// Planned optimization steps for the whole run, so the LR schedule spans
/// every iterative round.
pub fn planned_steps(initial_size: usize, config: &TrainConfig) -> u64 {
    let batches = |pairs: usize| pairs.div_ceil(config.batch_size) as u64;
    let rounds = if config.iterative { config.max_hops } else { 1 };
    (1..=rounds)
        .map(|k| (config.epochs.div_ceil(k)) as u64 * batches(k * initial_size))
        .sum()
}

/// Train for `epochs` epochs of seeded shuffled mini-batches.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs<T: Real>(
    model: &mut SquireModel<T>,
    graph: &KnowledgeGraph,
    dataset: &TrainingSet,
    epochs: usize,
    iteration_k: usize,
    config: &TrainConfig,
    schedule: &mut Schedule,
    log: &mut Vec<LogRecord>,
) -> Result<()> {
    if dataset.pairs.is_empty() {
        return Ok(());
    }
    let valid_queries = queries_of_split(graph, graph.valid());
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..dataset.pairs.len()).collect();
        let mut shuffle_rng = stream(
            config.seed,
            salt::SHUFFLE,
            (iteration_k as u64) << 32 | epoch as u64,
        );
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(config.batch_size) {
            schedule.step += 1;
            let lr = lr_at(
                schedule.step,
                schedule.planned_total,
                config.warmup_ratio,
                config.lr,
            );
            let mut mask_rng = stream(config.seed, salt::MASK, schedule.step);
            let mut dropout_rng = stream(config.seed, salt::DROPOUT, schedule.step);
            let inv_batch = T::from_f64(1.0 / chunk.len() as f64);
            let mut batch_loss = 0.0;
            for &ix in chunk {
                let pair = &dataset.pairs[ix];
                let (masked, excluded) =
                    mask_entities(graph, &pair.path, config.mask_prob, &mut mask_rng);
                let mut tape = Tape::new();
                let loss = model.sequence_loss(
                    &mut tape,
                    (pair.head.token(), pair.rel),
                    &pair.path,
                    &masked,
                    &excluded,
                    config.label_smoothing,
                    Some(&mut dropout_rng),
                )?;
                let raw = tape.value(loss).item().to_f64();
                if !raw.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at step {}",
                        schedule.step
                    )));
                }
                batch_loss += raw;
                let scaled = tape.scale(loss, inv_batch);
                tape.backward(scaled, model.params_mut());
            }
            model.params_mut().adam_step(T::from_f64(lr));

            let mut record = LogRecord {
                step: schedule.step,
                epoch,
                iteration_k,
                loss: batch_loss / chunk.len() as f64,
                lr,
                valid_mrr: None,
            };
            if let Some(every) = config.valid_every {
                if !valid_queries.is_empty() && schedule.step % every as u64 == 0 {
                    let cap = config.valid_sample.unwrap_or(valid_queries.len());
                    let subset = &valid_queries[..cap.min(valid_queries.len())];
                    let report = evaluate(
                        model,
                        graph,
                        subset,
                        EvalOptions {
                            beam_size: config.valid_beam,
                            max_hops: config.max_hops,
                            self_consistency: false,
                        },
                    )?;
                    record.valid_mrr = Some(report.mrr);
                }
            }
            log.push(record);
        }
    }
    Ok(())
}

/// One aggregation round: m new pairs per directed triple from the model's
/// (k−1)-hop prefixes, completed towards the tail.
fn aggregate_round<T: Real>(
    model: &SquireModel<T>,
    graph: &KnowledgeGraph,
    golden_rules: &[ChainRule],
    config: &TrainConfig,
    k: usize,
) -> Result<Vec<QueryPathPair>> {
    let vocab = graph.vocab();
    let m = config.pairs_per_triple;
    let remaining_hops = config.max_hops - (k - 1);
    let directed = directed_train_triples(graph);

    let per_triple: Vec<Vec<QueryPathPair>> = directed
        .par_iter()
        .enumerate()
        .map(|(i, &(h, rel, t))| {
            let mut rng = stream(
                config.seed,
                salt::AGGREGATE,
                (k as u64) << 40 | i as u64,
            );
            let prefixes = beam_hop_prefixes(model, vocab, (h, rel), m, k - 1, config.max_hops)?;
            let mut pairs = Vec::with_capacity(m);
            for prefix in &prefixes {
                let endpoint = EntityId(prefix.tokens[prefix.tokens.len() - 1].0);
                let completion = if endpoint == t {
                    // Zero-length continuation: close the prefix with <eos>.
                    Some(vec![vocab.eos()])
                } else {
                    random_path(graph, endpoint, t, remaining_hops, None, &mut rng)
                };
                if let Some(tail_part) = completion {
                    let mut path = prefix.tokens.clone();
                    path.extend(tail_part);
                    pairs.push(QueryPathPair {
                        head: h,
                        rel,
                        path,
                        provenance: Provenance::Aggregated,
                    });
                }
            }
            // No prefix admitted a continuation → m fresh full-path pairs;
            // partial success tops up so every triple adds m pairs per round.
            if pairs.len() < m {
                pairs.extend(make_training_pairs(
                    graph,
                    h,
                    rel,
                    t,
                    golden_rules,
                    m - pairs.len(),
                    config.max_hops,
                    &mut rng,
                ));
            }
            Ok(pairs)
        })
        .collect::<Result<_>>()?;

    Ok(per_triple.into_iter().flatten().collect())
}

/// Full training pipeline: initial dataset, n epochs, then (when enabled)
/// aggregation rounds k = 2..N each followed by ⌈n/k⌉ epochs.
///
/// `on_round` runs after each round's training with (model, round index).
pub fn train_pipeline<T: Real>(
    model: &mut SquireModel<T>,
    graph: &KnowledgeGraph,
    golden_rules: &[ChainRule],
    config: &TrainConfig,
    mut on_round: impl FnMut(&SquireModel<T>, usize),
) -> Result<TrainOutcome> {
    let mut dataset = build_initial_dataset(graph, golden_rules, config);
    let mut schedule = Schedule {
        step: 0,
        planned_total: planned_steps(dataset.initial_size, config),
    };
    let mut log = Vec::new();
    let mut round_sizes = vec![dataset.pairs.len()];

    train_epochs(
        model,
        graph,
        &dataset,
        config.epochs,
        1,
        config,
        &mut schedule,
        &mut log,
    )?;
    on_round(model, 1);

    if config.iterative {
        for k in 2..=config.max_hops {
            let new_pairs = aggregate_round(model, graph, golden_rules, config, k)?;
            dataset.pairs.extend(new_pairs);
            round_sizes.push(dataset.pairs.len());
            train_epochs(
                model,
                graph,
                &dataset,
                config.epochs.div_ceil(k),
                k,
                config,
                &mut schedule,
                &mut log,
            )?;
            on_round(model, k);
        }
    }

    Ok(TrainOutcome { log, round_sizes })
}
