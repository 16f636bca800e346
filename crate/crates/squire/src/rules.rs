//! Chain-rule mining with exact confidence scores, and rule-guided path
//! search.
//!
//! A chain rule rewrites one relation as a composition of relations
//! (inverses allowed): `head(X, Y) ← b₁(X, A₁) ∧ … ∧ bₙ(Aₙ₋₁, Y)`. Candidate
//! bodies are harvested by enumerating alternative paths between the
//! endpoints of sampled train triples; every candidate is then scored by
//! exact counting over the train graph:
//!
//! `confidence = |{(x,y): body path x→y ∧ (x, head, y) ∈ train}| / |{(x,y): body path x→y}|`

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::kg::{EntityId, KnowledgeGraph, TokenId, Triple};
use crate::rng::{salt, stream};
use crate::{Error, Result};

/// `head(X,Y) ← body₁ ∧ body₂ ∧ …` with exact-count confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainRule {
    pub head: TokenId,
    pub body: Vec<TokenId>,
    /// Co-occurrence count / body-pair count, in [0, 1].
    pub confidence: f64,
    /// Entity pairs supporting both body and head.
    pub support: u64,
}

/// Mining parameters; `sample_budget ≥ |train|` harvests exhaustively.
#[derive(Copy, Clone, Debug)]
pub struct MinerConfig {
    pub max_body_len: usize,
    pub min_support: u64,
    pub sample_budget: usize,
    pub seed: u64,
}

/// Mine chain rules for every relation token (bases and inverses alike).
///
/// Deterministic: identical (graph, config) yields an identical list, sorted
/// by confidence desc, support desc, body, head.
pub fn mine_rules(graph: &KnowledgeGraph, cfg: &MinerConfig) -> Vec<ChainRule> {
    let candidates: Vec<(TokenId, Vec<TokenId>)> =
        harvest_candidates(graph, cfg).into_iter().collect();
    let mut rules: Vec<ChainRule> = candidates
        .par_iter()
        .filter_map(|(head, body)| {
            let (support, body_count) = count_rule(graph, *head, body);
            if body_count == 0 || support < cfg.min_support {
                return None;
            }
            Some(ChainRule {
                head: *head,
                body: body.clone(),
                confidence: support as f64 / body_count as f64,
                support,
            })
        })
        .collect();
    rules.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .expect("confidences are finite")
            .then(b.support.cmp(&a.support))
            .then(a.body.cmp(&b.body))
            .then(a.head.cmp(&b.head))
    });
    rules
}

/// Keep rules with confidence strictly above `threshold`, order preserved.
pub fn select_golden_rules(rules: &[ChainRule], threshold: f64) -> Vec<ChainRule> {
    rules
        .iter()
        .filter(|r| r.confidence > threshold)
        .cloned()
        .collect()
}

/// Candidate (head, body) pairs from alternative paths of sampled triples,
/// in both query directions.
fn harvest_candidates(
    graph: &KnowledgeGraph,
    cfg: &MinerConfig,
) -> BTreeSet<(TokenId, Vec<TokenId>)> {
    let vocab = graph.vocab();
    let mut triples: Vec<&Triple> = graph.train().iter().collect();
    if cfg.sample_budget < triples.len() {
        let mut rng = stream(cfg.seed, salt::MINER, 0);
        triples.shuffle(&mut rng);
        triples.truncate(cfg.sample_budget);
    }

    let mut out = BTreeSet::new();
    for t in triples {
        for (head, from, to) in [
            (t.rel, t.head, t.tail),
            (vocab.inverse(t.rel), t.tail, t.head),
        ] {
            for body in body_paths(graph, from, to, head, cfg.max_body_len) {
                // The identity rule head ← (head) explains nothing.
                if body.len() == 1 && body[0] == head {
                    continue;
                }
                out.insert((head, body));
            }
        }
    }
    out
}

/// Relation sequences of graph paths `from → to`, excluding hops that use
/// the explained edge itself in either direction.
fn body_paths(
    graph: &KnowledgeGraph,
    from: EntityId,
    to: EntityId,
    head: TokenId,
    max_len: usize,
) -> BTreeSet<Vec<TokenId>> {
    #[allow(clippy::too_many_arguments)]
    fn dfs(
        graph: &KnowledgeGraph,
        cur: EntityId,
        to: EntityId,
        edge: (EntityId, TokenId, EntityId),
        inv_edge: (EntityId, TokenId, EntityId),
        max_len: usize,
        stack: &mut Vec<TokenId>,
        bodies: &mut BTreeSet<Vec<TokenId>>,
    ) {
        if cur == to && !stack.is_empty() {
            bodies.insert(stack.clone());
        }
        if stack.len() == max_len {
            return;
        }
        for &(rel, next) in graph.edges_from(cur) {
            if (cur, rel, next) == edge || (cur, rel, next) == inv_edge {
                continue;
            }
            stack.push(rel);
            dfs(graph, next, to, edge, inv_edge, max_len, stack, bodies);
            stack.pop();
        }
    }

    let vocab = graph.vocab();
    let inv_head = vocab.inverse(head);
    let mut bodies = BTreeSet::new();
    let mut stack: Vec<TokenId> = Vec::new();
    dfs(
        graph,
        from,
        to,
        (from, head, to),
        (to, inv_head, from),
        max_len,
        &mut stack,
        &mut bodies,
    );
    bodies
}

/// Exact (support, body_count) of a rule over the train graph, counting
/// distinct entity pairs.
fn count_rule(graph: &KnowledgeGraph, head: TokenId, body: &[TokenId]) -> (u64, u64) {
    let mut support = 0u64;
    let mut body_count = 0u64;
    for x in graph.vocab().entities() {
        let mut frontier: HashSet<EntityId> = HashSet::from([x]);
        for &rel in body {
            let mut next = HashSet::new();
            for &e in &frontier {
                next.extend(graph.neighbors(e, rel));
            }
            frontier = next;
            if frontier.is_empty() {
                break;
            }
        }
        body_count += frontier.len() as u64;
        support += frontier
            .iter()
            .filter(|&&y| graph.has_train_edge(x, head, y))
            .count() as u64;
    }
    (support, body_count)
}

/// Instantiate `rule.body` as a concrete path `h → t`, uniformly at random
/// over all instantiations. The explained edge `(h, rule.head, t)` itself is
/// never used as a hop.
pub fn rule_guided_path<R: Rng>(
    graph: &KnowledgeGraph,
    h: EntityId,
    t: EntityId,
    rule: &ChainRule,
    rng: &mut R,
) -> Option<Vec<TokenId>> {
    #[allow(clippy::too_many_arguments)]
    fn dfs(
        graph: &KnowledgeGraph,
        cur: EntityId,
        body: &[TokenId],
        depth: usize,
        target: EntityId,
        blocked: &[(EntityId, TokenId, EntityId); 2],
        stack: &mut Vec<TokenId>,
        paths: &mut Vec<Vec<TokenId>>,
    ) {
        if depth == body.len() {
            if cur == target {
                paths.push(stack.clone());
            }
            return;
        }
        let rel = body[depth];
        for next in graph.neighbors(cur, rel) {
            if blocked.contains(&(cur, rel, next)) {
                continue;
            }
            stack.push(rel);
            stack.push(next.token());
            dfs(graph, next, body, depth + 1, target, blocked, stack, paths);
            stack.pop();
            stack.pop();
        }
    }

    let inv = graph.vocab().inverse(rule.head);
    let blocked = [(h, rule.head, t), (t, inv, h)];
    let mut paths: Vec<Vec<TokenId>> = Vec::new();
    let mut stack: Vec<TokenId> = Vec::new();
    dfs(graph, h, &rule.body, 0, t, &blocked, &mut stack, &mut paths);
    if paths.is_empty() {
        None
    } else {
        let i = rng.gen_range(0..paths.len());
        Some(paths.swap_remove(i))
    }
}

/// TSV line per rule: `head<TAB>body,comma,separated<TAB>confidence<TAB>support`.
pub fn write_rules<W: Write>(
    mut w: W,
    graph: &KnowledgeGraph,
    rules: &[ChainRule],
) -> std::io::Result<()> {
    let vocab = graph.vocab();
    for r in rules {
        let body = r
            .body
            .iter()
            .map(|&b| vocab.token_of(b))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            vocab.token_of(r.head),
            body,
            r.confidence,
            r.support
        )?;
    }
    Ok(())
}

/// Parse a rule file written by [`write_rules`] against the same vocabulary.
pub fn read_rules<R: BufRead>(
    reader: R,
    file: &str,
    graph: &KnowledgeGraph,
) -> Result<Vec<ChainRule>> {
    let vocab = graph.vocab();
    let parse = |line_no: usize, msg: String| Error::Parse {
        file: file.to_string(),
        line: line_no,
        msg,
    };
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(file, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse(
                i + 1,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let head = vocab
            .relation_id_of(fields[0])
            .ok_or_else(|| parse(i + 1, format!("unknown relation {:?}", fields[0])))?;
        let body = fields[1]
            .split(',')
            .map(|name| {
                vocab
                    .relation_id_of(name)
                    .ok_or_else(|| parse(i + 1, format!("unknown relation {name:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if body.is_empty() {
            return Err(parse(i + 1, "empty rule body".to_string()));
        }
        let confidence: f64 = fields[2]
            .parse()
            .map_err(|_| parse(i + 1, format!("bad confidence {:?}", fields[2])))?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(parse(
                i + 1,
                format!("confidence {confidence} outside [0,1]"),
            ));
        }
        let support: u64 = fields[3]
            .parse()
            .map_err(|_| parse(i + 1, format!("bad support {:?}", fields[3])))?;
        out.push(ChainRule {
            head,
            body,
            confidence,
            support,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::fixture;
    use crate::kg::KnowledgeGraph;

    fn exhaustive() -> MinerConfig {
        MinerConfig {
            max_body_len: 3,
            min_support: 1,
            sample_budget: usize::MAX,
            seed: 0,
        }
    }

    #[test]
    fn fixture_rule_confidence_is_half() {
        let g = fixture();
        let v = g.vocab();
        let rules = mine_rules(&g, &exhaustive());
        let r = v.id_of("r").unwrap();
        let r1 = v.id_of("r1").unwrap();
        let r2 = v.id_of("r2").unwrap();
        // body (r1, r2): body paths exist for (A,C) and (D,C); head holds
        // for (A,C) only.
        let rule = rules
            .iter()
            .find(|c| c.head == r && c.body == vec![r1, r2])
            .expect("rule r ← r1,r2 mined");
        assert_eq!(rule.confidence, 0.5);
        assert_eq!(rule.support, 1);
    }

    #[test]
    fn identity_rule_is_excluded() {
        let g = fixture();
        let rules = mine_rules(&g, &exhaustive());
        for rule in &rules {
            assert!(
                !(rule.body.len() == 1 && rule.body[0] == rule.head),
                "identity rule {rule:?} must be filtered"
            );
        }
    }

    #[test]
    fn empty_graph_yields_no_rules() {
        let g = KnowledgeGraph::from_named::<&str>(&[], &[], &[]).unwrap();
        assert!(mine_rules(&g, &exhaustive()).is_empty());
    }

    #[test]
    fn single_edge_graph_yields_no_multihop_rules() {
        let g = KnowledgeGraph::from_named(&[("X", "r9", "Y")], &[], &[]).unwrap();
        let rules = mine_rules(&g, &exhaustive());
        assert!(rules.is_empty(), "{rules:?}");
    }

    #[test]
    fn mining_is_deterministic() {
        let g = fixture();
        let cfg = MinerConfig {
            max_body_len: 3,
            min_support: 1,
            sample_budget: 2,
            seed: 9,
        };
        assert_eq!(mine_rules(&g, &cfg), mine_rules(&g, &cfg));
    }

    #[test]
    fn golden_rule_selection_is_a_strict_filter() {
        let mk = |c: f64| ChainRule {
            head: TokenId(4),
            body: vec![TokenId(5)],
            confidence: c,
            support: 1,
        };
        let rules = vec![mk(0.9), mk(0.5), mk(0.3)];
        let golden = select_golden_rules(&rules, 0.4);
        assert_eq!(
            golden.iter().map(|r| r.confidence).collect::<Vec<_>>(),
            vec![0.9, 0.5]
        );
        assert!(select_golden_rules(&rules, 1.0).is_empty());
        assert_eq!(select_golden_rules(&rules, 0.0).len(), 3);
    }

    #[test]
    fn rule_path_instantiates_unique_body() {
        let g = fixture();
        let v = g.vocab();
        let e = |n: &str| v.entity_of(v.id_of(n).unwrap()).unwrap();
        let rule = ChainRule {
            head: v.id_of("r").unwrap(),
            body: vec![v.id_of("r1").unwrap(), v.id_of("r2").unwrap()],
            confidence: 0.5,
            support: 1,
        };
        let mut rng = stream(0, salt::PAIRS, 0);
        let path = rule_guided_path(&g, e("A"), e("C"), &rule, &mut rng).unwrap();
        assert_eq!(
            path,
            vec![
                v.id_of("r1").unwrap(),
                v.id_of("B").unwrap(),
                v.id_of("r2").unwrap(),
                v.id_of("C").unwrap(),
            ]
        );
        let path = rule_guided_path(&g, e("D"), e("C"), &rule, &mut rng).unwrap();
        assert_eq!(path[1], v.id_of("B").unwrap());
        assert_eq!(path[3], v.id_of("C").unwrap());
        // No instantiation C → A.
        assert!(rule_guided_path(&g, e("C"), e("A"), &rule, &mut rng).is_none());
    }

    #[test]
    fn rule_paths_use_existing_edges_and_reach_target() {
        let g = fixture();
        let v = g.vocab();
        let rules = mine_rules(&g, &exhaustive());
        let mut rng = stream(1, salt::PAIRS, 1);
        for t in g.train() {
            for rule in rules.iter().filter(|r| r.head == t.rel) {
                if let Some(path) = rule_guided_path(&g, t.head, t.tail, rule, &mut rng) {
                    let mut cur = t.head;
                    for hop in path.chunks(2) {
                        let (rel, ent) = (hop[0], v.entity_of(hop[1]).unwrap());
                        assert!(g.neighbors(cur, rel).contains(&ent));
                        cur = ent;
                    }
                    assert_eq!(cur, t.tail);
                }
            }
        }
    }

    #[test]
    fn rule_file_round_trip() {
        let g = fixture();
        let rules = mine_rules(&g, &exhaustive());
        assert!(!rules.is_empty());
        let mut buf = Vec::new();
        write_rules(&mut buf, &g, &rules).unwrap();
        let again = read_rules(std::io::Cursor::new(&buf), "rules.tsv", &g).unwrap();
        assert_eq!(rules, again);
    }

    #[test]
    fn rule_parser_reports_line_and_field_errors() {
        let g = fixture();
        let err = read_rules(std::io::Cursor::new("r\tr1,r2\t0.5"), "f", &g).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = read_rules(std::io::Cursor::new("nope\tr1\t0.5\t1"), "f", &g).unwrap_err();
        assert!(err.to_string().contains("unknown relation"), "{err}");
        let err = read_rules(std::io::Cursor::new("r\tr1\t7.5\t1"), "f", &g).unwrap_err();
        assert!(err.to_string().contains("outside [0,1]"), "{err}");
    }

    /// Brute-force oracle: recompute confidence by materializing all body
    /// paths pairwise.
    fn oracle_counts(g: &KnowledgeGraph, head: TokenId, body: &[TokenId]) -> (u64, u64) {
        let mut pairs = HashSet::new();
        for x in g.vocab().entities() {
            for y in g.vocab().entities() {
                let mut frontier = vec![x];
                for &rel in body {
                    let mut next = Vec::new();
                    for &e in &frontier {
                        next.extend(g.neighbors(e, rel));
                    }
                    next.sort();
                    next.dedup();
                    frontier = next;
                }
                if frontier.contains(&y) {
                    pairs.insert((x, y));
                }
            }
        }
        let support = pairs
            .iter()
            .filter(|(x, y)| g.has_train_edge(*x, head, *y))
            .count() as u64;
        (support, pairs.len() as u64)
    }

    #[test]
    fn confidences_match_bruteforce_on_random_graphs() {
        for seed in 0..5u64 {
            let mut rng = stream(seed, salt::MINER, 99);
            let n = rng.gen_range(5..20);
            let mut triples = Vec::new();
            for _ in 0..rng.gen_range(5..40) {
                triples.push((
                    format!("e{}", rng.gen_range(0..n)),
                    format!("r{}", rng.gen_range(0..3)),
                    format!("e{}", rng.gen_range(0..n)),
                ));
            }
            let g = KnowledgeGraph::from_named(&triples, &[], &[]).unwrap();
            let rules = mine_rules(
                &g,
                &MinerConfig {
                    max_body_len: 2,
                    min_support: 1,
                    sample_budget: usize::MAX,
                    seed: 0,
                },
            );
            for rule in &rules {
                let (support, body_count) = oracle_counts(&g, rule.head, &rule.body);
                assert_eq!(rule.support, support, "{rule:?}");
                assert_eq!(rule.confidence, support as f64 / body_count as f64);
            }
        }
    }
}
