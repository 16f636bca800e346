//! Query→path training pairs: rule-guided first, random-sampled next,
//! single-hop fallback last, plus entity-token masking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::kg::{EntityId, KnowledgeGraph, TokenId};
use crate::rules::{rule_guided_path, ChainRule};

/// How a training pair was obtained.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Rule,
    Random,
    Fallback,
    Aggregated,
}

/// One training sample: query (h, r) and its target path τ ending in `<eos>`.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryPathPair {
    pub head: EntityId,
    pub rel: TokenId,
    /// `(r1, e1, …, rn, t, <eos>)` — relation/entity alternation plus `<eos>`.
    pub path: Vec<TokenId>,
    pub provenance: Provenance,
}

impl QueryPathPair {
    /// Completed hops, excluding `<eos>`.
    pub fn hops(&self) -> usize {
        (self.path.len() - 1) / 2
    }

    /// Terminal entity of the path.
    pub fn tail(&self) -> EntityId {
        EntityId(self.path[self.path.len() - 2].0)
    }
}

/// Exact path enumeration switches to bounded random walks above this count.
pub const ENUMERATION_CAP: usize = 10_000;
/// Random-walk attempts per triple in walk mode.
pub const WALK_ATTEMPTS: usize = 32;
/// Work bound for the enumeration probe on dense graphs.
const NODE_BUDGET: usize = 200_000;

/// All paths `h → t` of 1..=`max_hops` hops that never revisit an entity
/// (the target may close a cycle back to `h`). Reaching `t` ends a path; `t`
/// never appears as an intermediate. Stops once `cap` paths are collected or
/// the node budget is spent, returning `None` (enumeration incomplete).
pub fn enumerate_paths(
    graph: &KnowledgeGraph,
    h: EntityId,
    t: EntityId,
    max_hops: usize,
    cap: usize,
) -> Option<Vec<Vec<TokenId>>> {
    struct Walk<'g> {
        graph: &'g KnowledgeGraph,
        target: EntityId,
        max_hops: usize,
        cap: usize,
        budget: usize,
        visited: Vec<EntityId>,
        stack: Vec<TokenId>,
        out: Vec<Vec<TokenId>>,
    }
    impl Walk<'_> {
        /// false once a bound is hit.
        fn dfs(&mut self, cur: EntityId, hops: usize) -> bool {
            if self.budget == 0 {
                return false;
            }
            self.budget -= 1;
            if hops == self.max_hops {
                return true;
            }
            for &(rel, next) in self.graph.edges_from(cur) {
                if next == self.target {
                    if self.out.len() == self.cap {
                        return false;
                    }
                    self.stack.push(rel);
                    self.stack.push(next.token());
                    self.out.push(self.stack.clone());
                    self.stack.pop();
                    self.stack.pop();
                    continue;
                }
                if self.visited.contains(&next) {
                    continue;
                }
                self.stack.push(rel);
                self.stack.push(next.token());
                self.visited.push(next);
                let ok = self.dfs(next, hops + 1);
                self.visited.pop();
                self.stack.pop();
                self.stack.pop();
                if !ok {
                    return false;
                }
            }
            true
        }
    }

    let mut walk = Walk {
        graph,
        target: t,
        max_hops,
        cap,
        budget: NODE_BUDGET,
        visited: vec![h],
        stack: Vec::new(),
        out: Vec::new(),
    };
    let complete = walk.dfs(h, 0);
    complete.then_some(walk.out)
}

/// Sample a path of ≤ `max_hops` hops from `h` to `t`, `<eos>`-terminated.
///
/// Uniform over the full enumerated path set while it stays within
/// [`ENUMERATION_CAP`]; beyond that, bounded random walks and the first walk
/// reaching `t` wins. `forbid_single_hop` excludes the literal query edge as
/// a 1-hop answer for callers that want a longer alternative.
pub fn random_path<R: Rng>(
    graph: &KnowledgeGraph,
    h: EntityId,
    t: EntityId,
    max_hops: usize,
    forbid_single_hop: Option<TokenId>,
    rng: &mut R,
) -> Option<Vec<TokenId>> {
    let is_forbidden = |path: &[TokenId]| {
        forbid_single_hop
            .map(|rel| path.len() == 2 && path[0] == rel)
            .unwrap_or(false)
    };

    if let Some(mut paths) = enumerate_paths(graph, h, t, max_hops, ENUMERATION_CAP) {
        paths.retain(|p| !is_forbidden(p));
        if paths.is_empty() {
            return None;
        }
        let i = rng.gen_range(0..paths.len());
        let mut path = paths.swap_remove(i);
        path.push(graph.vocab().eos());
        return Some(path);
    }

    for _ in 0..WALK_ATTEMPTS {
        let mut cur = h;
        let mut visited = vec![h];
        let mut walk: Vec<TokenId> = Vec::new();
        for _ in 0..max_hops {
            let candidates: Vec<(TokenId, EntityId)> = graph
                .edges_from(cur)
                .iter()
                .filter(|(_, next)| *next == t || !visited.contains(next))
                .copied()
                .collect();
            if candidates.is_empty() {
                break;
            }
            let (rel, next) = candidates[rng.gen_range(0..candidates.len())];
            walk.push(rel);
            walk.push(next.token());
            cur = next;
            if cur == t {
                break;
            }
            visited.push(cur);
        }
        if cur == t && !walk.is_empty() && !is_forbidden(&walk) {
            walk.push(graph.vocab().eos());
            return Some(walk);
        }
    }
    None
}

/// Exactly `pairs_per_triple` pairs for the directed query `(h, rel) → t`.
///
/// Slots are filled by golden rules for `rel` in confidence order (rules
/// without a valid instantiation are skipped), then by random paths, and any
/// remainder by the single-hop fallback `(rel, t, <eos>)`.
#[allow(clippy::too_many_arguments)]
pub fn make_training_pairs<R: Rng>(
    graph: &KnowledgeGraph,
    h: EntityId,
    rel: TokenId,
    t: EntityId,
    golden_rules: &[ChainRule],
    pairs_per_triple: usize,
    max_hops: usize,
    rng: &mut R,
) -> Vec<QueryPathPair> {
    let eos = graph.vocab().eos();
    let mut out = Vec::with_capacity(pairs_per_triple);

    for rule in golden_rules.iter().filter(|r| r.head == rel) {
        if out.len() == pairs_per_triple {
            break;
        }
        if let Some(mut path) = rule_guided_path(graph, h, t, rule, rng) {
            path.push(eos);
            out.push(QueryPathPair {
                head: h,
                rel,
                path,
                provenance: Provenance::Rule,
            });
        }
    }
    while out.len() < pairs_per_triple {
        match random_path(graph, h, t, max_hops, None, rng) {
            Some(path) => out.push(QueryPathPair {
                head: h,
                rel,
                path,
                provenance: Provenance::Random,
            }),
            None => break,
        }
    }
    while out.len() < pairs_per_triple {
        out.push(QueryPathPair {
            head: h,
            rel,
            path: vec![rel, t.token(), eos],
            provenance: Provenance::Fallback,
        });
    }
    out
}

/// Replace entity tokens of `path` by `<mask>` independently with
/// probability `p`; masked positions are flagged for loss exclusion.
/// Relation tokens and `<eos>` are never masked.
pub fn mask_entities<R: Rng>(
    graph: &KnowledgeGraph,
    path: &[TokenId],
    p: f64,
    rng: &mut R,
) -> (Vec<TokenId>, Vec<bool>) {
    let vocab = graph.vocab();
    let mut masked = path.to_vec();
    let mut excluded = vec![false; path.len()];
    for (tok, flag) in masked.iter_mut().zip(excluded.iter_mut()) {
        if vocab.is_entity(*tok) && rng.gen_range(0.0..1.0) < p {
            *tok = vocab.mask();
            *flag = true;
        }
    }
    (masked, excluded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::fixture;
    use crate::rng::{salt, stream};
    use crate::rules::{mine_rules, MinerConfig};
    use std::collections::HashMap;

    fn names(g: &crate::kg::KnowledgeGraph, path: &[TokenId]) -> String {
        path.iter()
            .map(|&t| g.vocab().token_of(t).to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Independent path enumerator used as the oracle: breadth-first over
    /// (entity, visited-set, path) states, no shared code with
    /// `enumerate_paths`. Same universe: no entity revisits, target only as
    /// the terminal token.
    fn oracle_paths(
        g: &crate::kg::KnowledgeGraph,
        h: &str,
        t: &str,
        max_hops: usize,
    ) -> Vec<Vec<TokenId>> {
        let v = g.vocab();
        let start = v.entity_of(v.id_of(h).unwrap()).unwrap();
        let goal = v.entity_of(v.id_of(t).unwrap()).unwrap();
        let mut frontier: Vec<(EntityId, Vec<EntityId>, Vec<TokenId>)> =
            vec![(start, vec![start], vec![])];
        let mut found = Vec::new();
        for _ in 0..max_hops {
            let mut next_frontier = Vec::new();
            for (e, visited, path) in frontier {
                for &(rel, tgt) in g.edges_from(e) {
                    let mut p = path.clone();
                    p.push(rel);
                    p.push(tgt.token());
                    if tgt == goal {
                        found.push(p);
                        continue;
                    }
                    if visited.contains(&tgt) {
                        continue;
                    }
                    let mut vis = visited.clone();
                    vis.push(tgt);
                    next_frontier.push((tgt, vis, p));
                }
            }
            frontier = next_frontier;
        }
        found
    }

    #[test]
    fn fixture_has_exactly_two_paths_a_to_c() {
        let g = fixture();
        let oracle = oracle_paths(&g, "A", "C", 3);
        assert_eq!(oracle.len(), 2, "{oracle:?}");
    }

    #[test]
    fn random_path_is_uniform_over_enumerated_set() {
        let g = fixture();
        let v = g.vocab();
        let a = v.entity_of(v.id_of("A").unwrap()).unwrap();
        let c = v.entity_of(v.id_of("C").unwrap()).unwrap();
        let mut rng = stream(42, salt::PAIRS, 0);

        let oracle: Vec<Vec<TokenId>> = oracle_paths(&g, "A", "C", 3)
            .into_iter()
            .map(|mut p| {
                p.push(v.eos());
                p
            })
            .collect();

        let mut counts: HashMap<Vec<TokenId>, usize> = HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            let p = random_path(&g, a, c, 3, None, &mut rng).unwrap();
            assert!(oracle.contains(&p), "unexpected path {}", names(&g, &p));
            *counts.entry(p).or_default() += 1;
        }
        assert_eq!(counts.len(), 2);
        for (path, n) in &counts {
            let freq = *n as f64 / draws as f64;
            assert!(
                (freq - 0.5).abs() < 0.02,
                "path {} frequency {freq}",
                names(&g, path)
            );
        }
    }

    #[test]
    fn no_path_yields_none() {
        let g = fixture();
        let v = g.vocab();
        let c = v.entity_of(v.id_of("C").unwrap()).unwrap();
        let d = v.entity_of(v.id_of("D").unwrap()).unwrap();
        let mut rng = stream(1, salt::PAIRS, 0);
        assert_eq!(random_path(&g, c, d, 1, None, &mut rng), None);
    }

    #[test]
    fn cyclic_paths_are_enumerated() {
        let g = fixture();
        let v = g.vocab();
        let a = v.entity_of(v.id_of("A").unwrap()).unwrap();
        let paths = enumerate_paths(&g, a, a, 3, ENUMERATION_CAP).unwrap();
        let r1 = v.id_of("r1").unwrap();
        let cycle = vec![r1, v.id_of("B").unwrap(), v.inverse(r1), v.id_of("A").unwrap()];
        assert!(paths.contains(&cycle), "{paths:?}");
    }

    #[test]
    fn forbid_single_hop_excludes_the_query_edge_only() {
        let g = fixture();
        let v = g.vocab();
        let a = v.entity_of(v.id_of("A").unwrap()).unwrap();
        let c = v.entity_of(v.id_of("C").unwrap()).unwrap();
        let r = v.id_of("r").unwrap();
        let mut rng = stream(3, salt::PAIRS, 0);
        for _ in 0..50 {
            let p = random_path(&g, a, c, 3, Some(r), &mut rng).unwrap();
            assert!(
                !(p.len() == 3 && p[0] == r),
                "1-hop query edge must be excluded: {}",
                names(&g, &p)
            );
        }
    }

    #[test]
    fn rule_slot_first_then_random() {
        let g = fixture();
        let v = g.vocab();
        let a = v.entity_of(v.id_of("A").unwrap()).unwrap();
        let c = v.entity_of(v.id_of("C").unwrap()).unwrap();
        let r = v.id_of("r").unwrap();
        let rules = mine_rules(
            &g,
            &MinerConfig {
                max_body_len: 2,
                min_support: 1,
                sample_budget: usize::MAX,
                seed: 0,
            },
        );
        let golden: Vec<_> = rules
            .iter()
            .filter(|rl| rl.head == r && rl.body == vec![v.id_of("r1").unwrap(), v.id_of("r2").unwrap()])
            .cloned()
            .collect();
        let mut rng = stream(5, salt::PAIRS, 0);
        let pairs = make_training_pairs(&g, a, r, c, &golden, 2, 3, &mut rng);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].provenance, Provenance::Rule);
        assert_eq!(
            pairs[0].path,
            vec![
                v.id_of("r1").unwrap(),
                v.id_of("B").unwrap(),
                v.id_of("r2").unwrap(),
                v.id_of("C").unwrap(),
                v.eos()
            ]
        );
        // Second slot is a random path over F's two A→C paths.
        let direct = vec![r, v.id_of("C").unwrap(), v.eos()];
        let two_hop = pairs[0].path.clone();
        assert!(pairs[1].path == direct || pairs[1].path == two_hop);
    }

    #[test]
    fn isolated_edge_falls_back_entirely() {
        let g = crate::kg::KnowledgeGraph::from_named(&[("X", "r9", "Y")], &[], &[]).unwrap();
        let v = g.vocab();
        let x = v.entity_of(v.id_of("X").unwrap()).unwrap();
        let y = v.entity_of(v.id_of("Y").unwrap()).unwrap();
        let r9 = v.id_of("r9").unwrap();
        let mut rng = stream(0, salt::PAIRS, 0);
        let pairs = make_training_pairs(&g, x, r9, y, &[], 3, 3, &mut rng);
        assert_eq!(pairs.len(), 3);
        // X→Y has the single edge path (r9, Y); it is a real path, so random
        // sampling finds it. The remaining slots use it too or fall back —
        // all three must be the single-hop edge either way.
        for p in &pairs {
            assert_eq!(p.path, vec![r9, y.token(), v.eos()]);
        }
    }

    #[test]
    fn pair_count_contract_holds() {
        let g = fixture();
        let v = g.vocab();
        let mut rng = stream(7, salt::PAIRS, 0);
        for t in g.train() {
            let pairs = make_training_pairs(&g, t.head, t.rel, t.tail, &[], 6, 3, &mut rng);
            assert_eq!(pairs.len(), 6);
            for p in &pairs {
                assert!(p.hops() <= 3);
                assert_eq!(p.tail(), t.tail);
                assert_eq!(*p.path.last().unwrap(), v.eos());
                // strict relation/entity alternation
                for (i, tok) in p.path[..p.path.len() - 1].iter().enumerate() {
                    if i % 2 == 0 {
                        assert!(v.is_relation(*tok));
                    } else {
                        assert!(v.is_entity(*tok));
                    }
                }
            }
        }
    }

    #[test]
    fn generated_paths_are_graph_valid_unless_fallback() {
        let g = fixture();
        let v = g.vocab();
        let mut rng = stream(11, salt::PAIRS, 0);
        for t in g.train() {
            for p in make_training_pairs(&g, t.head, t.rel, t.tail, &[], 4, 3, &mut rng) {
                if p.provenance == Provenance::Fallback {
                    continue;
                }
                let mut cur = p.head;
                for hop in p.path[..p.path.len() - 1].chunks(2) {
                    let (rel, ent) = (hop[0], v.entity_of(hop[1]).unwrap());
                    assert!(
                        g.neighbors(cur, rel).contains(&ent),
                        "hop not in graph: {}",
                        names(&g, &p.path)
                    );
                    cur = ent;
                }
                assert_eq!(cur, t.tail);
            }
        }
    }

    #[test]
    fn mask_probability_zero_and_one() {
        let g = fixture();
        let v = g.vocab();
        let path = vec![
            v.id_of("r1").unwrap(),
            v.id_of("B").unwrap(),
            v.id_of("r2").unwrap(),
            v.id_of("C").unwrap(),
            v.eos(),
        ];
        let mut rng = stream(0, salt::MASK, 0);
        let (m0, e0) = mask_entities(&g, &path, 0.0, &mut rng);
        assert_eq!(m0, path);
        assert!(e0.iter().all(|&x| !x));

        let (m1, e1) = mask_entities(&g, &path, 1.0, &mut rng);
        assert_eq!(
            m1,
            vec![path[0], v.mask(), path[2], v.mask(), v.eos()],
            "entities masked, relations and <eos> untouched"
        );
        assert_eq!(e1, vec![false, true, false, true, false]);
    }

    #[test]
    fn mask_rate_matches_probability() {
        let g = fixture();
        let v = g.vocab();
        // One entity token per draw; 10⁵ seeded draws at p = 0.5.
        let path = vec![v.id_of("r1").unwrap(), v.id_of("B").unwrap(), v.eos()];
        let mut rng = stream(123, salt::MASK, 1);
        let draws = 100_000;
        let mut masked = 0usize;
        for _ in 0..draws {
            let (_, e) = mask_entities(&g, &path, 0.5, &mut rng);
            if e[1] {
                masked += 1;
            }
        }
        let rate = masked as f64 / draws as f64;
        assert!((rate - 0.5).abs() < 0.01, "rate {rate}");
    }
}
