//! Knowledge graph store: triples, vocabulary, adjacency with inverse edges.
//!
//! Ids are dense `0..V` in the layout `[entities][base relations][inverse
//! relations][specials]`, so an entity id doubles as its token id and the
//! base/inverse pairing of a relation is a fixed offset rather than a string
//! lookup.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Rendering suffix for inverse relation tokens in dumps and rule files.
pub const INV_SUFFIX: &str = "⁻¹";

/// Dense token id into the vocabulary (entity, relation or special).
#[derive(Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub u32);

/// Dense entity id; numerically equal to the entity's token id.
#[derive(Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

impl EntityId {
    pub fn token(self) -> TokenId {
        TokenId(self.0)
    }
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Debug for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tok{}", self.0)
    }
}

impl fmt::Debug for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ent{}", self.0)
    }
}

/// A directed labeled edge; `rel` is always a base (non-inverse) relation.
#[derive(Copy, Clone, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub rel: TokenId,
    pub tail: EntityId,
}

/// A directed fact where the relation may be an inverse token.
pub type Edge = (EntityId, TokenId, EntityId);

/// Token table over entities, relations (with synthesized inverses) and the
/// three specials `<bos>`, `<eos>`, `<mask>`.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    names: Vec<String>,
    by_name: HashMap<String, TokenId>,
    n_entities: usize,
    n_base_relations: usize,
}

pub const SPECIALS: [&str; 3] = ["<bos>", "<eos>", "<mask>"];

impl Vocabulary {
    fn build(entities: Vec<String>, relations: Vec<String>) -> Result<Self> {
        let n_entities = entities.len();
        let n_base = relations.len();
        let mut names = Vec::with_capacity(n_entities + 2 * n_base + 3);
        names.extend(entities);
        names.extend(relations.iter().cloned());
        names.extend(relations.iter().map(|r| format!("{r}{INV_SUFFIX}")));
        names.extend(SPECIALS.iter().map(|s| s.to_string()));

        let mut by_name = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if by_name.insert(name.clone(), TokenId(i as u32)).is_some() {
                return Err(Error::Vocab(format!(
                    "token name {name:?} registered more than once \
                     (entity/relation name collision)"
                )));
            }
        }
        Ok(Vocabulary {
            names,
            by_name,
            n_entities,
            n_base_relations: n_base,
        })
    }

    /// Total token count V.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_base_relations(&self) -> usize {
        self.n_base_relations
    }

    pub fn token_of(&self, id: TokenId) -> &str {
        &self.names[id.index()]
    }

    pub fn id_of(&self, name: &str) -> Option<TokenId> {
        self.by_name.get(name).copied()
    }

    pub fn is_entity(&self, id: TokenId) -> bool {
        id.index() < self.n_entities
    }

    /// True for base and inverse relation tokens alike.
    pub fn is_relation(&self, id: TokenId) -> bool {
        let i = id.index();
        i >= self.n_entities && i < self.n_entities + 2 * self.n_base_relations
    }

    pub fn is_inverse(&self, id: TokenId) -> bool {
        let i = id.index();
        i >= self.n_entities + self.n_base_relations
            && i < self.n_entities + 2 * self.n_base_relations
    }

    pub fn entity_of(&self, id: TokenId) -> Option<EntityId> {
        self.is_entity(id).then_some(EntityId(id.0))
    }

    /// Base ⇄ inverse pairing; `rel` must be a relation token.
    pub fn inverse(&self, rel: TokenId) -> TokenId {
        debug_assert!(self.is_relation(rel));
        if self.is_inverse(rel) {
            TokenId(rel.0 - self.n_base_relations as u32)
        } else {
            TokenId(rel.0 + self.n_base_relations as u32)
        }
    }

    pub fn bos(&self) -> TokenId {
        TokenId((self.len() - 3) as u32)
    }

    pub fn eos(&self) -> TokenId {
        TokenId((self.len() - 2) as u32)
    }

    pub fn mask(&self) -> TokenId {
        TokenId((self.len() - 1) as u32)
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> {
        (0..self.n_entities as u32).map(EntityId)
    }

    /// All relation tokens, base then inverse.
    pub fn relations(&self) -> impl Iterator<Item = TokenId> {
        let lo = self.n_entities as u32;
        let hi = lo + 2 * self.n_base_relations as u32;
        (lo..hi).map(TokenId)
    }

    /// One token per line; line number = id.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for name in &self.names {
            writeln!(w, "{name}")?;
        }
        Ok(())
    }

    /// Parse a relation token name as written by [`Vocabulary::write_dump`],
    /// resolving the inverse suffix.
    pub fn relation_id_of(&self, name: &str) -> Option<TokenId> {
        self.id_of(name).filter(|&t| self.is_relation(t))
    }
}

/// Interns entity and relation names in encounter order before ids are fixed.
#[derive(Default, Debug)]
pub struct KgBuilder {
    entities: Vec<String>,
    entity_ix: HashMap<String, u32>,
    relations: Vec<String>,
    relation_ix: HashMap<String, u32>,
}

/// Triple over provisional indices; becomes a [`Triple`] once ids are fixed.
#[derive(Copy, Clone, PartialEq, Eq, Hash, Debug)]
pub struct RawTriple {
    head: u32,
    rel: u32,
    tail: u32,
}

impl KgBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn entity(&mut self, name: &str) -> u32 {
        if let Some(&i) = self.entity_ix.get(name) {
            return i;
        }
        let i = self.entities.len() as u32;
        self.entities.push(name.to_string());
        self.entity_ix.insert(name.to_string(), i);
        i
    }

    fn relation(&mut self, name: &str) -> u32 {
        if let Some(&i) = self.relation_ix.get(name) {
            return i;
        }
        let i = self.relations.len() as u32;
        self.relations.push(name.to_string());
        self.relation_ix.insert(name.to_string(), i);
        i
    }

    pub fn add(&mut self, head: &str, rel: &str, tail: &str) -> RawTriple {
        RawTriple {
            head: self.entity(head),
            rel: self.relation(rel),
            tail: self.entity(tail),
        }
    }
}

/// Split one triple-file line into its three tab-separated fields.
pub fn parse_triple_line(line: &str) -> std::result::Result<(&str, &str, &str), String> {
    let mut fields = line.split('\t');
    match (fields.next(), fields.next(), fields.next(), fields.next()) {
        (Some(h), Some(r), Some(t), None) => Ok((h, r, t)),
        _ => {
            let n = line.split('\t').count();
            Err(format!("expected 3 fields, found {n}"))
        }
    }
}

/// Parse triples from a reader, registering names in `builder`. Empty lines
/// are skipped; errors carry 1-based line numbers.
pub fn read_triples<R: BufRead>(
    reader: R,
    file: &str,
    builder: &mut KgBuilder,
) -> Result<Vec<RawTriple>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(file, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() {
            continue;
        }
        let (h, r, t) = parse_triple_line(line).map_err(|msg| Error::Parse {
            file: file.to_string(),
            line: i + 1,
            msg,
        })?;
        out.push(builder.add(h, r, t));
    }
    Ok(out)
}

/// Load one triple file; keeps file order and registers unseen names.
pub fn load_triples(path: &Path, builder: &mut KgBuilder) -> Result<Vec<RawTriple>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_triples(
        std::io::BufReader::new(f),
        &path.display().to_string(),
        builder,
    )
}

/// Immutable knowledge graph: vocabulary, train-edge adjacency, splits and
/// the known-true fact set for filtered evaluation.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    vocab: Vocabulary,
    adjacency: Vec<Vec<(TokenId, EntityId)>>,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    train_edges: HashSet<Edge>,
    known: HashSet<Edge>,
}

impl KnowledgeGraph {
    /// Finalize ids and index the graph. Adjacency is built from `train`
    /// only; the vocabulary covers all splits so every query tokenizes.
    pub fn build(
        builder: KgBuilder,
        train: Vec<RawTriple>,
        valid: Vec<RawTriple>,
        test: Vec<RawTriple>,
    ) -> Result<Self> {
        let splits = [("train", &train), ("valid", &valid), ("test", &test)];
        for (i, (name_a, a)) in splits.iter().enumerate() {
            for (name_b, b) in splits.iter().skip(i + 1) {
                let set: HashSet<&RawTriple> = a.iter().collect();
                if let Some(t) = b.iter().find(|t| set.contains(t)) {
                    let triple = format!(
                        "({}, {}, {})",
                        builder.entities[t.head as usize],
                        builder.relations[t.rel as usize],
                        builder.entities[t.tail as usize],
                    );
                    return Err(Error::SplitOverlap {
                        triple,
                        a: name_a,
                        b: name_b,
                    });
                }
            }
        }

        let n_entities = builder.entities.len();
        let vocab = Vocabulary::build(builder.entities, builder.relations)?;
        let fix = |raw: &RawTriple| Triple {
            head: EntityId(raw.head),
            rel: TokenId(n_entities as u32 + raw.rel),
            tail: EntityId(raw.tail),
        };

        // Duplicate train triples collapse; adjacency is a set semantically.
        let mut seen = HashSet::new();
        let train: Vec<Triple> = train
            .iter()
            .map(&fix)
            .filter(|t| seen.insert(*t))
            .collect();
        let valid: Vec<Triple> = valid.iter().map(&fix).collect();
        let test: Vec<Triple> = test.iter().map(&fix).collect();

        let mut adjacency = vec![Vec::new(); n_entities];
        let mut train_edges = HashSet::new();
        for t in &train {
            adjacency[t.head.index()].push((t.rel, t.tail));
            adjacency[t.tail.index()].push((vocab.inverse(t.rel), t.head));
            train_edges.insert((t.head, t.rel, t.tail));
            train_edges.insert((t.tail, vocab.inverse(t.rel), t.head));
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }

        let mut known = HashSet::new();
        for t in train.iter().chain(&valid).chain(&test) {
            known.insert((t.head, t.rel, t.tail));
            known.insert((t.tail, vocab.inverse(t.rel), t.head));
        }

        Ok(KnowledgeGraph {
            vocab,
            adjacency,
            train,
            valid,
            test,
            train_edges,
            known,
        })
    }

    /// Build from name triples; convenient for fixtures and generated data.
    pub fn from_named<S: AsRef<str>>(
        train: &[(S, S, S)],
        valid: &[(S, S, S)],
        test: &[(S, S, S)],
    ) -> Result<Self> {
        let mut b = KgBuilder::new();
        let reg = |b: &mut KgBuilder, split: &[(S, S, S)]| {
            split
                .iter()
                .map(|(h, r, t)| b.add(h.as_ref(), r.as_ref(), t.as_ref()))
                .collect::<Vec<_>>()
        };
        let train = reg(&mut b, train);
        let valid = reg(&mut b, valid);
        let test = reg(&mut b, test);
        Self::build(b, train, valid, test)
    }

    /// Load `train.txt` (required) plus `valid.txt` / `test.txt` (optional)
    /// from a dataset directory.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut b = KgBuilder::new();
        let train = load_triples(&dir.join("train.txt"), &mut b)?;
        let mut optional = |name: &str| -> Result<Vec<RawTriple>> {
            let path = dir.join(name);
            if path.exists() {
                load_triples(&path, &mut b)
            } else {
                Ok(Vec::new())
            }
        };
        let valid = optional("valid.txt")?;
        let test = optional("test.txt")?;
        Self::build(b, train, valid, test)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn train(&self) -> &[Triple] {
        &self.train
    }

    pub fn valid(&self) -> &[Triple] {
        &self.valid
    }

    pub fn test(&self) -> &[Triple] {
        &self.test
    }

    /// Outgoing train edges of `e`, sorted by (relation, target).
    pub fn edges_from(&self, e: EntityId) -> &[(TokenId, EntityId)] {
        &self.adjacency[e.index()]
    }

    /// All `x` with an edge `(e, rel, x)` in the train adjacency.
    pub fn neighbors(&self, e: EntityId, rel: TokenId) -> Vec<EntityId> {
        self.adjacency[e.index()]
            .iter()
            .filter(|(r, _)| *r == rel)
            .map(|&(_, t)| t)
            .collect()
    }

    /// Directed train-edge membership; `rel` may be an inverse token.
    pub fn has_train_edge(&self, h: EntityId, rel: TokenId, t: EntityId) -> bool {
        self.train_edges.contains(&(h, rel, t))
    }

    /// Directed train edges, closed under inversion.
    pub fn train_edge_set(&self) -> &HashSet<Edge> {
        &self.train_edges
    }

    /// Union of all splits, closed under inversion; filters rankings.
    pub fn known_true(&self) -> &HashSet<Edge> {
        &self.known
    }
}

#[cfg(test)]
pub(crate) fn fixture() -> KnowledgeGraph {
    // Fixture F: train {(A,r1,B), (B,r2,C), (A,r,C), (D,r1,B)}, valid {(D,r,C)}.
    KnowledgeGraph::from_named(
        &[("A", "r1", "B"), ("B", "r2", "C"), ("A", "r", "C"), ("D", "r1", "B")],
        &[("D", "r", "C")],
        &[],
    )
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(g: &KnowledgeGraph, names: &[&str]) -> Vec<TokenId> {
        names.iter().map(|n| g.vocab().id_of(n).unwrap()).collect()
    }

    #[test]
    fn parse_single_line() {
        assert_eq!(parse_triple_line("A\tr1\tB"), Ok(("A", "r1", "B")));
    }

    #[test]
    fn parse_rejects_wrong_field_count() {
        let err = parse_triple_line("A\tr1").unwrap_err();
        assert_eq!(err, "expected 3 fields, found 2");
        let err = parse_triple_line("A\tr1\tB\tC").unwrap_err();
        assert_eq!(err, "expected 3 fields, found 4");
    }

    #[test]
    fn read_empty_file() {
        let mut b = KgBuilder::new();
        let triples = read_triples(std::io::Cursor::new(""), "t", &mut b).unwrap();
        assert!(triples.is_empty());
    }

    #[test]
    fn read_reports_line_numbers() {
        let mut b = KgBuilder::new();
        let err = read_triples(std::io::Cursor::new("A\tr1\tB\nA\tr1\n"), "t", &mut b)
            .unwrap_err();
        assert_eq!(
            err.to_string(),
            "t: line 2: expected 3 fields, found 2"
        );
    }

    #[test]
    fn fixture_vocabulary_counts() {
        let g = fixture();
        // 4 entities + 6 relation tokens (3 base + 3 inverse) + 3 specials.
        assert_eq!(g.vocab().len(), 13);
        assert_eq!(g.vocab().n_entities(), 4);
        assert_eq!(g.vocab().n_base_relations(), 3);
    }

    #[test]
    fn fixture_adjacency_has_forward_and_inverse_edges() {
        let g = fixture();
        let v = g.vocab();
        let a = v.entity_of(v.id_of("A").unwrap()).unwrap();
        let b = v.entity_of(v.id_of("B").unwrap()).unwrap();
        let c = v.entity_of(v.id_of("C").unwrap()).unwrap();
        let d = v.entity_of(v.id_of("D").unwrap()).unwrap();
        let [r1, r2, r] = [
            v.id_of("r1").unwrap(),
            v.id_of("r2").unwrap(),
            v.id_of("r").unwrap(),
        ];

        assert_eq!(g.neighbors(a, r1), vec![b]);
        assert_eq!(g.neighbors(a, r), vec![c]);
        let mut back = g.neighbors(b, v.inverse(r1));
        back.sort();
        assert_eq!(back, vec![a, d]);
        assert_eq!(g.neighbors(b, r2), vec![c]);
        assert_eq!(g.neighbors(c, r1), Vec::<EntityId>::new());
    }

    #[test]
    fn split_overlap_rejected() {
        let err = KnowledgeGraph::from_named(
            &[("A", "r1", "B")],
            &[],
            &[("A", "r1", "B")],
        )
        .unwrap_err();
        assert!(matches!(err, Error::SplitOverlap { .. }), "{err}");
    }

    #[test]
    fn duplicate_train_triples_deduplicated() {
        let g = KnowledgeGraph::from_named(
            &[("A", "r1", "B"), ("A", "r1", "B")],
            &[],
            &[],
        )
        .unwrap();
        assert_eq!(g.train().len(), 1);
        let a = EntityId(0);
        assert_eq!(g.edges_from(a).len(), 1);
    }

    #[test]
    fn known_true_closed_under_inversion() {
        let g = fixture();
        let v = g.vocab();
        let d = v.entity_of(v.id_of("D").unwrap()).unwrap();
        let c = v.entity_of(v.id_of("C").unwrap()).unwrap();
        let r = v.id_of("r").unwrap();
        assert!(g.known_true().contains(&(d, r, c)));
        assert!(g.known_true().contains(&(c, v.inverse(r), d)));
        // Each distinct triple contributes exactly two directed facts.
        assert_eq!(g.known_true().len(), 2 * (g.train().len() + g.valid().len()));
    }

    #[test]
    fn empty_graph_has_empty_known_set() {
        let g = KnowledgeGraph::from_named::<&str>(&[], &[], &[]).unwrap();
        assert!(g.known_true().is_empty());
        assert_eq!(g.vocab().len(), 3); // specials only
    }

    #[test]
    fn tokenization_round_trips() {
        let g = fixture();
        let v = g.vocab();
        for i in 0..v.len() as u32 {
            let tok = TokenId(i);
            assert_eq!(v.id_of(v.token_of(tok)), Some(tok));
        }
        assert_eq!(ids(&g, &["<bos>", "<eos>", "<mask>"]).len(), 3);
        assert_eq!(v.id_of("<eos>"), Some(v.eos()));
    }

    #[test]
    fn inverse_pairing_is_involutive() {
        let g = fixture();
        let v = g.vocab();
        for rel in v.relations() {
            assert_eq!(v.inverse(v.inverse(rel)), rel);
            assert_ne!(v.inverse(rel), rel);
        }
        let r1 = v.id_of("r1").unwrap();
        assert_eq!(v.token_of(v.inverse(r1)), format!("r1{INV_SUFFIX}"));
    }

    #[test]
    fn vocab_dump_one_token_per_line() {
        let g = fixture();
        let mut buf = Vec::new();
        g.vocab().write_dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), g.vocab().len());
        for (i, line) in lines.iter().enumerate() {
            assert_eq!(*line, g.vocab().token_of(TokenId(i as u32)));
        }
    }

    #[test]
    fn name_collision_across_namespaces_rejected() {
        let err = KnowledgeGraph::from_named(&[("x", "x", "y")], &[], &[]).unwrap_err();
        assert!(matches!(err, Error::Vocab(_)), "{err}");
    }

    proptest! {
        /// (r, t) ∈ adj[h] ⟺ (r⁻¹, h) ∈ adj[t], and lookups stay in-vocabulary.
        #[test]
        fn adjacency_inverse_biconditional(
            triples in proptest::collection::vec((0u8..6, 0u8..3, 0u8..6), 1..40)
        ) {
            let named: Vec<(String, String, String)> = triples
                .iter()
                .map(|(h, r, t)| (format!("e{h}"), format!("r{r}"), format!("e{t}")))
                .collect();
            let g = KnowledgeGraph::from_named(&named, &[], &[]).unwrap();
            let v = g.vocab();
            for e in v.entities() {
                for &(rel, tgt) in g.edges_from(e) {
                    prop_assert!(v.is_relation(rel));
                    prop_assert!(tgt.index() < v.n_entities());
                    prop_assert!(g.edges_from(tgt).contains(&(v.inverse(rel), e)));
                }
            }
            for t in g.train() {
                prop_assert!(g.edges_from(t.head).contains(&(t.rel, t.tail)));
                prop_assert!(g.edges_from(t.tail).contains(&(v.inverse(t.rel), t.head)));
            }
        }

        #[test]
        fn token_ids_round_trip(
            triples in proptest::collection::vec((0u8..20, 0u8..5, 0u8..20), 1..30)
        ) {
            let named: Vec<(String, String, String)> = triples
                .iter()
                .map(|(h, r, t)| (format!("e{h}"), format!("r{r}"), format!("e{t}")))
                .collect();
            let g = KnowledgeGraph::from_named(&named, &[], &[]).unwrap();
            let v = g.vocab();
            for i in 0..v.len() as u32 {
                prop_assert_eq!(v.id_of(v.token_of(TokenId(i))), Some(TokenId(i)));
            }
        }
    }
}
