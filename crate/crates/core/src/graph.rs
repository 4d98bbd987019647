//! Indexed, immutable knowledge graph.
//!
//! Entities, relation types and entity types get dense ids in first-seen
//! order so that the same input always produces the same numbering. The
//! edge list has set semantics; adjacency is kept both ways, keyed by
//! `(entity, relation)`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! dense_id {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }

            #[inline]
            pub fn from_index(i: usize) -> Self {
                Self(i as u32)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

dense_id!(
    /// Dense entity id.
    EntityId
);
dense_id!(
    /// Dense relation-type id.
    RelationId
);
dense_id!(
    /// Dense entity-type id. Id 0 is reserved for untyped entities.
    TypeId
);

impl TypeId {
    pub const UNTYPED: TypeId = TypeId(0);
}

pub const UNTYPED_LABEL: &str = "untyped";

/// A directed, relation-labelled edge `relation(head, tail)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Out,
    In,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphFormat {
    Ntriples,
    Tsv,
}

impl std::str::FromStr for GraphFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ntriples" | "nt" | "n-triples" => Ok(GraphFormat::Ntriples),
            "tsv" => Ok(GraphFormat::Tsv),
            other => Err(Error::Config(format!("unknown graph format `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Interner {
    labels: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, label: &str) -> u32 {
        if let Some(&id) = self.ids.get(label) {
            return id;
        }
        let id = self.labels.len() as u32;
        self.labels.push(label.to_owned());
        self.ids.insert(label.to_owned(), id);
        id
    }

    fn get(&self, label: &str) -> Option<u32> {
        self.ids.get(label).copied()
    }
}

/// Incrementally assembles a [`KnowledgeGraph`].
#[derive(Clone, Debug)]
pub struct GraphBuilder {
    entities: Interner,
    relations: Interner,
    types: Interner,
    entity_types: Vec<TypeId>,
    edges: Vec<Triple>,
    seen: HashSet<Triple>,
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        let mut types = Interner::default();
        types.intern(UNTYPED_LABEL);
        GraphBuilder {
            entities: Interner::default(),
            relations: Interner::default(),
            types,
            entity_types: Vec::new(),
            edges: Vec::new(),
            seen: HashSet::new(),
        }
    }

    pub fn entity(&mut self, label: &str) -> EntityId {
        let id = self.entities.intern(label);
        if id as usize == self.entity_types.len() {
            self.entity_types.push(TypeId::UNTYPED);
        }
        EntityId(id)
    }

    pub fn relation(&mut self, label: &str) -> RelationId {
        RelationId(self.relations.intern(label))
    }

    /// Adds `relation(head, tail)`; returns false if the edge was already present.
    pub fn add_triple(&mut self, head: &str, relation: &str, tail: &str) -> bool {
        let h = self.entity(head);
        let r = self.relation(relation);
        let t = self.entity(tail);
        self.add_edge(Triple::new(h, r, t))
    }

    pub fn add_edge(&mut self, triple: Triple) -> bool {
        if self.seen.insert(triple) {
            self.edges.push(triple);
            true
        } else {
            false
        }
    }

    /// Assigns a type to an already-seen entity. Returns false when the
    /// entity is unknown (dangling type entry).
    pub fn set_type(&mut self, entity: &str, type_label: &str) -> bool {
        match self.entities.get(entity) {
            Some(id) => {
                let t = self.types.intern(type_label);
                self.entity_types[id as usize] = TypeId(t);
                true
            }
            None => false,
        }
    }

    pub fn build(self) -> KnowledgeGraph {
        KnowledgeGraph::from_parts(
            self.entities.labels,
            self.relations.labels,
            self.types.labels,
            self.entity_types,
            self.edges,
        )
    }
}

/// An immutable knowledge graph `(V, R, E)` with typed entities.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entity_labels: Vec<String>,
    entity_ids: HashMap<String, EntityId>,
    relation_labels: Vec<String>,
    relation_ids: HashMap<String, RelationId>,
    type_labels: Vec<String>,
    entity_types: Vec<TypeId>,
    edges: Vec<Triple>,
    edge_ids: HashMap<Triple, usize>,
    out_index: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    in_index: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    in_edges: Vec<Vec<usize>>,
    range_types: Vec<TypeId>,
}

const EMPTY: &[EntityId] = &[];

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.entity_labels == other.entity_labels
            && self.relation_labels == other.relation_labels
            && self.type_labels == other.type_labels
            && self.entity_types == other.entity_types
            && self.edges == other.edges
    }
}

impl KnowledgeGraph {
    fn from_parts(
        entity_labels: Vec<String>,
        relation_labels: Vec<String>,
        type_labels: Vec<String>,
        entity_types: Vec<TypeId>,
        edges: Vec<Triple>,
    ) -> Self {
        let entity_ids = entity_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), EntityId::from_index(i)))
            .collect();
        let relation_ids = relation_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), RelationId::from_index(i)))
            .collect();
        let mut edge_ids = HashMap::with_capacity(edges.len());
        let mut out_index: HashMap<_, Vec<EntityId>> = HashMap::new();
        let mut in_index: HashMap<_, Vec<EntityId>> = HashMap::new();
        let mut in_edges = vec![Vec::new(); entity_labels.len()];
        for (i, e) in edges.iter().enumerate() {
            edge_ids.insert(*e, i);
            out_index
                .entry((e.head, e.relation))
                .or_default()
                .push(e.tail);
            in_index
                .entry((e.tail, e.relation))
                .or_default()
                .push(e.head);
            in_edges[e.tail.index()].push(i);
        }
        for list in out_index.values_mut().chain(in_index.values_mut()) {
            list.sort_unstable();
        }

        // Dominant tail type per relation; ties go to the smaller type id.
        let mut counts = vec![vec![0usize; type_labels.len()]; relation_labels.len()];
        for e in &edges {
            counts[e.relation.index()][entity_types[e.tail.index()].index()] += 1;
        }
        let range_types = counts
            .iter()
            .map(|c| {
                let mut best = TypeId::UNTYPED;
                let mut best_count = 0;
                for (t, &n) in c.iter().enumerate() {
                    if n > best_count {
                        best = TypeId::from_index(t);
                        best_count = n;
                    }
                }
                best
            })
            .collect();

        KnowledgeGraph {
            entity_labels,
            entity_ids,
            relation_labels,
            relation_ids,
            type_labels,
            entity_types,
            edges,
            edge_ids,
            out_index,
            in_index,
            in_edges,
            range_types,
        }
    }

    /// Loads a graph from a triple file and an optional two-column type map.
    ///
    /// Returns the graph together with non-fatal warnings (dangling type
    /// entries, skipped literal objects).
    pub fn load(
        triples_path: impl AsRef<Path>,
        types_path: Option<&Path>,
        format: GraphFormat,
    ) -> Result<(KnowledgeGraph, Vec<String>)> {
        let triples_path = triples_path.as_ref();
        let text = fs::read_to_string(triples_path).map_err(|e| Error::io(triples_path, e))?;
        let mut builder = GraphBuilder::new();
        let mut warnings = Vec::new();
        match format {
            GraphFormat::Tsv => parse_tsv_triples(&text, triples_path, &mut builder)?,
            GraphFormat::Ntriples => {
                crate::ntriples::parse_into(&text, triples_path, &mut builder, &mut warnings)?
            }
        }
        if let Some(tp) = types_path {
            let text = fs::read_to_string(tp).map_err(|e| Error::io(tp, e))?;
            for (lineno, line) in text.lines().enumerate() {
                let fields = match split_fields(line) {
                    Some(f) => f,
                    None => continue,
                };
                if fields.len() != 2 {
                    return Err(Error::Parse {
                        path: tp.to_path_buf(),
                        line: lineno + 1,
                        message: format!("expected 2 fields, found {}", fields.len()),
                    });
                }
                if !builder.set_type(fields[0], fields[1]) {
                    warnings.push(format!(
                        "{}:{}: type entry for unknown entity `{}`",
                        tp.display(),
                        lineno + 1,
                        fields[0]
                    ));
                }
            }
        }
        Ok((builder.build(), warnings))
    }

    /// Writes the graph as canonical TSV (edges in id order) plus a type map.
    ///
    /// Untyped entities are omitted from the type map, so reloading the two
    /// files yields an identical graph.
    pub fn write_tsv(&self, triples_path: &Path, types_path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for e in &self.edges {
            writeln!(
                out,
                "{}\t{}\t{}",
                self.entity_label(e.head),
                self.relation_label(e.relation),
                self.entity_label(e.tail)
            )
            .expect("write to vec");
        }
        fs::write(triples_path, out).map_err(|e| Error::io(triples_path, e))?;
        let mut out = Vec::new();
        for (i, t) in self.entity_types.iter().enumerate() {
            if *t != TypeId::UNTYPED {
                writeln!(
                    out,
                    "{}\t{}",
                    self.entity_labels[i],
                    self.type_labels[t.index()]
                )
                .expect("write to vec");
            }
        }
        fs::write(types_path, out).map_err(|e| Error::io(types_path, e))
    }

    pub fn num_entities(&self) -> usize {
        self.entity_labels.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_labels.len()
    }

    /// Number of type ids including the reserved untyped id.
    pub fn num_type_ids(&self) -> usize {
        self.type_labels.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Triple] {
        &self.edges
    }

    pub fn edge(&self, id: usize) -> Triple {
        self.edges[id]
    }

    pub fn edge_id(&self, triple: &Triple) -> Option<usize> {
        self.edge_ids.get(triple).copied()
    }

    pub fn has_edge(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.edge_ids
            .contains_key(&Triple::new(head, relation, tail))
    }

    /// Ids of all edges whose tail is `entity`, in edge-id order.
    pub fn in_edges(&self, entity: EntityId) -> &[usize] {
        &self.in_edges[entity.index()]
    }

    pub fn entity_label(&self, id: EntityId) -> &str {
        &self.entity_labels[id.index()]
    }

    pub fn relation_label(&self, id: RelationId) -> &str {
        &self.relation_labels[id.index()]
    }

    pub fn type_label(&self, id: TypeId) -> &str {
        &self.type_labels[id.index()]
    }

    pub fn entity_id(&self, label: &str) -> Result<EntityId> {
        self.entity_ids
            .get(label)
            .copied()
            .ok_or_else(|| Error::Lookup {
                kind: "entity",
                what: label.to_owned(),
            })
    }

    pub fn relation_id(&self, label: &str) -> Result<RelationId> {
        self.relation_ids
            .get(label)
            .copied()
            .ok_or_else(|| Error::Lookup {
                kind: "relation",
                what: label.to_owned(),
            })
    }

    pub fn entity_type(&self, id: EntityId) -> TypeId {
        self.entity_types[id.index()]
    }

    /// The most frequent tail type of `relation`, used as the type hint for
    /// query variables it points at.
    pub fn range_type(&self, relation: RelationId) -> TypeId {
        self.range_types[relation.index()]
    }

    pub fn check_entity(&self, id: EntityId) -> Result<()> {
        if id.index() < self.num_entities() {
            Ok(())
        } else {
            Err(Error::Lookup {
                kind: "entity id",
                what: id.to_string(),
            })
        }
    }

    pub fn check_relation(&self, id: RelationId) -> Result<()> {
        if id.index() < self.num_relations() {
            Ok(())
        } else {
            Err(Error::Lookup {
                kind: "relation id",
                what: id.to_string(),
            })
        }
    }

    /// Sorted neighbours of `entity` along `relation` in the given direction.
    pub fn neighbors(
        &self,
        entity: EntityId,
        relation: RelationId,
        direction: Direction,
    ) -> Result<&[EntityId]> {
        self.check_entity(entity)?;
        self.check_relation(relation)?;
        Ok(self.neighbors_unchecked(entity, relation, direction))
    }

    pub(crate) fn neighbors_unchecked(
        &self,
        entity: EntityId,
        relation: RelationId,
        direction: Direction,
    ) -> &[EntityId] {
        let index = match direction {
            Direction::Out => &self.out_index,
            Direction::In => &self.in_index,
        };
        index
            .get(&(entity, relation))
            .map(Vec::as_slice)
            .unwrap_or(EMPTY)
    }

    pub fn stats(&self) -> GraphStats {
        let mut degree = vec![0usize; self.num_entities()];
        for e in &self.edges {
            degree[e.head.index()] += 1;
            degree[e.tail.index()] += 1;
        }
        let mut degree_histogram = BTreeMap::new();
        for d in degree {
            *degree_histogram.entry(d).or_insert(0) += 1;
        }
        let used: HashSet<TypeId> = self
            .entity_types
            .iter()
            .copied()
            .filter(|t| *t != TypeId::UNTYPED)
            .collect();
        GraphStats {
            entities: self.num_entities(),
            entity_types: used.len(),
            untyped_entities: self
                .entity_types
                .iter()
                .filter(|t| **t == TypeId::UNTYPED)
                .count(),
            edges: self.num_edges(),
            relation_types: self.num_relations(),
            degree_histogram,
        }
    }

    /// Hex content hash over the canonical TSV rendering.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        for e in &self.edges {
            writeln!(
                buf,
                "{}\t{}\t{}",
                self.entity_label(e.head),
                self.relation_label(e.relation),
                self.entity_label(e.tail)
            )
            .expect("write to vec");
        }
        for (i, t) in self.entity_types.iter().enumerate() {
            writeln!(
                buf,
                "{}\t{}",
                self.entity_labels[i],
                self.type_labels[t.index()]
            )
            .expect("write to vec");
        }
        crate::manifest::git_hash(&buf)
    }
}

/// Summary counts in the shape of a dataset statistics table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub entities: usize,
    pub entity_types: usize,
    pub untyped_entities: usize,
    pub edges: usize,
    pub relation_types: usize,
    /// total degree (in + out) -> number of entities
    pub degree_histogram: BTreeMap<usize, usize>,
}

/// Splits a data line into fields; tab-separated when the line contains a
/// tab, whitespace-separated otherwise. Blank lines and `#` comments yield None.
fn split_fields(line: &str) -> Option<Vec<&str>> {
    let trimmed = line.trim_end_matches(['\r', '\n']);
    if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
        return None;
    }
    let fields: Vec<&str> = if trimmed.contains('\t') {
        trimmed.split('\t').map(str::trim).collect()
    } else {
        trimmed.split_whitespace().collect()
    };
    Some(fields)
}

fn parse_tsv_triples(text: &str, path: &Path, builder: &mut GraphBuilder) -> Result<()> {
    for (lineno, line) in text.lines().enumerate() {
        let fields = match split_fields(line) {
            Some(f) => f,
            None => continue,
        };
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        builder.add_triple(fields[0], fields[1], fields[2]);
    }
    Ok(())
}

/// The small reference graph used across the test-suite: people work on
/// topics, topics relate to projects.
pub fn fixture_kgt() -> KnowledgeGraph {
    let mut b = GraphBuilder::new();
    for (h, r, t) in [
        ("Alice", "works_on", "T1"),
        ("Bob", "works_on", "T1"),
        ("Bob", "works_on", "T2"),
        ("T1", "related", "P1"),
        ("T1", "related", "P2"),
        ("T2", "related", "P3"),
    ] {
        b.add_triple(h, r, t);
    }
    for (e, t) in [
        ("Alice", "person"),
        ("Bob", "person"),
        ("T1", "topic"),
        ("T2", "topic"),
        ("P1", "project"),
        ("P2", "project"),
        ("P3", "project"),
    ] {
        b.set_type(e, t);
    }
    b.build()
}
