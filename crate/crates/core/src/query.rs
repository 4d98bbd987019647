//! Conjunctive query graphs and exact execution.
//!
//! A query is a small DAG whose edges point toward a single target node.
//! Anchors are bound to entities; variables and the target are free. The
//! executor here is the ground truth for target sets: it enumerates variable
//! assignments against the adjacency index and never scores anything.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Direction, EntityId, KnowledgeGraph, RelationId, TypeId};

/// The seven supported query shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Template {
    #[serde(rename = "1-chain")]
    OneChain,
    #[serde(rename = "2-chain")]
    TwoChain,
    #[serde(rename = "3-chain")]
    ThreeChain,
    #[serde(rename = "2-inter")]
    TwoInter,
    #[serde(rename = "3-inter")]
    ThreeInter,
    #[serde(rename = "3-inter-chain")]
    ThreeInterChain,
    #[serde(rename = "3-chain-inter")]
    ThreeChainInter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Anchor,
    Variable,
    Target,
}

/// Node roles and edge pattern of a template. Node indices are already in
/// topological order (every edge goes from a lower to a higher index) and the
/// target is always the last node. Edge `k` carries the template's `k`-th
/// relation slot.
#[derive(Debug)]
pub struct Pattern {
    pub roles: &'static [Role],
    pub edges: &'static [(usize, usize)],
}

use Role::{Anchor as A, Target as T, Variable as V};

impl Template {
    pub const ALL: [Template; 7] = [
        Template::OneChain,
        Template::TwoChain,
        Template::ThreeChain,
        Template::TwoInter,
        Template::ThreeInter,
        Template::ThreeInterChain,
        Template::ThreeChainInter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::OneChain => "1-chain",
            Template::TwoChain => "2-chain",
            Template::ThreeChain => "3-chain",
            Template::TwoInter => "2-inter",
            Template::ThreeInter => "3-inter",
            Template::ThreeInterChain => "3-inter-chain",
            Template::ThreeChainInter => "3-chain-inter",
        }
    }

    pub fn pattern(self) -> Pattern {
        match self {
            Template::OneChain => Pattern {
                roles: &[A, T],
                edges: &[(0, 1)],
            },
            Template::TwoChain => Pattern {
                roles: &[A, V, T],
                edges: &[(0, 1), (1, 2)],
            },
            Template::ThreeChain => Pattern {
                roles: &[A, V, V, T],
                edges: &[(0, 1), (1, 2), (2, 3)],
            },
            Template::TwoInter => Pattern {
                roles: &[A, A, T],
                edges: &[(0, 2), (1, 2)],
            },
            Template::ThreeInter => Pattern {
                roles: &[A, A, A, T],
                edges: &[(0, 3), (1, 3), (2, 3)],
            },
            // a0 -> t  and  a1 -> v -> t
            Template::ThreeInterChain => Pattern {
                roles: &[A, A, V, T],
                edges: &[(0, 3), (1, 2), (2, 3)],
            },
            // (a0 -> v  and  a1 -> v) -> t
            Template::ThreeChainInter => Pattern {
                roles: &[A, A, V, T],
                edges: &[(0, 2), (1, 2), (2, 3)],
            },
        }
    }

    pub fn num_anchors(self) -> usize {
        self.pattern().roles.iter().filter(|r| **r == A).count()
    }

    pub fn num_relations(self) -> usize {
        self.pattern().edges.len()
    }

    /// True when some node has two or more incoming pattern edges.
    pub fn has_intersection(self) -> bool {
        let p = self.pattern();
        let mut fan_in = vec![0; p.roles.len()];
        for &(_, dst) in p.edges {
            fan_in[dst] += 1;
        }
        fan_in.iter().any(|&n| n >= 2)
    }

    pub fn index(self) -> usize {
        Template::ALL.iter().position(|t| *t == self).unwrap()
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Template::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Lookup {
                kind: "template",
                what: s.to_owned(),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryNode {
    pub role: Role,
    /// Entity binding; `Some` exactly for anchors.
    pub binding: Option<EntityId>,
    /// Type used to initialise free nodes.
    pub type_hint: TypeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryEdge {
    pub src: usize,
    pub relation: RelationId,
    pub dst: usize,
}

/// A grounded query: template shape plus anchor bindings and relation labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryGraph {
    pub template: Template,
    pub nodes: Vec<QueryNode>,
    pub edges: Vec<QueryEdge>,
}

impl QueryGraph {
    /// Builds a query of `template` shape. Anchors and relations are given in
    /// pattern order. Free nodes get the dominant range type of their
    /// incoming relation as type hint.
    pub fn instantiate(
        kg: &KnowledgeGraph,
        template: Template,
        anchors: &[EntityId],
        relations: &[RelationId],
    ) -> Result<QueryGraph> {
        let pattern = template.pattern();
        if anchors.len() != template.num_anchors() {
            return Err(Error::Arity {
                template: template.name(),
                what: "anchors",
                expected: template.num_anchors(),
                got: anchors.len(),
            });
        }
        if relations.len() != pattern.edges.len() {
            return Err(Error::Arity {
                template: template.name(),
                what: "relations",
                expected: pattern.edges.len(),
                got: relations.len(),
            });
        }
        for a in anchors {
            kg.check_entity(*a)?;
        }
        for r in relations {
            kg.check_relation(*r)?;
        }

        let edges: Vec<QueryEdge> = pattern
            .edges
            .iter()
            .zip(relations)
            .map(|(&(src, dst), &relation)| QueryEdge { src, relation, dst })
            .collect();
        let mut anchor_iter = anchors.iter();
        let nodes = pattern
            .roles
            .iter()
            .enumerate()
            .map(|(i, &role)| match role {
                Role::Anchor => QueryNode {
                    role,
                    binding: anchor_iter.next().copied(),
                    type_hint: TypeId::UNTYPED,
                },
                _ => {
                    // first incoming edge decides the hint
                    let rel = edges.iter().find(|e| e.dst == i).map(|e| e.relation);
                    QueryNode {
                        role,
                        binding: None,
                        type_hint: rel.map(|r| kg.range_type(r)).unwrap_or(TypeId::UNTYPED),
                    }
                }
            })
            .collect();
        Ok(QueryGraph {
            template,
            nodes,
            edges,
        })
    }

    pub fn target(&self) -> usize {
        self.nodes
            .iter()
            .position(|n| n.role == Role::Target)
            .expect("query has a target")
    }

    pub fn anchors(&self) -> Vec<EntityId> {
        self.nodes.iter().filter_map(|n| n.binding).collect()
    }

    pub fn relations(&self) -> Vec<RelationId> {
        self.edges.iter().map(|e| e.relation).collect()
    }

    /// Longest directed path, in edges, from any anchor to the target.
    pub fn diameter(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        for node in self.topo_order() {
            for e in self.edges.iter().filter(|e| e.src == node) {
                depth[e.dst] = depth[e.dst].max(depth[node] + 1);
            }
        }
        depth[self.target()]
    }

    /// Returns a copy with node indices permuted: new node `i` is old node
    /// `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> QueryGraph {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        QueryGraph {
            template: self.template,
            nodes: perm.iter().map(|&old| self.nodes[old].clone()).collect(),
            edges: self
                .edges
                .iter()
                .map(|e| QueryEdge {
                    src: inverse[e.src],
                    relation: e.relation,
                    dst: inverse[e.dst],
                })
                .collect(),
        }
    }

    /// Topological order of node indices (Kahn, smallest index first).
    fn topo_order(&self) -> Vec<usize> {
        let n = self.nodes.len();
        let mut indeg = vec![0; n];
        for e in &self.edges {
            indeg[e.dst] += 1;
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for e in self.edges.iter().filter(|e| e.src == i) {
                indeg[e.dst] -= 1;
                if indeg[e.dst] == 0 {
                    ready.insert(e.dst);
                }
            }
        }
        order
    }

    fn validate_against(&self, kg: &KnowledgeGraph) -> Result<()> {
        for n in &self.nodes {
            if let Some(b) = n.binding {
                kg.check_entity(b)?;
            }
        }
        for e in &self.edges {
            kg.check_relation(e.relation)?;
        }
        Ok(())
    }
}

fn intersect_sorted(a: &[EntityId], b: &[EntityId]) -> Vec<EntityId> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

struct Search<'a> {
    kg: &'a KnowledgeGraph,
    q: &'a QueryGraph,
    order: Vec<usize>,
    /// incoming edges per node, as (src, relation)
    incoming: Vec<Vec<(usize, RelationId)>>,
    /// nodes assigned before step k that still have an edge into steps >= k
    frontier: Vec<Vec<usize>>,
    memo: HashMap<(usize, Vec<EntityId>), Rc<Vec<EntityId>>>,
    assignment: Vec<Option<EntityId>>,
}

impl<'a> Search<'a> {
    fn new(kg: &'a KnowledgeGraph, q: &'a QueryGraph) -> Self {
        let order = q.topo_order();
        let n = q.nodes.len();
        let mut incoming = vec![Vec::new(); n];
        for e in &q.edges {
            incoming[e.dst].push((e.src, e.relation));
        }
        let mut position = vec![0; n];
        for (k, &node) in order.iter().enumerate() {
            position[node] = k;
        }
        let frontier = (0..=n)
            .map(|k| {
                let mut f: Vec<usize> = q
                    .edges
                    .iter()
                    .filter(|e| position[e.src] < k && position[e.dst] >= k)
                    .map(|e| e.src)
                    .collect();
                f.sort_unstable();
                f.dedup();
                f
            })
            .collect();
        Search {
            kg,
            q,
            order,
            incoming,
            frontier,
            memo: HashMap::new(),
            assignment: vec![None; n],
        }
    }

    /// Candidate values for `node` given the current partial assignment.
    fn domain(&self, node: usize) -> Vec<EntityId> {
        if let Some(b) = self.q.nodes[node].binding {
            return vec![b];
        }
        let mut dom: Option<Vec<EntityId>> = None;
        for &(src, rel) in &self.incoming[node] {
            let value = self.assignment[src].expect("sources are assigned first");
            let nbrs = self.kg.neighbors_unchecked(value, rel, Direction::Out);
            dom = Some(match dom {
                None => nbrs.to_vec(),
                Some(d) => intersect_sorted(&d, nbrs),
            });
            if dom.as_ref().is_some_and(Vec::is_empty) {
                break;
            }
        }
        // A free source node with no incoming edges would range over all of
        // V; templates never produce one.
        dom.unwrap_or_else(|| {
            (0..self.kg.num_entities())
                .map(EntityId::from_index)
                .collect()
        })
    }

    fn run(&mut self, k: usize) -> Rc<Vec<EntityId>> {
        let node = self.order[k];
        let target = self.q.target();
        let key = (
            k,
            self.frontier[k]
                .iter()
                .map(|&i| self.assignment[i].unwrap())
                .collect::<Vec<_>>(),
        );
        if let Some(hit) = self.memo.get(&key) {
            return Rc::clone(hit);
        }
        let dom = self.domain(node);
        let result = if k + 1 == self.order.len() {
            debug_assert_eq!(node, target);
            dom
        } else {
            let mut acc = BTreeSet::new();
            for v in dom {
                self.assignment[node] = Some(v);
                acc.extend(self.run(k + 1).iter().copied());
            }
            self.assignment[node] = None;
            acc.into_iter().collect()
        };
        let result = Rc::new(result);
        self.memo.insert(key, Rc::clone(&result));
        result
    }
}

/// Exact answer set of `q` on `kg`: every entity that can be the target in
/// some assignment of the variables making every query edge a graph edge.
///
/// Depth-first backtracking over nodes in topological order; partial results
/// are memoised on the assigned nodes that still constrain the rest.
pub fn execute(kg: &KnowledgeGraph, q: &QueryGraph) -> Result<BTreeSet<EntityId>> {
    q.validate_against(kg)?;
    let target = q.target();
    let mut search = Search::new(kg, q);
    // the target must be the last node in topological order
    if *search.order.last().unwrap() != target {
        return Err(Error::Config("target is not the query sink".into()));
    }
    Ok(search.run(0).iter().copied().collect())
}

/// Answer set when every intersection node accepts a value satisfying ANY
/// of its incoming branches instead of all of them.
pub fn execute_relaxed(kg: &KnowledgeGraph, q: &QueryGraph) -> Result<BTreeSet<EntityId>> {
    if !q.template.has_intersection() {
        return Err(Error::UnsupportedTemplate(q.template.name()));
    }
    q.validate_against(kg)?;
    propagate(kg, q, true)
}

/// Branch-wise set propagation. Exact for tree-shaped patterns, which all
/// templates are; with `relaxed` the per-node combination is a union.
fn propagate(kg: &KnowledgeGraph, q: &QueryGraph, relaxed: bool) -> Result<BTreeSet<EntityId>> {
    let mut sets: Vec<Option<BTreeSet<EntityId>>> = vec![None; q.nodes.len()];
    for node in q.topo_order() {
        let set = if let Some(b) = q.nodes[node].binding {
            BTreeSet::from([b])
        } else {
            let mut acc: Option<BTreeSet<EntityId>> = None;
            for e in q.edges.iter().filter(|e| e.dst == node) {
                let src = sets[e.src].as_ref().expect("topological order");
                let reach: BTreeSet<EntityId> = src
                    .iter()
                    .flat_map(|&v| kg.neighbors_unchecked(v, e.relation, Direction::Out))
                    .copied()
                    .collect();
                acc = Some(match acc {
                    None => reach,
                    Some(a) if relaxed => a.union(&reach).copied().collect(),
                    Some(a) => a.intersection(&reach).copied().collect(),
                });
            }
            acc.unwrap_or_default()
        };
        sets[node] = Some(set);
    }
    Ok(sets[q.target()].take().unwrap_or_default())
}

/// Strict answers by set propagation; a second route to [`execute`] used in
/// consistency checks.
pub fn execute_by_propagation(kg: &KnowledgeGraph, q: &QueryGraph) -> Result<BTreeSet<EntityId>> {
    q.validate_against(kg)?;
    propagate(kg, q, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixture_kgt;

    fn e(kg: &KnowledgeGraph, l: &str) -> EntityId {
        kg.entity_id(l).unwrap()
    }
    fn r(kg: &KnowledgeGraph, l: &str) -> RelationId {
        kg.relation_id(l).unwrap()
    }
    fn set(kg: &KnowledgeGraph, labels: &[&str]) -> BTreeSet<EntityId> {
        labels.iter().map(|l| e(kg, l)).collect()
    }

    fn eq1(kg: &KnowledgeGraph) -> QueryGraph {
        QueryGraph::instantiate(
            kg,
            Template::ThreeChainInter,
            &[e(kg, "Alice"), e(kg, "Bob")],
            &[r(kg, "works_on"), r(kg, "works_on"), r(kg, "related")],
        )
        .unwrap()
    }

    #[test]
    fn templates_are_well_formed() {
        for t in Template::ALL {
            let p = t.pattern();
            assert_eq!(p.roles.iter().filter(|r| **r == Role::Target).count(), 1);
            assert_eq!(*p.roles.last().unwrap(), Role::Target);
            assert!(t.num_anchors() >= 1);
            for &(s, d) in p.edges {
                assert!(s < d);
            }
            // tree: n - 1 edges and every non-target node has one outgoing edge
            assert_eq!(p.edges.len(), p.roles.len() - 1);
            for i in 0..p.roles.len() - 1 {
                assert_eq!(p.edges.iter().filter(|e| e.0 == i).count(), 1);
            }
            assert_eq!(t.name().parse::<Template>().unwrap(), t);
        }
    }

    #[test]
    fn instantiate_shapes_and_arity() {
        let kg = fixture_kgt();
        let q = QueryGraph::instantiate(
            &kg,
            Template::TwoInter,
            &[e(&kg, "Alice"), e(&kg, "Bob")],
            &[r(&kg, "works_on"), r(&kg, "works_on")],
        )
        .unwrap();
        assert_eq!(q.anchors().len(), 2);
        assert_eq!(q.nodes.iter().filter(|n| n.role == Role::Target).count(), 1);
        assert_eq!(kg.type_label(q.nodes[q.target()].type_hint), "topic");

        let q = QueryGraph::instantiate(
            &kg,
            Template::OneChain,
            &[e(&kg, "Alice")],
            &[r(&kg, "works_on")],
        )
        .unwrap();
        assert_eq!(
            q.edges,
            vec![QueryEdge {
                src: 0,
                relation: r(&kg, "works_on"),
                dst: 1
            }]
        );

        let err = QueryGraph::instantiate(
            &kg,
            Template::TwoInter,
            &[e(&kg, "Alice")],
            &[r(&kg, "works_on"), r(&kg, "works_on")],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::Arity {
                what: "anchors",
                ..
            }
        ));
    }

    #[test]
    fn execute_on_kgt() {
        let kg = fixture_kgt();
        assert_eq!(execute(&kg, &eq1(&kg)).unwrap(), set(&kg, &["P1", "P2"]));
        let q = QueryGraph::instantiate(
            &kg,
            Template::OneChain,
            &[e(&kg, "Alice")],
            &[r(&kg, "works_on")],
        )
        .unwrap();
        assert_eq!(execute(&kg, &q).unwrap(), set(&kg, &["T1"]));
        let q = QueryGraph::instantiate(
            &kg,
            Template::OneChain,
            &[e(&kg, "P1")],
            &[r(&kg, "works_on")],
        )
        .unwrap();
        assert!(execute(&kg, &q).unwrap().is_empty());
    }

    #[test]
    fn relaxed_on_kgt() {
        let kg = fixture_kgt();
        let q = eq1(&kg);
        let relaxed = execute_relaxed(&kg, &q).unwrap();
        assert_eq!(relaxed, set(&kg, &["P1", "P2", "P3"]));
        let strict = execute(&kg, &q).unwrap();
        let hard: BTreeSet<_> = relaxed.difference(&strict).copied().collect();
        assert_eq!(hard, set(&kg, &["P3"]));

        let chain = QueryGraph::instantiate(
            &kg,
            Template::OneChain,
            &[e(&kg, "Alice")],
            &[r(&kg, "works_on")],
        )
        .unwrap();
        assert!(matches!(
            execute_relaxed(&kg, &chain),
            Err(Error::UnsupportedTemplate("1-chain"))
        ));
    }

    #[test]
    fn diameters() {
        let kg = fixture_kgt();
        let a = e(&kg, "Alice");
        let w = r(&kg, "works_on");
        let expect = [
            (Template::OneChain, 1),
            (Template::TwoChain, 2),
            (Template::ThreeChain, 3),
            (Template::TwoInter, 1),
            (Template::ThreeInter, 1),
            (Template::ThreeInterChain, 2),
            (Template::ThreeChainInter, 2),
        ];
        for (t, d) in expect {
            let q = QueryGraph::instantiate(
                &kg,
                t,
                &vec![a; t.num_anchors()],
                &vec![w; t.num_relations()],
            )
            .unwrap();
            assert_eq!(q.diameter(), d, "{t}");
        }
    }

    #[test]
    fn permutation_keeps_answers() {
        let kg = fixture_kgt();
        let q = eq1(&kg);
        let p = q.permuted(&[3, 1, 2, 0]);
        assert_eq!(p.diameter(), q.diameter());
        assert_eq!(execute(&kg, &p).unwrap(), execute(&kg, &q).unwrap());
        assert_eq!(
            execute_relaxed(&kg, &p).unwrap(),
            execute_relaxed(&kg, &q).unwrap()
        );
    }
}
