//! Edge-removal splits, edge-first query sampling and negative sampling.
//!
//! A fixed fraction of edges is *marked* as removed but stays in the graph.
//! Queries are grounded by drawing concrete edges backward from the target,
//! answered on the full graph, and routed to val/test when any drawn edge is
//! marked, to train otherwise.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    Dataset, DatasetManifest, QueryInstance, Split, TemplateSummary, DATASET_FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph, RelationId, Triple};
use crate::query::{execute, execute_relaxed, QueryGraph, Role, Template};

/// Edges marked for removal.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSplit {
    removed: Vec<bool>,
    pub fraction: f64,
    pub seed: u64,
}

impl EdgeSplit {
    /// Marks `round(fraction · |E|)` edges uniformly without replacement.
    pub fn new(kg: &KnowledgeGraph, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Config(format!(
                "split fraction must be in (0, 1), got {fraction}"
            )));
        }
        let n = kg.num_edges();
        let count = (fraction * n as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut removed = vec![false; n];
        for i in index::sample(&mut rng, n, count.min(n)) {
            removed[i] = true;
        }
        Ok(EdgeSplit {
            removed,
            fraction,
            seed,
        })
    }

    pub fn is_removed(&self, edge: usize) -> bool {
        self.removed[edge]
    }

    pub fn removed_edges(&self) -> Vec<usize> {
        (0..self.removed.len())
            .filter(|&i| self.removed[i])
            .collect()
    }

    pub fn train_edges(&self) -> Vec<usize> {
        (0..self.removed.len())
            .filter(|&i| !self.removed[i])
            .collect()
    }

    pub fn num_removed(&self) -> usize {
        self.removed.iter().filter(|&&r| r).count()
    }

    pub fn num_edges(&self) -> usize {
        self.removed.len()
    }

    pub fn write(&self, path: &Path, kg: &KnowledgeGraph) -> Result<()> {
        let file = SplitFile {
            fraction: self.fraction,
            seed: self.seed,
            graph_hash: kg.content_hash(),
            removed: self
                .removed_edges()
                .into_iter()
                .map(|i| {
                    let t = kg.edge(i);
                    [
                        kg.entity_label(t.head).to_owned(),
                        kg.relation_label(t.relation).to_owned(),
                        kg.entity_label(t.tail).to_owned(),
                    ]
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&file)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, kg: &KnowledgeGraph) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SplitFile = serde_json::from_str(&text)?;
        if file.graph_hash != kg.content_hash() {
            return Err(Error::Config(format!(
                "split {} belongs to a different graph",
                path.display()
            )));
        }
        let mut removed = vec![false; kg.num_edges()];
        for [h, r, t] in &file.removed {
            let triple = Triple::new(kg.entity_id(h)?, kg.relation_id(r)?, kg.entity_id(t)?);
            let id = kg.edge_id(&triple).ok_or_else(|| Error::Lookup {
                kind: "edge",
                what: format!("{h} {r} {t}"),
            })?;
            removed[id] = true;
        }
        Ok(EdgeSplit {
            removed,
            fraction: file.fraction,
            seed: file.seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    fraction: f64,
    seed: u64,
    graph_hash: String,
    removed: Vec<[String; 3]>,
}

/// How many queries of one template to collect per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quota {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Quota {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub max_targets: usize,
    pub negatives_per_query: usize,
    pub hard_negative_fraction: f64,
    /// Share of removed-edge queries routed to validation.
    pub val_fraction: f64,
    pub quotas: BTreeMap<Template, Quota>,
    /// Restrict uniform negatives to the target's type hint.
    pub typed_negatives: bool,
    /// Sampling attempts per template, as a multiple of its total quota.
    pub attempt_factor: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            max_targets: 100,
            negatives_per_query: 10,
            hard_negative_fraction: 0.5,
            val_fraction: 0.1,
            quotas: Template::ALL
                .iter()
                .map(|&t| {
                    (
                        t,
                        Quota {
                            train: 100,
                            val: 10,
                            test: 90,
                        },
                    )
                })
                .collect(),
            typed_negatives: false,
            attempt_factor: 200,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.max_targets < 1 {
            v.push("max_targets must be at least 1".to_owned());
        }
        if !(0.0..=1.0).contains(&self.hard_negative_fraction) {
            v.push("hard_negative_fraction must be in [0, 1]".to_owned());
        }
        if !(0.0..=1.0).contains(&self.val_fraction) {
            v.push("val_fraction must be in [0, 1]".to_owned());
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rejection {
    Empty,
    Oversize,
    /// The pattern could not be grounded from the drawn edges.
    Disconnected,
    /// Same template, anchors and relations as an already accepted query.
    Duplicate,
}

impl Rejection {
    pub fn name(self) -> &'static str {
        match self {
            Rejection::Empty => "empty",
            Rejection::Oversize => "oversize",
            Rejection::Disconnected => "disconnected",
            Rejection::Duplicate => "duplicate",
        }
    }
}

/// A grounded query before split assignment and negative sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledQuery {
    pub query: QueryGraph,
    pub edges: Vec<usize>,
    pub targets: BTreeSet<EntityId>,
}

/// Draws one query of `template` edge-first: a uniformly random edge fixes
/// the target, and the remaining pattern edges are drawn backward from there.
pub fn sample_query(
    kg: &KnowledgeGraph,
    template: Template,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> std::result::Result<SampledQuery, Rejection> {
    if kg.num_edges() == 0 {
        return Err(Rejection::Disconnected);
    }
    let first = rng.gen_range(0..kg.num_edges());
    ground(kg, template, Some(first), kg.edge(first).tail, cfg, rng)
}

/// Like [`sample_query`] with the target entity fixed.
pub fn sample_query_at(
    kg: &KnowledgeGraph,
    template: Template,
    target: EntityId,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> std::result::Result<SampledQuery, Rejection> {
    ground(kg, template, None, target, cfg, rng)
}

fn ground(
    kg: &KnowledgeGraph,
    template: Template,
    first: Option<usize>,
    target: EntityId,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> std::result::Result<SampledQuery, Rejection> {
    let pattern = template.pattern();
    let n = pattern.roles.len();
    let mut grounding: Vec<Option<EntityId>> = vec![None; n];
    grounding[n - 1] = Some(target);
    let mut chosen: Vec<Option<usize>> = vec![None; pattern.edges.len()];

    // every edge's destination is grounded before the edge is drawn
    let mut order: Vec<usize> = (0..pattern.edges.len()).collect();
    order.sort_by_key(|&k| (std::cmp::Reverse(pattern.edges[k].1), pattern.edges[k].0));
    let mut first = first;
    for k in order {
        let (src, dst) = pattern.edges[k];
        let at = grounding[dst].expect("destination grounded");
        let edge = match first.take() {
            Some(e) if dst == n - 1 => e,
            other => {
                first = other;
                let candidates: Vec<usize> = kg
                    .in_edges(at)
                    .iter()
                    .copied()
                    .filter(|e| !chosen.contains(&Some(*e)))
                    .collect();
                if candidates.is_empty() {
                    return Err(Rejection::Disconnected);
                }
                candidates[rng.gen_range(0..candidates.len())]
            }
        };
        chosen[k] = Some(edge);
        grounding[src] = Some(kg.edge(edge).head);
    }

    let anchors: Vec<EntityId> = pattern
        .roles
        .iter()
        .zip(&grounding)
        .filter(|(r, _)| **r == Role::Anchor)
        .map(|(_, g)| g.expect("grounded"))
        .collect();
    let edges: Vec<usize> = chosen.into_iter().map(|c| c.expect("drawn")).collect();
    let relations: Vec<RelationId> = edges.iter().map(|&e| kg.edge(e).relation).collect();
    let query =
        QueryGraph::instantiate(kg, template, &anchors, &relations).expect("ids come from kg");
    let targets = execute(kg, &query).expect("valid query");
    if targets.is_empty() {
        return Err(Rejection::Empty);
    }
    if targets.len() > cfg.max_targets {
        return Err(Rejection::Oversize);
    }
    Ok(SampledQuery {
        query,
        edges,
        targets,
    })
}

/// Train when no drawn edge is marked removed; otherwise val with
/// probability `val_fraction`, else test.
pub fn assign_split(
    sampled: &SampledQuery,
    split: &EdgeSplit,
    val_fraction: f64,
    rng: &mut impl Rng,
) -> Split {
    if sampled.edges.iter().any(|&e| split.is_removed(e)) {
        if rng.gen::<f64>() < val_fraction {
            Split::Val
        } else {
            Split::Test
        }
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Negatives {
    pub negatives: Vec<EntityId>,
    pub hard_negatives: Vec<EntityId>,
    /// Fewer than `negatives_per_query` non-answers were available.
    pub shortfall: bool,
}

fn draw(pool: &[EntityId], k: usize, rng: &mut impl Rng) -> Vec<EntityId> {
    let mut out: Vec<EntityId> = index::sample(rng, pool.len(), k.min(pool.len()))
        .into_iter()
        .map(|i| pool[i])
        .collect();
    out.sort_unstable();
    out
}

/// Uniform negatives from `V − T′`, plus hard negatives from the relaxed
/// answer set for templates with an intersection.
pub fn sample_negatives(
    kg: &KnowledgeGraph,
    query: &QueryGraph,
    targets: &BTreeSet<EntityId>,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Negatives> {
    if targets.is_empty() {
        return Err(Error::Empty(
            "negative sampling needs a nonempty target set".into(),
        ));
    }
    let n = cfg.negatives_per_query;
    let hard_negatives = if query.template.has_intersection() {
        let relaxed = execute_relaxed(kg, query)?;
        let pool: Vec<EntityId> = relaxed.difference(targets).copied().collect();
        let want = (cfg.hard_negative_fraction * n as f64).floor() as usize;
        draw(&pool, want, rng)
    } else {
        Vec::new()
    };
    let hard: HashSet<EntityId> = hard_negatives.iter().copied().collect();
    let target_type = query.nodes[query.target()].type_hint;
    let pool: Vec<EntityId> = (0..kg.num_entities())
        .map(EntityId::from_index)
        .filter(|e| !targets.contains(e) && !hard.contains(e))
        .filter(|&e| !cfg.typed_negatives || kg.entity_type(e) == target_type)
        .collect();
    let want = n - hard_negatives.len();
    let negatives = draw(&pool, want, rng);
    Ok(Negatives {
        shortfall: negatives.len() < want,
        negatives,
        hard_negatives,
    })
}

fn template_stream(seed: u64, template: Template) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(template.index() as u64 + 1);
    rng
}

type QueryKey = (Vec<EntityId>, Vec<RelationId>);

fn sample_template(
    kg: &KnowledgeGraph,
    split: &EdgeSplit,
    cfg: &SamplerConfig,
    template: Template,
) -> Result<(Vec<QueryInstance>, TemplateSummary)> {
    let quota = cfg.quotas.get(&template).copied().unwrap_or(Quota {
        train: 0,
        val: 0,
        test: 0,
    });
    let mut rng = template_stream(cfg.seed, template);
    let mut summary = TemplateSummary::default();
    let mut out = Vec::new();
    let mut counts: BTreeMap<Split, usize> = BTreeMap::new();
    let mut seen: HashSet<QueryKey> = HashSet::new();
    let mut rejections: BTreeMap<Rejection, usize> = BTreeMap::new();
    let max_attempts = cfg.attempt_factor.max(1) * quota.total().max(1);
    let full = |counts: &BTreeMap<Split, usize>| {
        Split::ALL
            .iter()
            .all(|&s| counts.get(&s).copied().unwrap_or(0) >= quota.get(s))
    };
    while !full(&counts) && summary.attempts < max_attempts {
        summary.attempts += 1;
        let sampled = match sample_query(kg, template, cfg, &mut rng) {
            Ok(s) => s,
            Err(r) => {
                *rejections.entry(r).or_default() += 1;
                continue;
            }
        };
        let key = (sampled.query.anchors(), sampled.query.relations());
        if seen.contains(&key) {
            *rejections.entry(Rejection::Duplicate).or_default() += 1;
            continue;
        }
        let which = assign_split(&sampled, split, cfg.val_fraction, &mut rng);
        let have = counts.entry(which).or_default();
        if *have >= quota.get(which) {
            continue;
        }
        *have += 1;
        seen.insert(key);
        let neg = sample_negatives(kg, &sampled.query, &sampled.targets, cfg, &mut rng)?;
        if neg.shortfall {
            summary.negative_shortfalls += 1;
        }
        out.push(QueryInstance {
            edges: sampled.edges.iter().map(|&e| kg.edge(e)).collect(),
            query: sampled.query,
            targets: sampled.targets.into_iter().collect(),
            negatives: neg.negatives,
            hard_negatives: neg.hard_negatives,
            split: which,
        });
    }
    for s in Split::ALL {
        let of_split: Vec<&QueryInstance> = out.iter().filter(|i| i.split == s).collect();
        summary.counts.insert(s, of_split.len());
        let mean = if of_split.is_empty() {
            0.0
        } else {
            of_split.iter().map(|i| i.targets.len()).sum::<usize>() as f64 / of_split.len() as f64
        };
        summary.mean_targets.insert(s, mean);
    }
    summary.rejections = rejections
        .into_iter()
        .map(|(r, n)| (r.name().to_owned(), n))
        .collect();
    Ok((out, summary))
}

/// Samples every template with a quota. Each template has its own RNG
/// stream and runs on its own thread; results merge in template order.
pub fn generate_dataset(
    kg: &KnowledgeGraph,
    split: &EdgeSplit,
    cfg: &SamplerConfig,
) -> Result<Dataset> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    if split.num_edges() != kg.num_edges() {
        return Err(Error::Config("edge split does not match the graph".into()));
    }
    let templates: Vec<Template> = cfg.quotas.keys().copied().collect();
    let results: Vec<Result<(Vec<QueryInstance>, TemplateSummary)>> = std::thread::scope(|s| {
        let handles: Vec<_> = templates
            .iter()
            .map(|&t| s.spawn(move || sample_template(kg, split, cfg, t)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampler thread panicked"))
            .collect()
    });
    let mut dataset = Dataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        manifest: DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            graph_hash: kg.content_hash(),
            seed: cfg.seed,
            sampler: cfg.clone(),
            split_fraction: split.fraction,
            split_seed: split.seed,
            removed_edges: split.num_removed(),
            hard_negative_rule: "every intersection node relaxed to a disjunction of its branches"
                .to_owned(),
            type_hint_rule: "free nodes use the most frequent tail type of their incoming relation"
                .to_owned(),
            templates: BTreeMap::new(),
        },
    };
    for (t, result) in templates.into_iter().zip(results) {
        let (instances, summary) = result?;
        for inst in instances {
            match inst.split {
                Split::Train => dataset.train.push(inst),
                Split::Val => dataset.val.push(inst),
                Split::Test => dataset.test.push(inst),
            }
        }
        dataset.manifest.templates.insert(t, summary);
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixture_kgt;

    fn e(kg: &KnowledgeGraph, l: &str) -> EntityId {
        kg.entity_id(l).unwrap()
    }

    #[test]
    fn split_rounding_and_determinism() {
        let kg = fixture_kgt();
        let s = EdgeSplit::new(&kg, 0.10, 4).unwrap();
        assert_eq!(s.num_removed(), 1);
        assert_eq!(s.train_edges().len() + s.removed_edges().len(), 6);
        assert_eq!(s, EdgeSplit::new(&kg, 0.10, 4).unwrap());
        assert!(EdgeSplit::new(&kg, 1.5, 4).is_err());
        assert!(EdgeSplit::new(&kg, 0.0, 4).is_err());
    }

    #[test]
    fn split_file_round_trip() {
        let kg = fixture_kgt();
        let s = EdgeSplit::new(&kg, 0.5, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.json");
        s.write(&p, &kg).unwrap();
        assert_eq!(EdgeSplit::read(&p, &kg).unwrap(), s);
    }

    #[test]
    fn one_chain_from_alice_edge() {
        let kg = fixture_kgt();
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // edge 0 is works_on(Alice, T1)
        let s = ground(
            &kg,
            Template::OneChain,
            Some(0),
            e(&kg, "T1"),
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!(s.query.anchors(), vec![e(&kg, "Alice")]);
        assert_eq!(s.targets, BTreeSet::from([e(&kg, "T1")]));
        assert_eq!(s.edges, vec![0]);
    }

    #[test]
    fn two_inter_at_t1() {
        let kg = fixture_kgt();
        let cfg = SamplerConfig::default();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample_query_at(&kg, Template::TwoInter, e(&kg, "T1"), &cfg, &mut rng).unwrap();
            let anchors: BTreeSet<_> = s.query.anchors().into_iter().collect();
            assert_eq!(anchors, BTreeSet::from([e(&kg, "Alice"), e(&kg, "Bob")]));
            assert_eq!(s.targets, BTreeSet::from([e(&kg, "T1")]));
        }
        // T2 has a single incoming edge, so two distinct branches are impossible
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_query_at(&kg, Template::TwoInter, e(&kg, "T2"), &cfg, &mut rng),
            Err(Rejection::Disconnected)
        );
    }

    #[test]
    fn oversize_is_rejected() {
        // hub with 150 tails: a 1-chain from the hub has 150 answers
        let mut b = crate::graph::GraphBuilder::new();
        for i in 0..150 {
            b.add_triple("hub", "r", &format!("x{i}"));
        }
        let kg = b.build();
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            sample_query(&kg, Template::OneChain, &cfg, &mut rng),
            Err(Rejection::Oversize)
        );
    }

    #[test]
    fn split_assignment_rule() {
        let kg = fixture_kgt();
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = ground(
            &kg,
            Template::OneChain,
            Some(0),
            e(&kg, "T1"),
            &cfg,
            &mut rng,
        )
        .unwrap();
        let mut split = EdgeSplit::new(&kg, 0.1, 0).unwrap();
        split.removed = vec![false; 6];
        assert_eq!(assign_split(&s, &split, 0.1, &mut rng), Split::Train);
        split.removed[0] = true;
        assert_eq!(assign_split(&s, &split, 1.0, &mut rng), Split::Val);
        assert_eq!(assign_split(&s, &split, 0.0, &mut rng), Split::Test);
        let mut val = 0;
        for _ in 0..10_000 {
            if assign_split(&s, &split, 0.1, &mut rng) == Split::Val {
                val += 1;
            }
        }
        assert!((800..1200).contains(&val), "{val}");
    }

    #[test]
    fn hard_negatives_on_kgt() {
        let kg = fixture_kgt();
        let w = kg.relation_id("works_on").unwrap();
        let q = QueryGraph::instantiate(
            &kg,
            Template::ThreeChainInter,
            &[e(&kg, "Alice"), e(&kg, "Bob")],
            &[w, w, kg.relation_id("related").unwrap()],
        )
        .unwrap();
        let targets = execute(&kg, &q).unwrap();
        let cfg = SamplerConfig {
            negatives_per_query: 4,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let neg = sample_negatives(&kg, &q, &targets, &cfg, &mut rng).unwrap();
        assert_eq!(neg.hard_negatives, vec![e(&kg, "P3")]);
        // shortfall backfilled with uniform negatives
        assert_eq!(neg.negatives.len(), 3);
        assert!(!neg.shortfall);
        for n in neg.negatives.iter().chain(&neg.hard_negatives) {
            assert!(!targets.contains(n));
        }
    }

    #[test]
    fn chains_have_no_hard_negatives() {
        let kg = fixture_kgt();
        let q = QueryGraph::instantiate(
            &kg,
            Template::OneChain,
            &[e(&kg, "Alice")],
            &[kg.relation_id("works_on").unwrap()],
        )
        .unwrap();
        let targets = execute(&kg, &q).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let neg = sample_negatives(&kg, &q, &targets, &SamplerConfig::default(), &mut rng).unwrap();
        assert!(neg.hard_negatives.is_empty());
        // only 6 non-answers exist for 10 requested
        assert_eq!(neg.negatives.len(), 6);
        assert!(neg.shortfall);
        assert!(!neg.negatives.contains(&e(&kg, "T1")));
    }

    #[test]
    fn typed_negatives_stay_in_type() {
        let kg = fixture_kgt();
        let q = QueryGraph::instantiate(
            &kg,
            Template::OneChain,
            &[e(&kg, "Alice")],
            &[kg.relation_id("works_on").unwrap()],
        )
        .unwrap();
        let targets = execute(&kg, &q).unwrap();
        let cfg = SamplerConfig {
            typed_negatives: true,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let neg = sample_negatives(&kg, &q, &targets, &cfg, &mut rng).unwrap();
        assert_eq!(neg.negatives, vec![e(&kg, "T2")]);
    }
}
