//! Query encoder: relational message passing over the query graph followed
//! by an aggregation into a single `2d` vector, read as (center, offset) of
//! the query box.
//!
//! Parameters live in a [`ParameterStore`]: one `2d`-wide row per entity
//! (raw center ∥ raw offset), one per entity type for free query nodes, and
//! per layer a self-loop matrix plus one matrix per relation and direction.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxEmbedding;
use crate::graph::{EntityId, KnowledgeGraph};
use crate::ndmath::{ParamId, Params, Tape, Tensor2, Var};
use crate::query::QueryGraph;

/// Largest diameter among the supported templates.
pub const MAX_DIAMETER: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Max,
    /// Target-node readout after as many steps as the query diameter.
    Tm,
    Mlp,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [
        Aggregation::Sum,
        Aggregation::Max,
        Aggregation::Tm,
        Aggregation::Mlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Sum => "sum",
            Aggregation::Max => "max",
            Aggregation::Tm => "tm",
            Aggregation::Mlp => "mlp",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(Aggregation::Sum),
            "max" => Ok(Aggregation::Max),
            "tm" => Ok(Aggregation::Tm),
            "mlp" => Ok(Aggregation::Mlp),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

/// How many message-passing steps a query gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerPolicy {
    Fixed(usize),
    Diameter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub aggregation: Aggregation,
    pub policy: LayerPolicy,
}

impl EncoderConfig {
    /// TM runs diameter-many steps; the others run `layers` steps.
    pub fn new(aggregation: Aggregation, layers: usize) -> Self {
        let policy = match aggregation {
            Aggregation::Tm => LayerPolicy::Diameter,
            _ => LayerPolicy::Fixed(layers),
        };
        EncoderConfig {
            aggregation,
            policy,
        }
    }

    pub fn steps(&self, q: &QueryGraph) -> Result<usize> {
        let diameter = q.diameter();
        match (self.aggregation, self.policy) {
            (Aggregation::Tm, LayerPolicy::Fixed(l)) if l != diameter => {
                Err(Error::Config(format!(
                    "tm aggregation needs {diameter} message-passing steps for a {} query, got {l}",
                    q.template
                )))
            }
            (_, LayerPolicy::Fixed(l)) => Ok(l),
            (_, LayerPolicy::Diameter) => Ok(diameter),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct MlpIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// All trainable tensors of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    dim: usize,
    layers: usize,
    num_relations: usize,
    params: Params,
    entity: ParamId,
    types: ParamId,
    self_w: Vec<ParamId>,
    /// `[layer][relation] -> [forward, inverse]`
    rel_w: Vec<Vec<[ParamId; 2]>>,
    mlp: MlpIds,
}

fn entity_like_table(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Tensor2 {
    let centers = Uniform::new(0.0, 10.0);
    let offsets = Normal::new(3.0, 1.0).expect("valid normal");
    let mut t = Tensor2::zeros(rows, 2 * dim);
    for r in 0..rows {
        let row = t.row_mut(r);
        for x in row[..dim].iter_mut() {
            *x = centers.sample(rng);
        }
        for x in row[dim..].iter_mut() {
            *x = offsets.sample(rng);
        }
    }
    t
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor2 {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor2::from_vec(fan_in, fan_out, data).expect("shape")
}

impl ParameterStore {
    /// Fresh parameters: raw centers ~ U(0, 10), raw offsets ~ N(3, 1),
    /// weight matrices Glorot-uniform, biases zero.
    pub fn init(kg: &KnowledgeGraph, dim: usize, layers: usize, seed: u64) -> Result<Self> {
        Self::init_sized(
            kg.num_entities(),
            kg.num_type_ids(),
            kg.num_relations(),
            dim,
            layers,
            seed,
        )
    }

    pub fn init_sized(
        num_entities: usize,
        num_type_ids: usize,
        num_relations: usize,
        dim: usize,
        layers: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = 2 * dim;
        let mut params = Params::new();
        params.add("entity", entity_like_table(&mut rng, num_entities, dim));
        params.add(
            "type",
            entity_like_table(&mut rng, num_type_ids.max(1), dim),
        );
        for l in 0..layers {
            params.add(format!("layer{l}.self"), glorot(&mut rng, w, w));
            for r in 0..num_relations {
                params.add(format!("layer{l}.rel{r}.fwd"), glorot(&mut rng, w, w));
                params.add(format!("layer{l}.rel{r}.inv"), glorot(&mut rng, w, w));
            }
        }
        params.add("mlp.w1", glorot(&mut rng, w, w));
        params.add("mlp.b1", Tensor2::zeros(1, w));
        params.add("mlp.w2", glorot(&mut rng, w, w));
        params.add("mlp.b2", Tensor2::zeros(1, w));
        Self::from_params(params, dim, layers, num_relations)
    }

    /// Rebinds a named parameter collection (e.g. from a checkpoint).
    pub fn from_params(
        params: Params,
        dim: usize,
        layers: usize,
        num_relations: usize,
    ) -> Result<Self> {
        let w = 2 * dim;
        let find = |name: &str, shape: Option<(usize, usize)>| -> Result<ParamId> {
            let id = params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            let actual = params.get(id).shape();
            match shape {
                Some(s) if s != actual => Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {actual:?}, expected {s:?}"
                ))),
                _ if actual.1 != w && name != "mlp.b1" && name != "mlp.b2" => {
                    Err(Error::Checkpoint(format!(
                        "tensor `{name}` has width {}, expected {w}",
                        actual.1
                    )))
                }
                _ => Ok(id),
            }
        };
        let entity = find("entity", None)?;
        let types = find("type", None)?;
        let mut self_w = Vec::with_capacity(layers);
        let mut rel_w = Vec::with_capacity(layers);
        for l in 0..layers {
            self_w.push(find(&format!("layer{l}.self"), Some((w, w)))?);
            let mut per = Vec::with_capacity(num_relations);
            for r in 0..num_relations {
                per.push([
                    find(&format!("layer{l}.rel{r}.fwd"), Some((w, w)))?,
                    find(&format!("layer{l}.rel{r}.inv"), Some((w, w)))?,
                ]);
            }
            rel_w.push(per);
        }
        let mlp = MlpIds {
            w1: find("mlp.w1", Some((w, w)))?,
            b1: find("mlp.b1", Some((1, w)))?,
            w2: find("mlp.w2", Some((w, w)))?,
            b2: find("mlp.b2", Some((1, w)))?,
        };
        let expected = 2 + layers * (1 + 2 * num_relations) + 4;
        if params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{} tensors, expected {expected}",
                params.len()
            )));
        }
        Ok(ParameterStore {
            dim,
            layers,
            num_relations,
            params,
            entity,
            types,
            self_w,
            rel_w,
            mlp,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn num_entities(&self) -> usize {
        self.params.get(self.entity).rows()
    }

    pub fn num_type_ids(&self) -> usize {
        self.params.get(self.types).rows()
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn entity_table(&self) -> ParamId {
        self.entity
    }

    pub fn type_table(&self) -> ParamId {
        self.types
    }

    pub fn entity_box(&self, e: EntityId) -> Result<BoxEmbedding> {
        let table = self.params.get(self.entity);
        if e.index() >= table.rows() {
            return Err(Error::Lookup {
                kind: "entity id",
                what: e.to_string(),
            });
        }
        BoxEmbedding::from_raw(table.row(e.index()))
    }

    pub fn entity_boxes(&self) -> Vec<BoxEmbedding> {
        let table = self.params.get(self.entity);
        (0..table.rows())
            .map(|r| BoxEmbedding::from_raw(table.row(r)).expect("even width"))
            .collect()
    }

    /// Checks that a query only references ids this store has rows for.
    pub fn check_query(&self, q: &QueryGraph) -> Result<()> {
        for n in &q.nodes {
            if let Some(b) = n.binding {
                if b.index() >= self.num_entities() {
                    return Err(Error::Lookup {
                        kind: "entity id",
                        what: b.to_string(),
                    });
                }
            } else if n.type_hint.index() >= self.num_type_ids() {
                return Err(Error::Lookup {
                    kind: "type id",
                    what: n.type_hint.to_string(),
                });
            }
        }
        for e in &q.edges {
            if e.relation.index() >= self.num_relations {
                return Err(Error::Lookup {
                    kind: "relation id",
                    what: e.relation.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Initial node states: anchors copy their entity row, free nodes copy the
/// row of their type hint (row 0 is the untyped fallback).
pub fn node_features(tape: &mut Tape, store: &ParameterStore, q: &QueryGraph) -> Result<Var> {
    let rows: Vec<Var> = q
        .nodes
        .iter()
        .map(|n| match n.binding {
            Some(e) => tape.gather(store.entity, &[e.index()]),
            None => tape.gather(store.types, &[n.type_hint.index()]),
        })
        .collect::<Result<_>>()?;
    tape.concat_rows(&rows)
}

/// One R-GCN step over the query graph with inverse edges:
/// `h_i ← W_0 h_i + Σ_(r,dir) Σ_(j→i) W_(r,dir) h_j / deg_(r,dir)(i)`,
/// followed by ReLU unless `last`.
pub fn message_pass(
    tape: &mut Tape,
    store: &ParameterStore,
    q: &QueryGraph,
    states: Var,
    layer: usize,
    last: bool,
) -> Result<Var> {
    if layer >= store.layers {
        return Err(Error::Config(format!(
            "layer {layer} requested but the store has {}",
            store.layers
        )));
    }
    let n = q.nodes.len();
    let w0 = tape.param(store.self_w[layer]);
    let mut acc = tape.matmul(states, w0)?;

    // (relation, direction) -> messages (from, to)
    let mut groups: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
    for e in &q.edges {
        groups
            .entry((e.relation.index(), 0))
            .or_default()
            .push((e.src, e.dst));
        groups
            .entry((e.relation.index(), 1))
            .or_default()
            .push((e.dst, e.src));
    }
    for ((rel, dir), messages) in groups {
        let mut indeg = vec![0usize; n];
        for &(_, to) in &messages {
            indeg[to] += 1;
        }
        let mut adj = Tensor2::zeros(n, n);
        for &(from, to) in &messages {
            let cur = adj.get(to, from);
            adj.set(to, from, cur + 1.0 / indeg[to] as f64);
        }
        let a = tape.input(adj);
        let mixed = tape.matmul(a, states)?;
        let w = tape.param(store.rel_w[layer][rel][dir]);
        let term = tape.matmul(mixed, w)?;
        acc = tape.add(acc, term)?;
    }
    Ok(if last { acc } else { tape.relu(acc) })
}

/// Reduces node states to one `1 x 2d` row.
pub fn aggregate(
    tape: &mut Tape,
    store: &ParameterStore,
    q: &QueryGraph,
    states: Var,
    method: Aggregation,
) -> Result<Var> {
    match method {
        Aggregation::Sum => Ok(tape.sum_rows(states)),
        Aggregation::Max => tape.max_rows(states),
        Aggregation::Tm => tape.row(states, q.target()),
        Aggregation::Mlp => {
            let (w1, b1) = (tape.param(store.mlp.w1), tape.param(store.mlp.b1));
            let hidden = tape.affine(states, w1, b1)?;
            let hidden = tape.relu(hidden);
            let (w2, b2) = (tape.param(store.mlp.w2), tape.param(store.mlp.b2));
            let out = tape.affine(hidden, w2, b2)?;
            Ok(tape.sum_rows(out))
        }
    }
}

/// Tape handles of an encoded query.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub raw: Var,
    pub center: Var,
    pub offset: Var,
    pub states: Var,
}

/// Records the full encoder on `tape`.
pub fn encode_on_tape(
    tape: &mut Tape,
    store: &ParameterStore,
    q: &QueryGraph,
    cfg: &EncoderConfig,
) -> Result<EncodedVars> {
    store.check_query(q)?;
    let steps = cfg.steps(q)?;
    if steps > store.layers {
        return Err(Error::Config(format!(
            "{steps} message-passing steps requested but the store has {} layers",
            store.layers
        )));
    }
    let mut states = node_features(tape, store, q)?;
    for l in 0..steps {
        states = message_pass(tape, store, q, states, l, l + 1 == steps)?;
    }
    let raw = aggregate(tape, store, q, states, cfg.aggregation)?;
    let d = store.dim;
    let center = tape.cols(raw, 0, d)?;
    let raw_offset = tape.cols(raw, d, 2 * d)?;
    let offset = tape.clamp_min0(raw_offset);
    Ok(EncodedVars {
        raw,
        center,
        offset,
        states,
    })
}

/// Entity boxes for `rows` as `(center, clamped offset)` tape handles.
pub fn entity_boxes_on_tape(
    tape: &mut Tape,
    store: &ParameterStore,
    rows: &[usize],
) -> Result<(Var, Var)> {
    let raw = tape.gather(store.entity, rows)?;
    let d = store.dim;
    let center = tape.cols(raw, 0, d)?;
    let raw_offset = tape.cols(raw, d, 2 * d)?;
    Ok((center, tape.clamp_min0(raw_offset)))
}

/// The query embedding plus the node states it was read from.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEncoding {
    pub query_box: BoxEmbedding,
    pub raw: Vec<f64>,
    pub node_states: Tensor2,
}

pub fn encode(
    store: &ParameterStore,
    q: &QueryGraph,
    cfg: &EncoderConfig,
) -> Result<QueryEncoding> {
    let mut tape = Tape::new(&store.params);
    let vars = encode_on_tape(&mut tape, store, q, cfg)?;
    let raw = tape.value(vars.raw).data().to_vec();
    Ok(QueryEncoding {
        query_box: BoxEmbedding::from_raw(&raw)?,
        raw,
        node_states: tape.value(vars.states).clone(),
    })
}
