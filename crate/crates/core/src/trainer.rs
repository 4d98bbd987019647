//! Margin loss over box distances, the Adam training loop and checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, QueryInstance};
use crate::encoder::{encode_on_tape, entity_boxes_on_tape, EncoderConfig, ParameterStore};
use crate::error::{Error, Result};
use crate::eval::PairCounts;
use crate::graph::KnowledgeGraph;
use crate::ndmath::{log_sigmoid, AdamConfig, AdamState, Gradients, Params, Tape, Tensor2, Var};
use crate::query::Template;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub lr: f64,
    pub max_steps: u64,
    pub eval_every: u64,
    pub patience: usize,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        TrainConfig {
            gamma: 1.0,
            alpha: crate::geometry::DEFAULT_ALPHA,
            lr: 0.01,
            max_steps: 10_000,
            eval_every: 500,
            patience: 5,
            encoder,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.gamma.is_nan() || self.gamma <= 0.0 {
            v.push("gamma must be positive".to_owned());
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            v.push("alpha must be non-negative".to_owned());
        }
        if self.lr.is_nan() || self.lr < 0.0 {
            v.push("lr must be non-negative".to_owned());
        }
        if self.patience < 1 {
            v.push("patience must be at least 1".to_owned());
        }
        if self.eval_every < 1 {
            v.push("eval_every must be at least 1".to_owned());
        }
        v
    }
}

/// `mean_pos −log σ(γ − d) + mean_neg −log σ(d − γ)` on plain numbers.
pub fn margin_loss(pos: &[f64], neg: &[f64], gamma: f64) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::Empty("loss needs at least one positive".into()));
    }
    let p = pos.iter().map(|d| -log_sigmoid(gamma - d)).sum::<f64>() / pos.len() as f64;
    let n = if neg.is_empty() {
        0.0
    } else {
        neg.iter().map(|d| -log_sigmoid(d - gamma)).sum::<f64>() / neg.len() as f64
    };
    Ok(p + n)
}

/// The same loss recorded on a tape from kx1 distance columns.
pub fn margin_loss_on_tape(tape: &mut Tape, pos: Var, neg: Option<Var>, gamma: f64) -> Result<Var> {
    let k = tape.value(pos).rows();
    if k == 0 {
        return Err(Error::Empty("loss needs at least one positive".into()));
    }
    let x = tape.scale(pos, -1.0);
    let x = tape.shift(x, gamma);
    let x = tape.log_sigmoid(x);
    let x = tape.sum_all(x);
    let mut loss = tape.scale(x, -1.0 / k as f64);
    if let Some(neg) = neg {
        let m = tape.value(neg).rows();
        if m > 0 {
            let y = tape.shift(neg, -gamma);
            let y = tape.log_sigmoid(y);
            let y = tape.sum_all(y);
            let y = tape.scale(y, -1.0 / m as f64);
            loss = tape.add(loss, y)?;
        }
    }
    Ok(loss)
}

/// Records encode → distances → loss for one instance.
pub fn instance_loss(
    tape: &mut Tape,
    store: &ParameterStore,
    inst: &QueryInstance,
    cfg: &TrainConfig,
) -> Result<Var> {
    let q = encode_on_tape(tape, store, &inst.query, &cfg.encoder)?;
    let rows = |ids: &[crate::graph::EntityId]| ids.iter().map(|e| e.index()).collect::<Vec<_>>();
    let (pc, po) = entity_boxes_on_tape(tape, store, &rows(&inst.targets))?;
    let pos = tape.box_distance(q.center, q.offset, pc, po, cfg.alpha)?;
    let negatives = inst.all_negatives();
    let neg = if negatives.is_empty() {
        None
    } else {
        let (nc, no) = entity_boxes_on_tape(tape, store, &rows(&negatives))?;
        Some(tape.box_distance(q.center, q.offset, nc, no, cfg.alpha)?)
    };
    margin_loss_on_tape(tape, pos, neg, cfg.gamma)
}

/// Pairwise accuracy of `store` over stored negatives, pooled and per template.
pub fn validation_accuracy(
    store: &ParameterStore,
    instances: &[QueryInstance],
    cfg: &TrainConfig,
) -> Result<(Option<f64>, [Option<f64>; 7])> {
    let entities = store.entity_boxes();
    let mut per = [PairCounts::default(); 7];
    for inst in instances {
        let qbox = crate::encoder::encode(store, &inst.query, &cfg.encoder)?.query_box;
        let dist = |e: &crate::graph::EntityId| qbox.distance(&entities[e.index()], cfg.alpha);
        let pos = inst.targets.iter().map(dist).collect::<Result<Vec<_>>>()?;
        let neg = inst
            .all_negatives()
            .iter()
            .map(dist)
            .collect::<Result<Vec<_>>>()?;
        per[inst.template().index()].add(&PairCounts::count(&pos, &neg));
    }
    let mut total = PairCounts::default();
    for p in &per {
        total.add(p);
    }
    Ok((total.percent(), per.map(|p| p.percent())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    /// Mean training loss since the previous row.
    pub train_loss: f64,
    pub val_pairwise: Option<f64>,
    pub val_per_template: [Option<f64>; 7],
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,train_loss,val_pairwise");
    for t in Template::ALL {
        out.push_str(&format!(",val_{t}"));
    }
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{}",
            r.step,
            r.train_loss,
            opt(r.val_pairwise)
        ));
        for v in r.val_per_template {
            out.push_str(&format!(",{}", opt(v)));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    EarlyStopping,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub store: ParameterStore,
    pub adam: AdamState,
    pub step: u64,
    pub best_score: Option<f64>,
    pub best_step: u64,
    pub stale_evals: usize,
}

impl TrainState {
    pub fn new(store: ParameterStore, lr: f64) -> Self {
        let adam = AdamState::new(
            store.params(),
            AdamConfig {
                lr,
                ..AdamConfig::default()
            },
        );
        TrainState {
            store,
            adam,
            step: 0,
            best_score: None,
            best_step: 0,
            stale_evals: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation evaluation (final ones without validation).
    pub best: ParameterStore,
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub stop: StopReason,
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn check_instances(
    kg: &KnowledgeGraph,
    store: &ParameterStore,
    data: &[QueryInstance],
) -> Result<()> {
    for inst in data {
        store.check_query(&inst.query)?;
        for e in inst
            .targets
            .iter()
            .chain(&inst.negatives)
            .chain(&inst.hard_negatives)
        {
            kg.check_entity(*e)?;
            if e.index() >= store.num_entities() {
                return Err(Error::Lookup {
                    kind: "entity",
                    what: format!("{} not in the parameter store", e.index()),
                });
            }
        }
        if inst.targets.is_empty() {
            return Err(Error::Empty(format!(
                "{} training instance without targets",
                inst.template()
            )));
        }
    }
    Ok(())
}

/// One Adam step on one instance; returns the loss before the update.
pub fn train_step(
    state: &mut TrainState,
    grads: &mut Gradients,
    inst: &QueryInstance,
    cfg: &TrainConfig,
) -> Result<f64> {
    grads.zero();
    let loss = {
        let mut tape = Tape::new(state.store.params());
        let loss = instance_loss(&mut tape, &state.store, inst, cfg)?;
        tape.backward(loss, grads)?;
        tape.value(loss).item()
    };
    state.adam.step(state.store.params_mut(), grads)?;
    state.step += 1;
    Ok(loss)
}

/// Runs the loop from `state` until `cfg.max_steps` or early stopping.
/// Instances are visited one per step in a per-epoch seeded order, so a
/// resumed run sees the same sequence as an uninterrupted one.
pub fn train(
    kg: &KnowledgeGraph,
    data: &Dataset,
    mut state: TrainState,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    if data.train.is_empty() {
        return Err(Error::Empty("no training instances".into()));
    }
    check_instances(kg, &state.store, &data.train)?;
    check_instances(kg, &state.store, &data.val)?;
    state.adam.config.lr = cfg.lr;

    let n = data.train.len() as u64;
    let mut grads = Gradients::zeros_like(state.store.params());
    let mut best = state.store.clone();
    let mut log = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_count = 0u64;
    let mut order = epoch_order(cfg.seed, state.step / n, n as usize);
    let mut stop = StopReason::MaxSteps;
    while state.step < cfg.max_steps {
        let (epoch, pos) = (state.step / n, state.step % n);
        if pos == 0 {
            order = epoch_order(cfg.seed, epoch, n as usize);
        }
        let inst = &data.train[order[pos as usize]];
        loss_sum += train_step(&mut state, &mut grads, inst, cfg)?;
        loss_count += 1;
        if state.step.is_multiple_of(cfg.eval_every) || state.step == cfg.max_steps {
            let (score, per) = if data.val.is_empty() {
                (None, [None; 7])
            } else {
                validation_accuracy(&state.store, &data.val, cfg)?
            };
            log.push(LogRow {
                step: state.step,
                train_loss: loss_sum / loss_count as f64,
                val_pairwise: score,
                val_per_template: per,
            });
            loss_sum = 0.0;
            loss_count = 0;
            match (score, state.best_score) {
                (Some(s), Some(b)) if s <= b => {
                    state.stale_evals += 1;
                    if state.stale_evals >= cfg.patience {
                        stop = StopReason::EarlyStopping;
                        break;
                    }
                }
                (Some(s), _) => {
                    state.best_score = Some(s);
                    state.best_step = state.step;
                    state.stale_evals = 0;
                    best = state.store.clone();
                }
                (None, _) => {}
            }
        }
    }
    if state.best_score.is_none() {
        best = state.store.clone();
    }
    Ok(TrainOutcome {
        best,
        state,
        log,
        stop,
    })
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    dim: usize,
    layers: usize,
    num_relations: usize,
    step: u64,
    best_score: Option<f64>,
    best_step: u64,
    stale_evals: usize,
    tensors: Vec<(String, Tensor2)>,
    adam: AdamState,
}

pub fn checkpoint_json(state: &TrainState) -> Result<String> {
    let s = &state.store;
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        dim: s.dim(),
        layers: s.layers(),
        num_relations: s.num_relations(),
        step: state.step,
        best_score: state.best_score,
        best_step: state.best_step,
        stale_evals: state.stale_evals,
        tensors: s
            .params()
            .iter()
            .map(|(n, t)| (n.to_owned(), t.clone()))
            .collect(),
        adam: state.adam.clone(),
    };
    Ok(serde_json::to_string(&file)? + "\n")
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_json(state)?).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, checking it against the expected model size.
pub fn load_checkpoint(path: &Path, dim: usize, layers: usize) -> Result<TrainState> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: CheckpointFile = serde_json::from_str(&text)?;
    if f.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
            f.format_version
        )));
    }
    if f.dim != dim || f.layers != layers {
        return Err(Error::Checkpoint(format!(
            "checkpoint has dim {} and {} layers, expected dim {dim} and {layers} layers",
            f.dim, f.layers
        )));
    }
    let mut params = Params::new();
    for (name, t) in f.tensors {
        params.add(name, t);
    }
    if f.adam.m.len() != params.len() || f.adam.v.len() != params.len() {
        return Err(Error::Checkpoint(
            "optimizer state does not match the tensors".into(),
        ));
    }
    let store = ParameterStore::from_params(params, f.dim, f.layers, f.num_relations)?;
    Ok(TrainState {
        store,
        adam: f.adam,
        step: f.step,
        best_score: f.best_score,
        best_step: f.best_step,
        stale_evals: f.stale_evals,
    })
}

/// Loads only the parameters, whatever their size.
pub fn load_store(path: &Path) -> Result<ParameterStore> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: CheckpointFile = serde_json::from_str(&text)?;
    let mut params = Params::new();
    for (name, t) in f.tensors {
        params.add(name, t);
    }
    ParameterStore::from_params(params, f.dim, f.layers, f.num_relations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::encoder::Aggregation;
    use crate::graph::fixture_kgt;
    use crate::ndmath::check_param_gradients;
    use crate::query::QueryGraph;
    use crate::sampler::{EdgeSplit, SamplerConfig};

    #[test]
    fn loss_examples() {
        assert!((margin_loss(&[0.0], &[], 1.0).unwrap() - 0.3133).abs() < 1e-4);
        assert!((margin_loss(&[1.0], &[1.0], 1.0).unwrap() - 1.3863).abs() < 1e-4);
        let far = margin_loss(&[0.0], &[1e9], 1.0).unwrap();
        assert!((far + log_sigmoid(1.0)).abs() < 1e-12);
        assert!(margin_loss(&[], &[1.0], 1.0).is_err());
    }

    #[test]
    fn tape_loss_matches_scalar_loss() {
        let p = Params::new();
        let mut tape = Tape::new(&p);
        let pos = tape.input(Tensor2::from_vec(2, 1, vec![0.3, 2.0]).unwrap());
        let neg = tape.input(Tensor2::from_vec(3, 1, vec![0.1, 1.5, 4.0]).unwrap());
        let l = margin_loss_on_tape(&mut tape, pos, Some(neg), 1.0).unwrap();
        let want = margin_loss(&[0.3, 2.0], &[0.1, 1.5, 4.0], 1.0).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn loss_monotone_in_distances() {
        let base = margin_loss(&[0.5, 1.2], &[0.8, 2.0], 1.0).unwrap();
        assert!(margin_loss(&[0.4, 1.2], &[0.8, 2.0], 1.0).unwrap() <= base);
        assert!(margin_loss(&[0.5, 1.2], &[0.7, 2.0], 1.0).unwrap() >= base);
    }

    fn alice_instance(kg: &KnowledgeGraph) -> QueryInstance {
        let e = |l| kg.entity_id(l).unwrap();
        QueryInstance {
            query: QueryGraph::instantiate(
                kg,
                Template::OneChain,
                &[e("Alice")],
                &[kg.relation_id("works_on").unwrap()],
            )
            .unwrap(),
            targets: vec![e("T1")],
            negatives: vec![e("P1"), e("P3"), e("T2")],
            hard_negatives: vec![],
            split: Split::Train,
            edges: vec![],
        }
    }

    fn toy_dataset(kg: &KnowledgeGraph) -> Dataset {
        let cfg = SamplerConfig::default();
        let split = EdgeSplit::new(kg, 0.1, 0).unwrap();
        let mut d = crate::sampler::generate_dataset(kg, &split, &cfg).unwrap();
        d.train = vec![alice_instance(kg)];
        d.val = vec![alice_instance(kg)];
        d
    }

    #[test]
    fn loss_gradients_for_every_aggregator() {
        let kg = fixture_kgt();
        let inst = alice_instance(&kg);
        for agg in Aggregation::ALL {
            let store = ParameterStore::init(&kg, 4, 1, 3).unwrap();
            let cfg = TrainConfig::new(EncoderConfig::new(agg, 1));
            let err = check_param_gradients(
                store.params(),
                |tape| instance_loss(tape, &store, &inst, &cfg),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{agg}: {err}");
        }
    }

    #[test]
    fn toy_loss_decreases() {
        let kg = fixture_kgt();
        let data = toy_dataset(&kg);
        let store = ParameterStore::init(&kg, 8, 3, 1).unwrap();
        let mut cfg = TrainConfig::new(EncoderConfig::new(Aggregation::Sum, 3));
        cfg.max_steps = 200;
        cfg.eval_every = 200;
        let first = {
            let mut tape = Tape::new(store.params());
            let l = instance_loss(&mut tape, &store, &data.train[0], &cfg).unwrap();
            tape.value(l).item()
        };
        let out = train(&kg, &data, TrainState::new(store, cfg.lr), &cfg).unwrap();
        let s = &out.state.store;
        let mut tape = Tape::new(s.params());
        let l = instance_loss(&mut tape, s, &data.train[0], &cfg).unwrap();
        assert!(tape.value(l).item() < first);
        assert_eq!(out.state.step, 200);
    }

    #[test]
    fn constant_metric_stops_at_second_eval() {
        let kg = fixture_kgt();
        let data = toy_dataset(&kg);
        let store = ParameterStore::init(&kg, 4, 1, 1).unwrap();
        let mut cfg = TrainConfig::new(EncoderConfig::new(Aggregation::Sum, 1));
        cfg.lr = 0.0;
        cfg.patience = 1;
        cfg.eval_every = 5;
        cfg.max_steps = 100;
        let out = train(&kg, &data, TrainState::new(store, cfg.lr), &cfg).unwrap();
        assert_eq!(out.stop, StopReason::EarlyStopping);
        assert_eq!(out.log.len(), 2);
        assert_eq!(out.state.step, 10);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let kg = fixture_kgt();
        let data = toy_dataset(&kg);
        let mut cfg = TrainConfig::new(EncoderConfig::new(Aggregation::Max, 2));
        cfg.max_steps = 30;
        cfg.eval_every = 10;
        cfg.patience = 100;
        let run = || {
            let store = ParameterStore::init(&kg, 4, 2, 5).unwrap();
            train(&kg, &data, TrainState::new(store, cfg.lr), &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(log_csv(&a.log), log_csv(&b.log));

        let mut half = cfg.clone();
        half.max_steps = 15;
        let store = ParameterStore::init(&kg, 4, 2, 5).unwrap();
        let first = train(&kg, &data, TrainState::new(store, cfg.lr), &half).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.json");
        save_checkpoint(&first.state, &p).unwrap();
        let resumed = load_checkpoint(&p, 4, 2).unwrap();
        assert_eq!(resumed.step, 15);
        let rest = train(&kg, &data, resumed, &cfg).unwrap();
        assert_eq!(rest.state.step, 30);
        assert_eq!(rest.state.store, a.state.store);
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let kg = fixture_kgt();
        let store = ParameterStore::init(&kg, 4, 2, 9).unwrap();
        let mut state = TrainState::new(store, 0.01);
        let mut grads = Gradients::zeros_like(state.store.params());
        let cfg = TrainConfig::new(EncoderConfig::new(Aggregation::Tm, 2));
        train_step(&mut state, &mut grads, &alice_instance(&kg), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.json"), dir.path().join("b.json"));
        save_checkpoint(&state, &p1).unwrap();
        let loaded = load_checkpoint(&p1, 4, 2).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert!(matches!(
            load_checkpoint(&p1, 8, 2),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn config_violations() {
        let mut cfg = TrainConfig::new(EncoderConfig::new(Aggregation::Sum, 3));
        assert!(cfg.validate().is_empty());
        cfg.gamma = -1.0;
        cfg.patience = 0;
        let v = cfg.validate();
        assert!(v.contains(&"gamma must be positive".to_owned()));
        assert_eq!(v.len(), 2);
    }
}
