//! Classification and pairwise-ranking evaluation, per query template.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::QueryInstance;
use crate::encoder::{encode, Aggregation, EncoderConfig, ParameterStore};
use crate::error::{Error, Result};
use crate::geometry::BoxEmbedding;
use crate::graph::EntityId;
use crate::query::{QueryGraph, Template};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Zero when nothing was predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Zero when there is nothing to find.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

pub fn confusion(
    predicted: &BTreeSet<EntityId>,
    truth: &BTreeSet<EntityId>,
    universe: usize,
) -> Result<ConfusionMatrix> {
    if let Some(e) = predicted
        .iter()
        .chain(truth)
        .find(|e| e.index() >= universe)
    {
        return Err(Error::Lookup {
            kind: "entity",
            what: format!("{} outside a universe of {universe}", e.index()),
        });
    }
    let tp = predicted.intersection(truth).count() as u64;
    let fp = predicted.len() as u64 - tp;
    let fn_ = truth.len() as u64 - tp;
    Ok(ConfusionMatrix {
        tp,
        fp,
        fn_,
        tn: universe as u64 - tp - fp - fn_,
    })
}

/// Entities whose box overlaps the query box.
pub fn classify_box(query: &BoxEmbedding, entities: &[BoxEmbedding]) -> Result<BTreeSet<EntityId>> {
    let mut out = BTreeSet::new();
    for (i, e) in entities.iter().enumerate() {
        if query.intersects(e)? {
            out.insert(EntityId::from_index(i));
        }
    }
    Ok(out)
}

pub fn classify(
    store: &ParameterStore,
    q: &QueryGraph,
    cfg: &EncoderConfig,
) -> Result<BTreeSet<EntityId>> {
    let enc = encode(store, q, cfg)?;
    classify_box(&enc.query_box, &store.entity_boxes())
}

/// Concordant (answer, non-answer) pairs; ties add one half.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairCounts {
    pub wins: f64,
    pub pairs: u64,
}

impl PairCounts {
    pub fn count(pos: &[f64], neg: &[f64]) -> Self {
        let mut wins = 0.0;
        for p in pos {
            for n in neg {
                if p < n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        PairCounts {
            wins,
            pairs: (pos.len() * neg.len()) as u64,
        }
    }

    pub fn add(&mut self, other: &PairCounts) {
        self.wins += other.wins;
        self.pairs += other.pairs;
    }

    /// Percentage, or `None` without pairs.
    pub fn percent(&self) -> Option<f64> {
        (self.pairs > 0).then(|| 100.0 * self.wins / self.pairs as f64)
    }
}

/// Percentage of pairs where the answer is strictly closer; ties count half.
pub fn pairwise_accuracy(pos: &[f64], neg: &[f64]) -> Result<f64> {
    PairCounts::count(pos, neg)
        .percent()
        .ok_or_else(|| Error::Empty("pairwise accuracy needs positives and negatives".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Classification,
    Ranking,
    Both,
}

impl EvalMode {
    fn classification(self) -> bool {
        matches!(self, EvalMode::Classification | EvalMode::Both)
    }

    fn ranking(self) -> bool {
        matches!(self, EvalMode::Ranking | EvalMode::Both)
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(EvalMode::Classification),
            "ranking" => Ok(EvalMode::Ranking),
            "both" => Ok(EvalMode::Both),
            _ => Err(Error::Config(format!(
                "unknown eval mode {s:?} (expected classification, ranking or both)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub alpha: f64,
    /// Rank answers against every non-answer instead of stored negatives.
    pub full_universe: bool,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mode: EvalMode::Both,
            alpha: crate::geometry::DEFAULT_ALPHA,
            full_universe: false,
            threads: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateRow {
    pub template: Template,
    pub queries: usize,
    pub confusion: Option<ConfusionMatrix>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub pairwise_accuracy: Option<f64>,
    pub pairs: u64,
    /// Mean number of non-answers each query was ranked against.
    pub mean_negative_pool: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aggregation: Aggregation,
    pub dataset_hash: String,
    pub mode: EvalMode,
    pub alpha: f64,
    pub full_universe: bool,
    pub rows: Vec<TemplateRow>,
}

impl EvalReport {
    pub fn row(&self, template: Template) -> &TemplateRow {
        &self.rows[template.index()]
    }

    /// Pairwise accuracy pooled over the given templates.
    pub fn pooled_pairwise(&self, templates: &[Template]) -> Option<f64> {
        let mut total = PairCounts::default();
        for &t in templates {
            let r = self.row(t);
            if let Some(acc) = r.pairwise_accuracy {
                total.add(&PairCounts {
                    wins: acc / 100.0 * r.pairs as f64,
                    pairs: r.pairs,
                });
            }
        }
        total.percent()
    }
}

struct InstanceResult {
    confusion: Option<ConfusionMatrix>,
    pairs: Option<PairCounts>,
    pool: usize,
}

fn evaluate_one(
    store: &ParameterStore,
    entities: &[BoxEmbedding],
    inst: &QueryInstance,
    cfg: &EncoderConfig,
    opts: &EvalOptions,
) -> Result<InstanceResult> {
    let qbox = encode(store, &inst.query, cfg)?.query_box;
    let truth: BTreeSet<EntityId> = inst.targets.iter().copied().collect();
    let confusion = if opts.mode.classification() {
        let predicted = classify_box(&qbox, entities)?;
        Some(confusion(&predicted, &truth, entities.len())?)
    } else {
        None
    };
    let (pairs, pool) = if opts.mode.ranking() {
        let dist = |e: &EntityId| qbox.distance(&entities[e.index()], opts.alpha);
        let pos = inst.targets.iter().map(dist).collect::<Result<Vec<_>>>()?;
        let negatives: Vec<EntityId> = if opts.full_universe {
            (0..entities.len())
                .map(EntityId::from_index)
                .filter(|e| !truth.contains(e))
                .collect()
        } else {
            inst.all_negatives()
        };
        let neg = negatives.iter().map(dist).collect::<Result<Vec<_>>>()?;
        (Some(PairCounts::count(&pos, &neg)), negatives.len())
    } else {
        (None, 0)
    };
    Ok(InstanceResult {
        confusion,
        pairs,
        pool,
    })
}

/// Per-template report over `instances`. Work is split across threads but
/// accumulated in instance order.
pub fn evaluate(
    store: &ParameterStore,
    instances: &[QueryInstance],
    cfg: &EncoderConfig,
    opts: &EvalOptions,
    dataset_hash: &str,
) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::Empty("cannot evaluate an empty split".into()));
    }
    for inst in instances {
        if inst.targets.is_empty() {
            return Err(Error::Empty(format!(
                "{} instance without targets",
                inst.template()
            )));
        }
        for e in inst
            .targets
            .iter()
            .chain(&inst.negatives)
            .chain(&inst.hard_negatives)
        {
            if e.index() >= store.num_entities() {
                return Err(Error::Lookup {
                    kind: "entity",
                    what: format!("{} not in the parameter store", e.index()),
                });
            }
        }
    }
    let entities = store.entity_boxes();
    let threads = opts.threads.max(1);
    let chunk = instances.len().div_ceil(threads);
    let results: Vec<Result<Vec<InstanceResult>>> = std::thread::scope(|s| {
        let handles: Vec<_> = instances
            .chunks(chunk)
            .map(|part| {
                let entities = &entities;
                s.spawn(move || {
                    part.iter()
                        .map(|inst| evaluate_one(store, entities, inst, cfg, opts))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });

    let mut queries = [0usize; 7];
    let mut conf = [ConfusionMatrix::default(); 7];
    let mut pairs = [PairCounts::default(); 7];
    let mut pools = [0usize; 7];
    let mut it = instances.iter();
    for part in results {
        for r in part? {
            let t = it
                .next()
                .expect("one result per instance")
                .template()
                .index();
            queries[t] += 1;
            if let Some(c) = r.confusion {
                conf[t].add(&c);
            }
            if let Some(p) = r.pairs {
                pairs[t].add(&p);
            }
            pools[t] += r.pool;
        }
    }

    let rows = Template::ALL
        .iter()
        .map(|&template| {
            let t = template.index();
            let seen = queries[t] > 0;
            let c = (seen && opts.mode.classification()).then_some(conf[t]);
            let ranked = seen && opts.mode.ranking();
            TemplateRow {
                template,
                queries: queries[t],
                confusion: c,
                precision: c.map(|c| c.precision()),
                recall: c.map(|c| c.recall()),
                f1: c.map(|c| c.f1()),
                pairwise_accuracy: if ranked { pairs[t].percent() } else { None },
                pairs: pairs[t].pairs,
                mean_negative_pool: ranked.then(|| pools[t] as f64 / queries[t] as f64),
            }
        })
        .collect();
    Ok(EvalReport {
        aggregation: cfg.aggregation,
        dataset_hash: dataset_hash.to_owned(),
        mode: opts.mode,
        alpha: opts.alpha,
        full_universe: opts.full_universe,
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::Config(format!(
                "unknown report format {s:?} (expected json or csv)"
            ))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        })
    }
}

/// One `template,metric,value` line per reported number.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("template,metric,value\n");
    for r in &report.rows {
        let mut line = |metric: &str, value: String| {
            out.push_str(&format!("{},{metric},{value}\n", r.template));
        };
        line("queries", r.queries.to_string());
        if let Some(c) = r.confusion {
            line("tp", c.tp.to_string());
            line("fp", c.fp.to_string());
            line("fn", c.fn_.to_string());
            line("tn", c.tn.to_string());
        }
        for (name, v) in [
            ("precision", r.precision),
            ("recall", r.recall),
            ("f1", r.f1),
            ("pairwise_accuracy", r.pairwise_accuracy),
            ("mean_negative_pool", r.mean_negative_pool),
        ] {
            if let Some(v) = v {
                line(name, v.to_string());
            }
        }
    }
    out
}

pub fn write_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report)? + "\n",
        ReportFormat::Csv => report_csv(report),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
