//! Query instances and their JSON-lines serialization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph, Triple};
use crate::query::{QueryGraph, Template};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A query with its answers, sampled negatives and split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryInstance {
    pub query: QueryGraph,
    /// Sorted answer set on the full graph.
    pub targets: Vec<EntityId>,
    pub negatives: Vec<EntityId>,
    pub hard_negatives: Vec<EntityId>,
    pub split: Split,
    /// Graph edges drawn while sampling the query.
    pub edges: Vec<Triple>,
}

impl QueryInstance {
    pub fn template(&self) -> Template {
        self.query.template
    }

    /// Uniform and hard negatives together.
    pub fn all_negatives(&self) -> Vec<EntityId> {
        self.negatives
            .iter()
            .chain(&self.hard_negatives)
            .copied()
            .collect()
    }

    pub fn check_invariants(&self, max_targets: usize) -> Result<()> {
        let targets: BTreeSet<_> = self.targets.iter().collect();
        if targets.is_empty() || targets.len() > max_targets {
            return Err(Error::Config(format!(
                "instance has {} targets (allowed 1..={max_targets})",
                targets.len()
            )));
        }
        if self
            .negatives
            .iter()
            .chain(&self.hard_negatives)
            .any(|n| targets.contains(n))
        {
            return Err(Error::Config("negative overlaps the target set".into()));
        }
        Ok(())
    }

    pub fn to_record(&self, kg: &KnowledgeGraph) -> QueryRecord {
        let labels =
            |ids: &[EntityId]| ids.iter().map(|&e| kg.entity_label(e).to_owned()).collect();
        QueryRecord {
            template: self.query.template,
            anchors: labels(&self.query.anchors()),
            relations: self
                .query
                .relations()
                .iter()
                .map(|&r| kg.relation_label(r).to_owned())
                .collect(),
            targets: labels(&self.targets),
            negatives: labels(&self.negatives),
            hard_negatives: labels(&self.hard_negatives),
            split: self.split,
            edges: self
                .edges
                .iter()
                .map(|t| {
                    [
                        kg.entity_label(t.head).to_owned(),
                        kg.relation_label(t.relation).to_owned(),
                        kg.entity_label(t.tail).to_owned(),
                    ]
                })
                .collect(),
        }
    }

    pub fn from_record(kg: &KnowledgeGraph, rec: &QueryRecord) -> Result<Self> {
        let ids = |labels: &[String]| -> Result<Vec<EntityId>> {
            labels.iter().map(|l| kg.entity_id(l)).collect()
        };
        let relations = rec
            .relations
            .iter()
            .map(|l| kg.relation_id(l))
            .collect::<Result<Vec<_>>>()?;
        let query = QueryGraph::instantiate(kg, rec.template, &ids(&rec.anchors)?, &relations)?;
        let edges = rec
            .edges
            .iter()
            .map(|[h, r, t]| {
                Ok(Triple::new(
                    kg.entity_id(h)?,
                    kg.relation_id(r)?,
                    kg.entity_id(t)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QueryInstance {
            query,
            targets: ids(&rec.targets)?,
            negatives: ids(&rec.negatives)?,
            hard_negatives: ids(&rec.hard_negatives)?,
            split: rec.split,
            edges,
        })
    }
}

/// One line of a dataset file; entities and relations by label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub template: Template,
    pub anchors: Vec<String>,
    pub relations: Vec<String>,
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default)]
    pub negatives: Vec<String>,
    #[serde(default)]
    pub hard_negatives: Vec<String>,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<[String; 3]>,
}

fn default_split() -> Split {
    Split::Test
}

/// Per-template sampling summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateSummary {
    pub counts: BTreeMap<Split, usize>,
    pub mean_targets: BTreeMap<Split, f64>,
    pub rejections: BTreeMap<String, usize>,
    pub attempts: usize,
    pub negative_shortfalls: usize,
}

/// Everything needed to reproduce and describe a sampled dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub graph_hash: String,
    pub seed: u64,
    pub sampler: crate::sampler::SamplerConfig,
    pub split_fraction: f64,
    pub split_seed: u64,
    pub removed_edges: usize,
    pub hard_negative_rule: String,
    pub type_hint_rule: String,
    pub templates: BTreeMap<Template, TemplateSummary>,
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<QueryInstance>,
    pub val: Vec<QueryInstance>,
    pub test: Vec<QueryInstance>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[QueryInstance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn write(&self, dir: &Path, kg: &KnowledgeGraph) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for split in Split::ALL {
            write_jsonl(&dir.join(format!("{split}.jsonl")), kg, self.split(split))?;
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path, kg: &KnowledgeGraph) -> Result<Dataset> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.graph_hash != kg.content_hash() {
            return Err(Error::Config(format!(
                "dataset in {} was sampled from a different graph",
                dir.display()
            )));
        }
        Ok(Dataset {
            train: read_jsonl(&dir.join("train.jsonl"), kg)?,
            val: read_jsonl(&dir.join("val.jsonl"), kg)?,
            test: read_jsonl(&dir.join("test.jsonl"), kg)?,
            manifest,
        })
    }
}

pub fn write_jsonl(path: &Path, kg: &KnowledgeGraph, instances: &[QueryInstance]) -> Result<()> {
    let mut out = Vec::new();
    for inst in instances {
        serde_json::to_writer(&mut out, &inst.to_record(kg))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path, kg: &KnowledgeGraph) -> Result<Vec<QueryInstance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let rec: QueryRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            QueryInstance::from_record(kg, &rec).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixture_kgt;

    #[test]
    fn record_round_trip() {
        let kg = fixture_kgt();
        let e = |l| kg.entity_id(l).unwrap();
        let w = kg.relation_id("works_on").unwrap();
        let inst = QueryInstance {
            query: QueryGraph::instantiate(
                &kg,
                Template::TwoInter,
                &[e("Alice"), e("Bob")],
                &[w, w],
            )
            .unwrap(),
            targets: vec![e("T1")],
            negatives: vec![e("P1")],
            hard_negatives: vec![e("T2")],
            split: Split::Val,
            edges: vec![
                Triple::new(e("Alice"), w, e("T1")),
                Triple::new(e("Bob"), w, e("T1")),
            ],
        };
        let rec = inst.to_record(&kg);
        let line = serde_json::to_string(&rec).unwrap();
        assert!(line.starts_with(r#"{"template":"2-inter","anchors":["Alice","Bob"]"#));
        let back: QueryRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(QueryInstance::from_record(&kg, &back).unwrap(), inst);
        inst.check_invariants(100).unwrap();
    }

    #[test]
    fn minimal_query_record() {
        let kg = fixture_kgt();
        let rec: QueryRecord = serde_json::from_str(
            r#"{"template":"1-chain","anchors":["Alice"],"relations":["works_on"]}"#,
        )
        .unwrap();
        let inst = QueryInstance::from_record(&kg, &rec).unwrap();
        assert_eq!(inst.query.template, Template::OneChain);
        assert!(inst.targets.is_empty());
    }

    #[test]
    fn overlapping_negative_is_rejected() {
        let kg = fixture_kgt();
        let e = |l| kg.entity_id(l).unwrap();
        let w = kg.relation_id("works_on").unwrap();
        let inst = QueryInstance {
            query: QueryGraph::instantiate(&kg, Template::OneChain, &[e("Alice")], &[w]).unwrap(),
            targets: vec![e("T1")],
            negatives: vec![e("T1")],
            hard_negatives: vec![],
            split: Split::Train,
            edges: vec![],
        };
        assert!(inst.check_invariants(100).is_err());
    }
}
