//! Plain-text `key = value` run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{Aggregation, EncoderConfig, LayerPolicy, MAX_DIAMETER};
use crate::error::{Error, Result};
use crate::graph::GraphFormat;
use crate::query::Template;
use crate::sampler::{Quota, SamplerConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Fixed,
    Diameter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub graph_path: Option<PathBuf>,
    pub types_path: Option<PathBuf>,
    pub format: String,
    pub out_dir: Option<PathBuf>,
    pub split_fraction: f64,
    pub val_fraction: f64,
    pub max_targets: usize,
    pub negatives_per_query: usize,
    pub hard_negative_fraction: f64,
    pub typed_negatives: bool,
    pub quotas: BTreeMap<Template, Quota>,
    pub dim: usize,
    pub layers: usize,
    /// Defaults to `diameter` for tm and `fixed` otherwise.
    pub layer_policy: Option<PolicyKind>,
    pub aggregation: Aggregation,
    pub gamma: f64,
    pub alpha: f64,
    pub lr: f64,
    pub max_steps: u64,
    pub eval_every: u64,
    pub patience: usize,
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SamplerConfig::default();
        RunConfig {
            graph_path: None,
            types_path: None,
            format: "tsv".to_owned(),
            out_dir: None,
            split_fraction: 0.1,
            val_fraction: s.val_fraction,
            max_targets: s.max_targets,
            negatives_per_query: s.negatives_per_query,
            hard_negative_fraction: s.hard_negative_fraction,
            typed_negatives: s.typed_negatives,
            quotas: s.quotas,
            dim: 32,
            layers: 3,
            layer_policy: None,
            aggregation: Aggregation::Tm,
            gamma: 1.0,
            alpha: crate::geometry::DEFAULT_ALPHA,
            lr: 0.01,
            max_steps: 10_000,
            eval_every: 500,
            patience: 5,
            seed: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_quota(key: &str, value: &str) -> Result<Quota> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "{key}: expected train,val,test counts, got {value:?}"
        )));
    }
    Ok(Quota {
        train: parse(key, parts[0])?,
        val: parse(key, parts[1])?,
        test: parse(key, parts[2])?,
    })
}

impl RunConfig {
    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path)
    }

    /// Applies one `key = value` setting. `quota` sets every template;
    /// `quota.<template>` sets one.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "graph_path" => self.graph_path = Some(value.into()),
            "types_path" => self.types_path = Some(value.into()),
            "format" => {
                value.parse::<GraphFormat>()?;
                self.format = value.to_owned();
            }
            "out_dir" => self.out_dir = Some(value.into()),
            "split_fraction" => self.split_fraction = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "max_targets" => self.max_targets = parse(key, value)?,
            "negatives_per_query" => self.negatives_per_query = parse(key, value)?,
            "hard_negative_fraction" => self.hard_negative_fraction = parse(key, value)?,
            "typed_negatives" => self.typed_negatives = parse(key, value)?,
            "quota" => {
                let q = parse_quota(key, value)?;
                for t in Template::ALL {
                    self.quotas.insert(t, q);
                }
            }
            "dim" => self.dim = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "layer_policy" => {
                self.layer_policy = Some(match value {
                    "fixed" => PolicyKind::Fixed,
                    "diameter" => PolicyKind::Diameter,
                    _ => {
                        return Err(Error::Config(format!(
                            "layer_policy must be fixed or diameter, got {value:?}"
                        )))
                    }
                })
            }
            "aggregation" => self.aggregation = value.parse()?,
            "gamma" => self.gamma = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = Some(parse(key, value)?),
            _ => match key.strip_prefix("quota.") {
                Some(t) => {
                    let t: Template = t.parse()?;
                    self.quotas.insert(t, parse_quota(key, value)?);
                }
                None => return Err(Error::Config(format!("unknown key {key:?}"))),
            },
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn graph_format(&self) -> Result<GraphFormat> {
        self.format.parse()
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("missing key seed".into()))
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let policy = match self.layer_policy {
            Some(PolicyKind::Fixed) => LayerPolicy::Fixed(self.layers),
            Some(PolicyKind::Diameter) => LayerPolicy::Diameter,
            None => EncoderConfig::new(self.aggregation, self.layers).policy,
        };
        EncoderConfig {
            aggregation: self.aggregation,
            policy,
        }
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            max_targets: self.max_targets,
            negatives_per_query: self.negatives_per_query,
            hard_negative_fraction: self.hard_negative_fraction,
            val_fraction: self.val_fraction,
            quotas: self.quotas.clone(),
            typed_negatives: self.typed_negatives,
            attempt_factor: SamplerConfig::default().attempt_factor,
            seed: self.seed()?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            gamma: self.gamma,
            alpha: self.alpha,
            lr: self.lr,
            max_steps: self.max_steps,
            eval_every: self.eval_every,
            patience: self.patience,
            encoder: self.encoder_config(),
            seed: self.seed()?,
        })
    }

    /// Every violation found, empty when the configuration is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        match &self.graph_path {
            None => v.push("missing key graph_path".to_owned()),
            Some(p) if !p.exists() => v.push(format!("graph_path {} does not exist", p.display())),
            _ => {}
        }
        if let Some(p) = &self.types_path {
            if !p.exists() {
                v.push(format!("types_path {} does not exist", p.display()));
            }
        }
        if self.seed.is_none() {
            v.push("missing key seed".to_owned());
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            v.push("split_fraction must be in (0, 1)".to_owned());
        }
        if self.dim == 0 {
            v.push("dim must be positive".to_owned());
        }
        if self.layers == 0 {
            v.push("layers must be positive".to_owned());
        }
        let sampler = SamplerConfig {
            seed: 0,
            ..self.sampler_config().unwrap_or_default()
        };
        v.extend(sampler.validate());
        let train = TrainConfig {
            gamma: self.gamma,
            alpha: self.alpha,
            lr: self.lr,
            max_steps: self.max_steps,
            eval_every: self.eval_every,
            patience: self.patience,
            encoder: self.encoder_config(),
            seed: 0,
        };
        v.extend(train.validate());

        let enc = self.encoder_config();
        let needed = match enc.policy {
            LayerPolicy::Diameter => MAX_DIAMETER,
            LayerPolicy::Fixed(l) => l,
        };
        if needed > self.layers {
            v.push(format!(
                "layers must be at least {needed} for the diameter layer policy"
            ));
        }
        if enc.aggregation == Aggregation::Tm {
            if let LayerPolicy::Fixed(l) = enc.policy {
                let bad: Vec<&str> = self
                    .quotas
                    .iter()
                    .filter(|(_, q)| q.total() > 0)
                    .map(|(t, _)| *t)
                    .filter(|t| diameter_of(*t) != l)
                    .map(|t| t.name())
                    .collect();
                if !bad.is_empty() {
                    v.push(format!(
                        "tm aggregation needs layers equal to the query diameter, but fixed {l} does not match {}",
                        bad.join(", ")
                    ));
                }
            }
        }
        v
    }

    /// Canonical text form, readable by [`RunConfig::parse_str`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        if let Some(p) = &self.graph_path {
            kv("graph_path", p.display().to_string());
        }
        if let Some(p) = &self.types_path {
            kv("types_path", p.display().to_string());
        }
        kv("format", self.format.clone());
        if let Some(p) = &self.out_dir {
            kv("out_dir", p.display().to_string());
        }
        kv("split_fraction", self.split_fraction.to_string());
        kv("val_fraction", self.val_fraction.to_string());
        kv("max_targets", self.max_targets.to_string());
        kv("negatives_per_query", self.negatives_per_query.to_string());
        kv(
            "hard_negative_fraction",
            self.hard_negative_fraction.to_string(),
        );
        kv("typed_negatives", self.typed_negatives.to_string());
        for (t, q) in &self.quotas {
            kv(
                &format!("quota.{t}"),
                format!("{},{},{}", q.train, q.val, q.test),
            );
        }
        kv("dim", self.dim.to_string());
        kv("layers", self.layers.to_string());
        if let Some(p) = self.layer_policy {
            kv(
                "layer_policy",
                match p {
                    PolicyKind::Fixed => "fixed",
                    PolicyKind::Diameter => "diameter",
                }
                .to_owned(),
            );
        }
        kv("aggregation", self.aggregation.to_string());
        kv("gamma", self.gamma.to_string());
        kv("alpha", self.alpha.to_string());
        kv("lr", self.lr.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("patience", self.patience.to_string());
        if let Some(s) = self.seed {
            kv("seed", s.to_string());
        }
        out
    }
}

fn diameter_of(t: Template) -> usize {
    let p = t.pattern();
    let mut depth = vec![0usize; p.roles.len()];
    for &(src, dst) in p.edges {
        depth[dst] = depth[dst].max(depth[src] + 1);
    }
    depth[p.roles.len() - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid() -> (tempfile::NamedTempFile, RunConfig) {
        let f = tempfile::NamedTempFile::new().unwrap();
        let text = format!(
            "# run\ngraph_path = {}\nseed = 7\naggregation = sum\nquota = 5,1,4\nquota.3-inter = 0,0,0\n",
            f.path().display()
        );
        (
            f,
            RunConfig::parse_str(&text, Path::new("run.cfg")).unwrap(),
        )
    }

    #[test]
    fn complete_config_is_valid() {
        let (_f, cfg) = valid();
        assert_eq!(cfg.validate(), Vec::<String>::new());
        assert_eq!(cfg.quotas[&Template::TwoChain].total(), 10);
        assert_eq!(cfg.quotas[&Template::ThreeInter].total(), 0);
        assert_eq!(cfg.seed().unwrap(), 7);
    }

    #[test]
    fn negative_gamma() {
        let (_f, mut cfg) = valid();
        cfg.apply_overrides(&["gamma=-1"]).unwrap();
        assert!(cfg
            .validate()
            .contains(&"gamma must be positive".to_owned()));
    }

    #[test]
    fn tm_with_fixed_layers() {
        let (_f, mut cfg) = valid();
        cfg.apply_overrides(&["aggregation=tm", "layer_policy=fixed", "layers=3"])
            .unwrap();
        let v = cfg.validate();
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].contains("diameter"));
        cfg.set("layer_policy", "diameter").unwrap();
        assert!(cfg.validate().is_empty());
    }

    #[test]
    fn missing_keys_are_named() {
        let cfg = RunConfig::default();
        let v = cfg.validate();
        assert!(v.contains(&"missing key graph_path".to_owned()));
        assert!(v.contains(&"missing key seed".to_owned()));
    }

    #[test]
    fn parse_errors_carry_lines() {
        let err = RunConfig::parse_str("seed = 1\nbogus = 2\n", Path::new("x.cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(RunConfig::parse_str("seed\n", Path::new("x.cfg")).is_err());
        assert!(RunConfig::parse_str("quota.9-chain = 1,1,1\n", Path::new("x.cfg")).is_err());
    }

    #[test]
    fn text_round_trip() {
        let (_f, mut cfg) = valid();
        cfg.set("layer_policy", "fixed").unwrap();
        let back = RunConfig::parse_str(&cfg.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn template_diameters() {
        let d: Vec<usize> = Template::ALL.iter().map(|&t| diameter_of(t)).collect();
        assert_eq!(d, vec![1, 2, 3, 1, 1, 2, 2]);
    }
}
