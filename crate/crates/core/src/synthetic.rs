//! Generated graphs for tests, benchmarks and learnability checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{GraphBuilder, KnowledgeGraph};

/// Clustered graph whose answers are predictable from cluster membership.
///
/// With `schema`, relation `r` only leaves cluster `r mod k` and only enters
/// cluster `(r + 1) mod k`, like a typed domain and range. Without it, every
/// relation maps each cluster onto its own randomly chosen target cluster.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlantedConfig {
    pub entities: usize,
    pub relations: usize,
    pub clusters: usize,
    /// Out-edges per entity and relation.
    pub out_degree: usize,
    pub schema: bool,
    /// Label every entity with a type derived from its cluster.
    pub typed: bool,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            entities: 200,
            relations: 5,
            clusters: 5,
            out_degree: 5,
            schema: true,
            typed: false,
            seed: 0,
        }
    }
}

pub fn cluster_of(entity: usize, clusters: usize) -> usize {
    entity % clusters
}

pub fn planted(cfg: &PlantedConfig) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.clusters.max(1);
    let members: Vec<Vec<usize>> = (0..k)
        .map(|c| {
            (0..cfg.entities)
                .filter(|&e| cluster_of(e, k) == c)
                .collect()
        })
        .collect();
    let mut b = GraphBuilder::new();
    for e in 0..cfg.entities {
        b.entity(&format!("e{e}"));
    }
    for r in 0..cfg.relations {
        b.relation(&format!("r{r}"));
        let mut image: Vec<usize> = (0..k).collect();
        image.shuffle(&mut rng);
        for e in 0..cfg.entities {
            if cfg.schema && cluster_of(e, k) != r % k {
                continue;
            }
            let pool = &members[if cfg.schema {
                (r + 1) % k
            } else {
                image[cluster_of(e, k)]
            }];
            if pool.is_empty() {
                continue;
            }
            for t in pool.choose_multiple(&mut rng, cfg.out_degree.min(pool.len())) {
                b.add_triple(&format!("e{e}"), &format!("r{r}"), &format!("e{t}"));
            }
        }
    }
    if cfg.typed {
        for e in 0..cfg.entities {
            b.set_type(&format!("e{e}"), &format!("c{}", cluster_of(e, k)));
        }
    }
    b.build()
}

/// Uniformly random multigraph-free graph; dangling entities are kept.
pub fn random_graph(
    entities: usize,
    relations: usize,
    edges: usize,
    rng: &mut impl Rng,
) -> KnowledgeGraph {
    let mut b = GraphBuilder::new();
    for e in 0..entities {
        b.entity(&format!("e{e}"));
    }
    for r in 0..relations {
        b.relation(&format!("r{r}"));
    }
    if entities > 0 && relations > 0 {
        for _ in 0..edges {
            let h = rng.gen_range(0..entities);
            let r = rng.gen_range(0..relations);
            let t = rng.gen_range(0..entities);
            b.add_triple(&format!("e{h}"), &format!("r{r}"), &format!("e{t}"));
        }
    }
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::EntityId;

    fn cluster(kg: &KnowledgeGraph, e: EntityId, k: usize) -> usize {
        cluster_of(kg.entity_label(e)[1..].parse().unwrap(), k)
    }

    #[test]
    fn planted_shape() {
        let kg = planted(&PlantedConfig::default());
        assert_eq!(kg.num_entities(), 200);
        assert_eq!(kg.num_relations(), 5);
        // 40 heads per relation, 5 tails each
        assert_eq!(kg.num_edges(), 5 * 40 * 5);
        assert_eq!(kg, planted(&PlantedConfig::default()));
    }

    #[test]
    fn schema_domains_and_ranges() {
        let kg = planted(&PlantedConfig::default());
        for t in kg.edges() {
            let r = t.relation.index();
            assert_eq!(cluster(&kg, t.head, 5), r % 5);
            assert_eq!(cluster(&kg, t.tail, 5), (r + 1) % 5);
        }
    }

    #[test]
    fn permutation_respects_clusters() {
        let cfg = PlantedConfig {
            clusters: 10,
            out_degree: 2,
            schema: false,
            ..PlantedConfig::default()
        };
        let kg = planted(&cfg);
        let mut image = std::collections::HashMap::new();
        assert_eq!(kg.num_edges(), 200 * 5 * 2);
        for t in kg.edges() {
            let key = (t.relation, cluster(&kg, t.head, 10));
            let c = *image.entry(key).or_insert(cluster(&kg, t.tail, 10));
            assert_eq!(c, cluster(&kg, t.tail, 10));
        }
        assert_eq!(kg.entity_label(EntityId(3)), "e3");
    }

    #[test]
    fn random_graph_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let kg = random_graph(20, 3, 50, &mut rng);
        assert_eq!(kg.num_entities(), 20);
        assert!(kg.num_edges() <= 50);
        assert_eq!(random_graph(0, 0, 5, &mut rng).num_edges(), 0);
    }
}
