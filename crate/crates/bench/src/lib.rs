//! Shared setup for the criterion benches.

use boxqa::sampler::{generate_dataset, EdgeSplit, SamplerConfig};
use boxqa::synthetic::{planted, PlantedConfig};
use boxqa::{Dataset, KnowledgeGraph};

pub struct Fixture {
    pub kg: KnowledgeGraph,
    pub data: Dataset,
}

/// Planted graph with `entities` nodes and a default-quota dataset.
pub fn fixture(entities: usize) -> Fixture {
    let kg = planted(&PlantedConfig {
        entities,
        ..PlantedConfig::default()
    });
    let split = EdgeSplit::new(&kg, 0.1, 0).expect("split");
    let data = generate_dataset(&kg, &split, &SamplerConfig::default()).expect("dataset");
    Fixture { kg, data }
}
