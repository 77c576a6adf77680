//! Fixtures shared by the benchmarks.

use equiprune::data::{generate_corpus, CorpusSpec};
use equiprune::{AtomicSystem, ModelConfig, ModelParams, Precision};

/// Labelled teacher systems, `n` structures with one conformation each.
pub fn corpus(n: usize) -> Vec<AtomicSystem> {
    let spec = CorpusSpec { n_structures: n, conformations: 1, ..CorpusSpec::default() };
    generate_corpus(&spec).expect("default corpus spec is valid").systems()
}

/// Two-layer gated model with `channels` channels up to order `l_max`.
pub fn model(l_max: usize, channels: usize, precision: Precision) -> ModelParams {
    let mut c = ModelConfig::uniform(2, l_max, channels, CorpusSpec::default().species());
    c.gated = l_max > 0;
    c.precision = precision;
    ModelParams::build(&c).expect("uniform config is valid")
}
