use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::irreps::IrrepsLayout;
use crate::model::predict;
use crate::tape::Mat;

fn cluster(n: usize, seed: u64) -> AtomicSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<[f64; 3]> = Vec::new();
    while pos.len() < n {
        let p = [rng.gen_range(0.0..2.8), rng.gen_range(0.0..2.8), rng.gen_range(0.0..2.8)];
        if pos.iter().all(|q| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>() > 0.64) {
            pos.push(p);
        }
    }
    let z = (0..n).map(|i| if i % 3 == 0 { 8 } else { 1 }).collect();
    AtomicSystem::new(pos, z).unwrap()
}

fn systems(n: usize, seed: u64) -> Vec<AtomicSystem> {
    (0..n).map(|i| cluster(4 + i % 6, seed + i as u64)).collect()
}

fn model(n_layers: usize, l_max: usize, channels: usize, gated: bool) -> ModelParams {
    let mut c = ModelConfig::uniform(n_layers, l_max, channels, vec![1, 8]);
    c.gated = gated;
    c.seed = 21;
    let mut p = ModelParams::build(&c).unwrap();
    p.tensors.insert(names::SELF_ENERGY.into(), Mat::from_vec(2, 1, vec![-0.4, 0.9]));
    p
}

fn random_mask(config: &ModelConfig, rng: &mut ChaCha8Rng, p_keep: f64) -> PruneMask {
    let layers = config
        .mask_layouts()
        .iter()
        .map(|lay| {
            let mut z = LayerMask::zeros(lay);
            for (l, k) in lay.blocks() {
                z.set(k, l, rng.gen_bool(p_keep));
            }
            z
        })
        .collect();
    PruneMask::new(layers)
}

/// Random mask that leaves every earlier layer some channel and the last
/// layer a scalar, with gates coupled.
fn feasible_mask(config: &ModelConfig, seed: u64) -> PruneMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = random_mask(config, &mut rng, 0.5);
    let t_last = config.n_layers();
    for t in 0..=t_last {
        let z = m.layer_mut(t);
        if t == t_last || (0..config.layers[t].mult(0)).all(|k| !z.keep(k, 0)) {
            z.set(0, 0, true);
        }
    }
    enforce_gate_coupling(&m, &gate_table(config)).unwrap()
}

#[test]
fn mask_keeps_top_scores_with_low_index_ties() {
    let c = ModelConfig::uniform(1, 0, 4, vec![1]);
    let mut table = ImportanceTable::zeros(&c.mask_layouts());
    for (k, v) in [0.9, 0.1, 0.5, 0.5].into_iter().enumerate() {
        table.scores[1][0][k] = v;
    }
    let m = generate_mask(&table, &[vec![4], vec![2]], &c).unwrap();
    assert_eq!(m.layer(1).bits(0), &[true, false, true, false]);
    let all = generate_mask(&table, &[vec![4], vec![4]], &c).unwrap();
    assert!(all.is_all_ones());
    let none = generate_mask(&table, &[vec![4], vec![0]], &c).unwrap();
    assert_eq!(none.layer(1).kept(0), 0);
    assert!(matches!(generate_mask(&table, &[vec![4], vec![5]], &c), Err(Error::Infeasible(_))));
}

#[test]
fn gated_mask_leaves_gates_to_coupling() {
    let p = model(2, 1, 4, true);
    let table = ImportanceTable::zeros(&p.config.mask_layouts());
    let m = generate_mask(&table, &[vec![4, 4], vec![4, 4], vec![4, 4]], &p.config).unwrap();
    let z = m.layer(1);
    assert_eq!(z.layout().mult(0), 8);
    assert!((4..8).all(|c| !z.keep(c, 0)));
    let gates = gate_table(&p.config);
    assert_eq!(gate_violations(&m, &gates), 8);
    let coupled = enforce_gate_coupling(&m, &gates).unwrap();
    assert_eq!(gate_violations(&coupled, &gates), 0);
    assert!(coupled.is_all_ones());
}

#[test]
fn gate_coupling_on_random_masks() {
    let p = model(2, 2, 3, true);
    let gates = gate_table(&p.config);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let m = random_mask(&p.config, &mut rng, 0.5);
        let c = enforce_gate_coupling(&m, &gates).unwrap();
        assert_eq!(gate_violations(&c, &gates), 0);
        assert_eq!(enforce_gate_coupling(&c, &gates).unwrap(), c);
        // only gate bits may change, and only from 0 to 1
        for t in 0..m.n_layers() {
            for (l, k) in m.layer(t).layout().blocks() {
                let (a, b) = (m.layer(t).keep(k, l), c.layer(t).keep(k, l));
                if a != b {
                    assert!(!a && b && l == 0 && gates[t].as_ref().unwrap().gated_block(k).is_some());
                }
            }
        }
    }
}

#[test]
fn all_ones_slice_is_identity() {
    for gated in [false, true] {
        let p = model(2, 1, 4, gated);
        let s = slice_model(&p, &PruneMask::ones(&p.config.mask_layouts())).unwrap();
        assert_eq!(s, p);
    }
}

#[test]
fn scalar_slice_is_a_submatrix() {
    let p = model(2, 0, 4, false);
    let mut m = PruneMask::ones(&p.config.mask_layouts());
    for k in [1, 3] {
        m.layer_mut(1).set(k, 0, false);
    }
    let s = slice_model(&p, &m).unwrap();
    assert_eq!(s.config.layers[1], IrrepsLayout::scalars(2));
    let keep = [0, 2];
    let all4: Vec<usize> = (0..4).collect();
    let lin = p.get(&names::linear(1, 0)).unwrap();
    assert_eq!(s.get(&names::linear(1, 0)).unwrap(), &lin.select_rows(&keep));
    let heads2 = p.get(&names::radial_w2(2)).unwrap();
    assert_eq!(s.get(&names::radial_w2(2)).unwrap(), &heads2.select_cols(&keep));
    let lin2 = p.get(&names::linear(2, 0)).unwrap();
    assert_eq!(s.get(&names::linear(2, 0)).unwrap(), &lin2.select_cols(&keep));
    let res = p.get(&names::residual(2, 0)).unwrap();
    assert_eq!(s.get(&names::residual(2, 0)).unwrap(), &res.select_cols(&keep));
    assert_eq!(s.get(&names::readout(1)).unwrap(), &p.get(&names::readout(1)).unwrap().select_cols(&keep));
    assert_eq!(s.get(names::EMBEDDING).unwrap(), &p.get(names::EMBEDDING).unwrap().select_cols(&all4));
}

#[test]
fn dropped_order_loses_its_tensors() {
    let p = model(2, 1, 4, false);
    let mut m = PruneMask::ones(&p.config.mask_layouts());
    for k in 0..4 {
        m.layer_mut(1).set(k, 1, false);
    }
    let s = slice_model(&p, &m).unwrap();
    assert!(s.get(&names::linear(1, 1)).is_none());
    assert!(s.get(&names::residual(2, 1)).is_none());
    assert_eq!(s.config.paths(2), vec![(0, 0, 0), (1, 0, 1)]);
    s.validate().unwrap();
}

#[test]
fn truncating_orders_reconfigures_paths() {
    let p = model(2, 2, 2, false);
    assert!(p.config.paths(2).len() > 2);
    let target = TargetSpec::truncate_orders(&p.config, 0);
    let counts = target.resolve(&p.config).unwrap();
    let table = score_random_table(&p);
    let m = generate_mask(&table, &counts, &p.config).unwrap();
    let paths = reconfigured_paths(&p.config, &m).unwrap();
    assert_eq!(paths, vec![vec![(0, 0, 0)], vec![(0, 0, 0)]]);
    let s = slice_model(&p, &m).unwrap();
    assert!(s.config.layers.iter().all(|l| l.width() == l.mult(0)));
    assert!(s.n_params() < p.n_params());
}

fn score_random_table(p: &ModelParams) -> ImportanceTable {
    crate::importance::score_random(&p.config.mask_layouts(), 1)
}

#[test]
fn kept_block_without_gate_is_inconsistent() {
    let p = model(2, 1, 2, true);
    let mut m = PruneMask::ones(&p.config.mask_layouts());
    let g = p.config.gates(1).unwrap();
    m.layer_mut(1).set(g.gate_channel(0, 1).unwrap(), 0, false);
    assert!(matches!(slice_model(&p, &m), Err(Error::Invalid(_))));
}

#[test]
fn sliced_model_reproduces_masked_model() {
    for (gated, l_max) in [(false, 1), (true, 1), (false, 2)] {
        let p = model(2, l_max, 8, gated);
        let m = feasible_mask(&p.config, 77 + l_max as u64);
        let s = slice_model(&p, &m).unwrap();
        assert!(s.n_params() < p.n_params());
        let report = verify_slice_exactness(&p, &m, &s, &systems(50, 300)).unwrap();
        assert!(report.max_energy_rel <= EXACTNESS_TOLERANCE && report.max_force_rel <= EXACTNESS_TOLERANCE);
    }
}

#[test]
fn corrupted_slice_fails_verification() {
    let p = model(2, 1, 8, false);
    let m = feasible_mask(&p.config, 5);
    let mut s = slice_model(&p, &m).unwrap();
    let w = s.tensors.get_mut(&names::linear(2, 0)).unwrap();
    let v = w.get(0, 0);
    w.set(0, 0, v + 1e-3);
    let err = verify_slice_exactness(&p, &m, &s, &systems(10, 9)).unwrap_err();
    assert!(matches!(err, Error::Verification(_)));
}

#[test]
fn depth_pruning_shapes() {
    let p = model(2, 1, 4, false);
    let d = depth_prune(&p, 1, true, 3).unwrap();
    assert_eq!(d.config.n_layers(), 1);
    assert_eq!(d.config.final_readout, ReadoutKind::Mlp);
    assert!(d.get(&names::readout(1)).is_none());
    assert_eq!(d.get(&names::readout_w1(1)).unwrap().shape(), (16, 4));
    assert_eq!(d.get(&names::readout_w2(1)).unwrap().shape(), (1, 16));
    assert!(d.tensors.keys().all(|k| !k.starts_with("layer2")));
    assert_eq!(d.get(&names::linear(1, 1)), p.get(&names::linear(1, 1)));
    assert!(matches!(depth_prune(&p, 2, true, 3), Err(Error::Invalid(_))));

    let lin = depth_prune(&p, 1, false, 3).unwrap();
    assert_eq!(lin.config.final_readout, ReadoutKind::Linear);
    assert_eq!(lin.get(&names::readout(1)), p.get(&names::readout(1)));
    assert!(lin.get(&names::readout_w1(1)).is_none());
}

#[test]
fn embedding_policies() {
    let p = model(2, 1, 4, false);
    assert_eq!(apply_embedding_policy(&p, EmbeddingPolicy::Inherit, 1).unwrap(), p);
    let r = apply_embedding_policy(&p, EmbeddingPolicy::Reinit, 1).unwrap();
    assert_ne!(r.get(names::EMBEDDING), p.get(names::EMBEDDING));
    assert_eq!(r.get(names::EMBEDDING).unwrap().shape(), p.get(names::EMBEDDING).unwrap().shape());
    assert_eq!(r, apply_embedding_policy(&p, EmbeddingPolicy::Reinit, 1).unwrap());
}

#[test]
fn removing_an_unused_species_keeps_predictions() {
    let p = model(2, 1, 4, false);
    let only_h: Vec<AtomicSystem> = systems(5, 40)
        .into_iter()
        .map(|s| AtomicSystem::new(s.positions.clone(), vec![1; s.n_atoms()]).unwrap())
        .collect();
    let q = remove_species(&p, &[1]).unwrap();
    assert_eq!(q.config.species, vec![1]);
    for s in &only_h {
        assert_eq!(predict(&p, s).unwrap().energy, predict(&q, s).unwrap().energy);
    }
    assert!(matches!(predict(&q, &cluster(4, 1)), Err(Error::UnknownSpecies(8))));
}

#[test]
fn full_prune_pipeline() {
    let p = model(2, 1, 4, true);
    let table = crate::importance::score_random(&p.config.mask_layouts(), 3);
    let target = TargetSpec::parse("1 0 2\n1 1 1\n2 0 2\n2 1 0\nembedding inherit\n").unwrap();
    let out = prune(&p, &table, &target, &systems(6, 2), 0).unwrap();
    assert_eq!(out.params.config.layers[1], IrrepsLayout::new(vec![2, 1]));
    assert_eq!(out.params.config.layers[2], IrrepsLayout::new(vec![2, 0]));
    assert!(out.fresh_tensors.is_empty());
    assert!(out.verification.passed());

    let deep = TargetSpec { depth: Some(1), readout_substitute: true, ..TargetSpec::default() };
    let out = prune(&p, &table, &deep, &systems(3, 2), 0).unwrap();
    assert_eq!(out.params.config.n_layers(), 1);
    assert_eq!(
        out.fresh_tensors,
        vec![names::readout_w1(1), names::readout_w2(1), names::EMBEDDING.to_string()]
    );
}

#[test]
fn target_parsing_and_feasibility() {
    let c = ModelConfig::uniform(2, 1, 4, vec![1]);
    let t = TargetSpec::parse("# widths\n1 1 2\ndepth 1 # short\nreadout-substitute on\n").unwrap();
    assert_eq!(TargetSpec::parse(&t.to_text()).unwrap(), t);
    assert_eq!(t.resolve(&c).unwrap()[1], vec![4, 2]);
    assert!(matches!(TargetSpec::parse("1 1\n"), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(TargetSpec::parse("\n1 x 2\n"), Err(Error::Parse { line: 2, .. })));
    for bad in ["1 0 5", "3 0 1", "depth 0", "depth 3", "2 0 0", "1 0 0\n1 1 0"] {
        let spec = TargetSpec::parse(bad).unwrap();
        assert!(matches!(spec.resolve(&c), Err(Error::Infeasible(_))), "{bad}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_masks_slice_exactly(seed in 0u64..10_000, gated in any::<bool>()) {
        let p = model(2, 1, 3, gated);
        let m = feasible_mask(&p.config, seed);
        let s = slice_model(&p, &m).unwrap();
        let widths: Vec<usize> = s.config.layers.iter().map(|l| l.mults().iter().sum()).collect();
        let kept: Vec<usize> = (0..=2).map(|t| (0..=1).map(|l| {
            (0..p.config.layers[t].mult(l)).filter(|&k| m.layer(t).keep(k, l)).count()
        }).sum()).collect();
        prop_assert_eq!(widths, kept);
        let r = compare_sliced(&p, &m, &s, &systems(4, seed)).unwrap();
        prop_assert!(r.passed(), "{:?}", r);
    }
}
