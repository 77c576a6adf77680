//! Target-driven block masks and the surgery that turns a masked model into a
//! smaller dense one.
//!
//! The width stage ([`slice_model`]) is exact: the sliced model reproduces the
//! source model with every masked block zeroed, which [`verify_slice_exactness`]
//! checks numerically. Depth pruning with a fresh readout and embedding
//! re-initialisation run afterwards and are reported as fresh-weight steps.

mod slice;
mod target;

#[cfg(test)]
mod tests;

pub use slice::{reconfigured_paths, slice_model, SliceMaps};
pub use target::{EmbeddingPolicy, TargetSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::importance::ImportanceTable;
use crate::irreps::{LayerMask, PruneMask};
use crate::model::params::{self as names, init_tensor, tensor_specs};
use crate::model::{predict_batch, Architecture, AtomicSystem, GateAssociation, ModelConfig, ModelParams, ReadoutKind};
use crate::{Error, Result};

/// Relative tolerance of the slice-exactness check.
pub const EXACTNESS_TOLERANCE: f64 = 1e-12;

/// Keeps the `counts[t][l]` highest-scoring channels of each (layer, order);
/// ties go to the lower channel index.
///
/// In gated layers the target counts cover the ordinary scalars only; gate
/// bits start cleared and are set by [`enforce_gate_coupling`].
pub fn generate_mask(table: &ImportanceTable, counts: &[Vec<usize>], config: &ModelConfig) -> Result<PruneMask> {
    let layouts = config.mask_layouts();
    let table = table.clone().conform(&layouts)?;
    if counts.len() != layouts.len() {
        return Err(Error::Infeasible(format!("target covers {} layers, model has {}", counts.len(), layouts.len())));
    }
    let mut layers = Vec::with_capacity(layouts.len());
    for (t, lay) in layouts.iter().enumerate() {
        let mut z = LayerMask::zeros(lay);
        for l in 0..=lay.l_max() {
            let ranked = match (l, config.gates(t)) {
                (0, Some(g)) => g.n_scalars(),
                _ => lay.mult(l),
            };
            let want = counts[t].get(l).copied().unwrap_or(0);
            if want > ranked {
                return Err(Error::Infeasible(format!("layer {t} order {l}: target {want} exceeds {ranked}")));
            }
            let scores = &table.scores[t][l][..ranked];
            let mut order: Vec<usize> = (0..ranked).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            for &k in &order[..want] {
                z.set(k, l, true);
            }
        }
        layers.push(z);
    }
    Ok(PruneMask::new(layers))
}

/// Sets the gate bit of every retained `l > 0` block; other bits unchanged.
///
/// `gates[t]` is the association of layer `t` (`None` for ungated layers).
pub fn enforce_gate_coupling(mask: &PruneMask, gates: &[Option<GateAssociation>]) -> Result<PruneMask> {
    if gates.len() != mask.n_layers() {
        return Err(Error::Invalid("gate association table missing for some layers".into()));
    }
    let mut out = mask.clone();
    for (t, g) in gates.iter().enumerate() {
        let Some(g) = g else { continue };
        let z = out.layer_mut(t);
        if z.layout().mult(0) != g.n_scalars() + g.n_gates() {
            return Err(Error::LayoutMismatch(format!("layer {t} mask has no room for its gates")));
        }
        for &(l, k) in g.blocks() {
            if z.keep(k, l) {
                let c = g.gate_channel(k, l).expect("listed block");
                z.set(c, 0, true);
            }
        }
    }
    Ok(out)
}

/// Gate associations of every layer of `config`.
pub fn gate_table(config: &ModelConfig) -> Vec<Option<GateAssociation>> {
    (0..config.layers.len()).map(|t| config.gates(t)).collect()
}

/// Number of retained `l > 0` blocks whose gate is dropped.
pub fn gate_violations(mask: &PruneMask, gates: &[Option<GateAssociation>]) -> usize {
    let mut n = 0;
    for (t, g) in gates.iter().enumerate() {
        let Some(g) = g else { continue };
        let z = mask.layer(t);
        for &(l, k) in g.blocks() {
            let c = g.gate_channel(k, l).expect("listed block");
            if z.keep(k, l) && !z.keep(c, 0) {
                n += 1;
            }
        }
    }
    n
}

/// Removes layers above `new_t`.
///
/// With `substitute`, layer `new_t` gets a freshly drawn MLP readout (seeded by
/// `seed`); otherwise its linear readout becomes the final one.
pub fn depth_prune(params: &ModelParams, new_t: usize, substitute: bool, seed: u64) -> Result<ModelParams> {
    let t_old = params.config.n_layers();
    if new_t < 1 {
        return Err(Error::Invalid("depth must be at least 1".into()));
    }
    if new_t >= t_old {
        return Err(Error::Invalid(format!("depth {new_t} is not below the current depth {t_old}")));
    }
    let mut config = params.config.clone();
    config.layers.truncate(new_t + 1);
    config.final_readout = if substitute { ReadoutKind::Mlp } else { ReadoutKind::Linear };
    config.validate()?;
    let specs = tensor_specs(&config);
    let mut tensors = std::collections::BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, spec) in &specs {
        let kept = params.tensors.get(name).filter(|m| m.shape() == (spec.rows, spec.cols));
        let fresh = [names::readout_w1(new_t), names::readout_w2(new_t)];
        let v = match kept {
            Some(m) if !fresh.contains(name) => m.clone(),
            _ => init_tensor(spec, &mut rng),
        };
        tensors.insert(name.clone(), v);
    }
    let out = ModelParams { config, tensors };
    out.validate()?;
    Ok(out)
}

/// Redraws the embedding at its current width when the policy asks for it.
pub fn apply_embedding_policy(params: &ModelParams, policy: EmbeddingPolicy, seed: u64) -> Result<ModelParams> {
    let mut out = params.clone();
    if policy == EmbeddingPolicy::Reinit {
        if let Some(spec) = tensor_specs(&params.config).get(names::EMBEDDING) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            out.tensors.insert(names::EMBEDDING.into(), init_tensor(spec, &mut rng));
        }
    }
    Ok(out)
}

/// Drops every species not in `kept` from the embedding, self-energies and
/// species residuals.
pub fn remove_species(params: &ModelParams, kept: &[u32]) -> Result<ModelParams> {
    let cfg = &params.config;
    let mut rows = Vec::new();
    for &z in kept {
        rows.push(cfg.species_index(z)?);
    }
    rows.sort_unstable();
    rows.dedup();
    if rows.is_empty() {
        return Err(Error::Invalid("at least one species must be kept".into()));
    }
    let mut config = cfg.clone();
    config.species = rows.iter().map(|&r| cfg.species[r]).collect();
    let mut tensors = params.tensors.clone();
    for name in [names::EMBEDDING, names::SELF_ENERGY] {
        if let Some(m) = params.get(name) {
            tensors.insert(name.into(), m.select_rows(&rows));
        }
    }
    for t in 2..=cfg.n_layers() {
        let lay = cfg.mask_layout(t);
        for l in 0..=lay.l_max() {
            let name = names::residual(t, l);
            if let Some(m) = params.get(&name) {
                let kout = lay.mult(l);
                let sel: Vec<usize> = rows.iter().flat_map(|&s| s * kout..(s + 1) * kout).collect();
                tensors.insert(name, m.select_rows(&sel));
            }
        }
    }
    let out = ModelParams { config, tensors };
    out.validate()?;
    Ok(out)
}

/// Outcome of the exactness check.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub n_systems: usize,
    pub max_energy_rel: f64,
    pub max_force_rel: f64,
    /// `(system, energy deviation, force deviation)` above tolerance.
    pub failures: Vec<(usize, f64, f64)>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares the sliced model with the source model evaluated under `mask`.
///
/// Deviations are relative: energy by `|E|`, forces by the largest force
/// component of the system.
pub fn compare_sliced(
    big: &ModelParams,
    mask: &PruneMask,
    small: &ModelParams,
    systems: &[AtomicSystem],
) -> Result<VerificationReport> {
    if systems.is_empty() {
        return Err(Error::Empty("no verification systems".into()));
    }
    let mut big64 = big.clone();
    big64.config.precision = crate::model::Precision::Fp64;
    let mut small64 = small.clone();
    small64.config.precision = crate::model::Precision::Fp64;
    let arch_big = Architecture::new(&big64.config)?;
    let arch_small = Architecture::new(&small64.config)?;
    let mut report = VerificationReport { n_systems: systems.len(), max_energy_rel: 0.0, max_force_rel: 0.0, failures: Vec::new() };
    for (chunk_idx, chunk) in systems.chunks(16).enumerate() {
        let a = predict_batch(&arch_big, &big64, chunk, Some(mask))?;
        let b = predict_batch(&arch_small, &small64, chunk, None)?;
        for (i, (pa, pb)) in a.iter().zip(&b).enumerate() {
            let de = (pa.energy - pb.energy).abs() / pa.energy.abs().max(f64::MIN_POSITIVE);
            let fscale = pa.forces.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
            let df = pa
                .forces
                .iter()
                .flatten()
                .zip(pb.forces.iter().flatten())
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
                / fscale;
            let (de, df) = (if de.is_nan() { f64::INFINITY } else { de }, if df.is_nan() { f64::INFINITY } else { df });
            report.max_energy_rel = report.max_energy_rel.max(de);
            report.max_force_rel = report.max_force_rel.max(df);
            if de > EXACTNESS_TOLERANCE || df > EXACTNESS_TOLERANCE {
                report.failures.push((chunk_idx * 16 + i, de, df));
            }
        }
    }
    Ok(report)
}

/// As [`compare_sliced`], failing with per-system diagnostics above tolerance.
pub fn verify_slice_exactness(
    big: &ModelParams,
    mask: &PruneMask,
    small: &ModelParams,
    systems: &[AtomicSystem],
) -> Result<VerificationReport> {
    let report = compare_sliced(big, mask, small, systems)?;
    if report.passed() {
        return Ok(report);
    }
    let diag: Vec<String> = report
        .failures
        .iter()
        .take(10)
        .map(|(s, de, df)| format!("system {s}: energy {de:.3e}, forces {df:.3e}"))
        .collect();
    Err(Error::Verification(format!(
        "{} of {} systems exceed {EXACTNESS_TOLERANCE:e}: {}",
        report.failures.len(),
        report.n_systems,
        diag.join("; ")
    )))
}

/// Result of the full pruning stage.
#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub params: ModelParams,
    pub mask: PruneMask,
    pub verification: VerificationReport,
    /// Tensors drawn fresh after verification (not covered by it).
    pub fresh_tensors: Vec<String>,
}

/// Mask generation, gate coupling, width slicing, exactness verification,
/// then depth pruning and the embedding policy.
pub fn prune(
    params: &ModelParams,
    table: &ImportanceTable,
    target: &TargetSpec,
    verify_on: &[AtomicSystem],
    seed: u64,
) -> Result<PruneOutcome> {
    let cfg = &params.config;
    let counts = target.resolve(cfg)?;
    let mask = generate_mask(table, &counts, cfg)?;
    let mask = enforce_gate_coupling(&mask, &gate_table(cfg))?;
    let sliced = slice_model(params, &mask)?;
    let verification = verify_slice_exactness(params, &mask, &sliced, verify_on)?;
    let mut out = sliced;
    let mut fresh_tensors = Vec::new();
    if let Some(d) = target.depth.filter(|&d| d < cfg.n_layers()) {
        out = depth_prune(&out, d, target.readout_substitute, seed)?;
        if target.readout_substitute {
            fresh_tensors.extend([names::readout_w1(d), names::readout_w2(d)]);
        }
    }
    if target.embedding == EmbeddingPolicy::Reinit && out.tensors.contains_key(names::EMBEDDING) {
        out = apply_embedding_policy(&out, EmbeddingPolicy::Reinit, seed ^ 0x9e37_79b9_7f4a_7c15)?;
        fresh_tensors.push(names::EMBEDDING.into());
    }
    Ok(PruneOutcome { params: out, mask, verification, fresh_tensors })
}
