//! The equivariant message-passing potential.
//!
//! Layer `t ≥ 1` maps features `h^(t−1)` to `h^(t)`:
//!
//! 1. For each edge `j → i` within `r_cut`, the neighbour's block of order
//!    `l2` is coupled with the edge harmonic of order `l1` into order `l3`
//!    through the real Clebsch–Gordan tensor, weighted per channel by a radial
//!    MLP head. Channels never mix here.
//! 2. Messages are summed over neighbours and divided by a fixed constant.
//! 3. A per-order linear map mixes channels, for `t ≥ 2` plus a per-species
//!    linear map of `h^(t−1)`.
//! 4. Gated configurations apply silu to scalars and scale every `l > 0`
//!    block by `tanh` of its gate scalar.
//!
//! Per-atom energy is the species self-energy plus a linear readout of the
//! scalars of every intermediate layer and an MLP (or linear) readout of the
//! last layer. Forces are the negative position gradient of the energy.

mod config;
mod forward;
pub mod params;
pub mod radial;
mod system;


pub use config::{GateAssociation, ModelConfig, Precision, ReadoutKind};
pub use forward::{forward, Architecture, ForwardOutput, LayerPlan, PathPlan, Weights};
pub use params::{tensor_specs, ModelParams, TensorSpec};
pub use radial::radial_basis;
pub use system::{neighbor_list, AtomicSystem, Batch};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::irreps::PruneMask;
use crate::so3::{random_rotation_with, Rotation};
use crate::tape::{Mat, Real, Tape};
use crate::Result;

/// Energies and forces of one system.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub energy: f64,
    pub atom_energies: Vec<f64>,
    pub forces: Vec<[f64; 3]>,
    /// `layer_energies[t][i]`: contribution of layer `t` to atom `i`.
    pub layer_energies: Vec<Vec<f64>>,
}

/// Receptive-field radius `T · r_cut`.
pub fn receptive_field(config: &ModelConfig) -> f64 {
    config.receptive_field()
}

/// Energies and forces of a single system.
pub fn predict(params: &ModelParams, system: &AtomicSystem) -> Result<Prediction> {
    let arch = Architecture::new(&params.config)?;
    Ok(predict_batch(&arch, params, std::slice::from_ref(system), None)?.remove(0))
}

/// Predictions for several systems evaluated as one disjoint graph, at the
/// configured precision.
pub fn predict_batch(
    arch: &Architecture,
    params: &ModelParams,
    systems: &[AtomicSystem],
    masks: Option<&PruneMask>,
) -> Result<Vec<Prediction>> {
    match arch.config.precision {
        Precision::Fp64 => predict_with::<f64>(arch, params, systems, masks),
        Precision::Fp32 => predict_with::<f32>(arch, params, systems, masks),
    }
}

/// As [`predict_batch`] with an explicit compute type.
pub fn predict_with<T: Real>(
    arch: &Architecture,
    params: &ModelParams,
    systems: &[AtomicSystem],
    masks: Option<&PruneMask>,
) -> Result<Vec<Prediction>> {
    let batch = Batch::new(&arch.config, systems)?;
    let mut tape = Tape::<T>::new();
    let w = Weights::load(&mut tape, params, false);
    let pos = tape.leaf(positions_mat(&batch.positions));
    let out = forward(arch, &mut tape, &w, &batch, pos, masks)?;
    let grad = tape.grad(out.total_energy, &[pos], false)?[0];
    let g = tape.value(grad).cast::<f64>();
    let e_atom = tape.value(out.atom_energy).cast::<f64>();
    let e_struct = tape.value(out.structure_energy).cast::<f64>();
    let layers: Vec<Mat<f64>> = out.layer_energy.iter().map(|&v| tape.value(v).cast::<f64>()).collect();
    let mut preds = Vec::with_capacity(systems.len());
    for s in 0..batch.n_structures {
        let atoms = batch.atoms_of(s);
        preds.push(Prediction {
            energy: e_struct.data[s],
            atom_energies: atoms.clone().map(|i| e_atom.data[i]).collect(),
            forces: atoms.clone().map(|i| [-g.get(i, 0), -g.get(i, 1), -g.get(i, 2)]).collect(),
            layer_energies: layers.iter().map(|m| atoms.clone().map(|i| m.data[i]).collect()).collect(),
        });
    }
    Ok(preds)
}

/// Largest deviations from exact symmetry over `rotations` Haar-random
/// rotations of every system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivarianceReport {
    /// `|E(gR) − E(R)| / |E(R)|`.
    pub energy_rel: f64,
    /// `‖F(gR) − g F(R)‖∞`.
    pub force_abs: f64,
}

/// Checks invariance of energies and equivariance of forces.
pub fn equivariance_check(params: &ModelParams, systems: &[AtomicSystem], rotations: usize, seed: u64) -> Result<EquivarianceReport> {
    let arch = Architecture::new(&params.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = EquivarianceReport { energy_rel: 0.0, force_abs: 0.0 };
    for sys in systems {
        let base = predict_batch(&arch, params, std::slice::from_ref(sys), None)?.remove(0);
        let rotated: Vec<(Rotation, AtomicSystem)> = (0..rotations)
            .map(|_| {
                let g = random_rotation_with(&mut rng);
                let s = sys.rotated(&g);
                (g, s)
            })
            .collect();
        let systems: Vec<AtomicSystem> = rotated.iter().map(|(_, s)| s.clone()).collect();
        for ((g, _), p) in rotated.iter().zip(predict_batch(&arch, params, &systems, None)?) {
            let de = (p.energy - base.energy).abs() / base.energy.abs().max(f64::MIN_POSITIVE);
            rep.energy_rel = rep.energy_rel.max(if de.is_nan() { f64::INFINITY } else { de });
            for (f, f0) in p.forces.iter().zip(&base.forces) {
                let gf = g.apply(*f0);
                for c in 0..3 {
                    let d = (f[c] - gf[c]).abs();
                    rep.force_abs = rep.force_abs.max(if d.is_nan() { f64::INFINITY } else { d });
                }
            }
        }
    }
    Ok(rep)
}

/// `n × 3` matrix of coordinates.
pub fn positions_mat<T: Real>(positions: &[[f64; 3]]) -> Mat<T> {
    Mat::from_vec(positions.len(), 3, positions.iter().flatten().map(|&v| T::from_f64(v)).collect())
}
