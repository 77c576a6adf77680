use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::so3::Rotation;
use crate::{Error, Result};

/// A finite cluster with optional reference labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicSystem {
    pub positions: Vec<[f64; 3]>,
    pub species: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forces: Option<Vec<[f64; 3]>>,
}

impl AtomicSystem {
    pub fn new(positions: Vec<[f64; 3]>, species: Vec<u32>) -> Result<Self> {
        let s = Self { positions, species, energy: None, forces: None };
        s.validate()?;
        Ok(s)
    }

    pub fn n_atoms(&self) -> usize {
        self.positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::Invalid("system has no atoms".into()));
        }
        if self.positions.len() != self.species.len() {
            return Err(Error::Shape(format!(
                "{} positions but {} species",
                self.positions.len(),
                self.species.len()
            )));
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite coordinate".into()));
        }
        if let Some(f) = &self.forces {
            if f.len() != self.positions.len() {
                return Err(Error::Shape("force label count".into()));
            }
        }
        Ok(())
    }

    pub fn has_labels(&self) -> bool {
        self.energy.is_some() && self.forces.is_some()
    }

    /// Positions and force labels rotated by `g`; energies are unchanged.
    pub fn rotated(&self, g: &Rotation) -> Self {
        Self {
            positions: self.positions.iter().map(|&p| g.apply(p)).collect(),
            species: self.species.clone(),
            energy: self.energy,
            forces: self.forces.as_ref().map(|f| f.iter().map(|&v| g.apply(v)).collect()),
        }
    }

    pub fn translated(&self, shift: [f64; 3]) -> Self {
        let mut out = self.clone();
        for p in &mut out.positions {
            for (x, d) in p.iter_mut().zip(shift) {
                *x += d;
            }
        }
        out
    }
}

/// Directed edges `src → dst` with `0 < |r_src − r_dst| < r_cut`, sorted by
/// `(dst, src)`.
pub fn neighbor_list(positions: &[[f64; 3]], r_cut: f64) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    let rc2 = r_cut * r_cut;
    for (dst, a) in positions.iter().enumerate() {
        for (src, b) in positions.iter().enumerate() {
            if src == dst {
                continue;
            }
            let d2: f64 = (0..3).map(|c| (b[c] - a[c]).powi(2)).sum();
            if d2 == 0.0 {
                return Err(Error::Invalid(format!("atoms {dst} and {src} coincide")));
            }
            if d2 < rc2 {
                out.push((src, dst));
            }
        }
    }
    Ok(out)
}

/// Several systems concatenated into one disjoint graph.
#[derive(Debug, Clone)]
pub struct Batch {
    pub positions: Vec<[f64; 3]>,
    /// Embedding row of every atom.
    pub species: Vec<usize>,
    /// Owning system of every atom.
    pub structure: Vec<usize>,
    pub n_structures: usize,
    /// First atom of each system.
    pub atom_offsets: Vec<usize>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl Batch {
    pub fn new<'a>(config: &ModelConfig, systems: impl IntoIterator<Item = &'a AtomicSystem>) -> Result<Self> {
        let mut b = Batch {
            positions: Vec::new(),
            species: Vec::new(),
            structure: Vec::new(),
            n_structures: 0,
            atom_offsets: Vec::new(),
            src: Vec::new(),
            dst: Vec::new(),
        };
        for (s, sys) in systems.into_iter().enumerate() {
            sys.validate()?;
            let off = b.positions.len();
            b.atom_offsets.push(off);
            for (&p, &z) in sys.positions.iter().zip(&sys.species) {
                b.positions.push(p);
                b.species.push(config.species_index(z)?);
                b.structure.push(s);
            }
            for (src, dst) in neighbor_list(&sys.positions, config.r_cut)? {
                b.src.push(src + off);
                b.dst.push(dst + off);
            }
            b.n_structures = s + 1;
        }
        if b.n_structures == 0 {
            return Err(Error::Empty("batch has no systems".into()));
        }
        Ok(b)
    }

    pub fn n_atoms(&self) -> usize {
        self.positions.len()
    }

    pub fn n_edges(&self) -> usize {
        self.src.len()
    }

    /// Atom range of system `s`.
    pub fn atoms_of(&self, s: usize) -> std::ops::Range<usize> {
        let end = self.atom_offsets.get(s + 1).copied().unwrap_or(self.positions.len());
        self.atom_offsets[s]..end
    }
}
