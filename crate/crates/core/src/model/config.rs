use serde::{Deserialize, Serialize};

use crate::irreps::IrrepsLayout;
use crate::so3::triangle;
use crate::{Error, Result};

/// Arithmetic used by the forward pass. Master weights are always `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Fp64,
    Fp32,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp64" => Ok(Precision::Fp64),
            "fp32" => Ok(Precision::Fp32),
            _ => Err(Error::Config(format!("unknown precision {s:?} (fp64 or fp32)"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Fp64 => "fp64",
            Precision::Fp32 => "fp32",
        })
    }
}

/// Energy readout of the last layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReadoutKind {
    #[default]
    Mlp,
    Linear,
}

/// Architecture descriptor; every parameter shape is a function of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Atomic numbers, in embedding-row order.
    pub species: Vec<u32>,
    /// Feature layouts `h^(0) ..= h^(T)`; `layers[0]` is the scalar embedding.
    pub layers: Vec<IrrepsLayout>,
    /// Highest order of the edge spherical harmonics.
    pub sh_lmax: usize,
    pub r_cut: f64,
    pub n_radial_basis: usize,
    pub radial_hidden: usize,
    /// Constant divisor of the aggregated messages.
    pub avg_num_neighbors: f64,
    pub gated: bool,
    pub readout_hidden: usize,
    pub final_readout: ReadoutKind,
    pub precision: Precision,
    pub seed: u64,
}

impl ModelConfig {
    /// `n_layers` interaction layers with `channels` channels at every order up
    /// to `l_max`; edge harmonics up to `l_max`.
    pub fn uniform(n_layers: usize, l_max: usize, channels: usize, species: Vec<u32>) -> Self {
        let mut layers = vec![IrrepsLayout::scalars(channels)];
        layers.extend((0..n_layers).map(|_| IrrepsLayout::uniform(l_max, channels)));
        Self {
            species,
            layers,
            sh_lmax: l_max,
            r_cut: 3.0,
            n_radial_basis: 8,
            radial_hidden: 16,
            avg_num_neighbors: 8.0,
            gated: false,
            readout_hidden: 16,
            final_readout: ReadoutKind::Mlp,
            precision: Precision::Fp64,
            seed: 0,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    pub fn species_index(&self, z: u32) -> Result<usize> {
        self.species.iter().position(|&s| s == z).ok_or(Error::UnknownSpecies(z))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers.len() < 2 {
            return bad("at least one interaction layer is required");
        }
        if self.species.is_empty() {
            return bad("species list is empty");
        }
        let mut sorted = self.species.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.species.len() {
            return bad("duplicate species");
        }
        if !(self.r_cut > 0.0 && self.r_cut.is_finite()) {
            return bad("r_cut must be positive");
        }
        if !(self.avg_num_neighbors > 0.0) {
            return bad("avg_num_neighbors must be positive");
        }
        if self.n_radial_basis == 0 || self.radial_hidden == 0 {
            return bad("radial basis and hidden widths must be positive");
        }
        if self.layers[0].mults().iter().skip(1).any(|&k| k > 0) {
            return bad("the embedding layout must be scalars only");
        }
        if self.layers.last().map_or(0, |l| l.mult(0)) == 0 {
            return bad("the final layer needs l = 0 channels for the readout");
        }
        if self.final_readout == ReadoutKind::Mlp && self.readout_hidden == 0 {
            return bad("readout_hidden must be positive");
        }
        Ok(())
    }

    /// Receptive-field radius: information travels at most `r_cut` per layer.
    pub fn receptive_field(&self) -> f64 {
        self.n_layers() as f64 * self.r_cut
    }

    /// Layout of the maskable tensor of layer `t` (gate scalars appended to
    /// `l = 0` in gated configurations).
    pub fn mask_layout(&self, t: usize) -> IrrepsLayout {
        match self.gates(t) {
            Some(g) => {
                let mut mult = self.layers[t].mults().to_vec();
                mult[0] += g.n_gates();
                IrrepsLayout::new(mult)
            }
            None => self.layers[t].clone(),
        }
    }

    pub fn mask_layouts(&self) -> Vec<IrrepsLayout> {
        (0..self.layers.len()).map(|t| self.mask_layout(t)).collect()
    }

    /// Gate association of layer `t`, if gated.
    pub fn gates(&self, t: usize) -> Option<GateAssociation> {
        (self.gated && t >= 1).then(|| GateAssociation::for_layout(&self.layers[t]))
    }

    /// Tensor-product paths of layer `t ≥ 1`.
    pub fn paths(&self, t: usize) -> Vec<(usize, usize, usize)> {
        let input = &self.layers[t - 1];
        let output = self.mask_layout(t);
        let mut out = Vec::new();
        for l3 in output.active_orders() {
            for l1 in 0..=self.sh_lmax {
                for l2 in input.active_orders() {
                    if triangle(l1, l2, l3) {
                        out.push((l1, l2, l3));
                    }
                }
            }
        }
        out
    }
}

/// Links each `l > 0` block of a layer to its gate scalar.
///
/// Gates sit after the `n_scalars` ordinary scalars at `l = 0` of the mask
/// layout, one per block, in block order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateAssociation {
    n_scalars: usize,
    blocks: Vec<(usize, usize)>,
}

impl GateAssociation {
    pub fn for_layout(layout: &IrrepsLayout) -> Self {
        Self { n_scalars: layout.mult(0), blocks: layout.blocks().filter(|&(l, _)| l > 0).collect() }
    }

    pub fn n_scalars(&self) -> usize {
        self.n_scalars
    }

    pub fn n_gates(&self) -> usize {
        self.blocks.len()
    }

    /// Gated `(l, k)` blocks in gate order.
    pub fn blocks(&self) -> &[(usize, usize)] {
        &self.blocks
    }

    /// `l = 0` channel of the mask layout gating block `(k, l)`.
    pub fn gate_channel(&self, k: usize, l: usize) -> Option<usize> {
        self.blocks.iter().position(|&b| b == (l, k)).map(|g| self.n_scalars + g)
    }

    /// Block gated by `l = 0` channel `c`, if `c` is a gate.
    pub fn gated_block(&self, c: usize) -> Option<(usize, usize)> {
        c.checked_sub(self.n_scalars).and_then(|g| self.blocks.get(g).copied())
    }
}
