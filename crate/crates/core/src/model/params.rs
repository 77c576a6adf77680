use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, ReadoutKind};
use crate::tape::Mat;
use crate::{Error, Result};

/// Declared shape and initialisation fan-in of one named tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorSpec {
    pub rows: usize,
    pub cols: usize,
    /// `None` for tensors initialised to zero.
    pub fan_in: Option<usize>,
}

pub fn radial_w1(t: usize) -> String {
    format!("layer{t}.radial.w1")
}
pub fn radial_w2(t: usize) -> String {
    format!("layer{t}.radial.w2")
}
pub fn linear(t: usize, l: usize) -> String {
    format!("layer{t}.linear.l{l}")
}
pub fn residual(t: usize, l: usize) -> String {
    format!("layer{t}.residual.l{l}")
}
pub fn readout(t: usize) -> String {
    format!("layer{t}.readout")
}
pub fn readout_w1(t: usize) -> String {
    format!("layer{t}.readout.w1")
}
pub fn readout_w2(t: usize) -> String {
    format!("layer{t}.readout.w2")
}
pub const EMBEDDING: &str = "embedding";
pub const SELF_ENERGY: &str = "self_energy";

/// Number of radial-MLP output heads of layer `t`: one per (path, input channel).
pub fn n_heads(config: &ModelConfig, t: usize) -> usize {
    config.paths(t).iter().map(|&(_, l2, _)| config.layers[t - 1].mult(l2)).sum()
}

/// Channels per order entering the equivariant linear of layer `t`.
pub fn mid_mult(config: &ModelConfig, t: usize, l3: usize) -> usize {
    config.paths(t).iter().filter(|p| p.2 == l3).map(|&(_, l2, _)| config.layers[t - 1].mult(l2)).sum()
}

/// Every tensor the configuration declares, keyed by name.
///
/// Tensors with a zero dimension are not declared.
pub fn tensor_specs(config: &ModelConfig) -> BTreeMap<String, TensorSpec> {
    let mut out = BTreeMap::new();
    let mut put = |name: String, rows: usize, cols: usize, fan_in: Option<usize>| {
        if rows > 0 && cols > 0 {
            out.insert(name, TensorSpec { rows, cols, fan_in });
        }
    };
    let s = config.n_species();
    let t_last = config.n_layers();
    put(EMBEDDING.into(), s, config.layers[0].mult(0), Some(1));
    put(SELF_ENERGY.into(), s, 1, None);
    for t in 1..=t_last {
        let input = &config.layers[t - 1];
        let probe = config.mask_layout(t);
        let h = config.radial_hidden;
        put(radial_w1(t), config.n_radial_basis, h, Some(config.n_radial_basis));
        put(radial_w2(t), h, n_heads(config, t), Some(h));
        for l in 0..=probe.l_max() {
            let mid = mid_mult(config, t, l);
            put(linear(t, l), probe.mult(l), mid, Some(mid));
            if t >= 2 {
                put(residual(t, l), s * probe.mult(l), input.mult(l), Some(input.mult(l)));
            }
        }
        let k0 = config.layers[t].mult(0);
        if t < t_last || config.final_readout == ReadoutKind::Linear {
            put(readout(t), 1, k0, Some(k0));
        } else {
            put(readout_w1(t), config.readout_hidden, k0, Some(k0));
            put(readout_w2(t), 1, config.readout_hidden, Some(config.readout_hidden));
        }
    }
    out
}

/// Named `f64` master weights plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Mat<f64>>,
}

impl ModelParams {
    /// Fresh weights, deterministic in `config.seed`.
    ///
    /// Each tensor is drawn from `U(−a, a)` with `a = sqrt(3 / fan_in)` (unit
    /// variance times `1/fan_in`), in name order from one seeded stream. The
    /// self-energies start at zero.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = tensor_specs(config)
            .into_iter()
            .map(|(name, spec)| (name, init_tensor(&spec, &mut rng)))
            .collect();
        Ok(Self { config: config.clone(), tensors })
    }

    /// Checks that the stored tensors are exactly the declared ones.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = tensor_specs(&self.config);
        for (name, spec) in &specs {
            match self.tensors.get(name) {
                None => return Err(Error::Shape(format!("missing tensor {name}"))),
                Some(m) if m.shape() != (spec.rows, spec.cols) => {
                    return Err(Error::Shape(format!(
                        "{name}: stored {:?}, declared {:?}",
                        m.shape(),
                        (spec.rows, spec.cols)
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !specs.contains_key(*k)) {
            return Err(Error::Shape(format!("undeclared tensor {extra}")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Mat<f64>> {
        self.tensors.get(name)
    }

    pub fn n_params(&self) -> usize {
        self.tensors.values().map(|m| m.data.len()).sum()
    }
}

pub(crate) fn init_tensor(spec: &TensorSpec, rng: &mut ChaCha8Rng) -> Mat<f64> {
    let n = spec.rows * spec.cols;
    let data = match spec.fan_in {
        None => vec![0.0; n],
        Some(fan_in) => {
            let a = (3.0 / fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-a..a)).collect()
        }
    };
    Mat::from_vec(spec.rows, spec.cols, data)
}
