use std::collections::BTreeMap;

use crate::irreps::{ChannelMap, PruneMask};
use crate::model::params::{self as names, tensor_specs};
use crate::model::{Architecture, ModelConfig, ModelParams, PathPlan};
use crate::tape::Mat;
use crate::{Error, Result};

/// Channel maps induced by a mask.
#[derive(Debug, Clone)]
pub struct SliceMaps {
    /// Old → new map of the features `h^(t)` (gates excluded).
    pub features: Vec<ChannelMap>,
    /// Old → new map of the mask layout of each layer (gates included).
    pub probes: Vec<ChannelMap>,
    pub config: ModelConfig,
}

impl SliceMaps {
    /// Derives the target architecture from `mask`.
    ///
    /// Fails when a retained `l > 0` block of a gated layer has lost its
    /// gate. Gates of dropped blocks are removed with their blocks.
    pub fn new(config: &ModelConfig, mask: &PruneMask) -> Result<Self> {
        let layouts = config.mask_layouts();
        if mask.n_layers() != layouts.len() {
            return Err(Error::LayoutMismatch(format!(
                "mask has {} layers, model has {}",
                mask.n_layers(),
                layouts.len()
            )));
        }
        let mut features = Vec::new();
        let mut probes = Vec::new();
        for (t, lay) in layouts.iter().enumerate() {
            let z = mask.layer(t);
            if !z.layout().same_shape(lay) {
                return Err(Error::LayoutMismatch(format!("mask layer {t} is {} but the model needs {lay}", z.layout())));
            }
            let h_lay = &config.layers[t];
            let gates = config.gates(t);
            let n_scalars = h_lay.mult(0);
            let mut h_kept: Vec<Vec<usize>> = Vec::new();
            for l in 0..=h_lay.l_max() {
                h_kept.push((0..h_lay.mult(l)).filter(|&k| z.keep(k, l)).collect());
            }
            let mut p_kept = h_kept.clone();
            if let Some(g) = &gates {
                for &(l, k) in g.blocks() {
                    let c = g.gate_channel(k, l).expect("listed block");
                    if z.keep(k, l) {
                        if !z.keep(c, 0) {
                            return Err(Error::Invalid(format!(
                                "layer {t}: block (k = {k}, l = {l}) is kept but its gate is dropped"
                            )));
                        }
                        p_kept[0].push(c);
                    }
                }
                debug_assert!(p_kept[0].iter().skip(h_kept[0].len()).all(|&c| c >= n_scalars));
            }
            features.push(ChannelMap::from_kept(h_lay, h_kept)?);
            probes.push(ChannelMap::from_kept(lay, p_kept)?);
        }
        let mut new_config = config.clone();
        new_config.layers = features.iter().map(ChannelMap::target_layout).collect();
        new_config.validate()?;
        Ok(Self { features, probes, config: new_config })
    }
}

fn select(m: &Mat<f64>, rows: &[usize], cols: &[usize]) -> Mat<f64> {
    m.select_rows(rows).select_cols(cols)
}

/// Old mid-channel index for every new mid channel of order `l3`.
fn mid_sources(old: &[PathPlan], new: &[PathPlan], l3: usize, in_map: &ChannelMap) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for p in new.iter().filter(|p| p.l3 == l3) {
        let q = old
            .iter()
            .find(|q| (q.l1, q.l2, q.l3) == (p.l1, p.l2, p.l3))
            .ok_or_else(|| Error::Invalid(format!("path {:?} is not in the source model", (p.l1, p.l2, p.l3))))?;
        out.extend(in_map.kept(p.l2).iter().map(|&k| q.mid_offset + k));
    }
    Ok(out)
}

/// Old radial-head index for every new head.
fn head_sources(old: &[PathPlan], new: &[PathPlan], in_map: &ChannelMap) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for p in new {
        let q = old
            .iter()
            .find(|q| (q.l1, q.l2, q.l3) == (p.l1, p.l2, p.l3))
            .ok_or_else(|| Error::Invalid(format!("path {:?} is not in the source model", (p.l1, p.l2, p.l3))))?;
        out.extend(in_map.kept(p.l2).iter().map(|&k| q.head_offset + k));
    }
    Ok(out)
}

/// Coupling paths per layer after slicing with `mask`.
pub fn reconfigured_paths(config: &ModelConfig, mask: &PruneMask) -> Result<Vec<Vec<(usize, usize, usize)>>> {
    let maps = SliceMaps::new(config, mask)?;
    Ok((1..maps.config.layers.len()).map(|t| maps.config.paths(t)).collect())
}

/// Dense model of the retained blocks: weight slicing plus tensor-product
/// reconfiguration. The embedding keeps its retained columns.
pub fn slice_model(params: &ModelParams, mask: &PruneMask) -> Result<ModelParams> {
    params.validate()?;
    let cfg = &params.config;
    let maps = SliceMaps::new(cfg, mask)?;
    let new_cfg = maps.config.clone();
    let old_arch = Architecture::new(cfg)?;
    let new_arch = Architecture::new(&new_cfg)?;
    let s = cfg.n_species();
    let all_species: Vec<usize> = (0..s).collect();
    let mut tensors = BTreeMap::new();
    let mut put = |name: String, m: Mat<f64>| {
        tensors.insert(name, m);
    };
    let get = |name: &str| params.get(name).ok_or_else(|| Error::Shape(format!("missing tensor {name}")));

    if let Some(e) = params.get(names::EMBEDDING) {
        put(names::EMBEDDING.into(), select(e, &all_species, maps.features[0].kept(0)));
    }
    put(names::SELF_ENERGY.into(), get(names::SELF_ENERGY)?.clone());
    let t_last = cfg.n_layers();
    for t in 1..=t_last {
        let (old, new) = (old_arch.layer(t), new_arch.layer(t));
        let in_map = &maps.features[t - 1];
        let p_map = &maps.probes[t];
        put(names::radial_w1(t), get(&names::radial_w1(t))?.clone());
        if new.n_heads > 0 {
            let w2 = get(&names::radial_w2(t))?;
            let heads = head_sources(&old.paths, &new.paths, in_map)?;
            put(names::radial_w2(t), select(w2, &(0..w2.rows).collect::<Vec<_>>(), &heads));
        }
        for l in 0..=new.probe.l_max() {
            if new.probe.mult(l) > 0 && new.mid.mult(l) > 0 {
                let w = get(&names::linear(t, l))?;
                let cols = mid_sources(&old.paths, &new.paths, l, in_map)?;
                put(names::linear(t, l), select(w, p_map.kept(l), &cols));
            }
            if t >= 2 && new.probe.mult(l) > 0 && new.input.mult(l) > 0 {
                let w = get(&names::residual(t, l))?;
                let kout = old.probe.mult(l);
                let rows: Vec<usize> =
                    (0..s).flat_map(|sp| p_map.kept(l).iter().map(move |&k| sp * kout + k)).collect();
                put(names::residual(t, l), select(w, &rows, in_map.kept(l)));
            }
        }
        let scalars = maps.features[t].kept(0);
        if !scalars.is_empty() {
            for name in [names::readout(t), names::readout_w1(t)] {
                if let Some(w) = params.get(&name) {
                    put(name, select(w, &(0..w.rows).collect::<Vec<_>>(), scalars));
                }
            }
            if let Some(w) = params.get(&names::readout_w2(t)) {
                put(names::readout_w2(t), w.clone());
            }
        }
    }
    // declared tensors only: drops heads and maps of vanished orders
    let specs = tensor_specs(&new_cfg);
    tensors.retain(|k, _| specs.contains_key(k));
    let out = ModelParams { config: new_cfg, tensors };
    out.validate()?;
    Ok(out)
}
