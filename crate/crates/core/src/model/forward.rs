use std::collections::BTreeMap;
use std::sync::Arc;

use super::config::{GateAssociation, ModelConfig, ReadoutKind};
use super::params::{self as names, mid_mult, ModelParams};
use super::radial;
use super::system::Batch;
use crate::irreps::{IrrepsLayout, PruneMask};
use crate::poly::Polynomial;
use crate::so3::{clebsch_gordan, real_sh_polynomials, sh_index, sh_width};
use crate::tape::{Mat, Real, Tape, TrilinearForm, UnaryFn, Var};
use crate::{Error, Result};

/// One coupling path `(l1, l2, l3)`: edge harmonic `l1` times input order
/// `l2` into output order `l3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathPlan {
    pub l1: usize,
    pub l2: usize,
    pub l3: usize,
    /// First radial head of the path (one head per input channel).
    pub head_offset: usize,
    /// First channel of the path at order `l3` of the linear input.
    pub mid_offset: usize,
}

/// Static index structure of one interaction layer.
#[derive(Debug, Clone)]
pub struct LayerPlan {
    pub t: usize,
    pub input: IrrepsLayout,
    pub output: IrrepsLayout,
    /// Maskable tensor layout; equals `output` unless gated.
    pub probe: IrrepsLayout,
    /// Linear-input layout: the concatenated path outputs per order.
    pub mid: IrrepsLayout,
    pub paths: Vec<PathPlan>,
    pub n_heads: usize,
    pub gates: Option<GateAssociation>,
    form: Arc<TrilinearForm>,
}

/// Everything about a model that does not depend on weight values.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub config: ModelConfig,
    pub layers: Vec<LayerPlan>,
    sh: Arc<[Polynomial]>,
    norm2: Arc<[Polynomial]>,
    envelope: Arc<[Polynomial]>,
}

impl Architecture {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let sh_w = sh_width(config.sh_lmax);
        let mut layers = Vec::new();
        for t in 1..=config.n_layers() {
            let input = config.layers[t - 1].clone();
            let probe = config.mask_layout(t);
            let mid = IrrepsLayout::new((0..=probe.l_max()).map(|l| mid_mult(config, t, l)).collect());
            let mut paths = Vec::new();
            let (mut head, mut mid_next) = (0, vec![0; probe.l_max() + 1]);
            for (l1, l2, l3) in config.paths(t) {
                paths.push(PathPlan { l1, l2, l3, head_offset: head, mid_offset: mid_next[l3] });
                head += input.mult(l2);
                mid_next[l3] += input.mult(l2);
            }
            let mut form = TrilinearForm::new([head, sh_w, input.width(), mid.width()]);
            for p in &paths {
                let cg = clebsch_gordan(p.l1, p.l2, p.l3);
                let nz = cg.nonzero();
                for k in 0..input.mult(p.l2) {
                    for &(m1, m2, m3, c) in &nz {
                        let y = sh_index(p.l1, m1 as i64 - p.l1 as i64);
                        let hi = input.block(k, p.l2).start + m2;
                        let mi = mid.block(p.mid_offset + k, p.l3).start + m3;
                        form.push([p.head_offset + k, y, hi, mi], c);
                    }
                }
            }
            layers.push(LayerPlan {
                t,
                output: config.layers[t].clone(),
                gates: config.gates(t),
                input,
                probe,
                mid,
                paths,
                n_heads: head,
                form: Arc::new(form),
            });
        }
        let r2 = Polynomial::from_terms(
            3,
            vec![(1.0, vec![2, 0, 0]), (1.0, vec![0, 2, 0]), (1.0, vec![0, 0, 2])],
        );
        Ok(Self {
            config: config.clone(),
            layers,
            sh: real_sh_polynomials(config.sh_lmax).into(),
            norm2: vec![r2].into(),
            envelope: vec![radial::envelope_polynomial(config.r_cut)].into(),
        })
    }

    pub fn layer(&self, t: usize) -> &LayerPlan {
        &self.layers[t - 1]
    }
}

/// Model tensors placed on a tape.
#[derive(Debug, Clone)]
pub struct Weights {
    vars: BTreeMap<String, Var>,
}

impl Weights {
    /// Casts every tensor to `T`; `trainable` makes them differentiable leaves.
    pub fn load<T: Real>(tape: &mut Tape<T>, params: &ModelParams, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(name, m)| {
                let v = m.cast::<T>();
                (name.clone(), if trainable { tape.leaf(v) } else { tape.constant(v) })
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Name and node of every tensor, in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Nodes produced by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub positions: Var,
    /// `n_atoms × 1`.
    pub atom_energy: Var,
    /// `n_structures × 1`.
    pub structure_energy: Var,
    /// Sum over the batch, `1 × 1`.
    pub total_energy: Var,
    /// Per-atom contribution of each layer `t = 0..=T`.
    pub layer_energy: Vec<Var>,
    /// Maskable tensor of each layer `t = 0..=T` (mask layout).
    pub probes: Vec<Var>,
    /// Features `h^(t)` passed to the next layer.
    pub features: Vec<Var>,
}

fn range(a: usize, b: usize) -> Arc<[usize]> {
    (a..b).collect()
}

fn zeros<T: Real>(tape: &mut Tape<T>, r: usize, c: usize) -> Var {
    tape.constant(Mat::zeros(r, c))
}

fn add_opt<T: Real>(tape: &mut Tape<T>, acc: Option<Var>, v: Var) -> Option<Var> {
    Some(match acc {
        None => v,
        Some(a) => tape.add(a, v),
    })
}

/// Per-order channel mixing `out_{k l m} = Σ_k' W_l[k, k'] x_{k' l m}`.
///
/// `weight(l)` is `kout × kin`; with `species_of` set, it stacks one such
/// matrix per species and each atom uses its own.
pub(crate) fn block_linear<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    from: &IrrepsLayout,
    to: &IrrepsLayout,
    weight: impl Fn(usize) -> Option<Var>,
    species_of: Option<(&[usize], usize)>,
) -> Option<Var> {
    let n = tape.shape(x).0;
    let mut acc = None;
    for l in 0..=to.l_max().min(from.l_max()) {
        let (kin, kout) = (from.mult(l), to.mult(l));
        let Some(w) = weight(l) else { continue };
        if kin == 0 || kout == 0 {
            continue;
        }
        let dim = 2 * l + 1;
        let select = species_of.map(|(species, n_species)| {
            let mut m = Mat::zeros(n, n_species * kout);
            for (r, &s) in species.iter().enumerate() {
                m.row_mut(r)[s * kout..(s + 1) * kout].fill(T::one());
            }
            tape.constant(m)
        });
        for m in 0..dim {
            let cols_in: Arc<[usize]> = (0..kin).map(|k| from.block(k, l).start + m).collect();
            let xm = tape.gather_cols(x, cols_in);
            let mut ym = tape.matmul_t(xm, w, false, true);
            if let Some(sel) = select {
                ym = tape.mul(ym, sel);
            }
            let width = tape.shape(ym).1;
            let cols_out: Arc<[usize]> = (0..width).map(|c| to.block(c % kout, l).start + m).collect();
            let placed = tape.scatter_cols(ym, cols_out, to.width());
            acc = add_opt(tape, acc, placed);
        }
    }
    acc
}

fn mask_probe<T: Real>(tape: &mut Tape<T>, v: Var, masks: Option<&PruneMask>, t: usize) -> Result<Var> {
    let Some(mask) = masks else { return Ok(v) };
    if t >= mask.n_layers() {
        return Err(Error::LayoutMismatch(format!("mask has no layer {t}")));
    }
    let z = mask.layer(t);
    let (n, w) = tape.shape(v);
    if z.layout().width() != w {
        return Err(Error::LayoutMismatch(format!("mask layer {t} layout {} vs width {w}", z.layout())));
    }
    if z.is_all_ones() {
        return Ok(v);
    }
    let f: Vec<T> = z.column_factors().into_iter().map(T::from_f64).collect();
    let mut m = Mat::zeros(n, w);
    for r in 0..n {
        m.row_mut(r).copy_from_slice(&f);
    }
    let c = tape.constant(m);
    Ok(tape.mul(v, c))
}

/// Splits a gated pre-activation into (probe, features).
///
/// The probe holds silu of the scalars, tanh of the gates and the raw `l > 0`
/// blocks; the features multiply each block by its gate.
fn gate_probe<T: Real>(tape: &mut Tape<T>, x: Var, lp: &LayerPlan) -> Var {
    let g = lp.gates.as_ref().expect("gated layer");
    let (k0, ng) = (g.n_scalars(), g.n_gates());
    let (n, w) = tape.shape(x);
    let mut acc = None;
    if k0 > 0 {
        let s = tape.gather_cols(x, range(0, k0));
        let s = tape.unary(s, UnaryFn::SILU);
        let p = tape.scatter_cols(s, range(0, k0), w);
        acc = add_opt(tape, acc, p);
    }
    if ng > 0 {
        let s = tape.gather_cols(x, range(k0, k0 + ng));
        let s = tape.unary(s, UnaryFn::TANH);
        let p = tape.scatter_cols(s, range(k0, k0 + ng), w);
        acc = add_opt(tape, acc, p);
        let rest = range(k0 + ng, w);
        let b = tape.gather_cols(x, rest.clone());
        let p = tape.scatter_cols(b, rest, w);
        acc = add_opt(tape, acc, p);
    }
    acc.unwrap_or_else(|| zeros(tape, n, w))
}

fn apply_gates<T: Real>(tape: &mut Tape<T>, probe: Var, lp: &LayerPlan) -> Var {
    let g = lp.gates.as_ref().expect("gated layer");
    let (k0, ng) = (g.n_scalars(), g.n_gates());
    let n = tape.shape(probe).0;
    let out_w = lp.output.width();
    let mut acc = None;
    if k0 > 0 {
        let s = tape.gather_cols(probe, range(0, k0));
        let p = tape.scatter_cols(s, range(0, k0), out_w);
        acc = add_opt(tape, acc, p);
    }
    if ng > 0 {
        let mut block_cols = Vec::new();
        let mut gate_cols = Vec::new();
        let mut out_cols = Vec::new();
        for &(l, k) in g.blocks() {
            let gate = g.gate_channel(k, l).expect("gate channel");
            for (pc, oc) in lp.probe.block(k, l).zip(lp.output.block(k, l)) {
                block_cols.push(pc);
                gate_cols.push(gate);
                out_cols.push(oc);
            }
        }
        let b = tape.gather_cols(probe, block_cols);
        let gv = tape.gather_cols(probe, gate_cols);
        let gated = tape.mul(b, gv);
        let p = tape.scatter_cols(gated, out_cols, out_w);
        acc = add_opt(tape, acc, p);
    }
    acc.unwrap_or_else(|| zeros(tape, n, out_w))
}

/// Records the energy of every system in `batch`.
///
/// `positions` must be an `n_atoms × 3` node holding `batch.positions`.
/// With `masks`, each layer's probe tensor is multiplied by its block mask
/// before use.
pub fn forward<T: Real>(
    arch: &Architecture,
    tape: &mut Tape<T>,
    w: &Weights,
    batch: &Batch,
    positions: Var,
    masks: Option<&PruneMask>,
) -> Result<ForwardOutput> {
    let cfg = &arch.config;
    let n = batch.n_atoms();
    let ne = batch.n_edges();
    if tape.shape(positions) != (n, 3) {
        return Err(Error::Shape(format!("positions node {:?} for {n} atoms", tape.shape(positions))));
    }
    if let Some(m) = masks {
        if m.n_layers() != cfg.layers.len() {
            return Err(Error::LayoutMismatch(format!(
                "mask has {} layers, model has {}",
                m.n_layers(),
                cfg.layers.len()
            )));
        }
    }
    let species: Arc<[usize]> = batch.species.clone().into();
    let src: Arc<[usize]> = batch.src.clone().into();
    let dst: Arc<[usize]> = batch.dst.clone().into();

    // Edge geometry, shared by all layers.
    let mut edge = None;
    if ne > 0 {
        let a = tape.gather_rows(positions, src.clone());
        let b = tape.gather_rows(positions, dst.clone());
        let vec = tape.sub(a, b);
        let r2 = tape.row_poly(vec, &arch.norm2);
        let r = tape.unary(r2, UnaryFn::sqrt());
        let rinv = tape.unary(r2, UnaryFn::Pow { p: -0.5, coef: 1.0 });
        let rinv3 = tape.gather_cols(rinv, vec![0usize; 3]);
        let unit = tape.mul(vec, rinv3);
        let y = tape.row_poly(unit, &arch.sh);
        let nb = cfg.n_radial_basis;
        let rr = tape.gather_cols(r, vec![0usize; nb]);
        let mut centers = Mat::zeros(ne, nb);
        let mu: Vec<T> = radial::centers(cfg).into_iter().map(T::from_f64).collect();
        for e in 0..ne {
            centers.row_mut(e).copy_from_slice(&mu);
        }
        let centers = tape.constant(centers);
        let d = tape.sub(rr, centers);
        let d2 = tape.mul(d, d);
        let sigma = radial::width(cfg);
        let gauss = tape.unary(d2, UnaryFn::Exp { scale: -0.5 / (sigma * sigma), coef: 1.0 });
        let env = tape.row_poly(r, &arch.envelope);
        let env = tape.gather_cols(env, vec![0usize; nb]);
        let rb = tape.mul(gauss, env);
        edge = Some((y, rb));
    }

    let k_emb = cfg.layers[0].mult(0);
    let h0 = match w.get(names::EMBEDDING) {
        Some(e) => tape.gather_rows(e, species.clone()),
        None => zeros(tape, n, k_emb),
    };
    let h0 = mask_probe(tape, h0, masks, 0)?;
    let self_e = match w.get(names::SELF_ENERGY) {
        Some(e) => tape.gather_rows(e, species.clone()),
        None => zeros(tape, n, 1),
    };
    let mut probes = vec![h0];
    let mut features = vec![h0];
    let mut layer_energy = vec![self_e];
    let mut h = h0;
    let t_last = cfg.n_layers();
    for lp in &arch.layers {
        let t = lp.t;
        let mut x = None;
        if let (Some((y, rb)), Some(w1), Some(w2)) =
            (edge, w.get(&names::radial_w1(t)), w.get(&names::radial_w2(t)))
        {
            if lp.mid.width() > 0 {
                let hid = tape.matmul(rb, w1);
                let hid = tape.unary(hid, UnaryFn::SILU);
                let heads = tape.matmul(hid, w2);
                let hsrc = tape.gather_rows(h, src.clone());
                let mid_e = tape.trilinear(&lp.form, 3, [Some(heads), Some(y), Some(hsrc), None]);
                let mid = tape.scatter_rows(mid_e, dst.clone(), n);
                let mid = tape.scale(mid, 1.0 / cfg.avg_num_neighbors);
                x = block_linear(tape, mid, &lp.mid, &lp.probe, |l| w.get(&names::linear(t, l)), None);
            }
        }
        if t >= 2 {
            let res = block_linear(
                tape,
                h,
                &lp.input,
                &lp.probe,
                |l| w.get(&names::residual(t, l)),
                Some((&batch.species, cfg.n_species())),
            );
            if let Some(r) = res {
                x = add_opt(tape, x, r);
            }
        }
        let x = x.unwrap_or_else(|| zeros(tape, n, lp.probe.width()));
        let probe = if lp.gates.is_some() { gate_probe(tape, x, lp) } else { x };
        let probe = mask_probe(tape, probe, masks, t)?;
        h = if lp.gates.is_some() { apply_gates(tape, probe, lp) } else { probe };
        probes.push(probe);
        features.push(h);

        let k0 = lp.output.mult(0);
        let e = if k0 == 0 {
            zeros(tape, n, 1)
        } else {
            let s = tape.gather_cols(h, range(0, k0));
            if t < t_last || cfg.final_readout == ReadoutKind::Linear {
                match w.get(&names::readout(t)) {
                    Some(r) => tape.matmul_t(s, r, false, true),
                    None => zeros(tape, n, 1),
                }
            } else {
                match (w.get(&names::readout_w1(t)), w.get(&names::readout_w2(t))) {
                    (Some(w1), Some(w2)) => {
                        let z = tape.matmul_t(s, w1, false, true);
                        let z = tape.unary(z, UnaryFn::SILU);
                        tape.matmul_t(z, w2, false, true)
                    }
                    _ => zeros(tape, n, 1),
                }
            }
        };
        layer_energy.push(e);
    }
    let mut atom_energy = layer_energy[0];
    for &e in &layer_energy[1..] {
        atom_energy = tape.add(atom_energy, e);
    }
    let structure_energy = tape.scatter_rows(atom_energy, batch.structure.clone(), batch.n_structures);
    let total_energy = tape.sum(structure_energy);
    Ok(ForwardOutput { positions, atom_energy, structure_energy, total_energy, layer_energy, probes, features })
}
