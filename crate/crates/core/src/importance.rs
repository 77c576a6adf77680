//! Per-block importance scores accumulated over a calibration set.
//!
//! Every table is indexed like the model's mask layouts: layer `t`, order
//! `l`, channel `k` (gate scalars included at `l = 0` in gated models).

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::irreps::{FeatureTensor, IrrepsLayout, PruneMask};
use crate::model::{forward, params as names, positions_mat, Architecture, AtomicSystem, Batch, ModelParams, Weights};
use crate::tape::Tape;
use crate::{Error, Result};

/// Structures per tape when scoring.
const CHUNK: usize = 16;

/// Which score to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    /// `|Σ_{j,m} ∂E/∂h · h|` per structure, averaged over structures.
    GradientActivation,
    /// `Σ_j ‖h_j‖` per block, averaged over structures.
    Activation,
    /// Norm of the weights writing into (or reading per channel from) a block.
    Magnitude,
    Random,
}

impl std::str::FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad-act" => Ok(Criterion::GradientActivation),
            "activation" => Ok(Criterion::Activation),
            "magnitude" => Ok(Criterion::Magnitude),
            "random" => Ok(Criterion::Random),
            _ => Err(Error::Config(format!("unknown criterion {s:?} (grad-act, activation, magnitude, random)"))),
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::GradientActivation => "grad-act",
            Criterion::Activation => "activation",
            Criterion::Magnitude => "magnitude",
            Criterion::Random => "random",
        })
    }
}

/// Scores per layer, `scores[t][l][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub layouts: Vec<IrrepsLayout>,
    pub scores: Vec<Vec<Vec<f64>>>,
    /// Structures averaged over (0 for data-free criteria).
    pub n_samples: usize,
}

impl ImportanceTable {
    pub fn zeros(layouts: &[IrrepsLayout]) -> Self {
        let scores = layouts.iter().map(|lay| lay.mults().iter().map(|&n| vec![0.0; n]).collect()).collect();
        Self { layouts: layouts.to_vec(), scores, n_samples: 0 }
    }

    pub fn get(&self, t: usize, l: usize, k: usize) -> f64 {
        self.scores[t][l][k]
    }

    /// All `(t, l, k, score)` entries in layer, order, channel order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        self.scores.iter().enumerate().flat_map(|(t, ls)| {
            ls.iter().enumerate().flat_map(move |(l, ks)| ks.iter().enumerate().map(move |(k, &s)| (t, l, k, s)))
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.entries().zip(other.entries()).map(|(a, b)| (a.3 - b.3).abs()).fold(0.0, f64::max)
    }

    /// `layer l k score` lines; scores in round-trip precision.
    pub fn to_text(&self) -> String {
        let mut s = format!("# layer l k score (samples {})\n", self.n_samples);
        for (t, l, k, v) in self.entries() {
            let _ = writeln!(s, "{t} {l} {k} {v:?}");
        }
        s
    }

    /// Parses [`ImportanceTable::to_text`]; layouts are inferred from the
    /// listed blocks, which must cover `k = 0..n` for every `(t, l)` present.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, usize, usize, f64)> = Vec::new();
        let mut n_samples = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.split("(samples ").nth(1).and_then(|r| r.trim_end_matches(')').parse().ok()) {
                    n_samples = v;
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, got {}", f.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|e| err(format!("{s:?}: {e}")));
            let score: f64 = f[3].parse().map_err(|e| err(format!("{:?}: {e}", f[3])))?;
            if !(score >= 0.0) {
                return Err(err(format!("score {score} is negative or not a number")));
            }
            rows.push((int(f[0])?, int(f[1])?, int(f[2])?, score));
        }
        if rows.is_empty() {
            return Err(Error::Empty("importance table has no entries".into()));
        }
        let n_layers = rows.iter().map(|r| r.0).max().unwrap_or(0) + 1;
        let mut scores: Vec<Vec<Vec<Option<f64>>>> = vec![Vec::new(); n_layers];
        for &(t, l, k, v) in &rows {
            let ls = &mut scores[t];
            if ls.len() <= l {
                ls.resize(l + 1, Vec::new());
            }
            if ls[l].len() <= k {
                ls[l].resize(k + 1, None);
            }
            if ls[l][k].replace(v).is_some() {
                return Err(Error::Invalid(format!("block ({t}, {l}, {k}) listed twice")));
            }
        }
        let mut layouts = Vec::new();
        let mut out = Vec::new();
        for (t, ls) in scores.into_iter().enumerate() {
            let mut layer = Vec::new();
            for (l, ks) in ls.into_iter().enumerate() {
                let vals: Option<Vec<f64>> = ks.into_iter().collect();
                layer.push(vals.ok_or_else(|| Error::Invalid(format!("layer {t} order {l} has gaps")))?);
            }
            if layer.is_empty() {
                layer.push(Vec::new());
            }
            layouts.push(IrrepsLayout::new(layer.iter().map(Vec::len).collect()));
            out.push(layer);
        }
        Ok(Self { layouts, scores: out, n_samples })
    }

    /// Checks the block grid against model mask layouts and pads orders the
    /// text form could not express.
    pub fn conform(mut self, layouts: &[IrrepsLayout]) -> Result<Self> {
        let ok = self.layouts.len() == layouts.len()
            && self.layouts.iter().zip(layouts).all(|(a, b)| a.same_shape(b));
        if !ok {
            return Err(Error::LayoutMismatch("importance table does not match the model's block grid".into()));
        }
        for (ls, lay) in self.scores.iter_mut().zip(layouts) {
            ls.resize(lay.mults().len(), Vec::new());
        }
        self.layouts = layouts.to_vec();
        Ok(self)
    }

    /// Scores of the blocks kept by `mask`, renumbered as in the sliced model.
    pub fn restrict(&self, mask: &PruneMask) -> Result<Self> {
        if mask.n_layers() != self.layouts.len()
            || mask.layers().iter().zip(&self.layouts).any(|(m, lay)| !m.layout().same_shape(lay))
        {
            return Err(Error::LayoutMismatch("mask does not match the importance table".into()));
        }
        let mut scores = Vec::with_capacity(self.scores.len());
        let mut layouts = Vec::with_capacity(self.scores.len());
        for (t, ls) in self.scores.iter().enumerate() {
            let z = mask.layer(t);
            let layer: Vec<Vec<f64>> =
                ls.iter().enumerate().map(|(l, ks)| ks.iter().enumerate().filter(|&(k, _)| z.keep(k, l)).map(|(_, &v)| v).collect()).collect();
            layouts.push(IrrepsLayout::new(layer.iter().map(Vec::len).collect()));
            scores.push(layer);
        }
        Ok(Self { layouts, scores, n_samples: self.n_samples })
    }

    /// Drops layers from `n_layers` on.
    pub fn truncate(&mut self, n_layers: usize) {
        self.layouts.truncate(n_layers);
        self.scores.truncate(n_layers);
    }
}

/// Probe tensors and their energy gradients for one structure.
#[derive(Debug, Clone)]
pub struct ProbeDump {
    pub features: Vec<FeatureTensor>,
    pub gradients: Vec<FeatureTensor>,
}

/// Per-structure probe activations and `∂E/∂probe`, in input order.
pub fn dump_probes(params: &ModelParams, systems: &[AtomicSystem]) -> Result<Vec<ProbeDump>> {
    let arch = Architecture::new(&params.config)?;
    let layouts = params.config.mask_layouts();
    let mut out = Vec::with_capacity(systems.len());
    for chunk in systems.chunks(CHUNK) {
        let batch = Batch::new(&params.config, chunk)?;
        let mut tape = Tape::<f64>::new();
        // leaf weights make every probe differentiable, layer 0 included
        let w = Weights::load(&mut tape, params, true);
        let pos = tape.constant(positions_mat(&batch.positions));
        let fw = forward(&arch, &mut tape, &w, &batch, pos, None)?;
        let grads = tape.grad(fw.total_energy, &fw.probes, false)?;
        for s in 0..batch.n_structures {
            let atoms: Vec<usize> = batch.atoms_of(s).collect();
            let take = |v| tape.value(v).select_rows(&atoms);
            let features = fw
                .probes
                .iter()
                .zip(&layouts)
                .map(|(&v, lay)| FeatureTensor::new(lay.clone(), take(v)))
                .collect::<Result<Vec<_>>>()?;
            let gradients = grads
                .iter()
                .zip(&layouts)
                .map(|(&v, lay)| FeatureTensor::new(lay.clone(), take(v)))
                .collect::<Result<Vec<_>>>()?;
            out.push(ProbeDump { features, gradients });
        }
    }
    Ok(out)
}

/// `Σ_{j,m} g·h` of every block of one structure.
pub fn block_contractions(dump: &ProbeDump) -> Vec<Vec<Vec<f64>>> {
    dump.features
        .iter()
        .zip(&dump.gradients)
        .map(|(h, g)| {
            let lay = h.layout();
            lay.mults()
                .iter()
                .enumerate()
                .map(|(l, &n)| {
                    (0..n)
                        .map(|k| {
                            let cols = lay.block(k, l);
                            let mut acc = 0.0;
                            for j in 0..h.n_atoms() {
                                let hv = &h.values().row(j)[cols.clone()];
                                let gv = &g.values().row(j)[cols.clone()];
                                acc += hv.iter().zip(gv).map(|(a, b)| a * b).sum::<f64>();
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn require_calibration(calib: &[AtomicSystem]) -> Result<()> {
    if calib.is_empty() {
        Err(Error::Empty("calibration set is empty".into()))
    } else {
        Ok(())
    }
}

/// Gradient × activation criterion, averaged over structures in input order.
pub fn score_gradient_activation(params: &ModelParams, calib: &[AtomicSystem]) -> Result<ImportanceTable> {
    require_calibration(calib)?;
    let mut table = ImportanceTable::zeros(&params.config.mask_layouts());
    for dump in dump_probes(params, calib)? {
        let c = block_contractions(&dump);
        accumulate(&mut table, |t, l, k| c[t][l][k].abs());
    }
    finish(&mut table, calib.len());
    Ok(table)
}

/// Activation-norm criterion: `Σ_j ‖h_{j,kl}‖₂`, averaged over structures.
pub fn score_activation(params: &ModelParams, calib: &[AtomicSystem]) -> Result<ImportanceTable> {
    require_calibration(calib)?;
    let mut table = ImportanceTable::zeros(&params.config.mask_layouts());
    for dump in dump_probes(params, calib)? {
        let f = &dump.features;
        accumulate(&mut table, |t, l, k| {
            let cols = f[t].layout().block(k, l);
            (0..f[t].n_atoms())
                .map(|j| f[t].values().row(j)[cols.clone()].iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum()
        });
    }
    finish(&mut table, calib.len());
    Ok(table)
}

fn accumulate(table: &mut ImportanceTable, score: impl Fn(usize, usize, usize) -> f64) {
    for (t, ls) in table.scores.iter_mut().enumerate() {
        for (l, ks) in ls.iter_mut().enumerate() {
            for (k, v) in ks.iter_mut().enumerate() {
                *v += score(t, l, k);
            }
        }
    }
}

fn finish(table: &mut ImportanceTable, n: usize) {
    for v in table.scores.iter_mut().flatten().flatten() {
        *v /= n as f64;
    }
    table.n_samples = n;
}

/// Weight-norm criterion (data free).
///
/// Block `(t, l, k)` collects the rows of layer `t`'s linear and species
/// residual maps that produce channel `k` (the embedding column for `t = 0`)
/// plus the layer `t + 1` radial heads that weight channel `k` of order `l`.
pub fn score_magnitude(params: &ModelParams) -> Result<ImportanceTable> {
    params.validate()?;
    let cfg = &params.config;
    let arch = Architecture::new(cfg)?;
    let mut table = ImportanceTable::zeros(&cfg.mask_layouts());
    let s = cfg.n_species();
    for t in 0..cfg.layers.len() {
        let lay = cfg.mask_layout(t);
        for (l, k) in lay.blocks() {
            let mut sq = 0.0;
            if t == 0 {
                if let Some(e) = params.get(names::EMBEDDING) {
                    sq += (0..e.rows).map(|r| e.get(r, k).powi(2)).sum::<f64>();
                }
            } else {
                if let Some(w) = params.get(&names::linear(t, l)) {
                    sq += w.row(k).iter().map(|v| v * v).sum::<f64>();
                }
                if let Some(w) = params.get(&names::residual(t, l)) {
                    let kout = lay.mult(l);
                    sq += (0..s).map(|sp| w.row(sp * kout + k).iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
                }
            }
            let is_gate = cfg.gates(t).is_some_and(|g| l == 0 && g.gated_block(k).is_some());
            if t < cfg.n_layers() && !is_gate {
                let next = arch.layer(t + 1);
                if let Some(w2) = params.get(&names::radial_w2(t + 1)) {
                    for p in next.paths.iter().filter(|p| p.l2 == l) {
                        sq += (0..w2.rows).map(|r| w2.get(r, p.head_offset + k).powi(2)).sum::<f64>();
                    }
                }
            }
            table.scores[t][l][k] = sq.sqrt();
        }
    }
    Ok(table)
}

/// Uniform `[0, 1)` scores from a seeded stream.
pub fn score_random(layouts: &[IrrepsLayout], seed: u64) -> ImportanceTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = ImportanceTable::zeros(layouts);
    for v in table.scores.iter_mut().flatten().flatten() {
        *v = rng.gen::<f64>();
    }
    table
}

/// Dispatches on `criterion`.
pub fn score(params: &ModelParams, calib: &[AtomicSystem], criterion: Criterion, seed: u64) -> Result<ImportanceTable> {
    match criterion {
        Criterion::GradientActivation => score_gradient_activation(params, calib),
        Criterion::Activation => score_activation(params, calib),
        Criterion::Magnitude => score_magnitude(params),
        Criterion::Random => Ok(score_random(&params.config.mask_layouts(), seed)),
    }
}

/// Ranks with ties sharing their average rank (0-based).
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Agreement of two tables over the same layouts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankStability {
    pub n_blocks: usize,
    /// Over all blocks pooled.
    pub spearman: Option<f64>,
    pub top_k: usize,
    /// Shared top-k blocks per (layer, l) group, summed and divided by the
    /// summed group top-k sizes.
    pub top_k_overlap: f64,
}

pub fn rank_stability(before: &ImportanceTable, after: &ImportanceTable, top_k: usize) -> Result<RankStability> {
    if before.layouts.len() != after.layouts.len()
        || before.layouts.iter().zip(&after.layouts).any(|(a, b)| !a.same_shape(b))
    {
        return Err(Error::LayoutMismatch("importance tables cover different layouts".into()));
    }
    let a: Vec<f64> = before.entries().map(|e| e.3).collect();
    let b: Vec<f64> = after.entries().map(|e| e.3).collect();
    let (mut shared, mut slots) = (0usize, 0usize);
    for (ga, gb) in before.scores.iter().flatten().zip(after.scores.iter().flatten()) {
        let k = top_k.min(ga.len());
        let top = |g: &[f64]| {
            let mut o: Vec<usize> = (0..g.len()).collect();
            o.sort_by(|&x, &y| g[y].total_cmp(&g[x]).then(x.cmp(&y)));
            o.truncate(k);
            o
        };
        let (ta, tb) = (top(ga), top(gb));
        shared += ta.iter().filter(|x| tb.contains(x)).count();
        slots += k;
    }
    Ok(RankStability {
        n_blocks: a.len(),
        spearman: spearman(&a, &b),
        top_k,
        top_k_overlap: if slots == 0 { 1.0 } else { shared as f64 / slots as f64 },
    })
}
