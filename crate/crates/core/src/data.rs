//! Synthetic corpora, corpus I/O and calibration sampling.
//!
//! Corpora are JSON-lines files: an optional first line `{"meta": {...}}`
//! followed by one record per line with keys `group`, `positions`,
//! `species`, `energy` and `forces`. Floats are written in shortest
//! round-trip form, so write followed by read is lossless.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{params as names, predict_batch, Architecture, AtomicSystem, ModelConfig, ModelParams};
use crate::tape::Mat;
use crate::{Error, Result};

/// Atomic numbers handed out to generated species, in order.
pub const SPECIES_POOL: [u32; 8] = [1, 6, 7, 8, 9, 15, 16, 17];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Labels from a frozen randomly initialised model.
    Teacher,
    /// Labels from a smooth truncated Lennard-Jones potential.
    PairPotential,
}

impl std::str::FromStr for Generator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Generator::Teacher),
            "pair-potential" | "pair" => Ok(Generator::PairPotential),
            _ => Err(Error::Invalid(format!("unknown generator {s:?} (teacher, pair-potential)"))),
        }
    }
}

/// Parameters of [`generate_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub generator: Generator,
    pub n_structures: usize,
    pub conformations: usize,
    pub n_species: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    /// Volume of the sampling box per atom.
    pub volume_per_atom: f64,
    pub min_separation: f64,
    /// Standard deviation of the per-coordinate conformation displacement.
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            generator: Generator::Teacher,
            n_structures: 200,
            conformations: 5,
            n_species: 2,
            min_atoms: 6,
            max_atoms: 14,
            volume_per_atom: 4.0,
            min_separation: 0.9,
            perturbation: 0.08,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn species(&self) -> Vec<u32> {
        SPECIES_POOL[..self.n_species].to_vec()
    }

    fn validate(&self) -> Result<()> {
        if self.n_structures == 0 || self.conformations == 0 || self.min_atoms == 0 {
            return Err(Error::Invalid("corpus sizes must be at least 1".into()));
        }
        if self.n_species == 0 || self.n_species > SPECIES_POOL.len() {
            return Err(Error::Invalid(format!("species count must lie in 1..={}", SPECIES_POOL.len())));
        }
        if self.min_atoms > self.max_atoms {
            return Err(Error::Invalid("min_atoms exceeds max_atoms".into()));
        }
        if !(self.volume_per_atom > 0.0 && self.min_separation >= 0.0 && self.perturbation >= 0.0) {
            return Err(Error::Invalid("geometry parameters must be non-negative".into()));
        }
        Ok(())
    }
}

/// Corpus provenance, stored as the first line of a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub spec: CorpusSpec,
    /// Digest of the teacher checkpoint (teacher corpora only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub group: usize,
    #[serde(flatten)]
    pub system: AtomicSystem,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub meta: Option<CorpusMeta>,
    pub records: Vec<Record>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn systems(&self) -> Vec<AtomicSystem> {
        self.records.iter().map(|r| r.system.clone()).collect()
    }

    /// Record indices per group id, ascending.
    pub fn groups(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            g.entry(r.group).or_default().push(i);
        }
        g
    }

    /// Splits whole groups: a seeded `test_fraction` of the groups (at least
    /// one when there are two or more) goes to the second corpus.
    pub fn split_groups(&self, test_fraction: f64, seed: u64) -> (Corpus, Corpus) {
        let mut ids: Vec<usize> = self.groups().into_keys().collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut n_test = (ids.len() as f64 * test_fraction).round() as usize;
        if ids.len() >= 2 {
            n_test = n_test.clamp(1, ids.len() - 1);
        }
        let test: std::collections::BTreeSet<usize> = ids[..n_test.min(ids.len())].iter().copied().collect();
        let (a, b): (Vec<Record>, Vec<Record>) = self.records.iter().cloned().partition(|r| !test.contains(&r.group));
        (Corpus { meta: self.meta.clone(), records: a }, Corpus { meta: self.meta.clone(), records: b })
    }
}

/// Readout gain of the teacher.
pub const TEACHER_GAIN: f64 = 100.0;

/// Teacher used to label [`Generator::Teacher`] corpora: a randomly
/// initialised two-layer model with orders up to 2, eight channels, random
/// self energies and readouts amplified by [`TEACHER_GAIN`].
pub fn teacher(spec: &CorpusSpec) -> Result<ModelParams> {
    let mut c = ModelConfig::uniform(2, 2, 8, spec.species());
    c.seed = spec.seed ^ 0x7ea_c4e5;
    let mut p = ModelParams::build(&c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed.wrapping_add(1));
    let se: Vec<f64> = (0..c.n_species()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    p.tensors.insert(names::SELF_ENERGY.into(), Mat::from_vec(c.n_species(), 1, se));
    // unit-scale forces instead of the ~1e-2 a fresh model produces
    for t in 1..=c.n_layers() {
        for name in [names::readout(t), names::readout_w2(t)] {
            if let Some(m) = p.tensors.get_mut(&name) {
                m.data.iter_mut().for_each(|v| *v *= TEACHER_GAIN);
            }
        }
    }
    Ok(p)
}

/// Smooth truncated Lennard-Jones pair potential.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPotential {
    pub species: Vec<u32>,
    /// Per-species well depth and size; pairs use the geometric and
    /// arithmetic means.
    pub epsilon: Vec<f64>,
    pub sigma: Vec<f64>,
    pub r_cut: f64,
}

impl PairPotential {
    pub fn for_species(species: &[u32]) -> Self {
        let n = species.len();
        Self {
            species: species.to_vec(),
            epsilon: (0..n).map(|i| 0.1 + 0.05 * i as f64).collect(),
            sigma: (0..n).map(|i| 1.0 + 0.1 * i as f64).collect(),
            r_cut: 3.0,
        }
    }

    /// Pair energy and its radial derivative.
    fn pair(&self, a: usize, b: usize, r: f64) -> (f64, f64) {
        if r >= self.r_cut {
            return (0.0, 0.0);
        }
        let eps = (self.epsilon[a] * self.epsilon[b]).sqrt();
        let sig = 0.5 * (self.sigma[a] + self.sigma[b]);
        let s6 = (sig / r).powi(6);
        let lj = 4.0 * eps * (s6 * s6 - s6);
        let dlj = 4.0 * eps * (-12.0 * s6 * s6 + 6.0 * s6) / r;
        let x = r / self.r_cut;
        let env = 1.0 - x.powi(3) * (10.0 - 15.0 * x + 6.0 * x * x);
        let denv = -30.0 * x * x * (1.0 - x).powi(2) / self.r_cut;
        (lj * env, dlj * env + lj * denv)
    }

    fn index(&self, z: u32) -> Result<usize> {
        self.species.iter().position(|&s| s == z).ok_or(Error::UnknownSpecies(z))
    }

    pub fn energy(&self, sys: &AtomicSystem) -> Result<f64> {
        Ok(self.energy_forces(sys)?.0)
    }

    pub fn energy_forces(&self, sys: &AtomicSystem) -> Result<(f64, Vec<[f64; 3]>)> {
        let idx: Vec<usize> = sys.species.iter().map(|&z| self.index(z)).collect::<Result<_>>()?;
        let n = sys.n_atoms();
        let mut e = 0.0;
        let mut f = vec![[0.0; 3]; n];
        for i in 0..n {
            for j in i + 1..n {
                let d: [f64; 3] = std::array::from_fn(|c| sys.positions[j][c] - sys.positions[i][c]);
                let r = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                let (u, du) = self.pair(idx[i], idx[j], r);
                e += u;
                for c in 0..3 {
                    let g = du * d[c] / r;
                    f[i][c] += g;
                    f[j][c] -= g;
                }
            }
        }
        Ok((e, f))
    }
}

fn random_cluster(spec: &CorpusSpec, species: &[u32], rng: &mut ChaCha8Rng) -> Result<AtomicSystem> {
    let n = rng.gen_range(spec.min_atoms..=spec.max_atoms);
    let side = (n as f64 * spec.volume_per_atom).cbrt();
    let min2 = spec.min_separation * spec.min_separation;
    let mut pos: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut tries = 0;
    while pos.len() < n {
        tries += 1;
        if tries > 10_000 * n {
            return Err(Error::Invalid(format!(
                "cannot place {n} atoms {} apart in a box of side {side:.3}",
                spec.min_separation
            )));
        }
        let p = [rng.gen_range(0.0..side), rng.gen_range(0.0..side), rng.gen_range(0.0..side)];
        if pos.iter().all(|q| dist2(&p, q) >= min2) {
            pos.push(p);
        }
    }
    let z = (0..n).map(|_| species[rng.gen_range(0..species.len())]).collect();
    AtomicSystem::new(pos, z)
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum()
}

fn perturbed(base: &AtomicSystem, spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Result<AtomicSystem> {
    let normal = Normal::new(0.0, spec.perturbation).map_err(|e| Error::Invalid(e.to_string()))?;
    let min2 = spec.min_separation * spec.min_separation;
    for _ in 0..1000 {
        let pos: Vec<[f64; 3]> = base
            .positions
            .iter()
            .map(|p| std::array::from_fn(|c| p[c] + normal.sample(rng)))
            .collect();
        let ok = (0..pos.len()).all(|i| (i + 1..pos.len()).all(|j| dist2(&pos[i], &pos[j]) >= min2));
        if ok {
            return AtomicSystem::new(pos, base.species.clone());
        }
    }
    Err(Error::Invalid("perturbation keeps violating the minimum separation".into()))
}

/// Generates `n_structures` groups of `conformations` labelled systems.
/// Group `g` draws from its own stream derived from `seed`, so a corpus is
/// reproducible and its groups do not depend on each other.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let species = spec.species();
    let mut records = Vec::with_capacity(spec.n_structures * spec.conformations);
    for g in 0..spec.n_structures {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(g as u64 + 1);
        let base = random_cluster(spec, &species, &mut rng)?;
        records.push(Record { group: g, system: base.clone() });
        for _ in 1..spec.conformations {
            records.push(Record { group: g, system: perturbed(&base, spec, &mut rng)? });
        }
    }
    let mut meta = CorpusMeta { spec: spec.clone(), teacher_digest: None };
    match spec.generator {
        Generator::Teacher => {
            let t = teacher(spec)?;
            meta.teacher_digest = Some(crate::checkpoint::digest(&t)?);
            let systems: Vec<AtomicSystem> = records.iter().map(|r| r.system.clone()).collect();
            let labelled = label_with(&t, &systems)?;
            for (r, s) in records.iter_mut().zip(labelled) {
                r.system = s;
            }
        }
        Generator::PairPotential => {
            let pot = PairPotential::for_species(&spec.species());
            for r in &mut records {
                let (e, f) = pot.energy_forces(&r.system)?;
                r.system.energy = Some(e);
                r.system.forces = Some(f);
            }
        }
    }
    Ok(Corpus { meta: Some(meta), records })
}

/// `n` unlabelled clusters over `species` with the default geometry.
pub fn sample_clusters(species: &[u32], n: usize, seed: u64) -> Result<Vec<AtomicSystem>> {
    if species.is_empty() {
        return Err(Error::Invalid("no species to place".into()));
    }
    let spec = CorpusSpec { seed, ..CorpusSpec::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_cluster(&spec, species, &mut rng)).collect()
}

/// Copies of `systems` labelled with the predictions of `params`.
pub fn label_with(params: &ModelParams, systems: &[AtomicSystem]) -> Result<Vec<AtomicSystem>> {
    let arch = Architecture::new(&params.config)?;
    let mut out = Vec::with_capacity(systems.len());
    for chunk in systems.chunks(16) {
        for (s, p) in chunk.iter().zip(predict_batch(&arch, params, chunk, None)?) {
            let mut s = s.clone();
            s.energy = Some(p.energy);
            s.forces = Some(p.forces);
            out.push(s);
        }
    }
    Ok(out)
}

/// Up to `n_per_structure` records from every group, drawn without
/// replacement; groups in ascending id order, records in corpus order.
pub fn calibration_sample(corpus: &Corpus, n_per_structure: usize, seed: u64) -> Result<Vec<AtomicSystem>> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus has no records".into()));
    }
    if n_per_structure == 0 {
        return Err(Error::Invalid("need at least one record per structure".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (_, idx) in corpus.groups() {
        let mut pick: Vec<usize> = idx.choose_multiple(&mut rng, n_per_structure.min(idx.len())).copied().collect();
        pick.sort_unstable();
        out.extend(pick.into_iter().map(|i| corpus.records[i].system.clone()));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: CorpusMeta,
}

pub fn write_corpus(corpus: &Corpus, mut w: impl Write) -> Result<()> {
    let json = |e: serde_json::Error| Error::Invalid(e.to_string());
    if let Some(meta) = &corpus.meta {
        serde_json::to_writer(&mut w, &MetaLine { meta: meta.clone() }).map_err(json)?;
        w.write_all(b"\n")?;
    }
    for r in &corpus.records {
        serde_json::to_writer(&mut w, r).map_err(json)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus(r: impl BufRead) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    let mut seen_any = false;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |e: String| Error::Parse { line: i + 1, msg: e };
        if !seen_any && line.trim_start().starts_with("{\"meta\"") {
            let m: MetaLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            corpus.meta = Some(m.meta);
            seen_any = true;
            continue;
        }
        seen_any = true;
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        rec.system.validate().map_err(|e| err(e.to_string()))?;
        let finite = rec.system.energy.is_none_or(f64::is_finite)
            && rec.system.forces.iter().flatten().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(err("non-finite label".into()));
        }
        corpus.records.push(rec);
    }
    if corpus.records.is_empty() {
        return Err(Error::Empty("corpus file has no records".into()));
    }
    Ok(corpus)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_corpus(corpus, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    read_corpus(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests;
