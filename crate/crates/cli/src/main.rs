//! `equiprune`: calibration, pruning, retraining, fine-tuning, evaluation and
//! benchmarking of equivariant interatomic potentials.
//!
//! Exit codes: 0 success, 2 bad input or infeasible request, 3 slice
//! verification failure, 4 training divergence, 1 anything else.

mod bench;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use equiprune::checkpoint;
use equiprune::data::{self, CorpusSpec, Generator};
use equiprune::importance::{self, Criterion, ImportanceTable};
use equiprune::model::{equivariance_check, ModelConfig, ModelParams, Precision, ReadoutKind};
use equiprune::prune::{self, TargetSpec};
use equiprune::train::{self, TrainConfig, TrainMode};
use equiprune::{Error, IrrepsLayout, PruneMask};

#[derive(Parser)]
#[command(name = "equiprune", version, about = "Block-structured pruning of equivariant interatomic potentials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic corpus (JSON lines).
    GenData(GenDataArgs),
    /// Write a freshly initialised model checkpoint.
    Init(InitArgs),
    /// Score every (layer, l, channel) block on a calibration sample.
    Calibrate(CalibrateArgs),
    /// Mask, slice and verify a checkpoint against a target architecture.
    Prune(PruneArgs),
    /// Retrain a pruned model on pre-training data.
    Retrain(TrainArgs),
    /// Fine-tune a model on a downstream corpus.
    Finetune(TrainArgs),
    /// Energy and force errors plus a rotation spot check.
    Eval(EvalArgs),
    /// Inference throughput and peak memory.
    Bench(BenchArgs),
    /// Importance table as sorted CSV rows.
    ExportImportance(ExportArgs),
    /// Spearman correlation and top-k overlap of two importance tables.
    RankStability(RankArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "teacher")]
    generator: Generator,
    #[arg(long, default_value_t = 200)]
    structures: usize,
    #[arg(long, default_value_t = 5)]
    conformations: usize,
    #[arg(long, default_value_t = 2)]
    species: usize,
    #[arg(long, default_value_t = 6)]
    min_atoms: usize,
    #[arg(long, default_value_t = 14)]
    max_atoms: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the labelling teacher (teacher generator only).
    #[arg(long)]
    teacher_out: Option<PathBuf>,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    lmax: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    /// Comma-separated atomic numbers; taken from --corpus when omitted.
    #[arg(long, value_delimiter = ',')]
    species: Vec<u32>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    gated: bool,
    #[arg(long, default_value_t = 3.0)]
    r_cut: f64,
    #[arg(long)]
    linear_readout: bool,
    #[arg(long, default_value = "fp64")]
    precision: Precision,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Configurations sampled per structure group.
    #[arg(long, default_value_t = 1)]
    per_structure: usize,
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
    #[arg(long, default_value = "grad-act")]
    criterion: Criterion,
    /// Seed of the random criterion.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Generated systems used for the exactness check.
    #[arg(long, default_value_t = 50)]
    verify_systems: usize,
    #[arg(long, default_value_t = 0)]
    verify_seed: u64,
    /// Seed of fresh readout and embedding weights.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mask_out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.005)]
    lr: f64,
    #[arg(long, default_value_t = 1e-8)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.995)]
    ema_decay: f64,
    #[arg(long, default_value_t = 100.0)]
    clip: f64,
    #[arg(long, default_value_t = 10)]
    batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    energy_weight: f64,
    #[arg(long, default_value_t = 10.0)]
    force_weight: f64,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 0.8)]
    lr_factor: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// EMA weights.
    #[arg(long)]
    out: PathBuf,
    /// Raw weights; `<out>.raw` when omitted.
    #[arg(long)]
    raw_out: Option<PathBuf>,
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 5)]
    rotation_systems: usize,
    #[arg(long, default_value_t = 5)]
    rotations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value = "fp64")]
    precision: Precision,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Use at most this many corpus records.
    #[arg(long)]
    max_records: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    before: PathBuf,
    #[arg(long)]
    after: PathBuf,
    /// Prune mask relating `before` (source model) to `after` (pruned model).
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    top_k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Verification(_)) => 3,
        Some(Error::Diverged { .. }) => 4,
        Some(Error::Io(_)) | None => 1,
        Some(_) => 2,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Init(a) => init(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Prune(a) => prune_cmd(a),
        Command::Retrain(a) => train_cmd(a, TrainMode::Retrain),
        Command::Finetune(a) => train_cmd(a, TrainMode::Finetune),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench::run(a),
        Command::ExportImportance(a) => export_importance(a),
        Command::RankStability(a) => rank_stability(a),
    }
}

fn load_model(path: &Path) -> Result<ModelParams> {
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_corpus(path: &Path) -> Result<data::Corpus> {
    data::load_corpus(path).with_context(|| format!("reading {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(Error::from).with_context(|| format!("reading {}", path.display()))
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(Error::from).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Refuses corpora with species the model does not know.
fn check_species(model: &ModelParams, corpus: &data::Corpus) -> Result<()> {
    for r in &corpus.records {
        for &z in &r.system.species {
            model.config.species_index(z).context("corpus does not match the model")?;
        }
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = CorpusSpec {
        generator: a.generator,
        n_structures: a.structures,
        conformations: a.conformations,
        n_species: a.species,
        min_atoms: a.min_atoms,
        max_atoms: a.max_atoms,
        seed: a.seed,
        ..CorpusSpec::default()
    };
    let corpus = data::generate_corpus(&spec)?;
    data::save_corpus(&corpus, &a.out)?;
    if let Some(p) = &a.teacher_out {
        if spec.generator != Generator::Teacher {
            bail!(Error::Invalid("--teacher-out needs the teacher generator".into()));
        }
        checkpoint::save(&data::teacher(&spec)?, p)?;
    }
    let atoms: usize = corpus.records.iter().map(|r| r.system.n_atoms()).sum();
    println!(
        "{} records in {} groups, {atoms} atoms, species {:?} -> {}",
        corpus.len(),
        corpus.groups().len(),
        spec.species(),
        a.out.display()
    );
    Ok(())
}

fn init(a: InitArgs) -> Result<()> {
    let species = match (&a.species[..], &a.corpus) {
        ([], Some(path)) => {
            let corpus = load_corpus(path)?;
            let mut s: Vec<u32> = corpus.records.iter().flat_map(|r| r.system.species.iter().copied()).collect();
            s.sort_unstable();
            s.dedup();
            s
        }
        ([], None) => bail!(Error::Invalid("give --species or --corpus".into())),
        (s, _) => s.to_vec(),
    };
    let mut c = ModelConfig::uniform(a.layers, a.lmax, a.channels, species);
    c.gated = a.gated;
    c.r_cut = a.r_cut;
    c.precision = a.precision;
    c.seed = a.seed;
    if a.linear_readout {
        c.final_readout = ReadoutKind::Linear;
    }
    let p = ModelParams::build(&c)?;
    checkpoint::save(&p, &a.out)?;
    let desc: Vec<String> = c.layers.iter().map(IrrepsLayout::to_string).collect();
    println!("{} parameters, layers {} -> {}", p.n_params(), desc.join(" | "), a.out.display());
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let corpus = load_corpus(&a.corpus)?;
    check_species(&model, &corpus)?;
    let calib = data::calibration_sample(&corpus, a.per_structure, a.sample_seed)?;
    let table = importance::score(&model, &calib, a.criterion, a.seed)?;
    write_out(Some(&a.out), &table.to_text())?;
    println!("{} blocks scored with {} on {} systems", table.entries().count(), a.criterion, calib.len());
    Ok(())
}

fn prune_cmd(a: PruneArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let table = ImportanceTable::from_text(&read_text(&a.table)?).context("importance table")?;
    let target = TargetSpec::parse(&read_text(&a.target)?).context("target spec")?;
    let systems = data::sample_clusters(&model.config.species, a.verify_systems, a.verify_seed)?;
    let out = prune::prune(&model, &table, &target, &systems, a.seed)?;
    checkpoint::save(&out.params, &a.out)?;
    if let Some(p) = &a.mask_out {
        write_out(Some(p), &out.mask.to_text())?;
    }
    let v = &out.verification;
    let mut report = String::from("key,value\n");
    let _ = writeln!(report, "verified_systems,{}", v.n_systems);
    let _ = writeln!(report, "max_energy_rel,{:e}", v.max_energy_rel);
    let _ = writeln!(report, "max_force_rel,{:e}", v.max_force_rel);
    let _ = writeln!(report, "tolerance,{:e}", prune::EXACTNESS_TOLERANCE);
    let _ = writeln!(report, "params_before,{}", model.n_params());
    let _ = writeln!(report, "params_after,{}", out.params.n_params());
    let layers: Vec<String> = out.params.config.layers.iter().map(IrrepsLayout::to_string).collect();
    let _ = writeln!(report, "layers,{}", layers.join(" | "));
    let _ = writeln!(report, "unverified_fresh_tensors,{}", out.fresh_tensors.join(" "));
    write_out(a.report.as_deref(), &report)?;
    Ok(())
}

fn train_cmd(a: TrainArgs, mode: TrainMode) -> Result<()> {
    let model = load_model(&a.model)?;
    let corpus = load_corpus(&a.corpus)?;
    check_species(&model, &corpus)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        energy_weight: a.energy_weight,
        force_weight: a.force_weight,
        lr: a.lr,
        weight_decay: a.weight_decay,
        ema_decay: a.ema_decay,
        clip_norm: a.clip,
        batch_size: a.batch_size,
        patience: a.patience,
        lr_factor: a.lr_factor,
        seed: a.seed,
    };
    let report = train::train_loop(&model, &corpus.systems(), &cfg, mode)?;
    checkpoint::save(&report.ema_params, &a.out)?;
    let raw = a.raw_out.unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".raw");
        PathBuf::from(s)
    });
    checkpoint::save(&report.params, &raw)?;
    if let Some(p) = &a.curves {
        write_out(Some(p), &report.curves_csv())?;
    }
    if let Some(last) = report.epochs.last() {
        println!("{mode}: {} epochs, final loss {:.6e}, train MAE E {:.6e} F {:.6e}", report.epochs.len(), last.loss, last.mae_e, last.mae_f);
    } else {
        println!("{mode}: 0 epochs, weights unchanged");
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let corpus = load_corpus(&a.corpus)?;
    check_species(&model, &corpus)?;
    let systems = corpus.systems();
    let m = train::evaluate(&model, &systems)?;
    let spot: Vec<_> = systems.iter().take(a.rotation_systems).cloned().collect();
    let eq = equivariance_check(&model, &spot, a.rotations, a.seed)?;
    let mut s = String::from("records,mae_energy[au/atom],mae_force[au/length],equiv_energy_rel,equiv_force_max_abs[au/length]\n");
    let _ = writeln!(s, "{},{:?},{:?},{:e},{:e}", systems.len(), m.mae_e, m.mae_f, eq.energy_rel, eq.force_abs);
    write_out(a.out.as_deref(), &s)
}

fn export_importance(a: ExportArgs) -> Result<()> {
    let table = ImportanceTable::from_text(&read_text(&a.table)?)?;
    write_out(a.out.as_deref(), &importance_csv(&table))
}

/// `layer,l,k,rank,score` rows, descending score within each (layer, l).
fn importance_csv(table: &ImportanceTable) -> String {
    let mut s = String::from("layer,l,k,rank,score\n");
    for (t, per_l) in table.scores.iter().enumerate() {
        for (l, g) in per_l.iter().enumerate() {
            let mut order: Vec<usize> = (0..g.len()).collect();
            order.sort_by(|&a, &b| g[b].total_cmp(&g[a]).then(a.cmp(&b)));
            for (rank, k) in order.into_iter().enumerate() {
                let _ = writeln!(s, "{t},{l},{k},{rank},{:?}", g[k]);
            }
        }
    }
    s
}

fn rank_stability(a: RankArgs) -> Result<()> {
    let mut before = ImportanceTable::from_text(&read_text(&a.before)?)?;
    let after = ImportanceTable::from_text(&read_text(&a.after)?)?;
    if let Some(p) = &a.mask {
        let mask = PruneMask::from_text(&read_text(p)?, &before.layouts).context("prune mask")?;
        before = before.restrict(&mask)?;
        before.truncate(after.layouts.len());
    }
    let r = importance::rank_stability(&before, &after, a.top_k)?;
    let rho = r.spearman.map_or("nan".to_string(), |v| format!("{v:.6}"));
    let s = format!("blocks,spearman,top_k,top_k_overlap\n{},{rho},{},{:.6}\n", r.n_blocks, r.top_k, r.top_k_overlap);
    write_out(a.out.as_deref(), &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn importance_csv_sorts_within_groups() {
        let t = ImportanceTable::from_text("0 0 0 0.5\n0 0 1 0.9\n0 0 2 0.5\n1 0 0 0.1\n").unwrap();
        assert_eq!(importance_csv(&t), "layer,l,k,rank,score\n0,0,1,0,0.9\n0,0,0,1,0.5\n0,0,2,2,0.5\n1,0,0,0,0.1\n");
    }

    #[test]
    fn exit_codes_follow_error_category() {
        let code = |e: Error| exit_code(&anyhow::Error::new(e));
        assert_eq!(code(Error::Verification("x".into())), 3);
        assert_eq!(code(Error::Diverged { epoch: 1 }), 4);
        assert_eq!(code(Error::Infeasible("x".into())), 2);
        assert_eq!(code(Error::Io(std::io::Error::other("x"))), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 1);
    }
}
