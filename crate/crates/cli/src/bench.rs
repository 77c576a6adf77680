use std::fmt::Write as _;
use std::time::Instant;

use anyhow::Result;

use equiprune::model::{predict_batch, Architecture};

use crate::{check_species, load_corpus, load_model, write_out, BenchArgs};

/// Peak resident set size in bytes, where the platform reports it.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.split_whitespace().next())
        .and_then(|v| v.parse::<u64>().ok())
        .map(|kb| kb * 1024)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn run(a: BenchArgs) -> Result<()> {
    if a.repeats == 0 || a.batch_size == 0 {
        anyhow::bail!(equiprune::Error::Invalid("repeats and batch size must be positive".into()));
    }
    let mut model = load_model(&a.model)?;
    model.config.precision = a.precision;
    let corpus = load_corpus(&a.corpus)?;
    check_species(&model, &corpus)?;
    let mut systems = corpus.systems();
    if let Some(n) = a.max_records {
        systems.truncate(n.max(1));
    }
    let atoms: usize = systems.iter().map(|s| s.n_atoms()).sum();
    let arch = Architecture::new(&model.config)?;
    let pass = || -> Result<()> {
        for chunk in systems.chunks(a.batch_size) {
            predict_batch(&arch, &model, chunk, None)?;
        }
        Ok(())
    };
    for _ in 0..a.warmup {
        pass()?;
    }
    let mut rates = Vec::with_capacity(a.repeats);
    for _ in 0..a.repeats {
        let t0 = Instant::now();
        pass()?;
        rates.push(atoms as f64 / t0.elapsed().as_secs_f64());
    }
    let peak = peak_rss_bytes().map_or("na".to_string(), |v| v.to_string());
    let layers: Vec<String> = model.config.layers.iter().map(|l| l.to_string()).collect();
    let mut s = String::from("model,precision,batch_size,atoms,repeats,median_atoms_per_s,min_atoms_per_s,max_atoms_per_s,peak_rss_bytes\n");
    let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rates.iter().copied().fold(0.0, f64::max);
    let _ = writeln!(s, "{},{},{},{atoms},{},{:.1},{lo:.1},{hi:.1},{peak}", layers.join(" | "), a.precision, a.batch_size, a.repeats, median(rates));
    write_out(a.out.as_deref(), &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn peak_memory_is_reported_on_linux() {
        if cfg!(target_os = "linux") {
            assert!(peak_rss_bytes().unwrap() > 0);
        }
    }
}
