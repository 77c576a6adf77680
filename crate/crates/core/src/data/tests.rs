use super::*;
use crate::model::predict;

fn small(generator: Generator, n: usize, conf: usize, seed: u64) -> CorpusSpec {
    CorpusSpec { generator, n_structures: n, conformations: conf, seed, ..CorpusSpec::default() }
}

#[test]
fn single_record_corpus() {
    let c = generate_corpus(&small(Generator::PairPotential, 1, 1, 0)).unwrap();
    assert_eq!(c.len(), 1);
    assert!(c.records[0].system.has_labels());
    let n = c.records[0].system.n_atoms();
    assert!((6..=14).contains(&n));
}

#[test]
fn generation_is_deterministic_and_groups_are_independent() {
    let a = generate_corpus(&small(Generator::PairPotential, 4, 3, 7)).unwrap();
    let b = generate_corpus(&small(Generator::PairPotential, 4, 3, 7)).unwrap();
    assert_eq!(a, b);
    let c = generate_corpus(&small(Generator::PairPotential, 6, 3, 7)).unwrap();
    assert_eq!(a.records[..], c.records[..12]);
    let d = generate_corpus(&small(Generator::PairPotential, 4, 3, 8)).unwrap();
    assert_ne!(a.records, d.records);
}

#[test]
fn conformations_respect_geometry() {
    let spec = small(Generator::PairPotential, 5, 4, 3);
    let c = generate_corpus(&spec).unwrap();
    for (g, idx) in c.groups() {
        assert_eq!(idx.len(), 4);
        let base = &c.records[idx[0]].system;
        for &i in &idx[1..] {
            let s = &c.records[i].system;
            assert_eq!(c.records[i].group, g);
            assert_eq!(s.species, base.species);
            let shift = s.positions.iter().zip(&base.positions).map(|(a, b)| dist2(a, b).sqrt()).fold(0.0, f64::max);
            assert!(shift > 0.0 && shift < 1.0);
        }
    }
    for r in &c.records {
        let p = &r.system.positions;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                assert!(dist2(&p[i], &p[j]).sqrt() >= spec.min_separation);
            }
        }
    }
}

#[test]
fn impossible_separation_is_reported() {
    let spec = CorpusSpec { min_separation: 5.0, ..small(Generator::PairPotential, 1, 1, 0) };
    assert!(matches!(generate_corpus(&spec), Err(Error::Invalid(_))));
}

#[test]
fn pair_forces_match_finite_differences() {
    let c = generate_corpus(&small(Generator::PairPotential, 5, 1, 11)).unwrap();
    let pot = PairPotential::for_species(&c.meta.as_ref().unwrap().spec.species());
    let h = 1e-5;
    for r in &c.records {
        let s = &r.system;
        let f = s.forces.as_ref().unwrap();
        let scale = f.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..s.n_atoms() {
            for c in 0..3 {
                let mut p = s.clone();
                p.positions[i][c] += h;
                let ep = pot.energy(&p).unwrap();
                p.positions[i][c] -= 2.0 * h;
                let em = pot.energy(&p).unwrap();
                let fd = -(ep - em) / (2.0 * h);
                assert!((fd - f[i][c]).abs() <= 1e-8 * scale.max(1.0), "{fd} vs {}", f[i][c]);
            }
        }
    }
}

#[test]
fn pair_potential_is_smooth_at_cutoff() {
    let pot = PairPotential::for_species(&[1]);
    let (e, de) = pot.pair(0, 0, pot.r_cut - 1e-9);
    assert!(e.abs() < 1e-20 && de.abs() < 1e-12);
    assert_eq!(pot.pair(0, 0, pot.r_cut + 0.1), (0.0, 0.0));
}

#[test]
fn teacher_labels_reevaluate_exactly() {
    let spec = small(Generator::Teacher, 3, 2, 5);
    let c = generate_corpus(&spec).unwrap();
    let meta = c.meta.as_ref().unwrap();
    let t = teacher(&meta.spec).unwrap();
    assert_eq!(meta.teacher_digest.as_deref(), Some(crate::checkpoint::digest(&t).unwrap().as_str()));
    for r in &c.records {
        let p = predict(&t, &r.system).unwrap();
        let e = r.system.energy.unwrap();
        assert!((p.energy - e).abs() <= 1e-12 * e.abs().max(1.0));
        for (a, b) in p.forces.iter().flatten().zip(r.system.forces.as_ref().unwrap().iter().flatten()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
    // the labels are not dominated by self energy alone
    let fmax = c.records.iter().flat_map(|r| r.system.forces.clone().unwrap()).flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(fmax > 1e-3);
}

#[test]
fn calibration_sampling() {
    let c = generate_corpus(&small(Generator::PairPotential, 10, 5, 2)).unwrap();
    assert_eq!(calibration_sample(&c, 5, 0).unwrap(), c.systems());
    assert_eq!(calibration_sample(&c, 9, 0).unwrap().len(), 50);
    let one = calibration_sample(&c, 1, 3).unwrap();
    assert_eq!(one.len(), 10);
    for (g, idx) in c.groups() {
        assert!(idx.iter().any(|&i| c.records[i].system == one[g]));
    }
    assert_eq!(calibration_sample(&c, 2, 4).unwrap(), calibration_sample(&c, 2, 4).unwrap());
    assert_ne!(calibration_sample(&c, 2, 4).unwrap(), calibration_sample(&c, 2, 5).unwrap());
    assert!(matches!(calibration_sample(&Corpus::default(), 1, 0), Err(Error::Empty(_))));
}

#[test]
fn corpus_round_trip_is_lossless() {
    let mut c = generate_corpus(&small(Generator::PairPotential, 20, 5, 9)).unwrap();
    assert_eq!(c.len(), 100);
    // awkward values survive too
    c.records[0].system.energy = Some(0.1 + 0.2);
    c.records[1].system.forces.as_mut().unwrap()[0][0] = f64::MIN_POSITIVE;
    let mut buf = Vec::new();
    write_corpus(&c, &mut buf).unwrap();
    let back = read_corpus(buf.as_slice()).unwrap();
    assert_eq!(back, c);
    let mut again = Vec::new();
    write_corpus(&back, &mut again).unwrap();
    assert_eq!(again, buf);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    save_corpus(&c, &path).unwrap();
    assert_eq!(load_corpus(&path).unwrap(), c);
}

#[test]
fn corpus_parse_errors() {
    assert!(matches!(read_corpus("".as_bytes()), Err(Error::Empty(_))));
    assert!(matches!(read_corpus("\n\n".as_bytes()), Err(Error::Empty(_))));
    let good = r#"{"group":0,"positions":[[0.0,0.0,0.0]],"species":[1],"energy":1.0,"forces":[[0.0,0.0,0.0]]}"#;
    let text = format!("{good}\n{good}\n{{\"group\":1,\"positions\":[[0.0,0.0]],\"species\":[1]}}\n");
    assert!(matches!(read_corpus(text.as_bytes()), Err(Error::Parse { line: 3, .. })));
    let text = format!("{good}\n{}\n", good.replace("[1]", "[1,1]"));
    assert!(matches!(read_corpus(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
    let c = read_corpus(good.as_bytes()).unwrap();
    assert!(c.meta.is_none());
    assert_eq!(c.records[0].system.energy, Some(1.0));
}

#[test]
fn group_split_keeps_groups_whole() {
    let c = generate_corpus(&small(Generator::PairPotential, 10, 2, 1)).unwrap();
    let (a, b) = c.split_groups(0.2, 0);
    assert_eq!(a.len() + b.len(), c.len());
    assert_eq!(b.groups().len(), 2);
    assert!(a.groups().keys().all(|g| !b.groups().contains_key(g)));
}
