use super::*;
use crate::data::{generate_corpus, label_with, teacher, CorpusSpec, Generator};
use crate::model::{predict, ModelConfig};

fn corpus(n: usize, seed: u64) -> Vec<AtomicSystem> {
    let spec = CorpusSpec { n_structures: n, conformations: 1, seed, ..CorpusSpec::default() };
    generate_corpus(&spec).unwrap().systems()
}

fn student(seed: u64) -> ModelParams {
    let mut c = ModelConfig::uniform(2, 0, 4, vec![1, 6]);
    c.seed = seed;
    ModelParams::build(&c).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 4, ..TrainConfig::default() }
}

#[test]
fn loss_of_exact_predictions_is_zero() {
    let p = student(1);
    let data = label_with(&p, &corpus(3, 0)).unwrap();
    let preds: Vec<_> = data.iter().map(|s| predict(&p, s).unwrap()).collect();
    assert_eq!(loss(&preds, &data, 1.0, 10.0).unwrap(), 0.0);
    let (l, g) = loss_gradient(&p, &data, &TrainConfig::default()).unwrap();
    assert!(l.abs() < 1e-28);
    assert!(g.values().all(|m| m.data.iter().all(|v| v.abs() < 1e-12)));
}

#[test]
fn loss_closed_forms() {
    let p = student(1);
    let mut data = label_with(&p, &corpus(3, 0)).unwrap();
    let preds: Vec<_> = data.iter().map(|s| predict(&p, s).unwrap()).collect();
    // per-atom energy error e on every structure, forces exact
    for s in &mut data {
        *s.energy.as_mut().unwrap() -= 0.3 * s.n_atoms() as f64;
    }
    assert!((loss(&preds, &data, 2.0, 0.0).unwrap() - 2.0 * 0.09).abs() < 1e-12);

    // one atom: energy off by 0.5, force off by (1, 0, -2)
    let one = AtomicSystem {
        positions: vec![[0.0; 3]],
        species: vec![1],
        energy: Some(1.5),
        forces: Some(vec![[1.0, 0.0, -2.0]]),
    };
    let pred = crate::Prediction { energy: 1.0, atom_energies: vec![1.0], forces: vec![[0.0; 3]], layer_energies: vec![] };
    let want = 1.0 * 0.25 + 10.0 * (1.0 + 4.0) / 3.0;
    assert!((loss(&[pred], &[one], 1.0, 10.0).unwrap() - want).abs() < 1e-14);
}

#[test]
fn unlabelled_data_is_rejected() {
    let p = student(1);
    let mut data = corpus(2, 0);
    data[1].forces = None;
    assert!(matches!(train_loop(&p, &data, &quick(1), TrainMode::Retrain), Err(Error::Invalid(_))));
    assert!(matches!(train_loop(&p, &[], &quick(1), TrainMode::Retrain), Err(Error::Empty(_))));
}

#[test]
fn taped_loss_matches_prediction_loss_and_finite_differences() {
    let p = student(3);
    let data = corpus(3, 4);
    let cfg = TrainConfig::default();
    let (l, grads) = loss_gradient(&p, &data, &cfg).unwrap();
    let preds: Vec<_> = data.iter().map(|s| predict(&p, s).unwrap()).collect();
    // per-structure energy mean, per-component force mean over the batch
    let n_f: usize = data.iter().map(|s| 3 * s.n_atoms()).sum();
    let mut want_e = 0.0;
    let mut want_f = 0.0;
    for (pr, s) in preds.iter().zip(&data) {
        want_e += ((pr.energy - s.energy.unwrap()) / s.n_atoms() as f64).powi(2);
        for (a, b) in pr.forces.iter().flatten().zip(s.forces.as_ref().unwrap().iter().flatten()) {
            want_f += (a - b).powi(2);
        }
    }
    let want = want_e / 3.0 + 10.0 * want_f / n_f as f64;
    assert!((l - want).abs() <= 1e-12 * want);

    let h = 1e-6;
    for (name, g) in &grads {
        for idx in [0, g.data.len() / 2, g.data.len() - 1] {
            let mut q = p.clone();
            q.tensors.get_mut(name).unwrap().data[idx] += h;
            let lp = loss_gradient(&q, &data, &cfg).unwrap().0;
            q.tensors.get_mut(name).unwrap().data[idx] -= 2.0 * h;
            let lm = loss_gradient(&q, &data, &cfg).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let an = g.data[idx];
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "{name}[{idx}]: {fd} vs {an}");
        }
    }
}

#[test]
fn zero_epochs_and_zero_lr_leave_params_unchanged() {
    let p = student(2);
    let data = corpus(5, 1);
    let r = train_loop(&p, &data, &quick(0), TrainMode::Retrain).unwrap();
    assert_eq!(r.params, p);
    assert_eq!(r.ema_params, p);
    assert!(r.epochs.is_empty());
    assert_eq!(r.curves_csv(), "epoch,loss,mae_e,mae_f\n");

    let r = train_loop(&p, &data, &TrainConfig { lr: 0.0, ..quick(3) }, TrainMode::Finetune).unwrap();
    assert_eq!(r.params, p);
    assert_eq!(r.epochs.len(), 3);
    assert_eq!(r.mode, TrainMode::Finetune);
}

#[test]
fn zero_gradient_step_without_decay_is_identity() {
    let mut w = Mat::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]);
    let before = w.clone();
    let mut opt = AdamW::new([(2, 2)], 0.0);
    opt.step(&mut [&mut w], &[Mat::zeros(2, 2)], 0.1);
    assert_eq!(w, before);
    // decay alone shrinks by lr * wd
    let mut opt = AdamW::new([(2, 2)], 0.5);
    opt.step(&mut [&mut w], &[Mat::zeros(2, 2)], 0.1);
    for (a, b) in w.data.iter().zip(&before.data) {
        assert!((a - b * 0.95).abs() < 1e-15);
    }
}

#[test]
fn first_adam_step_moves_by_lr() {
    // bias correction makes the first update lr * g / (|g| + eps)
    let mut w = Mat::from_vec(1, 3, vec![0.0; 3]);
    let mut opt = AdamW::new([(1, 3)], 0.0);
    opt.step(&mut [&mut w], &[Mat::from_vec(1, 3, vec![2.0, -0.5, 1e-3])], 0.01);
    for (v, s) in w.data.iter().zip([-1.0, 1.0, -1.0]) {
        assert!((v - 0.01 * s).abs() < 1e-7);
    }
}

#[test]
fn ema_converges_geometrically() {
    let p = student(1);
    let mut target = p.clone();
    for m in target.tensors.values_mut() {
        m.data.iter_mut().for_each(|v| *v += 1.0);
    }
    let mut ema = Ema::new(&p, 0.9);
    for _ in 0..10 {
        ema.update(&target);
    }
    let gap = 0.9f64.powi(10);
    for (name, m) in &ema.shadow.tensors {
        for (s, t) in m.data.iter().zip(&target.tensors[name].data) {
            assert!((t - s - gap).abs() < 1e-12);
        }
    }
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut g = vec![Mat::from_vec(1, 2, vec![30.0, 40.0]), Mat::from_vec(1, 1, vec![120.0])];
    let before = clip_global_norm(&mut g, 100.0);
    assert!((before - 130.0).abs() < 1e-12);
    let after: f64 = g.iter().map(|m| m.norm_sqr()).sum::<f64>().sqrt();
    assert!(after <= 100.0 + 1e-12);
    assert!((g[0].data[0] / g[0].data[1] - 0.75).abs() < 1e-15);
    let mut small = vec![Mat::from_vec(1, 1, vec![3.0])];
    clip_global_norm(&mut small, 100.0);
    assert_eq!(small[0].data, vec![3.0]);
}

#[test]
fn plateau_schedule() {
    let mut s = Plateau::new(2, 0.5);
    let mut lr = 1.0;
    for loss in [5.0, 4.0, 4.5, 4.5] {
        lr = s.observe(loss, lr);
    }
    assert_eq!(lr, 1.0);
    lr = s.observe(4.2, lr);
    assert_eq!(lr, 0.5);
    lr = s.observe(3.0, lr);
    assert_eq!(lr, 0.5);
}

#[test]
fn training_is_deterministic_and_reduces_error() {
    let t = teacher(&CorpusSpec { n_species: 2, ..CorpusSpec::default() }).unwrap();
    let data = label_with(&t, &corpus(12, 9)).unwrap();
    let mut c = ModelConfig::uniform(2, 1, 4, t.config.species.clone());
    c.seed = 4;
    let p = ModelParams::build(&c).unwrap();
    let cfg = TrainConfig { seed: 3, ..quick(15) };
    let a = train_loop(&p, &data, &cfg, TrainMode::Retrain).unwrap();
    let b = train_loop(&p, &data, &cfg, TrainMode::Retrain).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.curves_csv(), b.curves_csv());
    let before = evaluate(&p, &data).unwrap();
    let after = evaluate(&a.ema_params, &data).unwrap();
    assert!(after.mae_f < before.mae_f, "{after:?} vs {before:?}");
    let first = a.epochs.first().unwrap().loss;
    let last = a.epochs.last().unwrap().loss;
    assert!(last < first);
}

#[test]
fn divergence_reports_epoch() {
    let p = student(1);
    let mut data = corpus(3, 2);
    data[0].energy = Some(f64::NAN);
    assert!(matches!(train_loop(&p, &data, &quick(2), TrainMode::Retrain), Err(Error::Diverged { epoch: 0 })));
}

#[test]
fn evaluate_examples() {
    let p = student(5);
    let data = label_with(&p, &corpus(10, 3)).unwrap();
    assert_eq!(evaluate(&p, &data).unwrap(), Metrics { mae_e: 0.0, mae_f: 0.0 });
    let shifted: Vec<_> = data
        .iter()
        .map(|s| {
            let mut s = s.clone();
            *s.energy.as_mut().unwrap() += 0.25 * s.n_atoms() as f64;
            s
        })
        .collect();
    let m = evaluate(&p, &shifted).unwrap();
    assert!((m.mae_e - 0.25).abs() < 1e-12 && m.mae_f == 0.0);

    // dump and recompute
    let other = student(6);
    let m = evaluate(&other, &data).unwrap();
    let (mut ae, mut af, mut n) = (0.0, 0.0, 0.0);
    for s in &data {
        let pr = predict(&other, s).unwrap();
        ae += (pr.energy - s.energy.unwrap()).abs() / s.n_atoms() as f64;
        for (a, b) in pr.forces.iter().flatten().zip(s.forces.as_ref().unwrap().iter().flatten()) {
            af += (a - b).abs();
            n += 1.0;
        }
    }
    assert!((m.mae_e - ae / 10.0).abs() < 1e-12 && (m.mae_f - af / n).abs() < 1e-12);
}

#[test]
fn config_validation() {
    assert!(TrainConfig { ema_decay: 1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { force_weight: -1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    TrainConfig::default().validate().unwrap();
}

#[test]
fn pair_corpus_trains_too() {
    let spec = CorpusSpec { generator: Generator::PairPotential, n_structures: 4, conformations: 1, ..CorpusSpec::default() };
    let data = generate_corpus(&spec).unwrap().systems();
    let r = train_loop(&student(0), &data, &quick(2), TrainMode::Finetune).unwrap();
    assert!(r.epochs.iter().all(|e| e.loss.is_finite()));
}
