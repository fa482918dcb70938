//! Severity-weighted loss against brute-force and closed-form oracles.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sevloss::loss::{batch_loss, severity_weighted_loss, LossInstance};
use sevloss::severity::{SeverityDistribution, WeightConfig, Weighting};
use sevloss::tensor::{Tape, Tensor};

/// Plain loops: exp, sum, log. No shared code with the library.
fn brute_nll(logits: &[f64], v: usize, targets: &[usize], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (t, (&y, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = &logits[t * v..(t + 1) * v];
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        total += -(row[y].exp() / z).ln();
        n += 1;
    }
    total / n as f64
}

fn brute_softmax(row: &[f64]) -> Vec<f64> {
    let z: f64 = row.iter().map(|x| x.exp()).sum();
    row.iter().map(|x| x.exp() / z).collect()
}

struct Case {
    logits: Tensor,
    targets: Vec<usize>,
    mask: Vec<bool>,
    dist: SeverityDistribution,
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let len = rng.random_range(1..10);
    let v = rng.random_range(2..12);
    let logits = Tensor::new(
        vec![len, v],
        (0..len * v).map(|_| rng.random_range(-3.0..3.0)).collect(),
    )
    .unwrap();
    let targets = (0..len).map(|_| rng.random_range(0..v)).collect();
    let mut mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.6)).collect();
    let k = rng.random_range(0..len);
    mask[k] = true;
    let raw: [f64; 3] = [rng.random(), rng.random(), rng.random::<f64>() + 1e-3];
    let s: f64 = raw.iter().sum();
    let dist = SeverityDistribution::renormalized(raw[0] / s, raw[1] / s, raw[2] / s).unwrap();
    Case {
        logits,
        targets,
        mask,
        dist,
    }
}

#[test]
fn single_instance_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let c = random_case(&mut rng);
        let cfg = WeightConfig::balanced();
        let mut tape = Tape::new();
        let x = tape.param(c.logits.clone());
        let loss = severity_weighted_loss(&mut tape, x, &c.targets, &c.mask, &c.dist, &cfg).unwrap();
        let v = c.logits.shape()[1];
        let w = 0.5 * c.dist.non_critical() + c.dist.neutral() + 1.5 * c.dist.critical();
        let expect = w * brute_nll(c.logits.data(), v, &c.targets, &c.mask);
        assert!((tape.value(loss).data()[0] - expect).abs() < 1e-12);
    }
}

#[test]
fn denominator_counts_masked_in_tokens_only() {
    // Two masked-out positions with huge loss must not change the value.
    let logits = Tensor::matrix(3, 2, vec![0.0, 0.0, -40.0, 40.0, -40.0, 40.0]).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(logits);
    let loss = severity_weighted_loss(
        &mut tape,
        x,
        &[0, 0, 0],
        &[true, false, false],
        &SeverityDistribution::uniform(),
        &WeightConfig::unit(),
    )
    .unwrap();
    assert!((tape.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn logit_gradient_closed_form() {
    // dL/dz_t = (w / n) (softmax(z_t) - onehot(y_t)) on masked-in rows, 0 elsewhere.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let c = random_case(&mut rng);
        let cfg = WeightConfig::strong();
        let mut tape = Tape::new();
        let x = tape.param(c.logits.clone());
        let loss = severity_weighted_loss(&mut tape, x, &c.targets, &c.mask, &c.dist, &cfg).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        let v = c.logits.shape()[1];
        let n = c.mask.iter().filter(|&&m| m).count() as f64;
        let w = 0.25 * c.dist.non_critical() + c.dist.neutral() + 1.75 * c.dist.critical();
        for t in 0..c.targets.len() {
            let p = brute_softmax(&c.logits.data()[t * v..(t + 1) * v]);
            for k in 0..v {
                let expect = if c.mask[t] {
                    w / n * (p[k] - f64::from(u8::from(k == c.targets[t])))
                } else {
                    0.0
                };
                assert!((g.data()[t * v + k] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn batch_is_plain_mean_of_weighted_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let cases: Vec<Case> = (0..rng.random_range(1..6)).map(|_| random_case(&mut rng)).collect();
        let cfg = WeightConfig::mild();
        let mut tape = Tape::new();
        let vars: Vec<_> = cases.iter().map(|c| tape.param(c.logits.clone())).collect();
        let inst: Vec<LossInstance<'_>> = cases
            .iter()
            .zip(&vars)
            .map(|(c, &logits)| LossInstance {
                logits,
                targets: &c.targets,
                mask: &c.mask,
                dist: c.dist,
            })
            .collect();
        let (_, bd) = batch_loss(&mut tape, &inst, &Weighting::Severity(cfg.clone())).unwrap();
        let expect: f64 = cases
            .iter()
            .map(|c| {
                let w = 0.75 * c.dist.non_critical() + c.dist.neutral() + 1.25 * c.dist.critical();
                w * brute_nll(c.logits.data(), c.logits.shape()[1], &c.targets, &c.mask)
            })
            .sum::<f64>()
            / cases.len() as f64;
        assert!((bd.total - expect).abs() < 1e-12);
        assert_eq!(
            bd.token_count,
            cases.iter().flat_map(|c| &c.mask).filter(|&&m| m).count()
        );
    }
}

#[test]
fn empty_mask_and_bad_targets_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(vec![2, 3]).unwrap());
    let d = SeverityDistribution::uniform();
    let u = WeightConfig::unit();
    assert!(severity_weighted_loss(&mut tape, x, &[0, 1], &[false, false], &d, &u).is_err());
    assert!(severity_weighted_loss(&mut tape, x, &[0, 3], &[true, true], &d, &u).is_err());
    assert!(severity_weighted_loss(&mut tape, x, &[0], &[true], &d, &u).is_err());
    assert!(batch_loss(&mut tape, &[], &Weighting::UniformCe).is_err());
}

proptest! {
    #[test]
    fn loss_scales_linearly_with_weight(seed in any::<u64>(), c in 0.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = random_case(&mut rng);
        let base = WeightConfig::balanced();
        let run = |cfg: &WeightConfig| {
            let mut tape = Tape::new();
            let x = tape.param(case.logits.clone());
            let l = severity_weighted_loss(&mut tape, x, &case.targets, &case.mask, &case.dist, cfg).unwrap();
            tape.value(l).data()[0]
        };
        let a = run(&base);
        let b = run(&base.scaled(c).unwrap());
        prop_assert!((b - c * a).abs() <= 1e-12 * (1.0 + b.abs()));
    }

    #[test]
    fn loss_is_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = random_case(&mut rng);
        let mut tape = Tape::new();
        let x = tape.param(case.logits.clone());
        let l = severity_weighted_loss(&mut tape, x, &case.targets, &case.mask, &case.dist, &WeightConfig::strong()).unwrap();
        prop_assert!(tape.value(l).data()[0] >= 0.0);
    }
}
