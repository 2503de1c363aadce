//! Property checks shared by the `properties` and `acceptance` targets.
//! Each entry point runs a proptest runner and returns the first failure.

#![allow(dead_code)]

use std::collections::BTreeMap;

use lsa_core::data::{batches, make_moons, Dataset};
use lsa_core::loss::LossKind;
use lsa_core::lsa::{comparison_measure, detect_mvl, lsa_stats, CmRecord};
use lsa_core::perturb::{attack, AttackSpec};
use lsa_core::train::{train, train_at, train_standard, train_trade, TrainConfig, TrainerKind};
use lsa_core::{Architecture, Model, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRng, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random exploration for the unit suite, a fixed stream for acceptance.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Random,
    Fixed,
}

fn runner(cases: u32, mode: Mode) -> TestRunner {
    let cfg = Config { cases, failure_persistence: None, ..Config::default() };
    match mode {
        Mode::Random => TestRunner::new(cfg),
        Mode::Fixed => {
            let rng = TestRng::deterministic_rng(cfg.rng_algorithm);
            TestRunner::new_with_rng(cfg, rng)
        }
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn attack_strategy() -> impl Strategy<Value = AttackSpec> {
    (0usize..3, 0.0f64..1.0, 1usize..6).prop_map(|(k, eps, steps)| match k {
        0 => AttackSpec::fgsm(eps),
        1 => AttackSpec::pgd(eps).with_steps(steps, eps / 2.0 + 1e-3),
        _ => AttackSpec::fast(eps),
    })
}

pub fn attack_budget(cases: u32, mode: Mode) -> Result<(), String> {
    let strategy = (attack_strategy(), 1usize..6, any::<u64>(), any::<bool>(), prop::collection::vec(-2.0f64..2.0, 12));
    runner(cases, mode)
        .run(&strategy, |(spec, n, seed, clamp, raw)| {
            let model = Architecture::A.build(seed % 7).unwrap();
            let x = tensor(vec![n, 2], raw[..2 * n].to_vec());
            let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let spec = if clamp { spec.with_clamp(-2.0, 2.0) } else { spec };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let adv = attack(&model, &x, &y, LossKind::BinaryCe, &spec, &mut rng).unwrap();
            prop_assert_eq!(adv.shape(), x.shape());
            for (a, b) in adv.data().iter().zip(x.data()) {
                prop_assert!((a - b).abs() <= spec.epsilon + 1e-12, "{} vs {} eps {}", a, b, spec.epsilon);
                if clamp {
                    prop_assert!((-2.0..=2.0).contains(a));
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn cm_invariants(cases: u32, mode: Mode) -> Result<(), String> {
    let strategy =
        (prop::collection::vec(-10.0f64..10.0, 1..40), prop::collection::vec(-1.0f64..1.0, 40), 1e-3f64..1e3);
    runner(cases, mode)
        .run(&strategy, |(a, noise, c)| {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-6));
            let n = a.len();
            let clean = tensor(vec![n], a.clone());
            let pert = tensor(vec![n], a.iter().zip(&noise).map(|(x, e)| x + e).collect());
            let cm = comparison_measure(&clean, &pert).unwrap();
            prop_assert!(cm >= 0.0);
            prop_assert_eq!(comparison_measure(&clean, &clean).unwrap(), 0.0);
            let scaled = comparison_measure(&clean.scale(c), &pert.scale(c)).unwrap();
            prop_assert!((scaled - cm).abs() <= 1e-12 * cm.max(1.0), "{} vs {}", scaled, cm);
            let num: f64 = a.iter().zip(pert.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((cm - num / den).abs() <= 1e-12 * (num / den).max(1.0));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn mvl_brute_force(cases: u32, mode: Mode) -> Result<(), String> {
    let strategy = (1usize..20, 1usize..8, 0.0f64..2.0, prop::collection::vec(0.0f64..5.0, 160));
    runner(cases, mode)
        .run(&strategy, |(m, layers, eta, values)| {
            let cm = |s: usize, l: usize| values[s * layers + l];
            let cells = || (0..m).flat_map(|s| (0..layers).map(move |l| (s, l)));
            let records: Vec<CmRecord> = cells().map(|(s, l)| CmRecord { sample_id: s, layer: l, cm: cm(s, l) }).collect();
            let stats = lsa_stats(&records, eta).unwrap();
            let mvl = detect_mvl(&stats);

            let total = (m * layers) as f64;
            let mu: f64 = cells().map(|(s, l)| cm(s, l)).sum::<f64>() / total;
            let sigma = (cells().map(|(s, l)| (cm(s, l) - mu).powi(2)).sum::<f64>() / total).sqrt();
            prop_assert!((stats.mu - mu).abs() < 1e-12 && (stats.sigma - sigma).abs() < 1e-12);
            for l in 0..layers {
                let mean = (0..m).map(|s| cm(s, l)).sum::<f64>() / m as f64;
                let margin = mean - mu - eta * sigma;
                // Cases within rounding of the cut-off may go either way.
                if margin > 1e-9 {
                    prop_assert!(mvl.contains(l), "layer {} margin {}", l, margin);
                } else if margin < -1e-9 {
                    prop_assert!(!mvl.contains(l), "layer {} margin {}", l, margin);
                }
            }
            let listed: Vec<f64> = mvl.entries().iter().map(|e| e.mean_cm).collect();
            prop_assert!(listed.windows(2).all(|w| w[0] >= w[1]));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn toy() -> (Model, Dataset) {
    (Architecture::A.build(3).unwrap(), make_moons(96, 0.2, 11).unwrap())
}

fn short(trainer: TrainerKind, seed: u64) -> TrainConfig {
    TrainConfig { trainer, epochs: 2, batch_size: 32, monitor_samples: 16, seed, attack: AttackSpec::pgd(0.2), ..Default::default() }
}

pub fn degeneracy_chain(cases: u32, mode: Mode) -> Result<(), String> {
    runner(cases, mode)
        .run(&any::<u64>(), |seed| {
            let (m0, d) = toy();
            let run = |f: &dyn Fn(&mut Model)| {
                let mut m = m0.clone();
                f(&mut m);
                m
            };
            let standard = run(&|m| {
                train_standard(m, &d, &short(TrainerKind::Standard, seed)).unwrap();
            });

            // ε = 0: adversarial training sees the clean batch.
            let zero_eps = TrainConfig { attack: AttackSpec::fgsm(0.0), ..short(TrainerKind::Adversarial, seed) };
            prop_assert_eq!(&run(&|m| { train_at(m, &d, &zero_eps).unwrap(); }), &standard);

            // δ = 1: the mixed loss keeps only the clean term.
            let mixed = TrainConfig { mixing: true, delta: 1.0, ..short(TrainerKind::Adversarial, seed) };
            prop_assert_eq!(&run(&|m| { train_at(m, &d, &mixed).unwrap(); }), &standard);

            // λ = 0: TRADE without its divergence term.
            let trade = TrainConfig { lambda: 0.0, ..short(TrainerKind::Trade, seed) };
            prop_assert_eq!(&run(&|m| { train_trade(m, &d, &trade).unwrap(); }), &standard);

            let at = run(&|m| {
                train_at(m, &d, &short(TrainerKind::Adversarial, seed)).unwrap();
            });
            // Empty MVL set, then zero weights on a non-empty one.
            prop_assert_eq!(&run(&|m| { train(m, &d, &short(TrainerKind::Adversarial, seed)).unwrap(); }), &at);
            let zero_gamma = TrainConfig {
                mvl: vec![0, 2],
                gamma: BTreeMap::from([(0, 0.0), (2, 0.0)]),
                ..short(TrainerKind::Adversarial, seed)
            };
            prop_assert_eq!(&run(&|m| { train(m, &d, &zero_gamma).unwrap(); }), &at);
            prop_assert_ne!(&at, &standard);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn conv(n: usize, k: usize) -> usize {
    n - k + 1
}

fn pool(n: usize, k: usize) -> usize {
    n / k
}

pub fn model_b_shapes(cases: u32, mode: Mode) -> Result<(), String> {
    runner(cases, mode)
        .run(&(1usize..4, any::<u64>()), |(n, seed)| {
            let model = Architecture::B.build(seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = tensor(vec![n, 1, 28, 28], (0..n * 784).map(|_| rand::Rng::random::<f64>(&mut rng)).collect());
            let (logits, trace) = model.forward(&x).unwrap();
            let s0 = conv(28, 5);
            let s1 = conv(s0, 5);
            let s2 = conv(pool(s1, 2), 5);
            prop_assert_eq!(64 * pool(s2, 2) * pool(s2, 2), 576);
            let expected: Vec<Vec<usize>> =
                vec![vec![n, 16, s0, s0], vec![n, 32, s1, s1], vec![n, 64, s2, s2], vec![n, 100], vec![n, 10]];
            let got: Vec<Vec<usize>> = trace.layers().iter().map(|t| t.shape().to_vec()).collect();
            prop_assert_eq!(got, expected);
            prop_assert_eq!(logits.shape(), &[n, 10]);
            prop_assert_eq!(model.num_learnable(), 5);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn epoch_coverage(cases: u32, mode: Mode) -> Result<(), String> {
    runner(cases, mode)
        .run(&(2usize..60, 1usize..17, any::<u64>()), |(n, bs, seed)| {
            let d = make_moons(n, 0.1, seed).unwrap();
            let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
            let mut seen = Vec::new();
            for (x, _) in batches(&d, bs, true, seed).unwrap() {
                prop_assert!(x.batch() <= bs);
                seen.extend((0..x.batch()).map(|i| bits(x.sample(i))));
            }
            let mut all: Vec<Vec<u64>> = (0..n).map(|i| bits(d.inputs.sample(i))).collect();
            seen.sort();
            all.sort();
            prop_assert_eq!(seen, all);
            Ok(())
        })
        .map_err(|e| e.to_string())
}
