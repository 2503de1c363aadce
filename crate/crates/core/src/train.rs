//! Standard, adversarial (FGSM/PGD/FAST), TRADE and layer-wise regularized
//! training loops.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{epoch_order, sample_indices, Dataset};
use crate::error::{Error, Result};
use crate::eval::{accuracy_of, eval_attack, predictions};
use crate::loss::{loss, loss_on, LossKind};
use crate::nn::{ActivationTrace, Model};
use crate::optim::{adam_update, AdamConfig, OptimizerState};
use crate::perturb::{attack, attack_objective, AttackKind, AttackSpec, Objective};
use crate::tensor::Tensor;

pub const DEFAULT_GAMMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainerKind {
    Standard,
    /// Minimizes the loss on adversarial examples from the configured attack.
    Adversarial,
    /// Clean loss plus λ times the divergence to a divergence-maximizing twin.
    Trade,
}

impl TrainerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(TrainerKind::Standard),
            "at" => Some(TrainerKind::Adversarial),
            "trade" => Some(TrainerKind::Trade),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainerKind::Standard => "standard",
            TrainerKind::Adversarial => "at",
            TrainerKind::Trade => "trade",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub trainer: TrainerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub attack: AttackSpec,
    /// Epochs over which the attack budget ramps linearly up to `attack.epsilon`.
    pub epsilon_warmup: usize,
    /// Mix clean and adversarial losses as `δ·J(x) + (1 - δ)·J(x̂)`.
    pub mixing: bool,
    pub delta: f64,
    /// Weight of the TRADE divergence term.
    pub lambda: f64,
    /// Regularized learnable layers; empty disables the LR term.
    pub mvl: Vec<usize>,
    /// Per-layer γ; layers in `mvl` without an entry use [`DEFAULT_GAMMA`].
    pub gamma: BTreeMap<usize, f64>,
    /// Treat the CM denominator as a constant in the LR gradient.
    pub detach_denominator: bool,
    pub seed: u64,
    /// Defaults to binary CE for single-logit models, softmax CE otherwise.
    pub loss: Option<LossKind>,
    /// Training samples used for the per-epoch accuracy columns of the log.
    pub monitor_samples: usize,
    /// FGSM budget of the log's robust-accuracy column.
    pub eval_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            trainer: TrainerKind::Standard,
            epochs: 100,
            batch_size: 128,
            adam: AdamConfig::default(),
            attack: AttackSpec::fgsm(0.3),
            epsilon_warmup: 0,
            mixing: false,
            delta: 0.5,
            lambda: 1.0,
            mvl: Vec::new(),
            gamma: BTreeMap::new(),
            detach_denominator: false,
            seed: 0,
            loss: None,
            monitor_samples: 500,
            eval_epsilon: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn gamma_for(&self, layer: usize) -> f64 {
        self.gamma.get(&layer).copied().unwrap_or(DEFAULT_GAMMA)
    }

    /// Training attack for `epoch`: ε and the step size scaled by
    /// `(epoch + 1) / (epsilon_warmup + 1)` until the warm-up is over.
    pub fn attack_at(&self, epoch: usize) -> AttackSpec {
        let mut spec = self.attack;
        if epoch < self.epsilon_warmup {
            let f = (epoch + 1) as f64 / (self.epsilon_warmup + 1) as f64;
            spec.epsilon *= f;
            spec.step_size *= f;
        }
        spec
    }

    /// Checks hyperparameter ranges against a model with `layers` learnable
    /// layers.
    pub fn validate(&self, layers: usize) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("trainer.{field}"), msg));
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return bad("delta", format!("must lie in [0, 1], got {}", self.delta));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda", format!("must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.adam.lr > 0.0) {
            return bad("lr", format!("must be > 0, got {}", self.adam.lr));
        }
        if let Some(&l) = self.mvl.iter().find(|&&l| l >= layers) {
            return bad("mvl", format!("layer {l} out of range for {layers} learnable layers"));
        }
        for (&l, &g) in &self.gamma {
            if l >= layers {
                return bad("gamma", format!("layer {l} out of range for {layers} learnable layers"));
            }
            if !(g >= 0.0) || !g.is_finite() {
                return bad("gamma", format!("gamma for layer {l} must be finite and >= 0, got {g}"));
            }
        }
        if self.trainer != TrainerKind::Standard {
            self.attack.validate().map_err(|e| Error::config("trainer.attack", e.to_string()))?;
        }
        if self.trainer == TrainerKind::Trade && !self.attack.random_init && self.attack.epsilon > 0.0 {
            return bad("random_init", "the divergence attack needs a random start (its gradient vanishes at x)".into());
        }
        Ok(())
    }

    /// Model name in the `AT-PGD-LR-L2` style.
    pub fn tag(&self) -> String {
        let mut tag = match self.trainer {
            TrainerKind::Standard => "Normal".to_string(),
            TrainerKind::Adversarial => format!("AT-{}", self.attack.kind.name().to_uppercase()),
            TrainerKind::Trade => "AT-TRADE".to_string(),
        };
        if !self.mvl.is_empty() {
            let layers: Vec<String> = self.mvl.iter().map(|l| l.to_string()).collect();
            tag.push_str(&format!("-LR-L{}", layers.join("")));
        }
        tag
    }

    /// Checkpoint file stem: `<prefix>-<trainer>-<attack>-LR-L<layers>`,
    /// without the LR part when no layer is regularized.
    pub fn checkpoint_stem(&self, prefix: &str) -> String {
        let attack = match self.trainer {
            TrainerKind::Standard => "none",
            _ => self.attack.kind.name(),
        };
        let mut stem = format!("{prefix}-{}-{attack}", self.trainer.name());
        if !self.mvl.is_empty() {
            let layers: Vec<String> = self.mvl.iter().map(|l| l.to_string()).collect();
            stem.push_str(&format!("-LR-L{}", layers.join("")));
        }
        stem
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Loss on the monitor samples after the epoch.
    pub clean_loss: f64,
    /// Batch mean of the adversarial term that was optimized (0 if none).
    pub adv_loss: f64,
    /// Batch mean of the LR term (0 if none).
    pub lr_term: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "clean_loss", "adv_loss", "lr_term", "clean_acc", "robust_acc"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.clean_loss.to_string(),
                e.adv_loss.to_string(),
                e.lr_term.to_string(),
                e.clean_acc.to_string(),
                e.robust_acc.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {:>3}  clean_loss {:.4}  adv_loss {:.4}  lr {:.4}  acc {:.2}  robust {:.2}",
            self.epoch, self.clean_loss, self.adv_loss, self.lr_term, self.clean_acc, self.robust_acc
        )
    }
}

/// Σ_{l∈𝓜} γ_l · CM(φ_l(x), φ_l(x̂)) recorded on `tape`, or `None` when no
/// layer is regularized.
pub fn lr_term_on(
    tape: &mut Tape<'_>,
    clean: &[Var],
    pert: &[Var],
    mvl: &[usize],
    gamma: impl Fn(usize) -> f64,
    detach: bool,
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for &l in mvl {
        if l >= clean.len() || l >= pert.len() {
            return Err(Error::InvalidArgument(format!("regularized layer {l} out of range for {} layers", clean.len())));
        }
        let cm = tape.relative_error(clean[l], pert[l], detach)?;
        let term = tape.scale(cm, gamma(l))?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total)
}

/// Value of the LR term for two recorded traces.
pub fn lr_term(
    clean: &ActivationTrace,
    pert: &ActivationTrace,
    mvl: &[usize],
    gamma: impl Fn(usize) -> f64,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let c: Vec<Var> = clean.layers().iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let p: Vec<Var> = pert.layers().iter().map(|t| tape.leaf(t.clone(), false)).collect();
    Ok(match lr_term_on(&mut tape, &c, &p, mvl, gamma, false)? {
        Some(v) => tape.value(v).clone(),
        None => Tensor::scalar(0.0),
    })
}

/// Which terms a training step combines.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Terms {
    trainer: TrainerKind,
    with_lr: bool,
}

/// Derives the per-epoch shuffling seed.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn attack_stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0xa77a_c4ed)
}

struct Monitor {
    data: Dataset,
    spec: AttackSpec,
}

impl Monitor {
    fn new(dataset: &Dataset, cfg: &TrainConfig) -> Self {
        let n = cfg.monitor_samples.min(dataset.len());
        let mut idx = sample_indices(dataset.len(), n, cfg.seed ^ 0x3011);
        idx.sort_unstable();
        Monitor { data: dataset.select(&idx), spec: eval_attack(AttackKind::Fgsm, cfg.eval_epsilon, cfg.attack.clamp) }
    }

    fn measure(&self, model: &Model, kind: LossKind) -> Result<(f64, f64, f64)> {
        if self.data.is_empty() {
            return Ok((0.0, 0.0, 0.0));
        }
        let logits = model.logits(&self.data.inputs, 256)?;
        let clean_loss = loss(&logits, &self.data.targets, kind)?.item();
        let clean_acc = accuracy_of(&logits, &self.data.targets)?;
        // FGSM draws nothing from the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let adv = attack(model, &self.data.inputs, &self.data.targets, kind, &self.spec, &mut rng)?;
        let preds = predictions(&model.logits(&adv, 256)?);
        let hits = preds.iter().zip(&self.data.targets).filter(|(p, t)| p == t).count();
        Ok((clean_loss, clean_acc, 100.0 * hits as f64 / self.data.len() as f64))
    }
}

fn run(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig, obj: Terms) -> Result<TrainLog> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate(model.num_learnable())?;
    model.check_input(&dataset.inputs.select(&[0]))?;
    let kind = cfg.loss.unwrap_or_else(|| LossKind::for_model(model));
    let mut state = OptimizerState::new(model, cfg.adam);
    let mut attack_rng = attack_stream(cfg.seed);
    let monitor = Monitor::new(dataset, cfg);
    let with_lr = obj.with_lr && !cfg.mvl.is_empty();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let order = epoch_order(dataset.len(), true, epoch_seed(cfg.seed, epoch));
        let (mut adv_sum, mut lr_sum, mut batches) = (0.0, 0.0, 0usize);
        let spec = cfg.attack_at(epoch);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = dataset.inputs.select(idx);
            let y: Vec<usize> = idx.iter().map(|&i| dataset.targets[i]).collect();

            let x_adv = match obj.trainer {
                TrainerKind::Standard => None,
                TrainerKind::Adversarial => Some(attack(model, &x, &y, kind, &spec, &mut attack_rng)?),
                TrainerKind::Trade => {
                    let clean_logits = model.forward(&x)?.0;
                    let o = Objective::Divergence { clean_logits: &clean_logits };
                    Some(attack_objective(model, &x, o, &spec, &mut attack_rng)?)
                }
            };

            let frozen: &Model = model;
            let mut tape = Tape::new();
            let need_clean = obj.trainer != TrainerKind::Adversarial || cfg.mixing || with_lr;
            let clean = if need_clean {
                let xv = tape.leaf(x, false);
                Some(frozen.forward_on(&mut tape, xv, true)?)
            } else {
                None
            };
            let adv = match &x_adv {
                Some(xa) => {
                    let xv = tape.leaf(xa.clone(), false);
                    Some(frozen.forward_on(&mut tape, xv, true)?)
                }
                None => None,
            };

            let (mut total, adv_term) = match obj.trainer {
                TrainerKind::Standard => (loss_on(&mut tape, clean.as_ref().expect("clean pass").0, &y, kind)?, None),
                TrainerKind::Adversarial => {
                    let la = loss_on(&mut tape, adv.as_ref().expect("adversarial pass").0, &y, kind)?;
                    if cfg.mixing {
                        let lc = loss_on(&mut tape, clean.as_ref().expect("clean pass").0, &y, kind)?;
                        let lc = tape.scale(lc, cfg.delta)?;
                        let la_w = tape.scale(la, 1.0 - cfg.delta)?;
                        (tape.add(lc, la_w)?, Some(la))
                    } else {
                        (la, Some(la))
                    }
                }
                TrainerKind::Trade => {
                    let zc = clean.as_ref().expect("clean pass").0;
                    let lc = loss_on(&mut tape, zc, &y, kind)?;
                    let kl = tape.kl_div(zc, adv.as_ref().expect("adversarial pass").0)?;
                    let kl_w = tape.scale(kl, cfg.lambda)?;
                    (tape.add(lc, kl_w)?, Some(kl))
                }
            };
            let mut lr_value = 0.0;
            if with_lr {
                let (c, a) = (&clean.as_ref().expect("clean pass").1, &adv.as_ref().expect("adversarial pass").1);
                let lr = lr_term_on(&mut tape, c, a, &cfg.mvl, |l| cfg.gamma_for(l), cfg.detach_denominator)?;
                if let Some(lr) = lr {
                    lr_value = tape.value(lr).item();
                    total = tape.add(total, lr)?;
                }
            }

            let value = tape.value(total).item();
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss: value });
            }
            adv_sum += adv_term.map_or(0.0, |v| tape.value(v).item());
            lr_sum += lr_value;
            batches += 1;
            let grads = tape.backward(total)?;
            drop(tape);
            adam_update(model, &grads, &mut state)?;
        }
        let (clean_loss, clean_acc, robust_acc) = monitor.measure(model, kind)?;
        if !clean_loss.is_finite() {
            return Err(Error::Divergence { epoch, batch: batches, loss: clean_loss });
        }
        log.epochs.push(EpochLog {
            epoch,
            clean_loss,
            adv_loss: adv_sum / batches as f64,
            lr_term: lr_sum / batches as f64,
            clean_acc,
            robust_acc,
        });
    }
    Ok(log)
}

/// Minimizes the clean loss; the configured attack is ignored.
pub fn train_standard(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    run(model, dataset, cfg, Terms { trainer: TrainerKind::Standard, with_lr: false })
}

/// Adversarial training on `cfg.attack` examples, optionally mixed with the
/// clean loss.
pub fn train_at(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    run(model, dataset, cfg, Terms { trainer: TrainerKind::Adversarial, with_lr: false })
}

/// Clean loss plus `λ·KL(f(x) ‖ f(x̂))` with `x̂` maximizing the divergence.
pub fn train_trade(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    run(model, dataset, cfg, Terms { trainer: TrainerKind::Trade, with_lr: false })
}

/// `cfg.trainer` (adversarial or TRADE) plus the layer-wise regularizer on
/// `cfg.mvl`, sharing one adversarial example per sample between both terms.
pub fn train_at_lr(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    if cfg.trainer == TrainerKind::Standard {
        return Err(Error::config("trainer.kind", "layer-wise regularization needs an adversarial trainer"));
    }
    if cfg.mvl.is_empty() {
        return Err(Error::config("trainer.mvl", "layer-wise regularization needs at least one layer"));
    }
    run(model, dataset, cfg, Terms { trainer: cfg.trainer, with_lr: true })
}

/// Dispatches on `cfg.trainer`, adding the LR term when `cfg.mvl` is set.
pub fn train(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    if cfg.trainer == TrainerKind::Standard && !cfg.mvl.is_empty() {
        return Err(Error::config("trainer.mvl", "layer-wise regularization needs an adversarial trainer"));
    }
    run(model, dataset, cfg, Terms { trainer: cfg.trainer, with_lr: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_moons;
    use crate::nn::LayerKind;

    fn toy() -> (Model, Dataset) {
        let kinds = [LayerKind::Linear { out_features: 8 }, LayerKind::Elu { alpha: 1.0 }, LayerKind::Linear { out_features: 1 }];
        (Model::init(vec![2], &kinds, 4).unwrap(), make_moons(60, 0.2, 2).unwrap())
    }

    fn cfg(trainer: TrainerKind) -> TrainConfig {
        TrainConfig { trainer, epochs: 3, batch_size: 16, monitor_samples: 20, attack: AttackSpec::pgd(0.2), ..Default::default() }
    }

    #[test]
    fn zero_epochs_leaves_model_untouched() {
        let (mut m, d) = toy();
        let before = m.clone();
        let log = train_standard(&mut m, &d, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn lr_term_hand_value() {
        let c = ActivationTrace::from(vec![Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap()]);
        let p = ActivationTrace::from(vec![Tensor::zeros(&[1, 2])]);
        assert_eq!(lr_term(&c, &p, &[0], |_| 2.0).unwrap().item(), 2.0);
        assert_eq!(lr_term(&c, &p, &[], |_| 2.0).unwrap().item(), 0.0);
        assert_eq!(lr_term(&c, &c, &[0], |_| 2.0).unwrap().item(), 0.0);
        assert!(lr_term(&c, &p, &[1], |_| 2.0).is_err());
    }

    #[test]
    fn zero_budget_at_equals_standard() {
        let (m0, d) = toy();
        let (mut a, mut b) = (m0.clone(), m0);
        let c = TrainConfig { attack: AttackSpec::fgsm(0.0), ..cfg(TrainerKind::Adversarial) };
        train_standard(&mut a, &d, &c).unwrap();
        train_at(&mut b, &d, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lr_degenerate_cases_equal_at() {
        let (m0, d) = toy();
        let base = cfg(TrainerKind::Adversarial);
        let mut plain = m0.clone();
        train_at(&mut plain, &d, &base).unwrap();
        let mut zero_gamma = m0.clone();
        let c = TrainConfig { mvl: vec![0, 1], gamma: BTreeMap::from([(0, 0.0), (1, 0.0)]), ..base.clone() };
        train_at_lr(&mut zero_gamma, &d, &c).unwrap();
        assert_eq!(plain, zero_gamma);
        let mut regularized = m0;
        train_at_lr(&mut regularized, &d, &TrainConfig { mvl: vec![1], ..base }).unwrap();
        assert_ne!(plain, regularized);
    }

    #[test]
    fn config_validation_names_fields() {
        let c = TrainConfig { delta: 1.5, ..Default::default() };
        match c.validate(2) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "trainer.delta"),
            other => panic!("{other:?}"),
        }
        assert!(TrainConfig { mvl: vec![2], ..Default::default() }.validate(2).is_err());
        assert!(TrainConfig { gamma: BTreeMap::from([(0, -1.0)]), ..Default::default() }.validate(2).is_err());
    }

    #[test]
    fn trade_runs_and_logs() {
        let (mut m, d) = toy();
        let log = train_trade(&mut m, &d, &cfg(TrainerKind::Trade)).unwrap();
        assert_eq!(log.epochs.len(), 3);
        assert!(log.epochs.iter().all(|e| e.adv_loss >= 0.0 && e.clean_loss.is_finite()));
    }

    #[test]
    fn divergence_aborts_with_context() {
        let (mut m, d) = toy();
        let c = TrainConfig { adam: AdamConfig { lr: 1e300, ..Default::default() }, ..cfg(TrainerKind::Standard) };
        match train_standard(&mut m, &d, &c) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch < 3),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn warmup_ramps_budget_then_holds() {
        let c = TrainConfig { attack: AttackSpec::pgd(0.3), epsilon_warmup: 2, ..Default::default() };
        let eps: Vec<f64> = (0..4).map(|e| c.attack_at(e).epsilon).collect();
        for (got, want) in eps.iter().zip([0.1, 0.2, 0.3, 0.3]) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
        assert!((c.attack_at(0).step_size - 0.025).abs() < 1e-15);
        assert_eq!(c.attack_at(5), c.attack);
        assert_eq!(TrainConfig::default().attack_at(0), TrainConfig::default().attack);
    }

    #[test]
    fn names() {
        let c = TrainConfig { trainer: TrainerKind::Trade, mvl: vec![2], ..Default::default() };
        assert_eq!(c.tag(), "AT-TRADE-LR-L2");
        assert_eq!(c.checkpoint_stem("moon"), "moon-trade-fgsm-LR-L2");
        assert_eq!(TrainConfig::default().tag(), "Normal");
    }
}
