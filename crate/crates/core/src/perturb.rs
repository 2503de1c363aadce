//! Statistical noise and L-infinity gradient attacks (FGSM, PGD, FAST).

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::loss::{loss_on, LossKind};
use crate::nn::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Fast,
}

impl AttackKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Some(AttackKind::Fgsm),
            "pgd" => Some(AttackKind::Pgd),
            "fast" => Some(AttackKind::Fast),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Fast => "fast",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epsilon: f64,
    /// Gradient steps; PGD only (FGSM and FAST always take one).
    pub steps: usize,
    /// Per-step size α. Ignored by FGSM, whose single step is ε.
    pub step_size: f64,
    pub random_init: bool,
    /// Input domain `[lo, hi]` every adversarial example is clamped to.
    pub clamp: Option<(f64, f64)>,
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        Self { kind: AttackKind::Fgsm, epsilon, steps: 1, step_size: epsilon, random_init: false, clamp: None }
    }

    /// Training-time PGD: 10 steps of ε/4 from a random start.
    pub fn pgd(epsilon: f64) -> Self {
        Self { kind: AttackKind::Pgd, epsilon, steps: 10, step_size: epsilon / 4.0, random_init: true, clamp: None }
    }

    /// Evaluation PGD: 7 steps of 0.005.
    pub fn pgd_eval(epsilon: f64) -> Self {
        Self { kind: AttackKind::Pgd, epsilon, steps: 7, step_size: 0.005, random_init: false, clamp: None }
    }

    /// Random start plus one signed step of 1.25ε.
    pub fn fast(epsilon: f64) -> Self {
        Self { kind: AttackKind::Fast, epsilon, steps: 1, step_size: 1.25 * epsilon, random_init: true, clamp: None }
    }

    pub fn with_clamp(mut self, lo: f64, hi: f64) -> Self {
        self.clamp = Some((lo, hi));
        self
    }

    pub fn with_steps(mut self, steps: usize, step_size: f64) -> Self {
        self.steps = steps;
        self.step_size = step_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument(format!("clamp bounds [{lo}, {hi}] are inverted")));
            }
        }
        match self.kind {
            AttackKind::Fgsm => Ok(()),
            AttackKind::Pgd => {
                if self.steps == 0 {
                    return Err(Error::InvalidArgument("PGD needs steps >= 1".into()));
                }
                if !(self.step_size > 0.0) && self.epsilon > 0.0 {
                    return Err(Error::InvalidArgument(format!("PGD step size must be > 0, got {}", self.step_size)));
                }
                Ok(())
            }
            AttackKind::Fast => {
                if !self.random_init || self.steps != 1 {
                    return Err(Error::InvalidArgument("FAST uses a random start and exactly one step".into()));
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(eps={}", self.kind.name(), self.epsilon)?;
        if self.kind == AttackKind::Pgd {
            write!(f, ", steps={}, alpha={}", self.steps, self.step_size)?;
        }
        write!(f, ")")
    }
}

/// Quantity an attack ascends.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Classification loss against the true labels.
    Loss { targets: &'a [usize], kind: LossKind },
    /// Divergence of the prediction at the candidate from fixed clean logits.
    Divergence { clean_logits: &'a Tensor },
}

/// Gradient of `objective` with respect to the model input at `x`.
pub fn objective_grad(model: &Model, x: &Tensor, objective: Objective<'_>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let (logits, _) = model.forward_on(&mut tape, xv, false)?;
    let obj = match objective {
        Objective::Loss { targets, kind } => loss_on(&mut tape, logits, targets, kind)?,
        Objective::Divergence { clean_logits } => {
            let c = tape.leaf(clean_logits.clone(), false);
            tape.kl_div(c, logits)?
        }
    };
    let grads = tape.backward(obj)?;
    Ok(grads.wrt(xv).expect("input is differentiable").clone())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `cand` onto the ε-ball around `x`, then onto the clamp domain.
fn project(cand: &mut Tensor, x: &Tensor, epsilon: f64, clamp: Option<(f64, f64)>) {
    for (c, &x0) in cand.data_mut().iter_mut().zip(x.data()) {
        let mut v = c.max(x0 - epsilon).min(x0 + epsilon);
        if let Some((lo, hi)) = clamp {
            v = v.max(lo).min(hi);
        }
        *c = v;
    }
}

fn signed_step(model: &Model, cur: &Tensor, alpha: f64, objective: Objective<'_>) -> Result<Tensor> {
    let g = objective_grad(model, cur, objective)?;
    cur.zip_map(&g, |v, g| v + alpha * sign(g))
}

fn random_start<R: Rng + ?Sized>(x: &Tensor, epsilon: f64, rng: &mut R) -> Tensor {
    x.map(|v| v + epsilon * (2.0 * rng.random::<f64>() - 1.0))
}

/// Runs the attack described by `spec` against an arbitrary objective. The
/// model is only read; `rng` feeds random starts.
pub fn attack_objective<R: Rng + ?Sized>(
    model: &Model,
    x: &Tensor,
    objective: Objective<'_>,
    spec: &AttackSpec,
    rng: &mut R,
) -> Result<Tensor> {
    spec.validate()?;
    model.check_input(x)?;
    match spec.kind {
        AttackKind::Fgsm => {
            let mut out = signed_step(model, x, spec.epsilon, objective)?;
            project(&mut out, x, spec.epsilon, spec.clamp);
            Ok(out)
        }
        AttackKind::Pgd | AttackKind::Fast => {
            let mut cur = if spec.random_init { random_start(x, spec.epsilon, rng) } else { x.clone() };
            project(&mut cur, x, spec.epsilon, spec.clamp);
            for _ in 0..spec.steps {
                cur = signed_step(model, &cur, spec.step_size, objective)?;
                project(&mut cur, x, spec.epsilon, spec.clamp);
            }
            Ok(cur)
        }
    }
}

/// Loss-maximizing adversarial example for `(x, y)`.
pub fn attack<R: Rng + ?Sized>(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    kind: LossKind,
    spec: &AttackSpec,
    rng: &mut R,
) -> Result<Tensor> {
    attack_objective(model, x, Objective::Loss { targets: y, kind }, spec, rng)
}

/// `clamp(x + ε·sign(∇ₓJ))`.
pub fn fgsm(model: &Model, x: &Tensor, y: &[usize], kind: LossKind, spec: &AttackSpec) -> Result<Tensor> {
    if spec.kind != AttackKind::Fgsm {
        return Err(Error::InvalidArgument(format!("fgsm called with a {} spec", spec.kind.name())));
    }
    // FGSM draws nothing, any generator will do.
    attack(model, x, y, kind, spec, &mut ChaCha8Rng::seed_from_u64(0))
}

pub fn pgd<R: Rng + ?Sized>(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    kind: LossKind,
    spec: &AttackSpec,
    rng: &mut R,
) -> Result<Tensor> {
    if spec.kind != AttackKind::Pgd {
        return Err(Error::InvalidArgument(format!("pgd called with a {} spec", spec.kind.name())));
    }
    attack(model, x, y, kind, spec, rng)
}

pub fn fast<R: Rng + ?Sized>(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    kind: LossKind,
    spec: &AttackSpec,
    rng: &mut R,
) -> Result<Tensor> {
    if spec.kind != AttackKind::Fast {
        return Err(Error::InvalidArgument(format!("fast called with a {} spec", spec.kind.name())));
    }
    attack(model, x, y, kind, spec, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    Salt,
    Pepper,
    Speckle,
}

impl NoiseKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Some(NoiseKind::Gaussian),
            "salt" => Some(NoiseKind::Salt),
            "pepper" => Some(NoiseKind::Pepper),
            "speckle" => Some(NoiseKind::Speckle),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Salt => "salt",
            NoiseKind::Pepper => "pepper",
            NoiseKind::Speckle => "speckle",
        }
    }

    /// σ = 0.1 for the additive kinds, p = 0.05 for salt/pepper.
    pub fn default_magnitude(&self) -> f64 {
        match self {
            NoiseKind::Gaussian | NoiseKind::Speckle => 0.1,
            NoiseKind::Salt | NoiseKind::Pepper => 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Standard deviation (Gaussian, Speckle) or corruption probability.
    pub magnitude: f64,
    pub seed: u64,
    /// Domain bounds; salt writes `hi`, pepper writes `lo` (default `[0, 1]`).
    pub clamp: Option<(f64, f64)>,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, seed: u64) -> Self {
        Self { kind, magnitude: kind.default_magnitude(), seed, clamp: None }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.magnitude;
        let ok = match self.kind {
            NoiseKind::Gaussian | NoiseKind::Speckle => m >= 0.0 && m.is_finite(),
            NoiseKind::Salt | NoiseKind::Pepper => (0.0..=1.0).contains(&m),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{} magnitude out of range: {m}", self.kind.name())))
        }
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.kind.name(), self.magnitude)
    }
}

/// Seeded statistical corruption of `x`.
pub fn apply_noise(x: &Tensor, spec: &NoiseSpec) -> Result<Tensor> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.clamp.unwrap_or((0.0, 1.0));
    let s = spec.magnitude;
    let mut out = match spec.kind {
        NoiseKind::Gaussian => x.map(|v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            v + s * n
        }),
        NoiseKind::Speckle => x.map(|v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            v + v * s * n
        }),
        NoiseKind::Salt => x.map(|v| if rng.random::<f64>() < s { hi } else { v }),
        NoiseKind::Pepper => x.map(|v| if rng.random::<f64>() < s { lo } else { v }),
    };
    if spec.clamp.is_some() {
        for v in out.data_mut() {
            *v = v.max(lo).min(hi);
        }
    }
    Ok(out)
}

/// Anything that turns a clean batch into its perturbed twin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    Attack(AttackSpec),
    Noise(NoiseSpec),
}

impl Perturbation {
    pub fn apply<R: Rng + ?Sized>(
        &self,
        model: &Model,
        x: &Tensor,
        y: &[usize],
        kind: LossKind,
        rng: &mut R,
    ) -> Result<Tensor> {
        match self {
            Perturbation::Attack(spec) => attack(model, x, y, kind, spec, rng),
            Perturbation::Noise(spec) => apply_noise(x, spec),
        }
    }

    /// Short file-name friendly label, e.g. `pgd-eps0.3` or `salt-0.05`.
    pub fn label(&self) -> String {
        match self {
            Perturbation::Attack(a) => format!("{}-eps{}", a.kind.name(), a.epsilon),
            Perturbation::Noise(n) => format!("{}-{}", n.kind.name(), n.magnitude),
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::Attack(a) => a.fmt(f),
            Perturbation::Noise(n) => n.fmt(f),
        }
    }
}
