//! Run configuration: flat INI sections with `key = value` lines.
//!
//! Every key is optional. [`RunConfig::to_ini`] writes the fully resolved
//! form, which parses back to an identical config.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ini::Ini;

use crate::data::Split;
use crate::error::{Error, Result};
use crate::eval::check_epsilon_grid;
use crate::loss::LossKind;
use crate::lsa::LsaConfig;
use crate::nn::{Architecture, CapturePoint, LayerKind};
use crate::perturb::{AttackKind, AttackSpec, NoiseKind, NoiseSpec, Perturbation};
use crate::train::{TrainConfig, TrainerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Moon,
    Mnist,
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Moon => "moon",
            DatasetKind::Mnist => "mnist",
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            DatasetKind::Moon => vec![2],
            DatasetKind::Mnist => vec![1, 28, 28],
        }
    }

    /// Input domain enforced on perturbed samples.
    pub fn clamp(&self) -> Option<(f64, f64)> {
        match self {
            DatasetKind::Moon => None,
            DatasetKind::Mnist => Some((0.0, 1.0)),
        }
    }

    pub fn default_architecture(&self) -> Architecture {
        match self {
            DatasetKind::Moon => Architecture::A,
            DatasetKind::Mnist => Architecture::B,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub seed: u64,
    /// Moon only.
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    /// Directory holding the four MNIST IDX files.
    pub path: PathBuf,
    /// Seeded subset sizes; 0 keeps the whole split.
    pub train_subset: usize,
    pub test_subset: usize,
}

impl DatasetConfig {
    pub fn defaults(kind: DatasetKind) -> Self {
        Self {
            kind,
            seed: 0,
            n_train: 1000,
            n_test: 1000,
            noise: 0.2,
            path: PathBuf::from("data/mnist"),
            train_subset: if kind == DatasetKind::Mnist { 10_000 } else { 0 },
            test_subset: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Named(Architecture),
    Inline(Vec<LayerKind>),
}

impl ModelSpec {
    pub fn layers(&self) -> Vec<LayerKind> {
        match self {
            ModelSpec::Named(a) => a.layers(),
            ModelSpec::Inline(l) => l.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub spec: ModelSpec,
    pub capture: CapturePoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsaSection {
    pub cfg: LsaConfig,
    pub split: Split,
    /// `(kind, magnitude)`: ε for attacks, σ or p for noise.
    pub perturbations: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub attack: AttackKind,
    pub epsilons: Vec<f64>,
    pub seed: u64,
    pub boundary_resolution: usize,
    pub boundary_points: usize,
    pub boundary_margin: f64,
    pub boundary_attack: AttackKind,
    pub boundary_epsilon: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            attack: AttackKind::Fgsm,
            epsilons: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            seed: 0,
            boundary_resolution: 200,
            boundary_points: 1000,
            boundary_margin: 0.5,
            boundary_attack: AttackKind::Fgsm,
            boundary_epsilon: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub lsa: LsaSection,
    pub eval: EvalConfig,
    pub output: PathBuf,
}

const KEYS: &[(&str, &[&str])] = &[
    ("dataset", &["kind", "seed", "n_train", "n_test", "noise", "path", "train_subset", "test_subset"]),
    ("model", &["architecture", "layers", "capture"]),
    (
        "trainer",
        &[
            "kind",
            "epochs",
            "batch_size",
            "lr",
            "beta1",
            "beta2",
            "adam_eps",
            "attack",
            "epsilon",
            "steps",
            "step_size",
            "random_init",
            "epsilon_warmup",
            "mixing",
            "delta",
            "lambda",
            "mvl",
            "gamma",
            "detach_denominator",
            "seed",
            "loss",
            "monitor_samples",
            "eval_epsilon",
        ],
    ),
    ("lsa", &["m", "eta", "seed", "chunk", "split", "perturbations"]),
    (
        "eval",
        &[
            "attack",
            "epsilons",
            "seed",
            "boundary_resolution",
            "boundary_points",
            "boundary_margin",
            "boundary_attack",
            "boundary_epsilon",
        ],
    ),
    ("output", &["dir"]),
];

/// Key/value view of one section that remembers what was read.
struct Section {
    name: &'static str,
    values: BTreeMap<String, String>,
}

impl Section {
    fn field(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T, what: &str) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| Error::config(self.field(key), format!("expected {what}, got `{s}`"))),
        }
    }

    fn uint(&self, key: &str, default: usize) -> Result<usize> {
        self.parse(key, default, "a non-negative integer")
    }

    fn u64(&self, key: &str, default: u64) -> Result<u64> {
        self.parse(key, default, "a non-negative integer")
    }

    fn real(&self, key: &str, default: f64) -> Result<f64> {
        let v: f64 = self.parse(key, default, "a number")?;
        if !v.is_finite() {
            return Err(Error::config(self.field(key), "must be finite"));
        }
        Ok(v)
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key).map(str::to_ascii_lowercase).as_deref() {
            None => Ok(default),
            Some("true" | "yes" | "1" | "on") => Ok(true),
            Some("false" | "no" | "0" | "off") => Ok(false),
            Some(s) => Err(Error::config(self.field(key), format!("expected true or false, got `{s}`"))),
        }
    }

    fn list<T>(&self, key: &str, item: impl Fn(&str) -> Option<T>, what: &str) -> Result<Option<Vec<T>>> {
        let Some(s) = self.raw(key) else { return Ok(None) };
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| item(t).ok_or_else(|| Error::config(self.field(key), format!("bad {what} `{t}`"))))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

fn attack_kind(s: &Section, key: &str, default: AttackKind) -> Result<AttackKind> {
    match s.raw(key) {
        None => Ok(default),
        Some(v) => AttackKind::parse(v)
            .ok_or_else(|| Error::config(s.field(key), format!("unknown attack `{v}` (fgsm, pgd, fast)"))),
    }
}

/// `linear:100, elu:1, conv2d:16:5:5, relu, maxpool2d:2:2, flatten`
fn parse_layer(token: &str) -> Option<LayerKind> {
    let mut parts = token.split(':').map(str::trim);
    let name = parts.next()?.to_ascii_lowercase();
    let args: Vec<&str> = parts.collect();
    let n = |i: usize| args.get(i).and_then(|a| a.parse::<usize>().ok()).filter(|&v| v > 0);
    let kind = match (name.as_str(), args.len()) {
        ("linear", 1) => LayerKind::Linear { out_features: n(0)? },
        ("conv2d", 3) => LayerKind::Conv2d { out_channels: n(0)?, kh: n(1)?, kw: n(2)? },
        ("relu", 0) => LayerKind::Relu,
        ("elu", 0) => LayerKind::Elu { alpha: 1.0 },
        ("elu", 1) => LayerKind::Elu { alpha: args[0].parse().ok().filter(|a: &f64| a.is_finite())? },
        ("maxpool2d", 2) => LayerKind::MaxPool2d { kh: n(0)?, kw: n(1)? },
        ("flatten", 0) => LayerKind::Flatten,
        _ => return None,
    };
    Some(kind)
}

fn layer_token(k: &LayerKind) -> String {
    match *k {
        LayerKind::Linear { out_features } => format!("linear:{out_features}"),
        LayerKind::Conv2d { out_channels, kh, kw } => format!("conv2d:{out_channels}:{kh}:{kw}"),
        LayerKind::Relu => "relu".into(),
        LayerKind::Elu { alpha } => format!("elu:{alpha}"),
        LayerKind::MaxPool2d { kh, kw } => format!("maxpool2d:{kh}:{kw}"),
        LayerKind::Flatten => "flatten".into(),
    }
}

fn parse_perturbation(token: &str) -> Option<(String, f64)> {
    let (kind, mag) = match token.split_once(':') {
        Some((k, m)) => (k.trim().to_ascii_lowercase(), Some(m.trim())),
        None => (token.trim().to_ascii_lowercase(), None),
    };
    let magnitude = match mag {
        Some(m) => m.parse::<f64>().ok().filter(|v| v.is_finite() && *v >= 0.0)?,
        None => NoiseKind::parse(&kind)?.default_magnitude(),
    };
    (AttackKind::parse(&kind).is_some() || NoiseKind::parse(&kind).is_some()).then_some((kind, magnitude))
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Defaults for `kind`, identical to parsing an empty file with
    /// `dataset.kind` set.
    pub fn defaults(kind: DatasetKind) -> Self {
        Self::parse(&format!("[dataset]\nkind = {}\n", kind.name())).expect("defaults are valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses and validates everything that does not touch the file system.
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        let mut sections: BTreeMap<&'static str, BTreeMap<String, String>> = BTreeMap::new();
        for (name, props) in ini.iter() {
            let Some(name) = name else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::config(k, "key outside of any section"));
                }
                continue;
            };
            let Some(&(sec, allowed)) = KEYS.iter().find(|(s, _)| *s == name) else {
                return Err(Error::config(name, "unknown section"));
            };
            let entry = sections.entry(sec).or_default();
            for (k, v) in props.iter() {
                let known = allowed.contains(&k) || (sec == "trainer" && k.strip_prefix("gamma_").is_some());
                if !known {
                    return Err(Error::config(format!("{sec}.{k}"), "unknown key"));
                }
                entry.insert(k.to_string(), v.trim().to_string());
            }
        }
        let section = |name: &'static str| Section {
            name,
            values: sections.get(name).cloned().unwrap_or_default(),
        };

        // [dataset]
        let s = section("dataset");
        let kind = match s.raw("kind").map(str::to_ascii_lowercase).as_deref() {
            None | Some("moon") => DatasetKind::Moon,
            Some("mnist") => DatasetKind::Mnist,
            Some(k) => return Err(Error::config("dataset.kind", format!("unknown dataset `{k}` (moon, mnist)"))),
        };
        let d = DatasetConfig::defaults(kind);
        let dataset = DatasetConfig {
            kind,
            seed: s.u64("seed", d.seed)?,
            n_train: s.uint("n_train", d.n_train)?,
            n_test: s.uint("n_test", d.n_test)?,
            noise: s.real("noise", d.noise)?,
            path: s.raw("path").map(PathBuf::from).unwrap_or(d.path),
            train_subset: s.uint("train_subset", d.train_subset)?,
            test_subset: s.uint("test_subset", d.test_subset)?,
        };
        if kind == DatasetKind::Moon {
            for (key, n) in [("n_train", dataset.n_train), ("n_test", dataset.n_test)] {
                if n < 2 {
                    return Err(Error::config(s.field(key), "needs at least 2 samples"));
                }
            }
            if dataset.noise < 0.0 {
                return Err(Error::config("dataset.noise", "must be >= 0"));
            }
        }

        // [model]
        let s = section("model");
        let spec = match (s.raw("architecture"), s.raw("layers")) {
            (Some(_), Some(_)) => {
                return Err(Error::config("model.layers", "give either model.architecture or model.layers"));
            }
            (_, Some(_)) => {
                let layers = s.list("layers", parse_layer, "layer")?.unwrap_or_default();
                if !layers.iter().any(LayerKind::is_learnable) {
                    return Err(Error::config("model.layers", "needs at least one learnable layer"));
                }
                ModelSpec::Inline(layers)
            }
            (Some(a), None) => ModelSpec::Named(
                Architecture::parse(a)
                    .ok_or_else(|| Error::config("model.architecture", format!("unknown architecture `{a}` (A, B)")))?,
            ),
            (None, None) => ModelSpec::Named(kind.default_architecture()),
        };
        let capture = match s.raw("capture").map(str::to_ascii_lowercase).as_deref() {
            None | Some("pre") => CapturePoint::PreActivation,
            Some("post") => CapturePoint::PostActivation,
            Some(c) => return Err(Error::config("model.capture", format!("expected pre or post, got `{c}`"))),
        };
        let model = ModelConfig { spec, capture };
        let learnable = model.spec.layers().iter().filter(|k| k.is_learnable()).count();

        // [trainer]
        let s = section("trainer");
        // MNIST defaults to the scaled run: 10000 samples for 20 epochs. Its
        // ε = 0.3 PGD training stalls at chance from a cold start without the
        // budget warm-up.
        let mnist = kind == DatasetKind::Mnist;
        let t = TrainConfig {
            epochs: if mnist { 20 } else { 100 },
            epsilon_warmup: if mnist { 5 } else { 0 },
            ..TrainConfig::default()
        };
        let trainer_kind = match s.raw("kind") {
            None => t.trainer,
            Some(k) => TrainerKind::parse(k).ok_or_else(|| {
                Error::config("trainer.kind", format!("unknown trainer `{k}` (standard, at, trade)"))
            })?,
        };
        let atk = attack_kind(&s, "attack", AttackKind::Fgsm)?;
        let epsilon = s.real("epsilon", 0.3)?;
        let base = match atk {
            AttackKind::Fgsm => AttackSpec::fgsm(epsilon),
            AttackKind::Pgd => AttackSpec::pgd(epsilon),
            AttackKind::Fast => AttackSpec::fast(epsilon),
        };
        let attack = AttackSpec {
            steps: s.uint("steps", base.steps)?,
            step_size: s.real("step_size", base.step_size)?,
            random_init: s.flag("random_init", base.random_init)?,
            clamp: kind.clamp(),
            ..base
        };
        attack.validate().map_err(|e| Error::config("trainer.attack", e.to_string()))?;
        let mvl = s
            .list("mvl", |t| t.parse::<usize>().ok(), "layer ordinal")?
            .unwrap_or_default();
        let uniform_gamma = s.real("gamma", crate::train::DEFAULT_GAMMA)?;
        let mut gamma: BTreeMap<usize, f64> = mvl.iter().map(|&l| (l, uniform_gamma)).collect();
        for (k, v) in &s.values {
            if let Some(l) = k.strip_prefix("gamma_") {
                let field = s.field(k);
                let l: usize = l.parse().map_err(|_| Error::config(&field, "expected gamma_<layer ordinal>"))?;
                let g: f64 = v.parse().map_err(|_| Error::config(&field, format!("expected a number, got `{v}`")))?;
                if !mvl.contains(&l) {
                    return Err(Error::config(field, format!("layer {l} is not in trainer.mvl")));
                }
                gamma.insert(l, g);
            }
        }
        let loss = match s.raw("loss").map(str::to_ascii_lowercase).as_deref() {
            None | Some("auto") => None,
            Some(l) => Some(LossKind::parse(l).ok_or_else(|| {
                Error::config("trainer.loss", format!("unknown loss `{l}` (auto, binary_ce, softmax_ce)"))
            })?),
        };
        let mut adam = t.adam;
        adam.lr = s.real("lr", adam.lr)?;
        adam.beta1 = s.real("beta1", adam.beta1)?;
        adam.beta2 = s.real("beta2", adam.beta2)?;
        adam.eps = s.real("adam_eps", adam.eps)?;
        let trainer = TrainConfig {
            trainer: trainer_kind,
            epochs: s.uint("epochs", t.epochs)?,
            batch_size: s.uint("batch_size", t.batch_size)?,
            adam,
            attack,
            epsilon_warmup: s.uint("epsilon_warmup", t.epsilon_warmup)?,
            mixing: s.flag("mixing", t.mixing)?,
            delta: s.real("delta", t.delta)?,
            lambda: s.real("lambda", t.lambda)?,
            mvl,
            gamma,
            detach_denominator: s.flag("detach_denominator", t.detach_denominator)?,
            seed: s.u64("seed", t.seed)?,
            loss,
            monitor_samples: s.uint("monitor_samples", t.monitor_samples)?,
            eval_epsilon: s.real("eval_epsilon", t.eval_epsilon)?,
        };
        if trainer.trainer == TrainerKind::Standard && !trainer.mvl.is_empty() {
            return Err(Error::config("trainer.mvl", "layer regularization needs trainer.kind = at or trade"));
        }
        trainer.validate(learnable)?;

        // [lsa]
        let s = section("lsa");
        let l = LsaConfig::default();
        let cfg = LsaConfig {
            m: s.uint("m", l.m)?,
            eta: s.real("eta", l.eta)?,
            seed: s.u64("seed", l.seed)?,
            chunk: s.uint("chunk", l.chunk)?,
        };
        if cfg.m == 0 {
            return Err(Error::config("lsa.m", "must be >= 1"));
        }
        if cfg.eta < 0.0 {
            return Err(Error::config("lsa.eta", "must be >= 0"));
        }
        if cfg.chunk == 0 {
            return Err(Error::config("lsa.chunk", "must be >= 1"));
        }
        let split = match s.raw("split").map(str::to_ascii_lowercase).as_deref() {
            None | Some("test") => Split::Test,
            Some("train") => Split::Train,
            Some(v) => return Err(Error::config("lsa.split", format!("expected test or train, got `{v}`"))),
        };
        let perturbations = s
            .list("perturbations", parse_perturbation, "perturbation")?
            .unwrap_or_else(|| vec![("pgd".into(), 0.3), ("fgsm".into(), 0.3)]);
        if perturbations.is_empty() {
            return Err(Error::config("lsa.perturbations", "needs at least one entry"));
        }
        let mut labels = BTreeSet::new();
        for (k, m) in &perturbations {
            if !labels.insert(format!("{k}:{m}")) {
                return Err(Error::config("lsa.perturbations", format!("duplicate entry `{k}:{m}`")));
            }
        }
        let lsa = LsaSection { cfg, split, perturbations };

        // [eval]
        let s = section("eval");
        let e = EvalConfig::default();
        let eval = EvalConfig {
            attack: attack_kind(&s, "attack", e.attack)?,
            epsilons: s.list("epsilons", |t| t.parse::<f64>().ok(), "epsilon")?.unwrap_or(e.epsilons),
            seed: s.u64("seed", e.seed)?,
            boundary_resolution: s.uint("boundary_resolution", e.boundary_resolution)?,
            boundary_points: s.uint("boundary_points", e.boundary_points)?,
            boundary_margin: s.real("boundary_margin", e.boundary_margin)?,
            boundary_attack: attack_kind(&s, "boundary_attack", e.boundary_attack)?,
            boundary_epsilon: s.real("boundary_epsilon", e.boundary_epsilon)?,
        };
        check_epsilon_grid(&eval.epsilons).map_err(|e| Error::config("eval.epsilons", e.to_string()))?;
        if eval.epsilons[0] != 0.0 {
            return Err(Error::config("eval.epsilons", "grid must start at 0"));
        }
        if eval.boundary_resolution < 2 {
            return Err(Error::config("eval.boundary_resolution", "must be >= 2"));
        }
        if eval.boundary_epsilon < 0.0 {
            return Err(Error::config("eval.boundary_epsilon", "must be >= 0"));
        }

        let output = section("output").raw("dir").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"));
        Ok(RunConfig { dataset, model, trainer, lsa, eval, output })
    }

    /// Checks that referenced files exist.
    pub fn check_paths(&self) -> Result<()> {
        if self.dataset.kind == DatasetKind::Mnist && !crate::data::mnist_present(&self.dataset.path) {
            return Err(Error::config(
                "dataset.path",
                format!("{} does not hold the four MNIST IDX files", self.dataset.path.display()),
            ));
        }
        Ok(())
    }

    /// Applies one seed to every seeded stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.trainer.seed = seed;
        self.lsa.cfg.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.dataset.kind.input_shape()
    }

    pub fn clamp(&self) -> Option<(f64, f64)> {
        self.dataset.kind.clamp()
    }

    /// LSA perturbations with the dataset's domain and the LSA seed applied.
    pub fn lsa_perturbations(&self) -> Vec<Perturbation> {
        self.lsa
            .perturbations
            .iter()
            .map(|(kind, m)| match AttackKind::parse(kind) {
                Some(a) => {
                    let spec = match a {
                        AttackKind::Fgsm => AttackSpec::fgsm(*m),
                        AttackKind::Pgd => AttackSpec::pgd(*m),
                        AttackKind::Fast => AttackSpec::fast(*m),
                    };
                    Perturbation::Attack(AttackSpec { clamp: self.clamp(), ..spec })
                }
                None => {
                    let nk = NoiseKind::parse(kind).expect("validated at parse time");
                    Perturbation::Noise(NoiseSpec {
                        magnitude: *m,
                        clamp: self.clamp(),
                        ..NoiseSpec::new(nk, self.lsa.cfg.seed)
                    })
                }
            })
            .collect()
    }

    /// Fully materialized config; `parse(to_ini())` reproduces `self`.
    pub fn to_ini(&self) -> String {
        let mut o = String::new();
        let d = &self.dataset;
        let _ = writeln!(o, "[dataset]");
        let _ = writeln!(o, "kind = {}", d.kind.name());
        let _ = writeln!(o, "seed = {}", d.seed);
        let _ = writeln!(o, "n_train = {}", d.n_train);
        let _ = writeln!(o, "n_test = {}", d.n_test);
        let _ = writeln!(o, "noise = {}", d.noise);
        let _ = writeln!(o, "path = {}", d.path.display());
        let _ = writeln!(o, "train_subset = {}", d.train_subset);
        let _ = writeln!(o, "test_subset = {}", d.test_subset);

        let _ = writeln!(o, "\n[model]");
        match &self.model.spec {
            ModelSpec::Named(a) => {
                let _ = writeln!(o, "architecture = {}", a.id());
            }
            ModelSpec::Inline(l) => {
                let _ = writeln!(o, "layers = {}", join(l, layer_token));
            }
        }
        let capture = match self.model.capture {
            CapturePoint::PreActivation => "pre",
            CapturePoint::PostActivation => "post",
        };
        let _ = writeln!(o, "capture = {capture}");

        let t = &self.trainer;
        let _ = writeln!(o, "\n[trainer]");
        let _ = writeln!(o, "kind = {}", t.trainer.name());
        let _ = writeln!(o, "epochs = {}", t.epochs);
        let _ = writeln!(o, "batch_size = {}", t.batch_size);
        let _ = writeln!(o, "lr = {}", t.adam.lr);
        let _ = writeln!(o, "beta1 = {}", t.adam.beta1);
        let _ = writeln!(o, "beta2 = {}", t.adam.beta2);
        let _ = writeln!(o, "adam_eps = {}", t.adam.eps);
        let _ = writeln!(o, "attack = {}", t.attack.kind.name());
        let _ = writeln!(o, "epsilon = {}", t.attack.epsilon);
        let _ = writeln!(o, "steps = {}", t.attack.steps);
        let _ = writeln!(o, "step_size = {}", t.attack.step_size);
        let _ = writeln!(o, "random_init = {}", t.attack.random_init);
        let _ = writeln!(o, "epsilon_warmup = {}", t.epsilon_warmup);
        let _ = writeln!(o, "mixing = {}", t.mixing);
        let _ = writeln!(o, "delta = {}", t.delta);
        let _ = writeln!(o, "lambda = {}", t.lambda);
        let _ = writeln!(o, "mvl = {}", join(&t.mvl, |l| l.to_string()));
        let _ = writeln!(o, "gamma = {}", crate::train::DEFAULT_GAMMA);
        for (l, g) in &t.gamma {
            let _ = writeln!(o, "gamma_{l} = {g}");
        }
        let _ = writeln!(o, "detach_denominator = {}", t.detach_denominator);
        let _ = writeln!(o, "seed = {}", t.seed);
        let _ = writeln!(o, "loss = {}", t.loss.map_or("auto", |l| l.name()));
        let _ = writeln!(o, "monitor_samples = {}", t.monitor_samples);
        let _ = writeln!(o, "eval_epsilon = {}", t.eval_epsilon);

        let l = &self.lsa;
        let _ = writeln!(o, "\n[lsa]");
        let _ = writeln!(o, "m = {}", l.cfg.m);
        let _ = writeln!(o, "eta = {}", l.cfg.eta);
        let _ = writeln!(o, "seed = {}", l.cfg.seed);
        let _ = writeln!(o, "chunk = {}", l.cfg.chunk);
        let _ = writeln!(o, "split = {}", l.split.name());
        let _ = writeln!(o, "perturbations = {}", join(&l.perturbations, |(k, m)| format!("{k}:{m}")));

        let e = &self.eval;
        let _ = writeln!(o, "\n[eval]");
        let _ = writeln!(o, "attack = {}", e.attack.name());
        let _ = writeln!(o, "epsilons = {}", join(&e.epsilons, |v| v.to_string()));
        let _ = writeln!(o, "seed = {}", e.seed);
        let _ = writeln!(o, "boundary_resolution = {}", e.boundary_resolution);
        let _ = writeln!(o, "boundary_points = {}", e.boundary_points);
        let _ = writeln!(o, "boundary_margin = {}", e.boundary_margin);
        let _ = writeln!(o, "boundary_attack = {}", e.boundary_attack.name());
        let _ = writeln!(o, "boundary_epsilon = {}", e.boundary_epsilon);

        let _ = writeln!(o, "\n[output]");
        let _ = writeln!(o, "dir = {}", self.output.display());
        o
    }

    /// Hex SHA-256 of the resolved form, recorded next to checkpoints.
    pub fn hash(&self) -> String {
        crate::checkpoint::sha256_hex(self.to_ini().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_moon_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.dataset.kind, DatasetKind::Moon);
        assert_eq!((c.dataset.n_train, c.dataset.n_test, c.dataset.noise), (1000, 1000, 0.2));
        assert_eq!(c.model.spec, ModelSpec::Named(Architecture::A));
        assert_eq!(c.trainer, TrainConfig::default());
        assert_eq!(c.eval.epsilons, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]);
        assert_eq!(c.eval.boundary_points, 1000);
    }

    #[test]
    fn mnist_defaults_are_the_scaled_run() {
        let c = RunConfig::defaults(DatasetKind::Mnist);
        assert_eq!((c.dataset.train_subset, c.trainer.epochs, c.trainer.epsilon_warmup), (10_000, 20, 5));
        assert_eq!(RunConfig::defaults(DatasetKind::Moon).trainer.epsilon_warmup, 0);
        assert_eq!(c.model.spec, ModelSpec::Named(Architecture::B));
    }

    #[test]
    fn resolved_form_round_trips() {
        let text = "[dataset]\nkind = mnist\n[trainer]\nkind = trade\nattack = pgd\nepsilon = 0.3\nmvl = 0, 1\ngamma = 0.2\ngamma_1 = 0.05\n\
                    [model]\nlayers = conv2d:4:5:5, relu, maxpool2d:2:2, flatten, linear:10\n\
                    [lsa]\nperturbations = pgd:0.3, salt, gaussian:1\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.trainer.gamma_for(0), 0.2);
        assert_eq!(c.trainer.gamma_for(1), 0.05);
        assert_eq!(c.trainer.attack.clamp, Some((0.0, 1.0)));
        assert_eq!(c.lsa.perturbations[1], ("salt".to_string(), 0.05));
        let resolved = c.to_ini();
        let again = RunConfig::parse(&resolved).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_ini(), resolved);
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            ("[trainer]\nkind = sgd\n", "trainer.kind"),
            ("[trainer]\nepochs = -1\n", "trainer.epochs"),
            ("[eval]\nepsilons = 0.1, 0.2\n", "eval.epsilons"),
            ("[eval]\nepsilons = 0, 0.2, 0.1\n", "eval.epsilons"),
            ("[lsa]\nperturbations = blur:1\n", "lsa.perturbations"),
            ("[dataset]\nkind = cifar\n", "dataset.kind"),
            ("[dataset]\ncolour = red\n", "dataset.colour"),
            ("[extras]\na = 1\n", "extras"),
            ("[trainer]\nkind = at\nmvl = 9\n", "trainer.mvl"),
            ("[trainer]\nkind = standard\nmvl = 1\n", "trainer.mvl"),
            ("[trainer]\nkind = at\nmvl = 1\ngamma_2 = 1\n", "trainer.gamma_2"),
            ("[model]\narchitecture = Z\n", "model.architecture"),
        ];
        for (text, field) in cases {
            match RunConfig::parse(text) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn missing_mnist_files_are_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::parse(&format!("[dataset]\nkind = mnist\npath = {}\n", dir.path().display())).unwrap();
        let err = c.check_paths().unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn seed_override_reaches_every_stage() {
        let c = RunConfig::defaults(DatasetKind::Moon).with_seed(5);
        assert_eq!((c.dataset.seed, c.trainer.seed, c.lsa.cfg.seed, c.eval.seed), (5, 5, 5, 5));
        let p = c.lsa_perturbations();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].label(), "pgd-eps0.3");
    }
}
