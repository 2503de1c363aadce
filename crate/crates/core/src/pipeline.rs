//! Config-driven commands behind the `lsa` binary and the repro suites.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::checkpoint::{self, Sidecar};
use crate::config::{DatasetKind, RunConfig};
use crate::data::{load_mnist_dir, make_moons, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{boundary_grid, eval_attack, robust_grid, BoundaryBox, BoundaryGrid, RobustGrid};
use crate::lsa::{run_lsa, LsaReport};
use crate::nn::Model;
use crate::perturb::{AttackKind, AttackSpec};
use crate::report::{self, Leaderboard};
use crate::train::{train, TrainLog, TrainerKind};

pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const RESOLVED: &str = "resolved.cfg";
pub const LEADERBOARD: &str = "leaderboard.csv";
pub const ROBUST_GRIDS: &str = "robust_grids.csv";
pub const RG_HISTOGRAM: &str = "rg_histogram.svg";
pub const BOUNDARY_GRID: &str = "boundary_grid.csv";
pub const BOUNDARY_POINTS: &str = "boundary_points.csv";
pub const BOUNDARY_SVG: &str = "boundary.svg";

/// File names of one LSA report: `(summary, records)`.
pub fn lsa_file_names(label: &str) -> (String, String) {
    (format!("lsa_{label}.csv"), format!("lsa_{label}_records.csv"))
}

/// Train and test splits described by the dataset section.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    let (train, test) = match d.kind {
        DatasetKind::Moon => {
            let base = d.seed.wrapping_mul(2);
            (
                make_moons(d.n_train, d.noise, base)?.with_split(Split::Train),
                make_moons(d.n_test, d.noise, base.wrapping_add(1))?.with_split(Split::Test),
            )
        }
        DatasetKind::Mnist => {
            cfg.check_paths()?;
            load_mnist_dir(&d.path)?
        }
    };
    let cut = |ds: Dataset, n: usize| if n == 0 || n >= ds.len() { Ok(ds) } else { ds.subset(n, d.seed) };
    Ok((cut(train, d.train_subset)?, cut(test, d.test_subset)?))
}

/// Freshly initialized model, seeded by `trainer.seed`.
pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    Model::init(cfg.input_shape(), &cfg.model.spec.layers(), cfg.trainer.seed)
        .map(|m| m.with_capture(cfg.model.capture))
        .map_err(|e| Error::config("model", e.to_string()))
}

/// Loads a checkpoint that must match the configured architecture.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let m = checkpoint::load_expecting(path, &cfg.input_shape(), &cfg.model.spec.layers())?;
    Ok(m.with_capture(cfg.model.capture))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let p = dir.join(RESOLVED);
    fs::write(&p, cfg.to_ini()).map_err(|e| Error::io(&p, e))
}

/// Checkpoint tag from its sidecar, else the file stem.
pub fn checkpoint_tag(path: &Path) -> String {
    match Sidecar::read(path) {
        Ok(s) => s.model_tag,
        Err(_) => path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into()),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub tag: String,
    pub model: Model,
    pub log: TrainLog,
    pub checkpoint: PathBuf,
}

fn train_with(cfg: &RunConfig, train_set: &Dataset) -> Result<TrainOutcome> {
    let out = &cfg.output;
    write_resolved(cfg, out)?;
    let mut model = build_model(cfg)?;
    let log = train(&mut model, train_set, &cfg.trainer)?;
    let ckpt = out.join(CHECKPOINT);
    checkpoint::save(&model, &ckpt)?;
    let tag = cfg.trainer.tag();
    Sidecar {
        model_tag: tag.clone(),
        seed: cfg.trainer.seed,
        epoch: cfg.trainer.epochs,
        config_hash: cfg.hash(),
        param_digest: checkpoint::param_digest(&model)?,
    }
    .write(&ckpt)?;
    log.write_csv(&out.join(TRAIN_LOG))?;
    Ok(TrainOutcome { tag, model, log, checkpoint: ckpt })
}

/// Trains the configured model and writes `model.ckpt` (plus sidecar),
/// `train_log.csv` and `resolved.cfg` into the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (train_set, _) = load_datasets(cfg)?;
    train_with(cfg, &train_set)
}

fn lsa_with(cfg: &RunConfig, model: &Model, train_set: &Dataset, test_set: &Dataset) -> Result<Vec<LsaReport>> {
    let out = &cfg.output;
    ensure_dir(out)?;
    let source = match cfg.lsa.split {
        Split::Test => test_set,
        Split::Train => train_set,
    };
    let mut reports = Vec::new();
    for p in cfg.lsa_perturbations() {
        let rep = run_lsa(model, source, &p, &cfg.lsa.cfg).map_err(|e| e.in_stage(format!("lsa {}", p.label())))?;
        let (summary, records) = lsa_file_names(&p.label());
        rep.write_summary_csv(&out.join(summary))?;
        rep.write_records_csv(&out.join(records))?;
        reports.push(rep);
    }
    let series: Vec<(String, Vec<f64>)> =
        reports.iter().map(|r| (r.perturbation.label(), r.stats.per_layer_mean.clone())).collect();
    report::write_svg(&out.join("lsa_curves.svg"), &report::lsa_curves_svg("mean CM per learnable layer", &series))?;
    Ok(reports)
}

/// One LSA report per configured perturbation: `lsa_<label>.csv` (per-layer
/// summary), `lsa_<label>_records.csv` and `lsa_curves.svg`.
pub fn cmd_lsa(cfg: &RunConfig, ckpt: &Path) -> Result<Vec<LsaReport>> {
    let model = load_model(cfg, ckpt)?;
    let (train_set, test_set) = load_datasets(cfg)?;
    write_resolved(cfg, &cfg.output)?;
    lsa_with(cfg, &model, &train_set, &test_set)
}

fn grid_for(cfg: &RunConfig, model: &Model, test_set: &Dataset, tag: &str) -> Result<RobustGrid> {
    robust_grid(model, test_set, cfg.eval.attack, &cfg.eval.epsilons, cfg.clamp(), tag, cfg.eval.seed)
}

fn write_leaderboard(out: &Path, grids: &[RobustGrid]) -> Result<Leaderboard> {
    ensure_dir(out)?;
    let board = Leaderboard::from_grids(grids)?;
    report::write_robust_grids(&out.join(ROBUST_GRIDS), grids)?;
    board.write_csv(&out.join(LEADERBOARD))?;
    report::write_svg(&out.join(RG_HISTOGRAM), &report::rg_histogram_svg(&board))?;
    Ok(board)
}

/// Robust grids for each checkpoint on the test split, combined into
/// `leaderboard.csv`, `robust_grids.csv` and `rg_histogram.svg`.
pub fn cmd_eval(cfg: &RunConfig, ckpts: &[PathBuf]) -> Result<Leaderboard> {
    if ckpts.is_empty() {
        return Err(Error::InvalidArgument("eval needs at least one checkpoint".into()));
    }
    let models = ckpts.iter().map(|p| load_model(cfg, p)).collect::<Result<Vec<_>>>()?;
    let (_, test_set) = load_datasets(cfg)?;
    write_resolved(cfg, &cfg.output)?;
    let grids = models
        .iter()
        .zip(ckpts)
        .map(|(m, p)| grid_for(cfg, m, &test_set, &checkpoint_tag(p)))
        .collect::<Result<Vec<_>>>()?;
    write_leaderboard(&cfg.output, &grids)
}

fn boundary_with(cfg: &RunConfig, model: &Model, test_set: &Dataset) -> Result<BoundaryGrid> {
    let e = &cfg.eval;
    let bbox = BoundaryBox::around(test_set, e.boundary_margin)?;
    let spec: AttackSpec = eval_attack(e.boundary_attack, e.boundary_epsilon, cfg.clamp());
    let n_adv = e.boundary_points.min(test_set.len());
    let grid = boundary_grid(model, test_set, bbox, e.boundary_resolution, &spec, n_adv, e.seed)?;
    let out = &cfg.output;
    ensure_dir(out)?;
    report::write_boundary_csvs(&grid, &out.join(BOUNDARY_GRID), &out.join(BOUNDARY_POINTS))?;
    report::write_svg(&out.join(BOUNDARY_SVG), &report::boundary_svg(&grid))?;
    Ok(grid)
}

/// Decision-boundary lattice and adversarial points for a 2-D model.
pub fn cmd_boundary(cfg: &RunConfig, ckpt: &Path) -> Result<BoundaryGrid> {
    if cfg.input_shape() != [2] {
        return Err(Error::NotTwoDimensional(format!(
            "dataset `{}` has inputs of shape {:?}; the boundary plot needs 2-D inputs",
            cfg.dataset.kind.name(),
            cfg.input_shape()
        )));
    }
    let bytes = fs::read(ckpt).map_err(|e| Error::io(ckpt, e))?;
    let layers = checkpoint::decode_layers(&bytes)?;
    if checkpoint::flat_input_features(&layers) != Some(2) {
        return Err(Error::NotTwoDimensional(format!("{} does not take 2-D inputs", ckpt.display())));
    }
    let model = load_model(cfg, ckpt)?;
    let (_, test_set) = load_datasets(cfg)?;
    write_resolved(cfg, &cfg.output)?;
    boundary_with(cfg, &model, &test_set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Moon,
    Mnist,
}

impl Suite {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "moon" => Some(Suite::Moon),
            "mnist" => Some(Suite::Mnist),
            _ => None,
        }
    }

    pub fn dataset(&self) -> DatasetKind {
        match self {
            Suite::Moon => DatasetKind::Moon,
            Suite::Mnist => DatasetKind::Mnist,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReproOptions {
    pub out: PathBuf,
    pub seed: u64,
    /// Worker threads for the training sweep; 1 runs sequentially.
    pub jobs: usize,
    /// MNIST only: all 60000 training samples for 100 epochs.
    pub full: bool,
    /// Progress lines on standard error.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct ModelRun {
    pub tag: String,
    pub dir: PathBuf,
    pub log: TrainLog,
    pub lsa: Vec<LsaReport>,
}

#[derive(Debug, Clone)]
pub struct ReproOutcome {
    pub leaderboard: Leaderboard,
    pub runs: Vec<ModelRun>,
}

impl ReproOutcome {
    pub fn run(&self, tag: &str) -> Option<&ModelRun> {
        self.runs.iter().find(|r| r.tag == tag)
    }
}

fn variant(base: &RunConfig, trainer: TrainerKind, attack: AttackSpec, mvl: Vec<usize>) -> RunConfig {
    let mut cfg = base.clone();
    let t = &mut cfg.trainer;
    t.trainer = trainer;
    t.attack = AttackSpec { clamp: base.clamp(), ..attack };
    t.gamma = mvl.iter().map(|&l| (l, base.trainer.gamma_for(l))).collect();
    t.mvl = mvl;
    cfg
}

/// Directory name of a model inside a repro run, e.g. `at-pgd-lr-l2`.
pub fn run_dir_name(tag: &str) -> String {
    tag.to_ascii_lowercase()
}

/// Per-model configs of a suite, with output directories under `out`.
///
/// Moon: Normal plus AT-{FGSM, PGD, TRADE, FAST}, each alone and with LR on
/// learnable layer 0, 1 or 2 (17 models). MNIST: Normal, AT-PGD and
/// AT-PGD-LR-L0; 10000 training samples for 20 epochs unless `full`.
pub fn suite_configs(suite: Suite, base: &RunConfig, opts: &ReproOptions) -> Vec<RunConfig> {
    let base = suite_base(suite, base, opts);
    // The configured trainer attack is used as is where its kind matches.
    let configured = |kind: AttackKind| {
        let a = base.trainer.attack;
        if a.kind == kind {
            return a;
        }
        match kind {
            AttackKind::Fgsm => AttackSpec::fgsm(a.epsilon),
            AttackKind::Pgd => AttackSpec::pgd(a.epsilon),
            AttackKind::Fast => AttackSpec::fast(a.epsilon),
        }
    };
    let mut runs = vec![variant(&base, TrainerKind::Standard, base.trainer.attack, vec![])];
    match suite {
        Suite::Moon => {
            let attacks = [
                (TrainerKind::Adversarial, configured(AttackKind::Fgsm)),
                (TrainerKind::Adversarial, configured(AttackKind::Pgd)),
                (TrainerKind::Trade, configured(AttackKind::Pgd)),
                (TrainerKind::Adversarial, configured(AttackKind::Fast)),
            ];
            for (kind, attack) in attacks {
                runs.push(variant(&base, kind, attack, vec![]));
                for l in 0..3 {
                    runs.push(variant(&base, kind, attack, vec![l]));
                }
            }
        }
        Suite::Mnist => {
            let pgd = configured(AttackKind::Pgd);
            runs.push(variant(&base, TrainerKind::Adversarial, pgd, vec![]));
            runs.push(variant(&base, TrainerKind::Adversarial, pgd, vec![0]));
        }
    }
    for cfg in &mut runs {
        cfg.output = opts.out.join(run_dir_name(&cfg.trainer.tag()));
    }
    runs
}

/// Suite-level config: the base with the seed and output applied.
pub fn suite_base(suite: Suite, base: &RunConfig, opts: &ReproOptions) -> RunConfig {
    let mut cfg = base.clone().with_seed(opts.seed);
    if suite == Suite::Mnist && opts.full {
        cfg.dataset.train_subset = 0;
        cfg.trainer.epochs = 100;
    }
    cfg.output = opts.out.clone();
    cfg
}

fn run_one(cfg: &RunConfig, train_set: &Dataset, test_set: &Dataset, boundary: bool) -> Result<(ModelRun, RobustGrid)> {
    let tag = cfg.trainer.tag();
    let stage = |what: &str| format!("{tag}: {what}");
    let outcome = train_with(cfg, train_set).map_err(|e| e.in_stage(stage("train")))?;
    let lsa = lsa_with(cfg, &outcome.model, train_set, test_set).map_err(|e| e.in_stage(stage("lsa")))?;
    let grid = grid_for(cfg, &outcome.model, test_set, &tag).map_err(|e| e.in_stage(stage("eval")))?;
    if boundary {
        boundary_with(cfg, &outcome.model, test_set).map_err(|e| e.in_stage(stage("boundary")))?;
    }
    Ok((ModelRun { tag, dir: cfg.output.clone(), log: outcome.log, lsa }, grid))
}

/// Runs a whole suite: trains every model, analyzes and evaluates each, then
/// writes the leaderboard, robust grids, R&G histogram and combined LSA
/// curves into `opts.out`. Moon models trained with TRADE also get boundary
/// plots.
pub fn cmd_repro(suite: Suite, base: &RunConfig, opts: &ReproOptions) -> Result<ReproOutcome> {
    let top = suite_base(suite, base, opts);
    if top.dataset.kind != suite.dataset() {
        return Err(Error::config("dataset.kind", format!("the {} suite needs dataset.kind = {}", suite.dataset().name(), suite.dataset().name())));
    }
    let (train_set, test_set) = load_datasets(&top).map_err(|e| e.in_stage("load data"))?;
    write_resolved(&top, &opts.out)?;
    let configs = suite_configs(suite, base, opts);
    let boundary = |cfg: &RunConfig| suite == Suite::Moon && cfg.trainer.trainer == TrainerKind::Trade;

    type Slot = Mutex<Option<Result<(ModelRun, RobustGrid)>>>;
    let results: Vec<Slot> = configs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(cfg) = configs.get(i) else { break };
        if opts.verbose {
            eprintln!("[{}/{}] {}", i + 1, configs.len(), cfg.trainer.tag());
        }
        let r = run_one(cfg, &train_set, &test_set, boundary(cfg));
        *results[i].lock().expect("result slot") = Some(r);
    };
    let jobs = opts.jobs.clamp(1, configs.len().max(1));
    if jobs == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(work);
            }
        });
    }

    let mut runs = Vec::new();
    let mut grids = Vec::new();
    for slot in results {
        let (run, grid) = slot.into_inner().expect("result slot").expect("every config ran")?;
        runs.push(run);
        grids.push(grid);
    }
    let leaderboard = write_leaderboard(&opts.out, &grids)?;
    write_lsa_overview(&opts.out, &runs)?;
    Ok(ReproOutcome { leaderboard, runs })
}

/// `lsa_summary.csv` over all runs and one curve chart per perturbation.
fn write_lsa_overview(out: &Path, runs: &[ModelRun]) -> Result<()> {
    let path = out.join("lsa_summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["model_tag", "perturbation", "layer", "mean_cm", "mu", "sigma", "flagged", "mvl_rank"])?;
    for run in runs {
        for rep in &run.lsa {
            let rank: Vec<usize> = rep.mvl.layers();
            for (l, mean) in rep.stats.per_layer_mean.iter().enumerate() {
                let r = rank.iter().position(|&x| x == l).map_or(String::new(), |p| p.to_string());
                w.write_record([
                    run.tag.clone(),
                    rep.perturbation.label(),
                    l.to_string(),
                    mean.to_string(),
                    rep.stats.mu.to_string(),
                    rep.stats.sigma.to_string(),
                    rep.mvl.contains(l).to_string(),
                    r,
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let labels: Vec<String> =
        runs.first().map(|r| r.lsa.iter().map(|rep| rep.perturbation.label()).collect()).unwrap_or_default();
    for (i, label) in labels.iter().enumerate() {
        let series: Vec<(String, Vec<f64>)> = runs
            .iter()
            .filter_map(|r| r.lsa.get(i).map(|rep| (r.tag.clone(), rep.stats.per_layer_mean.clone())))
            .collect();
        let svg = report::lsa_curves_svg(&format!("mean CM per learnable layer, {label}"), &series);
        report::write_svg(&out.join(format!("lsa_curves_{label}.svg")), &svg)?;
    }
    Ok(())
}

/// Default config for a suite's dataset.
pub fn suite_defaults(suite: Suite) -> RunConfig {
    RunConfig::defaults(suite.dataset())
}
