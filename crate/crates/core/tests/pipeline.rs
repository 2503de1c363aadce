use std::fs;
use std::path::{Path, PathBuf};

use lsa_core::checkpoint;
use lsa_core::config::RunConfig;
use lsa_core::eval;
use lsa_core::pipeline::{self, lsa_file_names};
use tempfile::TempDir;

fn small(extra: &str, out: &Path) -> RunConfig {
    let text = format!(
        "[dataset]\nkind = moon\nn_train = 120\nn_test = 80\n\
         [trainer]\nkind = at\nattack = fgsm\nepsilon = 0.2\nepochs = 3\nbatch_size = 32\nmonitor_samples = 20\n\
         [lsa]\nm = 30\n\
         [eval]\nepsilons = 0, 0.1, 0.3\nboundary_resolution = 20\nboundary_points = 50\n\
         {extra}\n[output]\ndir = {}\n",
        out.display()
    );
    RunConfig::parse(&text).unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn train_in(dir: &Path, extra: &str) -> (RunConfig, PathBuf) {
    let cfg = small(extra, dir);
    let out = pipeline::cmd_train(&cfg).unwrap();
    (cfg, out.checkpoint)
}

#[test]
fn train_writes_artifacts_and_repeats_bit_for_bit() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let (_, ckpt_a) = train_in(a.path(), "");
    let (_, ckpt_b) = train_in(b.path(), "");
    for name in [pipeline::CHECKPOINT, pipeline::TRAIN_LOG, pipeline::RESOLVED, "model.ckpt.meta"] {
        assert!(a.path().join(name).is_file(), "{name} missing");
    }
    assert_eq!(checkpoint::sha256_hex(&read(&ckpt_a)), checkpoint::sha256_hex(&read(&ckpt_b)));
    assert_eq!(read(a.path().join(pipeline::TRAIN_LOG)), read(b.path().join(pipeline::TRAIN_LOG)));
    let meta = checkpoint::Sidecar::read(&ckpt_a).unwrap();
    assert_eq!(meta.model_tag, "AT-FGSM");
    assert_eq!(meta.epoch, 3);
}

#[test]
fn rerun_from_resolved_config_reproduces_every_csv() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let (cfg, ckpt) = train_in(a.path(), "");
    pipeline::cmd_lsa(&cfg, &ckpt).unwrap();
    pipeline::cmd_eval(&cfg, &[ckpt]).unwrap();

    let mut again = RunConfig::load(&a.path().join(pipeline::RESOLVED)).unwrap();
    assert_eq!(again, cfg);
    again.output = b.path().to_path_buf();
    let out = pipeline::cmd_train(&again).unwrap();
    pipeline::cmd_lsa(&again, &out.checkpoint).unwrap();
    pipeline::cmd_eval(&again, &[out.checkpoint]).unwrap();

    let mut compared = 0;
    for entry in fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        let s = name.to_string_lossy();
        if s.ends_with(".csv") || s.ends_with(".svg") || s.ends_with(".ckpt") {
            assert_eq!(read(a.path().join(&name)), read(b.path().join(&name)), "{s} differs");
            compared += 1;
        }
    }
    assert!(compared >= 8, "only {compared} files compared");
}

#[test]
fn one_summary_per_perturbation() {
    let dir = TempDir::new().unwrap();
    let (cfg, ckpt) = train_in(dir.path(), "[lsa]\nm = 30\nperturbations = pgd:0.3, gaussian:0.1\n");
    let reports = pipeline::cmd_lsa(&cfg, &ckpt).unwrap();
    assert_eq!(reports.len(), 2);
    for label in ["pgd-eps0.3", "gaussian-0.1"] {
        let (summary, records) = lsa_file_names(label);
        let text = String::from_utf8(read(dir.path().join(&summary))).unwrap();
        assert_eq!(text.lines().count(), 1 + 4, "{summary}");
        assert_eq!(String::from_utf8(read(dir.path().join(records))).unwrap().lines().count(), 1 + 30 * 4);
    }
    assert!(dir.path().join("lsa_curves.svg").is_file());
}

#[test]
fn zero_budget_gives_zero_cm_and_no_vulnerable_layers() {
    let dir = TempDir::new().unwrap();
    let (cfg, ckpt) = train_in(dir.path(), "[lsa]\nm = 30\nperturbations = fgsm:0\n");
    let reports = pipeline::cmd_lsa(&cfg, &ckpt).unwrap();
    assert!(reports[0].stats.per_layer_mean.iter().all(|&v| v == 0.0));
    assert!(reports[0].mvl.is_empty());
}

#[test]
fn eval_ranks_one_row_per_checkpoint() {
    let dir = TempDir::new().unwrap();
    let (cfg, ckpt) = train_in(dir.path(), "");
    let board = pipeline::cmd_eval(&cfg, std::slice::from_ref(&ckpt)).unwrap();
    assert_eq!(board.rows.len(), 1);
    assert_eq!(board.rows[0].model_tag, "AT-FGSM");
    let csv = String::from_utf8(read(dir.path().join(pipeline::LEADERBOARD))).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("model_tag,"));
    let row = &board.rows[0];
    assert!((row.rg_score - row.accuracies.iter().sum::<f64>()).abs() < 1e-9);
}

#[test]
fn zero_only_grid_scores_clean_accuracy() {
    let dir = TempDir::new().unwrap();
    let (mut cfg, ckpt) = train_in(dir.path(), "");
    cfg.eval.epsilons = vec![0.0];
    let board = pipeline::cmd_eval(&cfg, std::slice::from_ref(&ckpt)).unwrap();
    let model = pipeline::load_model(&cfg, &ckpt).unwrap();
    let (_, test) = pipeline::load_datasets(&cfg).unwrap();
    assert_eq!(board.rows[0].rg_score, eval::accuracy(&model, &test).unwrap());
}

#[test]
fn boundary_is_deterministic_and_sized_by_config() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let (cfg, ckpt) = train_in(a.path(), "");
    let grid = pipeline::cmd_boundary(&cfg, &ckpt).unwrap();
    assert_eq!(grid.cells.len(), 20 * 20);
    assert_eq!(grid.adversarial.len(), 50);
    let mut other = cfg.clone();
    other.output = b.path().to_path_buf();
    pipeline::cmd_boundary(&other, &ckpt).unwrap();
    for name in [pipeline::BOUNDARY_SVG, pipeline::BOUNDARY_GRID, pipeline::BOUNDARY_POINTS] {
        assert_eq!(read(a.path().join(name)), read(b.path().join(name)), "{name}");
    }
    let points = String::from_utf8(read(a.path().join(pipeline::BOUNDARY_POINTS))).unwrap();
    assert_eq!(points.lines().count(), 1 + 50);
}

#[test]
fn default_boundary_overlays_a_thousand_points() {
    let dir = TempDir::new().unwrap();
    let text = format!(
        "[trainer]\nkind = standard\nepochs = 1\n[eval]\nboundary_resolution = 30\n[output]\ndir = {}\n",
        dir.path().display()
    );
    let cfg = RunConfig::parse(&text).unwrap();
    let ckpt = pipeline::cmd_train(&cfg).unwrap().checkpoint;
    let grid = pipeline::cmd_boundary(&cfg, &ckpt).unwrap();
    assert_eq!(grid.adversarial.len(), 1000);
}

#[test]
fn boundary_refuses_image_models() {
    let dir = TempDir::new().unwrap();
    let model = lsa_core::Architecture::B.build(0).unwrap();
    let ckpt = dir.path().join("b.ckpt");
    checkpoint::save(&model, &ckpt).unwrap();
    // 2-D dataset config, but the checkpoint itself takes images.
    let cfg = small("", dir.path());
    let err = pipeline::cmd_boundary(&cfg, &ckpt).unwrap_err();
    assert_eq!(err.exit_code(), 5, "{err}");
    // Image dataset config.
    let mnist = RunConfig::parse(&format!("[dataset]\nkind = mnist\n[output]\ndir = {}\n", dir.path().display())).unwrap();
    assert_eq!(pipeline::cmd_boundary(&mnist, &ckpt).unwrap_err().exit_code(), 5);
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let dir = TempDir::new().unwrap();
    let (_, ckpt) = train_in(dir.path(), "");
    let other = small("[model]\nlayers = linear:8, elu, linear:1\n", dir.path());
    let err = pipeline::cmd_lsa(&other, &ckpt).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");

    let garbage = dir.path().join("junk.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(pipeline::cmd_eval(&small("", dir.path()), &[garbage]).unwrap_err().exit_code(), 4);

    let missing = dir.path().join("absent.ckpt");
    assert_eq!(pipeline::cmd_lsa(&small("", dir.path()), &missing).unwrap_err().exit_code(), 1);
}

#[test]
fn commands_leave_the_checkpoint_untouched() {
    let dir = TempDir::new().unwrap();
    let (cfg, ckpt) = train_in(dir.path(), "");
    let before = read(&ckpt);
    pipeline::cmd_lsa(&cfg, &ckpt).unwrap();
    pipeline::cmd_eval(&cfg, std::slice::from_ref(&ckpt)).unwrap();
    pipeline::cmd_boundary(&cfg, &ckpt).unwrap();
    assert_eq!(read(&ckpt), before);
}

#[test]
fn moon_suite_covers_every_variant_and_ignores_job_count() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let base = small("[trainer]\nepochs = 1\n[lsa]\nm = 10\n", a.path());
    let run = |out: &Path, jobs: usize| {
        let opts = pipeline::ReproOptions { out: out.to_path_buf(), seed: 4, jobs, full: false, verbose: false };
        pipeline::cmd_repro(pipeline::Suite::Moon, &base, &opts).unwrap()
    };
    let one = run(a.path(), 1);
    let two = run(b.path(), 2);
    assert_eq!(two.leaderboard, one.leaderboard);
    let mut tags: Vec<&str> = one.leaderboard.rows.iter().map(|r| r.model_tag.as_str()).collect();
    tags.sort_unstable();
    assert_eq!(tags.len(), 17);
    for t in ["Normal", "AT-FGSM", "AT-PGD-LR-L1", "AT-TRADE-LR-L2", "AT-FAST-LR-L0"] {
        assert!(tags.contains(&t), "{t} missing");
    }
    for name in [pipeline::LEADERBOARD, pipeline::ROBUST_GRIDS, "lsa_summary.csv"] {
        assert_eq!(read(a.path().join(name)), read(b.path().join(name)), "{name}");
    }
    assert!(a.path().join("at-trade/boundary.svg").is_file());
    assert!(!a.path().join("at-pgd/boundary.svg").exists());
}
