use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn lsa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsa")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "[dataset]\nn_train = 100\nn_test = 60\n\
    [trainer]\nkind = at\nattack = fgsm\nepsilon = 0.2\nepochs = 2\nmonitor_samples = 20\n\
    [lsa]\nm = 20\n\
    [eval]\nepsilons = 0, 0.2\nboundary_resolution = 10\nboundary_points = 30\n";

fn setup(cfg: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("run.cfg"), cfg).unwrap();
    dir
}

#[test]
fn train_lsa_eval_boundary_round() {
    let dir = setup(SMALL);
    let p = dir.path();
    let o = lsa(p, &["--config", "run.cfg", "--out", "run", "train"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(p.join("run/model.ckpt").is_file());
    assert!(p.join("run/resolved.cfg").is_file());

    let o = lsa(p, &["--config", "run.cfg", "--out", "run", "lsa", "run/model.ckpt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(p.join("run/lsa_pgd-eps0.3.csv").is_file());
    assert!(p.join("run/lsa_fgsm-eps0.3.csv").is_file());

    let o = lsa(p, &["--config", "run.cfg", "--out", "run", "eval", "run/model.ckpt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let board = fs::read_to_string(p.join("run/leaderboard.csv")).unwrap();
    assert_eq!(board.lines().count(), 2);
    assert!(board.lines().nth(1).unwrap().starts_with("AT-FGSM,"));

    let o = lsa(p, &["--config", "run.cfg", "--out", "run", "boundary", "run/model.ckpt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("30 adversarial points"));
    assert!(p.join("run/boundary.svg").is_file());
}

#[test]
fn seed_flag_changes_the_checkpoint_and_reruns_match() {
    let dir = setup(SMALL);
    let p = dir.path();
    for (out, seed) in [("a", "1"), ("b", "1"), ("c", "2")] {
        let o = lsa(p, &["--config", "run.cfg", "--out", out, "--seed", seed, "train"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let read = |d: &str| fs::read(p.join(d).join("model.ckpt")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = setup("[trainer]\nkind = sgd\n");
    let o = lsa(dir.path(), &["--config", "run.cfg", "train"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("trainer.kind"), "{}", stderr(&o));

    let dir = setup("[trainer]\nepochs = 1\nbogus = 3\n");
    let o = lsa(dir.path(), &["--config", "run.cfg", "train"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));

    let o = lsa(dir.path(), &["repro", "cifar"]);
    assert_eq!(code(&o), 2);
    let o = lsa(dir.path(), &["no-such-command"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = setup("[dataset]\nn_train = 64\nn_test = 32\n[trainer]\nkind = standard\nepochs = 3\nlr = 1e300\n");
    let o = lsa(dir.path(), &["--config", "run.cfg", "--out", "run", "train"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn checkpoint_problems_exit_4_or_1() {
    let dir = setup(SMALL);
    let p = dir.path();
    fs::write(p.join("junk.ckpt"), b"LSAC garbage").unwrap();
    let o = lsa(p, &["--config", "run.cfg", "--out", "run", "lsa", "junk.ckpt"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let o = lsa(p, &["--config", "run.cfg", "--out", "run", "lsa", "missing.ckpt"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn boundary_on_images_exits_5() {
    let dir = setup("[dataset]\nkind = mnist\n");
    fs::write(dir.path().join("x.ckpt"), b"").unwrap();
    let o = lsa(dir.path(), &["--config", "run.cfg", "--out", "run", "boundary", "x.ckpt"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}
