use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rccm::certnets::load_checkpoint;

const TINY: &str = "\
system = pvtol
n_train = 256
epochs = 1
batch_size = 128
hidden = 8
c = 4
seed = 5
";

fn rccm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rccm"))
        .current_dir(dir)
        .env_remove("RCCM_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Trains the tiny config into `dir` and returns the checkpoint path.
fn tiny_checkpoint(dir: &Path) -> PathBuf {
    fs::write(dir.join("tiny.cfg"), TINY).unwrap();
    let o = rccm(dir, &["train", "--config", "tiny.cfg", "--out", "run"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("run/train-pvtol-5.ckpt")
}

#[test]
fn usage_errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&rccm(d.path(), &["train", "--bogus"])), 2);
    assert_eq!(code(&rccm(d.path(), &["fly"])), 2);
    assert_eq!(
        code(&rccm(d.path(), &["train", "--config", "missing.cfg"])),
        2
    );
    assert_eq!(code(&rccm(d.path(), &["--help"])), 0);
    let o = rccm(d.path(), &["simulate"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--ckpt"));
}

#[test]
fn training_writes_history_checkpoint_and_manifest_deterministically() {
    let d = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(d.path());
    let run = d.path().join("run");
    let hist = fs::read_to_string(run.join("train-pvtol-5.csv")).unwrap();
    let mut lines = hist.lines();
    assert_eq!(
        lines.next(),
        Some("step,risk_c1,risk_c2,risk_c3,risk_c4,alpha,total")
    );
    assert_eq!(lines.count(), 2);

    let first = fs::read(&ck).unwrap();
    let o = rccm(
        d.path(),
        &[
            "train",
            "--config",
            "run/train-pvtol-5.manifest",
            "--out",
            "again",
            "--jobs",
            "1",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(d.path().join("again/train-pvtol-5.ckpt")).unwrap(),
        first
    );
    assert_eq!(
        fs::read_to_string(d.path().join("again/train-pvtol-5.csv")).unwrap(),
        hist
    );
}

#[test]
fn seed_environment_variable_overrides_config() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("tiny.cfg"), TINY).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rccm"))
        .current_dir(d.path())
        .env("RCCM_SEED", "11")
        .args(["train", "--config", "tiny.cfg"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(d.path().join("train-pvtol-11.ckpt").exists());
}

#[test]
fn untrained_checkpoint_fails_statistical_verification() {
    let d = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(d.path());
    let ck = ck.to_str().unwrap();
    let o = rccm(
        d.path(),
        &["verify", "--ckpt", ck, "--mode", "stat", "--samples", "500"],
    );
    assert_eq!(code(&o), 1, "{}", stdout(&o));
    let table = fs::read_to_string(d.path().join("verify-pvtol-0.csv")).unwrap();
    let c1: f64 = table
        .lines()
        .find(|l| l.starts_with("C1,"))
        .and_then(|l| l.split(',').nth(1))
        .unwrap()
        .parse()
        .unwrap();
    assert!(c1 > 0.0);
    assert_eq!(
        code(&rccm(d.path(), &["verify", "--ckpt", ck, "--mode", "grid"])),
        2
    );
}

#[test]
fn refine_appends_a_tube_and_keeps_the_networks() {
    let d = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(d.path());
    let before = load_checkpoint(&ck).unwrap();
    let ckp = ck.to_str().unwrap();
    let o = rccm(
        d.path(),
        &[
            "refine",
            "--ckpt",
            ckp,
            "--selector",
            "positions",
            "--samples",
            "200",
            "--steps",
            "50",
        ],
    );
    assert!(
        matches!(code(&o), 0 | 1),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let after = load_checkpoint(&ck).unwrap();
    assert_eq!(before.flat_theta(), after.flat_theta());
    assert_eq!(after.revision, before.revision + 1);
    assert!(after.tubes.contains_key("positions"));
    let registry = fs::read_to_string(d.path().join("refine-pvtol-0.csv")).unwrap();
    assert!(registry.starts_with("system,lambda,selector,alpha,mu,penalty,certified,sigma"));
    assert!(d.path().join("refine-pvtol-0-positions-trace.csv").exists());

    fs::write(
        d.path().join("sel.txt"),
        "label = height\nc = 0 1 0 0 0 0\nd = 0 0\n",
    )
    .unwrap();
    let o = rccm(
        d.path(),
        &[
            "refine",
            "--ckpt",
            ckp,
            "--selector",
            "custom",
            "@sel.txt",
            "--samples",
            "200",
            "--steps",
            "20",
        ],
    );
    assert!(matches!(code(&o), 0 | 1));
    assert!(load_checkpoint(&ck).unwrap().tubes.contains_key("height"));
    assert_eq!(
        code(&rccm(
            d.path(),
            &["refine", "--ckpt", ckp, "--selector", "custom"]
        )),
        2
    );
}

#[test]
fn simulate_is_reproducible_and_documents_its_columns() {
    let d = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(d.path());
    let ckp = ck.to_str().unwrap();
    let args = [
        "simulate",
        "--ckpt",
        ckp,
        "--selector",
        "training",
        "--runs",
        "3",
        "--horizon",
        "1",
        "--sigma",
        "0.5",
    ];
    let o = rccm(d.path(), &[&args[..], &["--out", "a"]].concat());
    assert!(
        matches!(code(&o), 0 | 1),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let o2 = rccm(
        d.path(),
        &[&args[..], &["--out", "b", "--jobs", "1"]].concat(),
    );
    assert_eq!(code(&o), code(&o2));
    for f in [
        "simulate-pvtol-0.csv",
        "simulate-pvtol-0-summary.csv",
        "simulate-pvtol-0.manifest",
    ] {
        let a = fs::read(d.path().join("a").join(f)).unwrap();
        let b = fs::read(d.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let table = fs::read_to_string(d.path().join("a/simulate-pvtol-0.csv")).unwrap();
    let header = table.lines().next().unwrap();
    assert!(header.starts_with("run,t,xs_0,"));
    assert!(header.ends_with("w_0,xe_norm,pos_err,tube,margin"));
    assert_eq!(table.lines().count(), 1 + 3 * 11);

    let o = rccm(d.path(), &["simulate", "--ckpt", ckp, "--runs", "1"]);
    assert_eq!(code(&o), 2, "positions tube was never refined");
}

#[test]
fn plan_reports_infeasibility_and_report_aggregates() {
    let d = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(d.path());
    let ckp = ck.to_str().unwrap();
    for sel in ["positions", "inputs"] {
        let o = rccm(
            d.path(),
            &[
                "refine",
                "--ckpt",
                ckp,
                "--selector",
                sel,
                "--samples",
                "200",
                "--steps",
                "20",
            ],
        );
        assert!(matches!(code(&o), 0 | 1));
    }
    fs::write(
        d.path().join("wall.txt"),
        "start = 0 0\ngoal = 8 0\nbounds = -1 9 -2 2\nvehicle_radius = 0.1\nmax_speed = 0.5\nobstacle = 4 0 2.5\n",
    )
    .unwrap();
    let o = rccm(
        d.path(),
        &[
            "plan",
            "--ckpt",
            ckp,
            "--scenario",
            "wall.txt",
            "--replays",
            "2",
            "--tube-scale",
            "1e-12",
        ],
    );
    assert_eq!(code(&o), 1);
    assert!(
        stdout(&o).contains("infeasible(no-corridor)"),
        "{}",
        stdout(&o)
    );
    assert!(d.path().join("plan-pvtol-0.manifest").exists());

    let o = rccm(
        d.path(),
        &[
            "verify",
            "--ckpt",
            ckp,
            "--mode",
            "stat",
            "--samples",
            "100",
        ],
    );
    assert_eq!(code(&o), 1);
    let o = rccm(d.path(), &["report", "--dir", "."]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let tubes = fs::read_to_string(d.path().join("report-tubes.csv")).unwrap();
    assert!(
        tubes
            .lines()
            .any(|l| l.starts_with("pvtol,0.5,positions,1,")),
        "{tubes}"
    );
    let viol = fs::read_to_string(d.path().join("report-violations.csv")).unwrap();
    assert_eq!(viol.lines().count(), 5);

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(code(&rccm(empty.path(), &["report", "--dir", "."])), 1);
}
