use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cenkf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cenkf")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn generate_validate_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(
        root.join("study.toml"),
        "seed = 4\nout = \"results\"\nexperiments = [\"unconstrained\", \"is\"]\n\n[experiment]\nparticles = 12\n\n[twin]\ndays = 2.0\n",
    )
    .unwrap();

    let g = cenkf(&["generate", "--config", "study.toml", "--patients", "2", "--out", "cohort"], root);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    for id in ["twin01", "twin02"] {
        assert!(root.join(format!("cohort/{id}.csv")).is_file());
        assert!(root.join(format!("cohort/truth/{id}.csv")).is_file());
        assert!(root.join(format!("cohort/truth/{id}_params.json")).is_file());
    }

    let v = cenkf(&["validate", "cohort/twin01.csv", "cohort/twin02.csv"], root);
    assert_eq!(v.status.code(), Some(0), "{}", stdout(&v));

    let r = cenkf(&["run", "--config", "study.toml", "--patients", "cohort/twin01.csv,cohort/twin02.csv"], root);
    assert_eq!(r.status.code(), Some(0), "{}\n{}", stdout(&r), String::from_utf8_lossy(&r.stderr));
    for id in ["twin01", "twin02"] {
        for exp in ["unconstrained", "is"] {
            let d = root.join(format!("results/{id}/{exp}"));
            for f in ["forecasts.csv", "params.csv", "mse.csv", "hist.csv", "summary.json"] {
                assert!(d.join(f).is_file(), "missing {}", d.join(f).display());
            }
        }
    }
    let omega = fs::read_to_string(root.join("results/omega.csv")).unwrap();
    assert_eq!(omega.lines().count(), 3, "{omega}");
    assert!(omega.lines().skip(1).all(|l| l.contains(",is,")), "{omega}");
}

#[test]
fn validate_flags_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("good.csv"), "t_min,kind,value\n0,glucose_meas,110\n5,tube_feed,300\n").unwrap();
    fs::write(root.join("bad.csv"), "t_min,kind,value\n0,glucose_meas,-3\n").unwrap();
    let v = cenkf(&["validate", "good.csv", "bad.csv"], root);
    assert_eq!(v.status.code(), Some(1));
    let out = stdout(&v);
    assert!(out.lines().any(|l| l.contains("good.csv") && l.contains("ok")), "{out}");
    assert!(out.lines().any(|l| l.contains("bad.csv") && !l.contains(" ok")), "{out}");
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("p.csv"), "t_min,kind,value\n0,glucose_meas,110\n60,glucose_meas,120\n").unwrap();
    let r = cenkf(&["run", "--patients", "p.csv", "--experiments", "gxx"], root);
    assert_eq!(r.status.code(), Some(2));
    let r = cenkf(&["run", "--patients", "missing.csv"], root);
    assert_eq!(r.status.code(), Some(2));
    fs::write(root.join("c.toml"), "particels = 3\n").unwrap();
    let r = cenkf(&["run", "--config", "c.toml", "--patients", "p.csv"], root);
    assert_eq!(r.status.code(), Some(2));
    assert!(!root.join("out").exists(), "nothing is written when validation fails");
}
