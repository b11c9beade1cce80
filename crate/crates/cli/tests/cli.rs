use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn dartlab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dartlab"))
        .arg("--config")
        .arg(tiny_config())
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = dartlab(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap_or_default()
        .to_string()
}

#[test]
fn every_command_runs_on_the_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["pretrain"]);
    ok(out, &["variants"]);
    let eval = ok(out, &["eval", "--variant", "dart"]);
    assert!(eval.contains("dart_reas") && eval.contains("dart_tool"));
    ok(out, &["eval", "--variant", "m_unified"]);
    ok(out, &["eval", "--variant", "h_reas"]);
    ok(out, &["replay-eval", "--variant", "m_reas", "--from", "dart"]);
    ok(out, &["leas"]);
    ok(out, &["gradangle", "--variant", "m_unified"]);
    ok(out, &["efficiency"]);
    let report = ok(out, &["report"]);
    assert!(report.contains("eval.csv"));

    for f in [
        "base.ckpt",
        "corpus.txt",
        "config.toml",
        "variants/variants.json",
        "report.md",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(header(&out.join("pretrain_log.csv")), "step,loss,accuracy");
    assert_eq!(
        header(&out.join("train_log_dart.csv")),
        "step,mean_reward,loss,grad_norm_reasoning,grad_norm_tool,kl_term"
    );
    assert_eq!(
        header(&out.join("eval.csv")),
        "variant,split,hops,episodes,em,retrieval_accuracy"
    );
    assert_eq!(
        header(&out.join("gradient_angles.csv")),
        "pair_type,traj_i,traj_j,angle_rad,cosine"
    );
    assert_eq!(header(&out.join("efficiency.csv")), "quantity,design,value");
    let coeff = header(&out.join("leas_coefficients.csv"));
    assert!(coeff.starts_with("question_id,lambda1,"), "{coeff}");

    // Rows for three variants, merged into one file.
    let eval = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    for v in ["dart", "m_unified", "h_reas"] {
        assert!(eval.lines().any(|l| l.starts_with(&format!("{v},test,all,"))), "{v}");
    }
}

#[test]
fn config_errors_name_file_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n\n[train]\nlearning_rte = 0.1\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dartlab"))
        .arg("--config")
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("run"))
        .arg("pretrain")
        .output()
        .unwrap();
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("bad.toml") && err.contains("line 4") && err.contains("learning_rte"),
        "{err}"
    );
}

#[test]
fn commands_explain_missing_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let o = dartlab(dir.path(), &["train", "--variant", "dart"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("dartlab pretrain"));
    let o = dartlab(dir.path(), &["eval", "--variant", "dart"]);
    assert!(!o.status.success());
    let o = dartlab(dir.path(), &["train", "--variant", "h_tool"]);
    assert!(!o.status.success());
}

#[test]
fn a_run_directory_refuses_a_different_corpus() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["pretrain"]);
    let other = dir.path().join("other.toml");
    let text = std::fs::read_to_string(tiny_config()).unwrap();
    std::fs::write(&other, format!("{text}\n[corpus]\nseed = 99\n")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dartlab"))
        .arg("--config")
        .arg(&other)
        .arg("--out")
        .arg(dir.path())
        .arg("pretrain")
        .output()
        .unwrap();
    assert!(!o.status.success());
}
