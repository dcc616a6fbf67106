use std::process::Command;

fn strmlab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_strmlab")).args(args).env_remove("STRMLAB_THREADS").output().unwrap()
}

#[test]
fn writes_outputs_and_is_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, threads) in [(&a, "1"), (&b, "3")] {
        let o = strmlab(&["survival", "--replicates", "200", "--levels", "6", "--seed", "7", "--threads", threads, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["summary.json", "manifest.json", "timing.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let sa = std::fs::read(a.join("summary.json")).unwrap();
    assert_eq!(sa, std::fs::read(b.join("summary.json")).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&sa).unwrap();
    assert_eq!(v["seed"], 7);
}

#[test]
fn exit_codes() {
    assert_eq!(strmlab(&["no-such-suite"]).status.code(), Some(5));
    assert_eq!(strmlab(&["td-certify", "--levels", "500"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"experiment": "nope"}"#).unwrap();
    assert_eq!(strmlab(&["survival", "--config", cfg.to_str().unwrap()]).status.code(), Some(5));
    std::fs::write(&cfg, r#"{"experiment": "survival", "bogus": 1}"#).unwrap();
    assert_eq!(strmlab(&["survival", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    let missing = dir.path().join("missing.json");
    assert_eq!(strmlab(&["survival", "--config", missing.to_str().unwrap()]).status.code(), Some(1));

    let o = strmlab(&["gw-exact-tables", "--levels", "20", "--out", dir.path().join("gw").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("gw/curve.csv").exists());
}

#[test]
fn resource_cap_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"experiment": "beta-bracket", "replicates": 4, "cap": 10}"#).unwrap();
    let o = strmlab(&["beta-bracket", "--config", cfg.to_str().unwrap(), "--levels", "8", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
