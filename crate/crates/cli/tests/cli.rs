use std::fs;
use std::process::Command;

const CONFIG: &str = "\
num_clients = 2
max_rounds = 3
dataset = \"moons\"
classes = 2
samples = 120
hidden = [8]
nimgs = 3
syn_iters = 40
syn_decay_iters = [15, 25, 35]
";

fn tofu() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tofu"))
}

#[test]
fn runs_and_overrides_seed_and_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let run = |seed: &str, out: &str| {
        let o = tofu()
            .args(["--config", cfg.to_str().unwrap(), "--seed", seed, "--mode", "fedavg", "--out"])
            .arg(dir.path().join(out))
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("3 rounds"));
        fs::read_to_string(dir.path().join(out).join("metrics.jsonl")).unwrap()
    };
    let a = run("9", "a");
    let b = run("9", "b");
    let c = run("10", "c");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.lines().all(|l| l.contains("\"mode\":\"fedavg\"")));
    let manifest = fs::read_to_string(dir.path().join("a").join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 9"));
}

#[test]
fn bad_config_exits_with_tagged_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, format!("{CONFIG}switch1 = 3\nswitch2 = 2\n")).unwrap();
    let o = tofu().args(["--config", cfg.to_str().unwrap(), "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("config: switch2"), "{err}");
}

#[test]
fn unknown_mode_is_rejected_by_the_parser() {
    let o = tofu().args(["--config", "x.toml", "--mode", "serve"]).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("serve"));
}
