use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn data_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("SYNAPSE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    let present = dir.join("train-images-idx3-ubyte").is_file() || dir.join("train-images-idx3-ubyte.gz").is_file();
    if !present {
        eprintln!("MNIST not found in {}; skipping", dir.display());
    }
    present.then_some(dir)
}

fn synapse(data: &Path, cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synapse"))
        .args(args)
        .env("SYNAPSE_DATA_DIR", data)
        .env("SYNAPSE_CACHE_DIR", cache)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_succeeds_and_bad_usage_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = synapse(tmp.path(), tmp.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["data", "train", "eval", "sweep", "analyze", "serve"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
    assert_eq!(synapse(tmp.path(), tmp.path(), &["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(synapse(tmp.path(), tmp.path(), &["eval", "-c", "x", "--backend", "remote", "-o", "y"]).status.code(), Some(1));
}

#[test]
fn missing_files_name_what_is_expected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = synapse(tmp.path(), tmp.path(), &["data"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"] {
        assert!(err.contains(name), "{err}");
    }
    assert!(err.contains("--fetch"));
}

#[test]
fn unreachable_device_is_a_transport_error() {
    let Some(data) = data_dir() else { return };
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("ckpt.json");
    let model = stochsyn_core::PassingProbabilityModel::default();
    stochsyn_core::Checkpoint::untrained(model, 10, 196).unwrap().save(&ckpt).unwrap();
    // a port that was just free
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let out = synapse(
        &data,
        tmp.path(),
        &["eval", "-c", s(&ckpt), "--backend", "remote", "--addr", &addr, "--timeout-ms", "200", "-o", s(&tmp.path().join("e"))],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!tmp.path().join("e/eval.json").exists(), "no partial report");
}

#[test]
fn dataset_cache_is_reused() {
    let Some(data) = data_dir() else { return };
    let tmp = tempfile::tempdir().unwrap();
    let first = ok(&synapse(&data, tmp.path(), &["data"]));
    assert!(first.contains("built"));
    assert!(first.contains("50000 train, 10000 validation, 10000 test"));
    let second = ok(&synapse(&data, tmp.path(), &["data"]));
    assert!(second.contains("cache hit"), "{second}");
    let manifest = json(&tmp.path().join("binarized-s0.manifest.json"));
    assert_eq!(manifest["command"], "data");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 4);
    let digests: Vec<&str> = manifest["inputs"].as_array().unwrap().iter().map(|d| d["sha256"].as_str().unwrap()).collect();
    for (_, sha) in stochsyn_core::data::MNIST_FILES {
        assert!(digests.contains(&sha));
    }
}

#[test]
fn learning_rate_follows_sample_count() {
    let Some(data) = data_dir() else { return };
    let tmp = tempfile::tempdir().unwrap();
    for (k, lr) in [("1", 0.01), ("8", 0.001)] {
        let out = tmp.path().join(format!("k{k}"));
        ok(&synapse(&data, tmp.path(), &["train", "-k", k, "--max-epochs", "1", "-o", s(&out)]));
        let ckpt = json(&out.join("checkpoint.json"));
        assert_eq!(ckpt["metadata"]["config"]["learning_rate"].as_f64(), Some(lr));
        assert_eq!(ckpt["metadata"]["K_train"].as_u64(), Some(k.parse().unwrap()));
        let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
        assert!(history.starts_with("epoch,train_loss,val_loss,val_acc\n"));
        assert_eq!(history.lines().count(), 2);
    }
}

#[test]
fn mean_field_rule_trains() {
    let Some(data) = data_dir() else { return };
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("mf");
    ok(&synapse(&data, tmp.path(), &["train", "--rule", "mean-field", "--max-epochs", "2", "-o", s(&out)]));
    let ckpt = json(&out.join("checkpoint.json"));
    assert_eq!(ckpt["metadata"]["rule"], "mean_field");
}

#[test]
fn checkpoint_is_the_best_validation_epoch() {
    let Some(data) = data_dir() else { return };
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t");
    ok(&synapse(&data, tmp.path(), &["train", "--max-epochs", "6", "--patience", "100", "-o", s(&out)]));
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    let losses: Vec<f64> = history
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    let best = losses
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i + 1)
        .unwrap();
    let ckpt = json(&out.join("checkpoint.json"));
    assert_eq!(ckpt["metadata"]["epoch"].as_u64(), Some(best as u64));
}

#[test]
fn eval_reports_repeats_and_minibatch_stderr() {
    let Some(data) = data_dir() else { return };
    let tmp = tempfile::tempdir().unwrap();
    let train = tmp.path().join("t");
    ok(&synapse(&data, tmp.path(), &["train", "--max-epochs", "1", "-o", s(&train)]));
    let eval = tmp.path().join("e");
    let ckpt = train.join("checkpoint.json");
    ok(&synapse(&data, tmp.path(), &["eval", "-c", s(&ckpt), "-k", "1,2", "--subset", "--mean-field", "-o", s(&eval)]));
    let csv = std::fs::read_to_string(eval.join("eval.csv")).unwrap();
    assert!(csv.starts_with("K_test,repeats,mean,std,stderr\n"), "{csv}");
    let report = json(&eval.join("eval.json"));
    assert_eq!(report["images"].as_u64(), Some(600));
    let results = report["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    assert_eq!(results[0]["accuracies"].as_array().unwrap().len(), 5);
    assert!(results[0]["stderr"].as_f64().unwrap() > 0.0);
    assert!(report["mean_field_accuracy"].as_f64().unwrap() > 0.5);
}

#[test]
fn analyze_exports_figure_data() {
    let Some(data) = data_dir() else { return };
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("a");
    ok(&synapse(
        &data,
        tmp.path(),
        &["analyze", "--untrained", "--std-k", "1,4", "--spread-images", "5", "--spread-repeats", "20", "-o", s(&out)],
    ));
    let hist = std::fs::read_to_string(out.join("field_histogram.csv")).unwrap();
    let filled: Vec<&str> = hist.lines().skip(1).filter(|l| l.split(',').nth(4) != Some("0")).collect();
    assert_eq!(filled.len(), 1, "untrained fields occupy one bin");
    let p: f64 = filled[0].split(',').nth(5).unwrap().parse().unwrap();
    assert!((p - 0.5).abs() < 0.05);
    let dist = std::fs::read_to_string(out.join("neuron_distribution.csv")).unwrap();
    assert_eq!(dist.lines().count(), 1 + 10_000 * 10, "one image shown 10,000 times");
    let spread = std::fs::read_to_string(out.join("std_vs_k.csv")).unwrap();
    assert_eq!(spread.lines().count(), 3);
    let summary = json(&out.join("summary.json"));
    assert!(summary[0]["median_probability_spread"].as_f64().unwrap() < 1e-9);
}

#[test]
fn sweep_writes_grid_and_caches_models() {
    let Some(data) = data_dir() else { return };
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sw");
    let args = ["sweep", "--k-train", "1,2", "--k-test", "1,4", "--seeds", "0,1", "--repeats", "2", "--max-epochs", "1", "--subset", "-o", s(&out)];
    ok(&synapse(&data, tmp.path(), &args));
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("K_train,K_test,seed,accuracy,std,stderr\n"));
    assert_eq!(sweep.lines().count(), 1 + 2 * 2 * 2);
    let grid = std::fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 4);
    assert_eq!(std::fs::read_dir(out.join("models")).unwrap().count(), 4);
    let again = synapse(&data, tmp.path(), &[&args[..], &["--cache", "require"]].concat());
    ok(&again);
    assert_eq!(std::fs::read_to_string(out.join("sweep.csv")).unwrap(), sweep);
}

#[test]
fn replay_reproduces_train_and_eval() {
    let Some(data) = data_dir() else { return };
    let tmp = tempfile::tempdir().unwrap();
    let train = tmp.path().join("t");
    ok(&synapse(&data, tmp.path(), &["--seed", "5", "train", "-k", "2", "--max-epochs", "2", "-o", s(&train)]));
    ok(&synapse(&data, tmp.path(), &["replay", s(&train.join("manifest.json")), "-o", s(&tmp.path().join("t2")), "--check"]));
    let a = std::fs::read(train.join("checkpoint.json")).unwrap();
    let b = std::fs::read(tmp.path().join("t2/checkpoint.json")).unwrap();
    assert_eq!(a, b);
    let manifest = json(&train.join("manifest.json"));
    for key in ["command", "config", "seeds", "version", "inputs", "outputs", "wall_clock_s"] {
        assert!(manifest.get(key).is_some(), "manifest lacks {key}");
    }
    assert_eq!(manifest["seeds"][0].as_u64(), Some(5));

    // a replay whose outputs changed must fail
    std::fs::write(train.join("history.csv"), "tampered").unwrap();
    let mut m = manifest.clone();
    m["outputs"][1]["sha256"] = Value::from("0".repeat(64));
    std::fs::write(train.join("manifest.json"), m.to_string()).unwrap();
    let out = synapse(&data, tmp.path(), &["replay", s(&train.join("manifest.json")), "-o", s(&tmp.path().join("t3")), "--check"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn served_device_matches_its_replica() {
    let Some(data) = data_dir() else { return };
    let tmp = tempfile::tempdir().unwrap();
    let train = tmp.path().join("t");
    ok(&synapse(&data, tmp.path(), &["train", "--max-epochs", "1", "-o", s(&train)]));
    let ckpt = train.join("checkpoint.json");

    let mut server = Command::new(env!("CARGO_BIN_EXE_synapse"))
        .args(["--seed", "21", "serve", "--addr", "127.0.0.1:0", "-o", s(&tmp.path().join("srv"))])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("address line").to_string();
    let remote = tmp.path().join("remote");
    let out = synapse(
        &data,
        tmp.path(),
        &["--seed", "21", "eval", "-c", s(&ckpt), "-k", "1,2", "--repeats", "2", "--subset", "--backend", "remote", "--addr", &addr, "-o", s(&remote)],
    );
    let _ = Command::new("kill").args(["-INT", &server.id().to_string()]).status();
    let status = server.wait().unwrap();
    ok(&out);
    assert!(status.success(), "server exit {status}");
    assert!(tmp.path().join("srv/manifest.json").is_file());

    let replica = tmp.path().join("replica");
    ok(&synapse(
        &data,
        tmp.path(),
        &["--seed", "21", "eval", "-c", s(&ckpt), "-k", "1,2", "--repeats", "2", "--subset", "--backend", "replica", "-o", s(&replica)],
    ));
    let r = json(&remote.join("eval.json"));
    let l = json(&replica.join("eval.json"));
    assert_eq!(r["results"], l["results"]);
}
