use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_compograph"));
    c.env_remove("COMPOGRAPH_PACK");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn compograph")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_pack(dir: &Path) -> String {
    let pack = dir.join("pack");
    let o = run(&[
        "gen-synth",
        "--out",
        pack.to_str().unwrap(),
        "--per-comp",
        "12",
        "--visual-dim",
        "16",
        "--embed-dim",
        "8",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    pack.to_str().unwrap().to_string()
}

fn train_small(pack: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "--pack",
        pack,
        "train",
        "--desk",
        "--epochs",
        "3",
        "--quiet",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn stats_reports_the_generated_grid() {
    let tmp = TempDir::new().unwrap();
    let pack = small_pack(tmp.path());
    let o = run(&["--pack", &pack, "stats"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["compositions"], 28);
    assert_eq!(v["train_compositions"], 20);
    assert_eq!(v["images"], 28 * 12);
}

#[test]
fn pack_can_come_from_the_environment() {
    let tmp = TempDir::new().unwrap();
    let pack = small_pack(tmp.path());
    let o = bin().env("COMPOGRAPH_PACK", &pack).arg("stats").output().unwrap();
    assert!(o.status.success());
}

#[test]
fn init_config_output_parses_back() {
    for extra in [&[][..], &["--desk"][..]] {
        let mut args = vec!["init-config"];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert!(o.status.success());
        let text = stdout(&o);
        let cfg = compograph::RunConfig::from_toml_str(&text).unwrap();
        let expected = if extra.is_empty() {
            compograph::RunConfig::default()
        } else {
            compograph::RunConfig::desk()
        };
        assert_eq!(cfg, expected);
    }
}

#[test]
fn train_eval_retrieve_round_trip() {
    let tmp = TempDir::new().unwrap();
    let pack = small_pack(tmp.path());
    let model = tmp.path().join("model");
    let o = train_small(&pack, &model, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.desc", "model.bin", "losses.jsonl", "config.toml"] {
        assert!(model.join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(model.join("losses.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for (k, l) in lines.iter().enumerate() {
        assert_eq!(l["epoch"], k + 1);
        for key in ["fusion", "triplet", "decoding", "total"] {
            assert!(l[key].as_f64().unwrap().is_finite());
        }
    }

    let m = model.to_str().unwrap();
    let o = run(&["--pack", &pack, "eval", "--model", m]);
    assert!(o.status.success());
    let out = stdout(&o);
    let json: serde_json::Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
    let (c, op) = (json["closed"].as_f64().unwrap(), json["open"].as_f64().unwrap());
    assert!((0.0..=100.0).contains(&c) && (0.0..=100.0).contains(&op));
    assert!(json["h_mean"].is_number());
    assert_eq!(json["closed_candidates"], 8);
    assert_eq!(json["open_candidates"], 28);

    let o = run(&["--pack", &pack, "eval", "--model", m, "--metric", "closed"]);
    let json: serde_json::Value = serde_json::from_str(stdout(&o).lines().last().unwrap()).unwrap();
    assert!(json["closed"].is_number());
    assert!(json.get("open").is_none() && json.get("h_mean").is_none());

    let o = run(&["--pack", &pack, "eval", "--model", m, "--no-cluster-eval"]);
    let json: serde_json::Value = serde_json::from_str(stdout(&o).lines().last().unwrap()).unwrap();
    assert_eq!(json["clustered"], false);

    let o = run(&["--pack", &pack, "retrieve", "--model", m, "--query", "attr0,attr1:obj2", "--topk", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let distances: Vec<f64> = stdout(&o)
        .lines()
        .map(|l| l.split_whitespace().nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(distances.len(), 4);
    assert!(distances.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn training_is_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let pack = small_pack(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(train_small(&pack, &a, &["--seed", "3"]).status.success());
    assert!(train_small(&pack, &b, &["--seed", "3"]).status.success());
    for f in ["model.bin", "model.desc", "losses.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ablation_flags_reach_the_saved_config() {
    let tmp = TempDir::new().unwrap();
    let pack = small_pack(tmp.path());
    let model = tmp.path().join("m");
    let o = train_small(
        &pack,
        &model,
        &["--no-cluster", "--graph", "link", "--loss", "fus+de", "--gcn-layers", "2", "--batch-size", "32"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = compograph::RunConfig::load(&model.join("config.toml")).unwrap();
    assert!(!cfg.model.clustering);
    assert_eq!(cfg.graph.kind, compograph::linguistic::GraphKind::Link);
    assert_eq!(cfg.loss.set, compograph::objectives::LossSet::FusDe);
    assert_eq!(cfg.model.gcn_dims, vec![64, 64]);
    assert_eq!(cfg.train.batch_size, 32);
}

#[test]
fn gradcheck_passes_and_reports_tolerance_failures() {
    let tmp = TempDir::new().unwrap();
    let pack = small_pack(tmp.path());
    let o = run(&["--pack", &pack, "gradcheck", "--desk", "--graph", "sparse_random"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("gradcheck PASS"));

    let o = run(&["--pack", &pack, "gradcheck", "--desk", "--tol", "1e-30"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stdout(&o).starts_with("gradcheck FAIL"));
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let pack = small_pack(tmp.path());

    // config
    assert_eq!(run(&["stats"]).status.code(), Some(2));
    assert_eq!(run(&["--pack", &pack, "train", "--out", "x", "--graph", "bogus"]).status.code(), Some(2));
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nencoder_dims = [8]\ngcn_dims = [4]\n").unwrap();
    let o = run(&["--pack", &pack, "train", "--config", bad.to_str().unwrap(), "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));

    // data
    let missing = tmp.path().join("nope");
    assert_eq!(run(&["--pack", missing.to_str().unwrap(), "stats"]).status.code(), Some(3));
    let model = tmp.path().join("m");
    assert!(train_small(&pack, &model, &[]).status.success());
    let o = run(&["--pack", &pack, "retrieve", "--model", model.to_str().unwrap(), "--query", "purple:obj0"]);
    assert_eq!(o.status.code(), Some(3));

    let bin = model.join("model.bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes[100] ^= 0x40;
    std::fs::write(&bin, bytes).unwrap();
    let o = run(&["--pack", &pack, "eval", "--model", model.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
}
