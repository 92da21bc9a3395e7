//! The `bvae` command line, in process and as a binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use bvae_surrogate::checkpoint;
use bvae_surrogate::cli::{metrics_from_crossplot, run};
use bvae_surrogate::embed::read_crossplot;
use serde_json::{json, Value};

fn write_config(dir: &Path, name: &str, v: Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

fn cli(sub: &str, config: &Path, out: &Path) -> bvae_surrogate::Result<()> {
    run(["bvae", sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn tiny_model(latent: usize, epochs: usize) -> Value {
    json!({
        "latent_dim": latent,
        "encoder_widths": [16, 8],
        "decoder_widths": [8, 16],
        "regressor_widths": [8, 4],
        "epochs": epochs,
        "batch_size": 64
    })
}

/// generate + train a tiny model inside `dir`; returns the output directory.
fn pipeline(dir: &Path, rows: usize) -> PathBuf {
    let out = dir.join("out");
    let g = write_config(dir, "gen.json", json!({"field": {"seed": 3}, "samples": rows, "objective": "npv"}));
    cli("generate", &g, &out).unwrap();
    let t = write_config(dir, "train.json", json!({"dataset": "out/dataset.csv", "model": tiny_model(3, 2)}));
    cli("train", &t, &out).unwrap();
    out
}

#[test]
fn generate_counts_rows_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "g.json", json!({"field": {"seed": 1}, "samples": 1000, "objective": "wcf", "seed": 4}));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cli("generate", &cfg, &a).unwrap();
    cli("generate", &cfg, &b).unwrap();
    let csv = fs::read(a.join("dataset.csv")).unwrap();
    assert_eq!(csv, fs::read(b.join("dataset.csv")).unwrap());
    assert_eq!(fs::read(a.join("dataset.json")).unwrap(), fs::read(b.join("dataset.json")).unwrap());
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1001);
    let summary = read_json(&a.join("dataset_summary.json"));
    assert_eq!(summary["rows"], 1000);
    assert_eq!(summary["provenance"]["seed"], 4);
    assert_eq!(summary["provenance"]["config_sha256"].as_str().unwrap().len(), 64);
    assert!(summary["min"].as_f64().unwrap() <= summary["median"].as_f64().unwrap());
    assert!(a.join("dataset_field.json").is_file());
}

#[test]
fn wcf_equivalent_npv_generation_matches_wcf() {
    let dir = tempfile::tempdir().unwrap();
    let w = write_config(dir.path(), "w.json", json!({"field": {"seed": 2}, "samples": 200, "objective": "wcf"}));
    let n = write_config(
        dir.path(),
        "n.json",
        json!({"field": {"seed": 2}, "samples": 200, "objective": "npv",
               "economics": {"prices": [1.0, -0.1, -0.1], "discounts": [0.0, 0.0, 0.0], "drilling": [0.0, 0.0, 0.0]}}),
    );
    cli("generate", &w, &dir.path().join("w")).unwrap();
    cli("generate", &n, &dir.path().join("n")).unwrap();
    let ys = |p: PathBuf| -> Vec<String> {
        fs::read_to_string(p).unwrap().lines().skip(1).map(|l| l.rsplit(',').next().unwrap().to_string()).collect()
    };
    assert_eq!(ys(dir.path().join("w/dataset.csv")), ys(dir.path().join("n/dataset.csv")));
}

#[test]
fn invalid_config_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad = write_config(dir.path(), "bad.json", json!({"field": {"seed": 1}, "samples": 10, "objective": "npv", "typo": 1}));
    let err = cli("generate", &bad, &out).unwrap_err();
    assert_eq!(bvae_surrogate::cli::exit_code(&err), 2);
    let missing = write_config(dir.path(), "t.json", json!({"dataset": "nope.csv", "model": tiny_model(3, 1)}));
    let err = cli("train", &missing, &out).unwrap_err();
    assert_eq!(bvae_surrogate::cli::exit_code(&err), 3);
    let negative = write_config(dir.path(), "n.json", json!({"field": {"seed": 1}, "samples": 0, "objective": "npv"}));
    assert!(cli("generate", &negative, &out).is_err());
    assert!(!out.exists());
}

#[test]
fn binary_exit_codes_and_output_env() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_bvae");
    let bad = write_config(dir.path(), "bad.json", json!({"samples": 10}));
    let status = Command::new(bin).args(["generate", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(2));
    let good = write_config(dir.path(), "g.json", json!({"field": {"seed": 1}, "samples": 20, "objective": "npv"}));
    let out = dir.path().join("from-env");
    let status = Command::new(bin)
        .args(["generate", "--config"])
        .arg(&good)
        .args(["--seed", "9", "--threads", "1"])
        .env("BVAE_OUT", &out)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(read_json(&out.join("dataset_summary.json"))["provenance"]["seed"], 9);
    let status = Command::new(bin).arg("--help").output().unwrap();
    assert!(status.status.success());
}

#[test]
fn train_writes_artifacts_and_routes_layer_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = pipeline(dir.path(), 300);
    for f in ["model.ckpt", "model_history.csv", "model_metrics.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let m = read_json(&out.join("model_metrics.json"));
    assert_eq!(m["epochs_run"], 2);
    assert!(m["validation"]["r2"].as_f64().unwrap() <= 1.0);

    let mut model = tiny_model(3, 1);
    model["layer_kind"] = json!("probabilistic");
    let t = write_config(dir.path(), "p.json", json!({"dataset": "out/dataset.csv", "model": model, "name": "prob"}));
    cli("train", &t, &out).unwrap();
    let loaded = checkpoint::load(&out.join("prob.ckpt")).unwrap();
    assert_eq!(loaded.config.layer_kind, bvae_surrogate::model::LayerKind::Probabilistic);
}

#[test]
fn beta_sweep_emits_one_checkpoint_per_beta() {
    let dir = tempfile::tempdir().unwrap();
    let out = pipeline(dir.path(), 200);
    let t = write_config(
        dir.path(),
        "s.json",
        json!({"dataset": "out/dataset.csv", "model": tiny_model(3, 1), "beta_sweep": [1.0, 3.0, 10.0], "name": "sweep"}),
    );
    cli("train", &t, &out).unwrap();
    for b in [1.0, 3.0, 10.0] {
        let m = checkpoint::load(&out.join(format!("sweep_beta{b}.ckpt"))).unwrap();
        assert_eq!(m.config.beta, b);
    }
}

#[test]
fn evaluate_records_t_and_matches_crossplot() {
    let dir = tempfile::tempdir().unwrap();
    let out = pipeline(dir.path(), 300);
    for t in [2, 1000] {
        let e = write_config(
            dir.path(),
            "e.json",
            json!({"dataset": "out/dataset.csv", "checkpoint": "out/model.ckpt", "mc_samples": t, "name": format!("eval{t}")}),
        );
        cli("evaluate", &e, &out).unwrap();
        let rep = read_json(&out.join(format!("eval{t}.json")));
        assert_eq!(rep["mc_samples"], t);
        let rows = read_crossplot(&out.join(format!("eval{t}_crossplot.csv"))).unwrap();
        assert_eq!(rows.len(), 60);
        assert!(rows.iter().all(|r| r.split == "holdout"));
        let (mse, r2) = metrics_from_crossplot(&rows).unwrap();
        let want_mse = rep["mc_mean"]["mse_raw"].as_f64().unwrap();
        let want_r2 = rep["mc_mean"]["r2"].as_f64().unwrap();
        assert!((mse - want_mse).abs() <= 1e-9 * want_mse.abs().max(1.0), "{mse} vs {want_mse}");
        assert!((r2 - want_r2).abs() <= 1e-9);
        assert!(rep["point"]["mse"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn evaluate_rejects_foreign_normalization() {
    let dir = tempfile::tempdir().unwrap();
    let out = pipeline(dir.path(), 300);
    let g = write_config(dir.path(), "g2.json", json!({"field": {"seed": 3}, "samples": 300, "objective": "npv", "seed": 77, "name": "other"}));
    cli("generate", &g, &out).unwrap();
    let e = write_config(dir.path(), "e.json", json!({"dataset": "out/other.csv", "checkpoint": "out/model.ckpt", "mc_samples": 5}));
    let err = cli("evaluate", &e, &out).unwrap_err();
    assert!(err.to_string().contains("normalization"), "{err}");
    assert_eq!(bvae_surrogate::cli::exit_code(&err), 3);
}

#[test]
fn embed_projections() {
    let dir = tempfile::tempdir().unwrap();
    let out = pipeline(dir.path(), 400);
    let e = write_config(
        dir.path(),
        "e.json",
        json!({"dataset": "out/dataset.csv", "checkpoint": "out/model.ckpt", "methods": ["pca", "tsne"],
               "tsne": {"perplexity": 10.0, "iterations": 300}}),
    );
    cli("embed", &e, &out).unwrap();
    let pca = fs::read_to_string(out.join("embedding_pca.csv")).unwrap();
    assert_eq!(pca.lines().next().unwrap(), "id,dim1,dim2,target_scaled");
    assert_eq!(pca.lines().count(), 81);
    let a = read_json(&out.join("embedding_pca.json"));
    let b = read_json(&out.join("embedding_tsne.json"));
    assert_eq!(a["checkpoint_sha256"], b["checkpoint_sha256"]);
    assert_eq!(a["embedding"]["latent_dim"], 3);
    let tsne = fs::read(out.join("embedding_tsne.csv")).unwrap();
    let again = dir.path().join("again");
    cli("embed", &e, &again).unwrap();
    assert_eq!(tsne, fs::read(again.join("embedding_tsne.csv")).unwrap());
}

#[test]
fn embed_over_tsne_cap_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), 5001);
    let e = write_config(
        dir.path(),
        "e.json",
        json!({"dataset": "out/dataset.csv", "checkpoint": "out/model.ckpt", "methods": ["tsne"], "split": "all"}),
    );
    let err = cli("embed", &e, &dir.path().join("emb")).unwrap_err();
    assert!(err.to_string().contains("subsample"), "{err}");
    assert!(!dir.path().join("emb").exists());
}

#[test]
fn optimize_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = pipeline(dir.path(), 300);
    let base = json!({"population_size": 8, "generations": 3, "mc_samples": 10, "seed": 2});
    let mut closed = base.clone();
    closed["gate"] = json!({"std": 0.0});
    let o = write_config(
        dir.path(),
        "o.json",
        json!({"field": {"path": "out/dataset_field.json"}, "objective": "npv", "checkpoint": "out/model.ckpt",
               "optimizer": closed, "compare_ungated": true}),
    );
    cli("optimize", &o, &out).unwrap();
    let rep = read_json(&out.join("optimization.json"));
    assert_eq!(rep["run"]["surrogate_accepts"], 0);
    assert_eq!(rep["run"]["simulator_calls"], rep["ungated"]["simulator_calls"]);
    assert_eq!(rep["run"]["best_objective"], rep["ungated"]["best_objective"]);
    let trace = fs::read_to_string(out.join("optimization_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 8 * 4);

    let mut zero = base.clone();
    zero["generations"] = json!(0);
    let o = write_config(dir.path(), "z.json", json!({"field": {"seed": 3}, "objective": "npv", "optimizer": zero, "name": "zero"}));
    cli("optimize", &o, &out).unwrap();
    let rep = read_json(&out.join("zero.json"));
    assert_eq!(rep["run"]["simulator_calls"], 8);
    assert!(rep["ungated"].is_null());
}
