//! Dataset generation, persistence and the proxy objectives.

mod common;

use bvae_surrogate::field::{
    generate_dataset, read_dataset, write_dataset, EconomicParams, Objective, ProxyField, Sampler, DECISION_DIM,
};
use ndarray::Axis;

fn ks_uniform(mut v: Vec<f64>, lo: f64, hi: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (x - lo) / (hi - lo);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn uniform_sampler_marginals_pass_ks() {
    let field = ProxyField::generate(30);
    let ds = generate_dataset(10_000, &field, Objective::Wcf, &EconomicParams::default(), Sampler::Uniform, 0.0, 1)
        .unwrap();
    let b = field.bounds();
    for j in 0..DECISION_DIM {
        let d = ks_uniform(ds.x.column(j).to_vec(), b.lower[j], b.upper[j]);
        assert!(d < 0.05, "feature {j}: KS {d}");
    }
}

#[test]
fn trace_sampler_is_skewed_to_high_objectives() {
    let field = ProxyField::generate(31);
    let ds = generate_dataset(4000, &field, Objective::Npv, &EconomicParams::default(), Sampler::OptimizerTrace, 0.0, 2)
        .unwrap();
    let (lo, hi) = ds.y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let top = ds.y.iter().filter(|&&v| v >= hi - 0.1 * (hi - lo)).count();
    assert!(top as f64 > 0.1 * ds.len() as f64, "{top} of {}", ds.len());

    let uni = generate_dataset(4000, &field, Objective::Npv, &EconomicParams::default(), Sampler::Uniform, 0.0, 2)
        .unwrap();
    let (lo, hi) = uni.y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let top_uni = uni.y.iter().filter(|&&v| v >= hi - 0.1 * (hi - lo)).count();
    assert!(top > top_uni);
}

#[test]
fn wcf_equivalent_npv_reproduces_wcf_column() {
    let field = ProxyField::generate(32);
    let wcf = generate_dataset(500, &field, Objective::Wcf, &EconomicParams::default(), Sampler::Uniform, 0.0, 3)
        .unwrap();
    let npv = generate_dataset(500, &field, Objective::Npv, &EconomicParams::wcf_equivalent(), Sampler::Uniform, 0.0, 3)
        .unwrap();
    assert_eq!(wcf.x, npv.x);
    assert_eq!(wcf.y, npv.y);
}

#[test]
fn same_seed_byte_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let field = ProxyField::generate(33);
    for sampler in [Sampler::Uniform, Sampler::OptimizerTrace] {
        let mut files = Vec::new();
        for k in 0..2 {
            let ds = generate_dataset(300, &field, Objective::Npv, &EconomicParams::default(), sampler, 0.05, 4).unwrap();
            let p = dir.path().join(format!("d{k}.csv"));
            write_dataset(&ds, &p).unwrap();
            files.push((std::fs::read(&p).unwrap(), std::fs::read(p.with_extension("json")).unwrap()));
        }
        assert_eq!(files[0], files[1]);
        let back = read_dataset(&dir.path().join("d0.csv")).unwrap();
        assert_eq!(back.x.nrows(), 300);
    }
}

#[test]
fn normalized_training_features_are_centered() {
    let (_, ds) = common::small_field_dataset(2000, 34);
    let split = ds.train_split().unwrap();
    for m in split.x_train.mean_axis(Axis(0)).unwrap() {
        assert!(m.abs() < 1e-10, "{m}");
    }
    let raw_back = ds.normalization.denormalize_features(&split.x_train).unwrap();
    let orig = ds.x.select(Axis(0), &ds.split.train);
    for (a, b) in raw_back.iter().zip(&orig) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn noise_changes_labels_but_not_features() {
    let field = ProxyField::generate(35);
    let a = generate_dataset(50, &field, Objective::Npv, &EconomicParams::default(), Sampler::Uniform, 0.0, 5).unwrap();
    let b = generate_dataset(50, &field, Objective::Npv, &EconomicParams::default(), Sampler::Uniform, 0.1, 5).unwrap();
    assert_eq!(a.x, b.x);
    assert_ne!(a.y, b.y);
}
