use flowmatch::data::{split_for_matching, SplitSpec};
use flowmatch::em::{classify, FitOptions, ModelDocument};
use flowmatch::eval::synthetic::{toy_pattern, ToySpec};
use flowmatch::impute::{ImputeOptions, Method};
use flowmatch::pipeline::{run_match, PipelineOptions};
use nalgebra::DVector;

fn options() -> PipelineOptions {
    PipelineOptions { latent_dim: 1, init_seed: 3, fit: FitOptions::default(), impute: ImputeOptions::default() }
}

fn toy_means<T: flowmatch::scalar::Real>() -> Vec<DVector<T>> {
    ToySpec::default().mixture().means.iter().map(|m| m.map(T::lit)).collect()
}

#[test]
fn single_and_double_precision_agree() {
    let spec = SplitSpec { n1: 500, n2: 500, n_eval: 100, seed: 4, pattern: toy_pattern() };
    let s64 = split_for_matching(&ToySpec::default().mixture().sample::<f64>(1100, 8).unwrap().data, &spec).unwrap();
    let s32 = split_for_matching(&ToySpec::default().mixture().sample::<f32>(1100, 8).unwrap().data, &spec).unwrap();
    let (_, c64) = run_match(&s64.file1, &s64.file2, &[0], Method::ClusterNn, &toy_means(), &options()).unwrap();
    let (_, c32) = run_match(&s32.file1, &s32.file2, &[0], Method::ClusterNn, &toy_means(), &options()).unwrap();
    let (c64, c32) = (c64.unwrap(), c32.unwrap());
    let agree = c64.labels1.iter().zip(&c32.labels1).filter(|(a, b)| a == b).count();
    assert!(agree >= 495, "{agree}/500");
    for (a, b) in c64.model.components.iter().zip(&c32.model.components) {
        assert!((a.weight - b.weight as f64).abs() < 1e-3);
        for (x, y) in a.mean.iter().zip(b.mean.iter()) {
            assert!((x - *y as f64).abs() < 1e-3, "{x} vs {y}");
        }
    }
}

#[test]
fn saved_model_classifies_identically() {
    let spec = SplitSpec { n1: 400, n2: 400, n_eval: 100, seed: 1, pattern: toy_pattern() };
    let split = split_for_matching(&ToySpec::default().mixture().sample::<f64>(900, 2).unwrap().data, &spec).unwrap();
    let (out, c) = run_match(&split.file1, &split.file2, &[0], Method::ClusterNn, &toy_means(), &options()).unwrap();
    let c = c.unwrap();
    let text = ModelDocument::from_model(&c.model, None).to_json();
    let back = ModelDocument::from_json(&text).unwrap().to_model::<f64>().unwrap();
    assert_eq!(back.components, c.model.components);
    assert_eq!(classify(&back, &split.file1).unwrap(), c.labels1);
    assert_eq!(out.file1.label.as_deref(), Some(c.labels1.as_slice()));
}
