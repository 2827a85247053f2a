//! Features of a phantom-trained model separate mild from severe hips.

use hipgrade::experiments::{embed_features, phantom_samples, train, Embedder, ExperimentConfig, Sample};
use hipgrade::grading::{Scheme, Task};

fn centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    [points.iter().map(|p| p[0]).sum::<f64>() / n, points.iter().map(|p| p[1]).sum::<f64>() / n]
}

fn spread(points: &[[f64; 2]], c: [f64; 2]) -> f64 {
    points.iter().map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()).sum::<f64>() / points.len() as f64
}

#[test]
fn class_1_and_7_form_separate_clusters() {
    let data = phantom_samples(&[1, 4, 7], 24, 31, 20.0).unwrap();
    let (train_set, held): (Vec<&Sample>, Vec<&Sample>) = data.iter().partition(|s| s.patient_id.ends_with(|c: char| c != '0' && c != '5'));
    let mut cfg = ExperimentConfig::for_setting("small_cnn", Task::Classification, Scheme::Combined).unwrap();
    cfg.epochs = 12;
    cfg.seed = 5;
    let out = train(&cfg, &train_set, &[], 1).unwrap();

    let held: Vec<Sample> = held.into_iter().filter(|s| s.label.combined.map(|c| c.get()) != Some(4)).cloned().collect();
    for embedder in [Embedder::Pca, Embedder::default()] {
        let emb = embed_features(&out.model, &held, embedder, 1, 3).unwrap();
        let pick = |k: u8| -> Vec<[f64; 2]> {
            emb.coords.iter().zip(&emb.classes).filter(|(_, c)| **c == Some(k)).map(|(p, _)| *p).collect()
        };
        let (a, b) = (pick(1), pick(7));
        assert!(a.len() >= 3 && b.len() >= 3);
        let (ca, cb) = (centroid(&a), centroid(&b));
        let gap = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt();
        let intra = (spread(&a, ca) + spread(&b, cb)) / 2.0;
        assert!(gap > intra, "{embedder:?}: centroid gap {gap:.3} vs intra-class spread {intra:.3}");
    }
}
