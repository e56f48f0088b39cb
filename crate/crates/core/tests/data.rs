use dvaegan_core::data::synth::{downsample, FEATURE_GRID};
use dvaegan_core::data::{load_manifest, save_manifest, synthesize, PairedDataset, Split, SynthParams};
use nalgebra::DMatrix;

fn matrices(ds: &PairedDataset, split: Split) -> (DMatrix<f64>, DMatrix<f64>) {
    let idx = ds.split(split);
    let d = ds.active_dim();
    let f = FEATURE_GRID * FEATURE_GRID * ds.image_shape[0];
    let x = DMatrix::from_fn(idx.len(), d, |r, c| ds.records[idx[r]].signal.values[c] as f64);
    let phi: Vec<Vec<f64>> = idx.iter().map(|&i| downsample(&ds.records[i].image, FEATURE_GRID)).collect();
    (x, DMatrix::from_fn(idx.len(), f, |r, c| phi[r][c]))
}

/// Dual-form ridge fit on the train split, R² of the test-split predictions
/// pooled over every feature.
fn ridge_r2(ds: &PairedDataset, lambda: f64) -> f64 {
    let (x, phi) = matrices(ds, Split::Train);
    let (xt, phit) = matrices(ds, Split::Test);
    let mean = phi.row_mean();
    let centred = DMatrix::from_fn(phi.nrows(), phi.ncols(), |r, c| phi[(r, c)] - mean[c]);
    let n = x.nrows();
    let gram = &x * x.transpose() + DMatrix::identity(n, n) * lambda;
    let alpha = gram.cholesky().expect("positive definite").solve(&centred);
    let pred = &xt * (x.transpose() * alpha);
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for r in 0..phit.nrows() {
        for c in 0..phit.ncols() {
            ss_res += (phit[(r, c)] - mean[c] - pred[(r, c)]).powi(2);
            ss_tot += (phit[(r, c)] - mean[c]).powi(2);
        }
    }
    1.0 - ss_res / ss_tot
}

#[test]
fn ridge_regression_recovers_the_features_from_default_signals() {
    let ds = synthesize(&SynthParams::default(), 0).unwrap();
    // λ is picked on the train split alone: last 200 train pairs held out
    let mut inner = ds.clone();
    inner.test = inner.train.split_off(1000);
    let lambda = [1.0, 10.0, 100.0, 1000.0]
        .into_iter()
        .max_by(|a, b| ridge_r2(&inner, *a).total_cmp(&ridge_r2(&inner, *b)))
        .unwrap();
    let r2 = ridge_r2(&ds, lambda);
    assert!(r2 > 0.9, "test R² {r2} at λ = {lambda}");
}

#[test]
fn noiseless_signals_are_almost_perfectly_decodable() {
    let p = SynthParams { noise_sigma: 0.0, image_size: 32, n_train: 600, n_test: 50, ..SynthParams::default() };
    let r2 = ridge_r2(&synthesize(&p, 4).unwrap(), 1e-3);
    assert!(r2 > 0.99, "test R² {r2}");
}

#[test]
fn manifest_round_trip_reproduces_the_dataset() {
    let p = SynthParams { family: "digits-like-strokes".into(), d_x: 32, image_size: 12, n_train: 6, n_test: 3, ..SynthParams::default() };
    let ds = synthesize(&p, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = save_manifest(&ds, dir.path()).unwrap();
    assert_eq!(load_manifest(&path).unwrap(), ds);
    assert_eq!(load_manifest(dir.path()).unwrap(), ds);
}

#[test]
fn test_stimuli_are_disjoint_from_training_stimuli() {
    let ds = synthesize(&SynthParams { d_x: 16, image_size: 16, n_train: 40, n_test: 10, ..SynthParams::default() }, 2).unwrap();
    let train: std::collections::HashSet<&str> = ds.train.iter().map(|&i| ds.records[i].image.id.as_str()).collect();
    assert!(ds.test.iter().all(|&i| !train.contains(ds.records[i].image.id.as_str())));
    assert!(ds.validate().is_ok());
}
