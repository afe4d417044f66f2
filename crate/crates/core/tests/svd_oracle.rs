use frcnn::net::FcLayer;
use frcnn::svd::{compress, dense_param_count, factored_param_count, reconstruction_error, svd};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((m, n), |_| rng.random_range(-1.0..1.0))
}

fn reference_singular_values(a: &Array2<f64>) -> Vec<f64> {
    let m = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]]);
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

fn layer(w: Array2<f64>) -> FcLayer {
    let u = w.nrows();
    FcLayer::new(w, Array1::from_elem(u, 0.5)).unwrap()
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn singular_values_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    for (m, n) in [(50, 40), (40, 50), (17, 17), (1, 9), (64, 3)] {
        let a = random_matrix(&mut rng, m, n);
        let got = svd(a.view()).unwrap();
        let want = reference_singular_values(&a);
        assert_eq!(got.s.len(), want.len());
        for (x, y) in got.s.iter().zip(&want) {
            assert!((x - y).abs() <= 1e-10 * want[0], "{m}x{n}: {x} vs {y}");
        }
        let mut recon = got.u.clone();
        for (mut col, s) in recon.columns_mut().into_iter().zip(&got.s) {
            col.mapv_inplace(|v| v * s);
        }
        assert!(frobenius(&(recon.dot(&got.vt) - &a)) <= 1e-10 * frobenius(&a));
    }
}

#[test]
fn truncation_error_is_the_tail_of_the_spectrum() {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let w = random_matrix(&mut rng, 50, 40);
    let s = reference_singular_values(&w);
    let fc = layer(w.clone());
    let c = compress(&fc, 10).unwrap();
    let tail: f64 = s[10..].iter().map(|x| x * x).sum::<f64>().sqrt();
    let err = frobenius(&(&w - &c.effective_weights()));
    assert!((err - tail).abs() <= 1e-8 * tail, "{err} vs {tail}");
    let rel = reconstruction_error(&fc, &c).unwrap();
    assert!((rel - tail / frobenius(&w)).abs() <= 1e-10);
}

#[test]
fn truncated_layer_output_error_is_bounded_by_next_singular_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(302);
    let w = random_matrix(&mut rng, 30, 24);
    let s = reference_singular_values(&w);
    let fc = layer(w);
    for t in [1, 5, 12, 23] {
        let c = compress(&fc, t).unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let a = fc.forward(&x).unwrap();
            let b = c.forward(&x).unwrap();
            let diff = a
                .iter()
                .zip(&b)
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(diff <= s[t] * norm * (1.0 + 1e-9) + 1e-12);
        }
    }
}

#[test]
fn full_rank_compression_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let w = random_matrix(&mut rng, 20, 12);
    let fc = layer(w);
    let c = compress(&fc, 12).unwrap();
    assert!(reconstruction_error(&fc, &c).unwrap() <= 1e-12);
    let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    for (a, b) in fc.forward(&x).unwrap().iter().zip(c.forward(&x).unwrap()) {
        assert!((a - b).abs() <= 1e-6);
    }
    assert!(compress(&fc, 13).is_err());
    assert!(compress(&fc, 0).is_err());
}

#[test]
fn parameter_counts() {
    let (u, v, t) = (4096, 25088, 1024);
    assert_eq!(dense_param_count(u, v) - u as u64, 102_760_448);
    assert_eq!(factored_param_count(u, v, t) - u as u64, 29_884_416);

    let mut rng = ChaCha8Rng::seed_from_u64(304);
    let fc = layer(random_matrix(&mut rng, 32, 48));
    assert_eq!(fc.param_count() as u64, dense_param_count(32, 48));
    let c = compress(&fc, 7).unwrap();
    assert_eq!(c.param_count() as u64, factored_param_count(32, 48, 7));
    assert_eq!(c.param_count(), 7 * (32 + 48) + 32);
}
