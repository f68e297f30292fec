use super::*;
use crate::data::{synth_dataset, SynthKind};
use proptest::prelude::*;

fn stats(mean: &[f64], cov: &[f64]) -> GaussianStats {
    let d = mean.len();
    GaussianStats {
        mean: DVector::from_column_slice(mean),
        cov: DMatrix::from_row_slice(d, d, cov),
        n: 100,
    }
}

fn random_psd(d: usize, rank: usize, rng: &mut CounterRng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, rank, |_, _| rng.normal());
    &a * a.transpose()
}

fn random_stats(d: usize, rng: &mut CounterRng) -> GaussianStats {
    let rank = 1 + rng.below(d + 2);
    let scale = rng.uniform_range(0.1, 3.0);
    GaussianStats {
        mean: DVector::from_fn(d, |_, _| rng.normal()),
        cov: random_psd(d, rank, rng) * scale,
        n: 100,
    }
}

/// Independent route: `tr((Cp Cq)^½) = Σ √λ(Cp Cq)` from the eigenvalues of
/// the non-symmetric product.
fn fid_via_product_eigenvalues(p: &GaussianStats, q: &GaussianStats) -> f64 {
    let eig = (&p.cov * &q.cov).complex_eigenvalues();
    let root_trace: f64 = eig.iter().map(|z| z.re.max(0.0).sqrt()).sum();
    (&p.mean - &q.mean).norm_squared() + p.cov.trace() + q.cov.trace() - 2.0 * root_trace
}

#[test]
fn gaussian_stats_hand_example() {
    let f = Tensor::new([2, 2], vec![0.0, 0.0, 2.0, 0.0]).unwrap();
    let s = gaussian_stats(&f).unwrap();
    assert_eq!(s.mean.as_slice(), &[1.0, 0.0]);
    assert_eq!(s.cov, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
    assert_eq!(s.n, 2);
}

#[test]
fn gaussian_stats_identical_rows_and_errors() {
    let f = Tensor::from_fn([5, 3], |i| (i % 3) as f64 * 0.7);
    let s = gaussian_stats(&f).unwrap();
    assert!(s.cov.iter().all(|&v| v == 0.0));
    assert!(matches!(
        gaussian_stats(&Tensor::zeros([1, 3])),
        Err(Error::Stats(_))
    ));
}

#[test]
fn gaussian_stats_covariance_is_symmetric() {
    let mut rng = CounterRng::new(1, 0);
    let f = Tensor::from_fn([40, 7], |_| rng.normal());
    let s = gaussian_stats(&f).unwrap();
    assert!((&s.cov - s.cov.transpose()).amax() <= 1e-12);
}

#[test]
fn sqrtm_closed_forms() {
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(&[4.0, 9.0]));
    let s = sqrtm_psd(&d).unwrap();
    assert!((s - DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 3.0]))).amax() < 1e-14);
    let eye = DMatrix::<f64>::identity(4, 4);
    assert!((sqrtm_psd(&eye).unwrap() - &eye).amax() < 1e-14);
}

#[test]
fn sqrtm_reconstructs_random_psd_5x5() {
    let mut rng = CounterRng::new(2, 0);
    let a = random_psd(5, 5, &mut rng);
    let s = sqrtm_psd(&a).unwrap();
    assert!((&s * &s - &a).norm() / a.norm() < 1e-8);
}

#[test]
fn sqrtm_rejects_indefinite_and_asymmetric() {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
    assert!(matches!(sqrtm_psd(&a), Err(Error::NotPsd(l)) if (l + 0.5).abs() < 1e-12));
    let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]);
    assert!(sqrtm_psd(&b).is_err());
    // tiny negative rounding noise is clamped, not rejected
    let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
    assert_eq!(sqrtm_psd(&c).unwrap()[(1, 1)], 0.0);
}

#[test]
fn frechet_closed_forms() {
    let p = stats(&[0.3, -1.0], &[2.0, 0.5, 0.5, 1.0]);
    assert!(frechet_distance(&p, &p).unwrap().abs() < 1e-8);

    let eye = [1.0, 0.0, 0.0, 1.0];
    let a = stats(&[0.0, 0.0], &eye);
    let b = stats(&[3.0, 0.0], &eye);
    assert!((frechet_distance(&a, &b).unwrap() - 9.0).abs() < 1e-6);

    let c = stats(&[0.0, 0.0], &[4.0, 0.0, 0.0, 4.0]);
    assert!((frechet_distance(&c, &a).unwrap() - 2.0).abs() < 1e-6);
}

#[test]
fn frechet_dimension_mismatch() {
    let a = stats(&[0.0], &[1.0]);
    let b = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
    assert!(matches!(
        frechet_distance(&a, &b),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn frechet_matches_product_eigenvalue_route() {
    let mut rng = CounterRng::new(3, 0);
    for d in [1, 2, 5, 12] {
        let p = random_stats(d, &mut rng);
        let q = random_stats(d, &mut rng);
        let a = frechet_distance(&p, &q).unwrap();
        let b = fid_via_product_eigenvalues(&p, &q);
        assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "d={d}: {a} vs {b}");
    }
}

#[test]
fn cross_term_equals_trace_of_symmetric_sqrtm() {
    let mut rng = CounterRng::new(8, 0);
    for d in [2, 6, 16] {
        let p = random_psd(d, d + 3, &mut rng);
        let q = random_psd(d, d + 3, &mut rng);
        let root_p = sqrtm_psd(&p).unwrap();
        let inner = &root_p * &q * &root_p;
        let inner = (&inner + inner.transpose()) * 0.5;
        let direct = sqrtm_psd(&inner).unwrap().trace();
        let a = GaussianStats {
            mean: DVector::zeros(d),
            cov: p.clone(),
            n: 10,
        };
        let b = GaussianStats {
            mean: DVector::zeros(d),
            cov: q,
            n: 10,
        };
        let fid = frechet_distance(&a, &b).unwrap();
        let expect = a.cov.trace() + b.cov.trace() - 2.0 * direct;
        assert!(
            (fid - expect).abs() < 1e-8 * (1.0 + expect.abs()),
            "{fid} {expect}"
        );
    }
}

#[test]
fn inception_score_oracles() {
    let uniform = ClassPosterior::new(vec![0.25; 12], 4).unwrap();
    assert!((inception_score(&uniform) - 1.0).abs() <= 1e-9);

    let k = 6;
    let one_hot: Vec<f64> = (0..k * k).map(|i| (i / k == i % k) as u8 as f64).collect();
    let post = ClassPosterior::new(one_hot, k).unwrap();
    assert!((inception_score(&post) - k as f64).abs() <= 1e-9);

    // KL((0.9, 0.1) ‖ (0.5, 0.5)) = 0.9 ln 1.8 + 0.1 ln 0.2 for both rows
    let two = ClassPosterior::new(vec![0.9, 0.1, 0.1, 0.9], 2).unwrap();
    let kl = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
    assert!((kl - 0.3681).abs() < 1e-4);
    assert!((inception_score(&two) - 1.4450).abs() < 1e-3);
}

#[test]
fn malformed_posteriors_rejected() {
    assert!(ClassPosterior::new(vec![0.5, 0.4], 2).is_err());
    assert!(ClassPosterior::new(vec![1.2, -0.2], 2).is_err());
    assert!(ClassPosterior::new(vec![0.5, 0.5, 1.0], 2).is_err());
    assert!(ClassPosterior::new(vec![f64::NAN, 1.0], 2).is_err());
    assert!(ClassPosterior::new(vec![], 2).is_err());
}

#[test]
fn softmax_rows_are_valid() {
    let logits = Tensor::new([2, 3], vec![1000.0, 0.0, -1000.0, 0.1, 0.2, 0.3]).unwrap();
    let post = ClassPosterior::from_logits(&logits).unwrap();
    assert_eq!(post.len(), 2);
    assert_eq!(post.rows().next().unwrap()[0], 1.0);
}

fn blobs(n: usize, seed: u64) -> Dataset {
    synth_dataset(SynthKind::Blobs, 8, 4, n, seed).unwrap()
}

#[test]
fn pass_through_source_scores_zero_fid() {
    let data = blobs(300, 1);
    let ext = ConvFeatures::default_for(8).unwrap();
    let real = reference_stats(&data, &ext, 300, 64).unwrap();
    let mut rng = CounterRng::new(0, 0);
    let s = evaluate(
        &mut DatasetSource::new(&data),
        &ext,
        &real,
        300,
        64,
        &mut rng,
    )
    .unwrap();
    assert!(s.fid.abs() < 1e-6, "{}", s.fid);
    assert!(s.is >= 1.0 - 1e-9 && s.is <= 10.0 + 1e-9);
}

fn split_halves(data: &Dataset, n: usize) -> (Dataset, Dataset) {
    let img = 3 * 8 * 8;
    let part = |range: std::ops::Range<usize>| {
        let pixels = range.clone().flat_map(|i| data.image(i).to_vec()).collect();
        let labels = range.map(|i| data.label(i)).collect();
        Dataset::new(8, data.classes(), pixels, labels).unwrap()
    };
    assert_eq!(data.image(0).len(), img);
    (part(0..n), part(n..2 * n))
}

#[test]
fn disjoint_halves_give_small_fid_shrinking_with_n() {
    let ext = PixelMoments::new(8, 4, 0).unwrap();
    let mut mean_fid = Vec::new();
    for n in [40, 160, 640] {
        let mut total = 0.0;
        for seed in 0..6 {
            let data = blobs(2 * n, 100 + seed);
            let (a, b) = split_halves(&data, n);
            let pa = reference_stats(&a, &ext, n, 64).unwrap();
            let pb = reference_stats(&b, &ext, n, 64).unwrap();
            let fid = frechet_distance(&pa, &pb).unwrap();
            assert!(fid > 0.0);
            total += fid;
        }
        mean_fid.push(total / 6.0);
    }
    assert!(
        mean_fid[0] > mean_fid[1] && mean_fid[1] > mean_fid[2],
        "{mean_fid:?}"
    );
    // against a different distribution the distance stays large
    let other = synth_dataset(SynthKind::Stripes, 8, 4, 640, 9).unwrap();
    let stripes = reference_stats(&other, &ext, 640, 64).unwrap();
    let base = reference_stats(&blobs(640, 5), &ext, 640, 64).unwrap();
    assert!(frechet_distance(&base, &stripes).unwrap() > 10.0 * mean_fid[2]);
}

#[test]
fn evaluate_is_deterministic_and_checks_resolution() {
    use crate::blocks::ShortcutKind;
    use crate::model::GeneratorSpec;
    let data = blobs(64, 2);
    let ext = ConvFeatures::default_for(8).unwrap();
    let real = reference_stats(&data, &ext, 64, 32).unwrap();
    let run = || {
        let mut g =
            Generator::<f32>::new(GeneratorSpec::scaled(8, 4, ShortcutKind::Gated).unwrap(), 1)
                .unwrap();
        let mut rng = CounterRng::new(7, 3);
        let mut src = GeneratorSource {
            generator: &mut g,
            train_bn: true,
        };
        evaluate(&mut src, &ext, &real, 50, 16, &mut rng).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.fid.to_bits(), b.fid.to_bits());
    assert_eq!(a.is.to_bits(), b.is.to_bits());
    assert!(a.fid > 0.0);

    let mut g = Generator::<f32>::new(
        GeneratorSpec::scaled(16, 4, ShortcutKind::Gated).unwrap(),
        1,
    )
    .unwrap();
    let mut src = GeneratorSource {
        generator: &mut g,
        train_bn: false,
    };
    let mut rng = CounterRng::new(0, 0);
    assert!(evaluate(&mut src, &ext, &real, 10, 10, &mut rng).is_err());
}

#[test]
fn extractor_weights_round_trip_through_archive() {
    let ext = ConvFeatures::random(16, 5, 42).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("extractor.bin");
    ext.save(&path).unwrap();
    let back = ConvFeatures::load(&path).unwrap();
    assert_eq!(ext, back);
    let mut rng = CounterRng::new(1, 1);
    let x = Tensor::from_fn([3, 3, 16, 16], |_| rng.uniform_range(-1.0, 1.0));
    let f = ext.features(&x).unwrap();
    assert_eq!(f.shape(), &[3, 64]);
    assert_eq!(f, back.features(&x).unwrap());
    assert_eq!(ext.posteriors(&f).unwrap().classes(), 5);
    assert_ne!(ConvFeatures::random(16, 5, 43).unwrap(), ext);
}

#[test]
fn pixel_moments_features() {
    let ext = PixelMoments::new(4, 3, 0).unwrap();
    // channel 0 = 1 on the top-left quadrant, else 0; channels 1 and 2 constant
    let mut x = Tensor::<f64>::zeros([1, 3, 4, 4]);
    for y in 0..2 {
        for xx in 0..2 {
            x.data_mut()[y * 4 + xx] = 1.0;
        }
    }
    x.data_mut()[16..32].fill(0.5);
    let f = ext.features(&x).unwrap();
    let f = f.data();
    assert_eq!(&f[..6], &[0.25, 0.75f64.sqrt() * 0.5, 1.0, 0.0, 0.0, 0.0]);
    assert_eq!(&f[6..12], &[0.5, 0.0, 0.5, 0.5, 0.5, 0.5]);
    assert!(ext.features(&Tensor::zeros([1, 3, 8, 8])).is_err());
}

#[test]
fn csv_dump_round_trips_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let m = Tensor::new([2, 2], vec![0.1, -2.5, 1e-17, 3.0]).unwrap();
    write_csv(&path, &m).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let back: Vec<f64> = text
        .lines()
        .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()))
        .collect();
    assert_eq!(back, m.data());
    assert_eq!(text.lines().count(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fid_symmetric_and_nonnegative(seed in any::<u64>(), d in 1usize..=16) {
        let mut rng = CounterRng::new(seed, 9);
        let p = random_stats(d, &mut rng);
        let q = random_stats(d, &mut rng);
        let pq = frechet_distance(&p, &q).unwrap();
        let qp = frechet_distance(&q, &p).unwrap();
        prop_assert!((pq - qp).abs() <= 1e-8 * (1.0 + pq.abs()), "{} {}", pq, qp);
        prop_assert!(pq >= -1e-8);
    }

    #[test]
    fn sqrtm_reconstruction_up_to_64(seed in any::<u64>(), d in 1usize..=64) {
        let mut rng = CounterRng::new(seed, 4);
        let rank = 1 + rng.below(d);
        let a = random_psd(d, rank, &mut rng);
        let s = sqrtm_psd(&a).unwrap();
        prop_assert!((&s * &s - &a).norm() / a.norm() < 1e-8);
    }

    #[test]
    fn inception_score_bounds(seed in any::<u64>(), n in 1usize..40, k in 1usize..8) {
        let mut rng = CounterRng::new(seed, 5);
        let mut probs = Vec::with_capacity(n * k);
        for _ in 0..n {
            let w: Vec<f64> = (0..k).map(|_| rng.uniform().powi(3)).collect();
            let s: f64 = w.iter().sum::<f64>().max(1e-300);
            probs.extend(w.iter().map(|v| v / s));
        }
        if let Ok(post) = ClassPosterior::new(probs, k) {
            let is = inception_score(&post);
            prop_assert!(is >= 1.0 - 1e-9 && is <= k as f64 + 1e-9, "{}", is);
        }
    }
}
