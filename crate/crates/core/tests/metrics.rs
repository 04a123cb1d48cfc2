use maniqa::metrics::{plcc, rank, spearman_closed_form, srocc};
use maniqa::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// `1 + #smaller + (#equal − 1)/2`, counted pairwise.
fn rank_oracle(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn closed_form_equals_pearson_of_ranks_on_every_permutation() {
    let truth = [0.3, 1.7, -0.4, 2.2, 0.9, 5.0];
    let perms = permutations(6);
    assert_eq!(perms.len(), 720);
    for p in perms {
        let pred: Vec<f64> = p.iter().map(|&i| i as f64 * 1.5 - 2.0).collect();
        let oracle = pearson_oracle(&rank_oracle(&truth), &rank_oracle(&pred));
        assert!((srocc(&truth, &pred).unwrap() - oracle).abs() < 1e-12);
        let cf = spearman_closed_form(&rank(&truth), &rank(&pred));
        assert!((cf - oracle).abs() < 1e-12);
    }
}

#[test]
fn plcc_is_invariant_under_affine_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
    let base = plcc(&x, &y).unwrap();
    for _ in 0..1000 {
        let mut a = 10f64.powf(rng.random_range(-3.0..3.0));
        if rng.random_bool(0.5) {
            a = -a;
        }
        let b = rng.random_range(-100.0..100.0);
        let mapped: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        let r = plcc(&x, &mapped).unwrap();
        assert!((r - base.copysign(a)).abs() < 1e-9, "a={a} b={b}: {r} vs {base}");
    }
}

#[test]
fn ranks_match_pairwise_counting_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..500 {
        let n = rng.random_range(1..40);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        assert_eq!(rank(&v), rank_oracle(&v));
    }
    assert_eq!(rank(&[10.0, 20.0, 20.0, 30.0]), vec![1.0, 2.5, 2.5, 4.0]);
}

#[test]
fn srocc_with_ties_is_pearson_of_fractional_ranks() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..300 {
        let n = rng.random_range(3..30);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        let (ra, rb) = (rank_oracle(&a), rank_oracle(&b));
        match srocc(&a, &b) {
            Ok(r) => assert!((r - pearson_oracle(&ra, &rb)).abs() < 1e-12),
            Err(Error::UndefinedCorrelation(_)) => {
                assert!(ra.iter().all(|r| *r == ra[0]) || rb.iter().all(|r| *r == rb[0]))
            }
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn correlations_are_symmetric_and_srocc_ignores_monotone_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let n = rng.random_range(3..25);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut b = a.clone();
        b.shuffle(&mut rng);
        assert!((plcc(&a, &b).unwrap() - plcc(&b, &a).unwrap()).abs() < 1e-12);
        assert_eq!(srocc(&a, &b).unwrap(), srocc(&b, &a).unwrap());
        let warped: Vec<f64> = b.iter().map(|v| (3.0 * v).exp() + v.powi(3)).collect();
        assert!((srocc(&a, &b).unwrap() - srocc(&a, &warped).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn undefined_and_invalid_inputs() {
    assert!(matches!(plcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::UndefinedCorrelation(_))));
    assert!(matches!(srocc(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]), Err(Error::UndefinedCorrelation(_))));
    assert!(matches!(srocc(&[1.0], &[1.0]), Err(Error::UndefinedCorrelation(_))));
    assert!(matches!(plcc(&[1.0, 2.0], &[1.0]), Err(Error::Dimension { .. })));
    assert!(matches!(plcc(&[1.0, f64::NAN], &[1.0, 2.0]), Err(Error::Numeric { .. })));
    assert_eq!(srocc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
}
