//! SVD and matmul properties against independent oracles.

mod common;

use common::*;
use fedpeft::{svd, truncated_factors, Matrix};
use proptest::prelude::*;
use rand::Rng as _;

#[test]
fn matmul_matches_naive_oracle() {
    let mut r = rng(101);
    for &(m, k, n) in &[(5usize, 7usize, 3usize), (1, 9, 4), (6, 1, 6), (8, 8, 8)] {
        let a = random_matrix(m, k, &mut r);
        let b = random_matrix(k, n, &mut r);
        let got = a.matmul(&b).unwrap();
        let want = naive_matmul(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }
}

fn check_svd_invariants(m: &Matrix) {
    let s = svd(m).unwrap();
    let (rows, cols) = (m.rows(), m.cols());
    assert_eq!(s.u.rows(), rows);
    assert_eq!(s.u.cols(), rows);
    assert_eq!(s.v.rows(), cols);
    assert_eq!(s.v.cols(), cols);
    assert_eq!(s.sigma.len(), rows.min(cols));

    // Descending nonnegative singular values.
    for pair in s.sigma.windows(2) {
        assert!(pair[0] >= pair[1]);
    }
    assert!(s.sigma.iter().all(|&x| x >= 0.0));

    // Orthonormality to 1e-9.
    for (q, n) in [(&s.u, rows), (&s.v, cols)] {
        let gram = naive_matmul(&q.transpose(), q);
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (gram.get(i, j) - want).abs() <= 1e-9,
                    "gram[{i}][{j}] = {}",
                    gram.get(i, j)
                );
            }
        }
    }

    // Reconstruction to relative 1e-9.
    let mut us = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for (j, &sv) in s.sigma.iter().enumerate() {
            us.set(i, j, s.u.get(i, j) * sv);
        }
    }
    let rec = naive_matmul(&us, &s.v.transpose());
    let err = frobenius_distance(&rec, m);
    let scale = m.frobenius_norm().max(1e-12);
    assert!(err <= 1e-9 * scale, "reconstruction error {err} at scale {scale}");

    // Sign convention: largest-magnitude entry of each left vector >= 0.
    for j in 0..rows {
        let col: Vec<f64> = (0..rows).map(|i| s.u.get(i, j)).collect();
        let best = col
            .iter()
            .cloned()
            .reduce(|a, b| if b.abs() > a.abs() { b } else { a })
            .unwrap();
        assert!(best >= 0.0, "column {j} breaks the sign convention");
    }
}

#[test]
fn svd_invariants_on_assorted_shapes() {
    let mut r = rng(7);
    for &(rows, cols) in &[
        (1usize, 1usize),
        (3, 3),
        (5, 2),
        (2, 5),
        (7, 7),
        (12, 4),
        (4, 12),
        (10, 10),
    ] {
        check_svd_invariants(&random_matrix(rows, cols, &mut r));
        // Rank-deficient variants.
        let rank = (rows.min(cols) / 2).max(1);
        check_svd_invariants(&random_matrix_of_rank(rows, cols, rank, &mut r));
    }
    check_svd_invariants(&Matrix::zeros(4, 6));
    check_svd_invariants(&Matrix::identity(5));
}

#[test]
fn svd_singular_values_match_gram_oracle() {
    let mut r = rng(23);
    for _ in 0..20 {
        let m = random_matrix(6, 5, &mut r);
        let got = svd(&m).unwrap().sigma;
        let want = singular_values_oracle(&m);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-8, "{g} vs {w}");
        }
    }
}

#[test]
fn svd_deterministic_across_calls_and_threads() {
    let mut r = rng(55);
    let m = random_matrix(9, 6, &mut r);
    let first = svd(&m).unwrap();
    let again = svd(&m).unwrap();
    assert_eq!(first, again);
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let m = m.clone();
            std::thread::spawn(move || svd(&m).unwrap())
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap(), first);
    }
}

#[test]
fn truncated_factors_shapes_and_full_rank_exactness() {
    let mut r = rng(91);
    for &(rows, cols) in &[(8usize, 6usize), (6, 8), (5, 5)] {
        let m = random_matrix(rows, cols, &mut r);
        let full = rows.min(cols);
        let (b, a) = truncated_factors(&m, full).unwrap();
        assert_eq!((b.rows(), b.cols()), (rows, full));
        assert_eq!((a.rows(), a.cols()), (full, cols));
        let err = frobenius_distance(&naive_matmul(&b, &a), &m);
        assert!(err <= 1e-9 * m.frobenius_norm());
    }
}

#[test]
fn truncated_error_matches_tail_of_spectrum() {
    // Rank-3 8x6 matrix: exact at r = 3, sigma_3 tail error at r = 2.
    let mut r = rng(17);
    let m = random_matrix_of_rank(8, 6, 3, &mut r);
    let (b, a) = truncated_factors(&m, 3).unwrap();
    assert!(frobenius_distance(&naive_matmul(&b, &a), &m) <= 1e-9 * m.frobenius_norm());

    let (b2, a2) = truncated_factors(&m, 2).unwrap();
    let err = frobenius_distance(&naive_matmul(&b2, &a2), &m);
    let sigma = singular_values_oracle(&m);
    assert!(
        (err - sigma[2]).abs() <= 1e-8,
        "rank-2 error {err} vs sigma_3 {}",
        sigma[2]
    );
}

#[test]
fn eckart_young_beats_seeded_random_factorizations() {
    let mut r = rng(29);
    for _ in 0..10 {
        let rows = 3 + (r.gen::<u64>() % 8) as usize;
        let cols = 3 + (r.gen::<u64>() % 8) as usize;
        let m = random_matrix(rows, cols, &mut r);
        for rank in 1..=rows.min(cols) {
            let (b, a) = truncated_factors(&m, rank).unwrap();
            let err = frobenius_distance(&naive_matmul(&b, &a), &m);
            let optimal = optimal_rank_error(&m, rank);
            assert!((err - optimal).abs() <= 1e-8);
            for _ in 0..50 {
                let rb = random_matrix(rows, rank, &mut r);
                let ra = random_matrix(rank, cols, &mut r);
                let random_err = frobenius_distance(&naive_matmul(&rb, &ra), &m);
                assert!(err <= random_err + 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn svd_invariants_proptest(
        rows in 1usize..9,
        cols in 1usize..9,
        seed in 0u64..1_000_000,
    ) {
        let mut r = rng(seed);
        check_svd_invariants(&random_matrix(rows, cols, &mut r));
    }
}
