//! Cosine and top-k numerics against an exact-rational oracle.
//!
//! f32 values convert exactly to rationals, so the dot product and the
//! squared norms are computed without rounding; only the final division
//! and square root run in f64. That pins the oracle's own error around
//! 1e-15, far below the 1e-9 gate.

use std::collections::BTreeSet;

use hypermem_core::embedding::{cosine_similarity, top_k, Vector, VectorIndex};
use num::rational::BigRational;
use num::{BigInt, FromPrimitive, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn exact_cosine(a: &[f32], b: &[f32]) -> f64 {
    let zero = || BigRational::from_integer(BigInt::from(0));
    let mut dot = zero();
    let mut na = zero();
    let mut nb = zero();
    for (x, y) in a.iter().zip(b) {
        let rx = BigRational::from_f32(*x).expect("finite");
        let ry = BigRational::from_f32(*y).expect("finite");
        dot += &rx * &ry;
        na += &rx * &rx;
        nb += &ry * &ry;
    }
    assert!(!na.is_zero() && !nb.is_zero());
    dot.to_f64().unwrap() / (na.to_f64().unwrap().sqrt() * nb.to_f64().unwrap().sqrt())
}

#[test]
fn cosine_matches_exact_rational_oracle_over_ten_thousand_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for case in 0..10_000 {
        let dim = rng.random_range(2..48);
        let scale = 10f32.powi(rng.random_range(-3..4));
        let make = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            (0..dim).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect()
        };
        let mut a = make(&mut rng);
        let b = make(&mut rng);
        // Keep vectors nonzero.
        if a.iter().all(|v| *v == 0.0) {
            a[0] = 1.0;
        }
        let got = cosine_similarity(
            &Vector::new(a.clone()).unwrap(),
            &Vector::new(b.clone()).unwrap(),
        )
        .unwrap();
        let expect = exact_cosine(&a, &b);
        let diff = (got - expect).abs();
        worst = worst.max(diff);
        assert!(diff < 1e-9, "case {case}: |{got} - {expect}| = {diff}");
        assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&got));
    }
    // Keep a record of the observed envelope in the test output.
    println!("worst cosine deviation over 10000 pairs: {worst:e}");
}

#[test]
fn top_k_agrees_with_full_sort_including_tie_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for round in 0..200 {
        let dim = rng.random_range(2..10);
        let n = rng.random_range(1..60);
        let k = rng.random_range(1..12);
        let mut index = VectorIndex::new(dim);
        let mut candidates = BTreeSet::new();
        let mut stored: Vec<(String, Vec<f32>)> = Vec::new();
        for i in 0..n {
            let id = format!("c{i:03}");
            // Duplicate some vectors on purpose to force score ties.
            let values: Vec<f32> = if i % 4 == 3 && !stored.is_empty() {
                stored[i - 1].1.clone()
            } else {
                let mut v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                if v.iter().all(|x| *x == 0.0) {
                    v[0] = 0.5;
                }
                v
            };
            index.insert(id.clone(), Vector::new(values.clone()).unwrap()).unwrap();
            candidates.insert(id.clone());
            stored.push((id, values));
        }
        let mut q: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        if q.iter().all(|x| *x == 0.0) {
            q[0] = 1.0;
        }
        let query = Vector::new(q).unwrap();

        let got = top_k(&query, &candidates, &index, k).unwrap();

        // Full-sort oracle: descending score, ascending id on ties.
        let mut scored: Vec<(f64, String)> = stored
            .iter()
            .map(|(id, _)| {
                (
                    cosine_similarity(&query, index.get(id).unwrap()).unwrap(),
                    id.clone(),
                )
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let expect: Vec<String> = scored.into_iter().take(k).map(|(_, id)| id).collect();
        assert_eq!(got, expect, "round {round}");
    }
}
