mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use ttvprune::transition::{
    module_transition, softmax_factor, ttv_layer, ttv_sub_block, AccumulateStatus, AccumulatedTtv, SubBlock,
    TtvVector,
};
use ttvprune::Matrix;

const CASES: u32 = 1000;

/// Token rows with input norms bounded away from zero.
fn pairs(max_tokens: usize, dim: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1..=max_tokens).prop_flat_map(move |n| {
        let row = prop::collection::vec(-10.0f64..10.0, dim);
        (
            prop::collection::vec(row.clone(), n).prop_filter("non-degenerate input", |rows| {
                rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6)
            }),
            prop::collection::vec(row, n),
        )
    })
}

fn mat(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows)
}

fn scores(tokens: &[usize], i: &[Vec<f64>], o: &[Vec<f64>]) -> Vec<f64> {
    let t = module_transition(tokens, &mat(i), &mat(o)).unwrap();
    ttv_sub_block(&t, 7, SubBlock::Attention).unwrap().scores
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn positive_rescaling_leaves_scores_unchanged((i, o) in pairs(12, 6), c in 1e-3f64..1e3) {
        let tokens: Vec<usize> = (0..i.len()).collect();
        let base = scores(&tokens, &i, &o);
        let scale = |m: &[Vec<f64>]| m.iter().map(|r| r.iter().map(|x| x * c).collect()).collect::<Vec<Vec<f64>>>();
        let scaled = scores(&tokens, &scale(&i), &scale(&o));
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn permuting_tokens_permutes_scores((i, o) in pairs(12, 5), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let n = i.len();
        let tokens: Vec<usize> = (100..100 + n).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let pi: Vec<Vec<f64>> = perm.iter().map(|&p| i[p].clone()).collect();
        let po: Vec<Vec<f64>> = perm.iter().map(|&p| o[p].clone()).collect();
        let pt: Vec<usize> = perm.iter().map(|&p| tokens[p]).collect();
        let base = scores(&tokens, &i, &o);
        let permuted = scores(&pt, &pi, &po);
        for (k, &p) in perm.iter().enumerate() {
            prop_assert!((permuted[k] - base[p]).abs() <= 1e-12 * base[p].abs().max(1.0));
        }
    }

    #[test]
    fn softmax_factor_is_a_distribution((i, o) in pairs(40, 4)) {
        let tokens: Vec<usize> = (0..i.len()).collect();
        let t = module_transition(&tokens, &mat(&i), &mat(&o)).unwrap();
        let s = softmax_factor(&t);
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(s.iter().all(|&x| x > 0.0));
        for tr in &t {
            prop_assert!((-1.0..=1.0).contains(&tr.direction));
            prop_assert!(tr.magnitude >= 0.0 && tr.magnitude.is_finite());
            prop_assert!((0.0..=1.0).contains(&tr.orthogonality()));
        }
        let sc = ttv_sub_block(&t, 1, SubBlock::Ffn).unwrap();
        prop_assert!(sc.scores.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn transitions_match_definitions((i, o) in pairs(6, 7)) {
        let tokens: Vec<usize> = (0..i.len()).collect();
        let t = module_transition(&tokens, &mat(&i), &mat(&o)).unwrap();
        for (k, tr) in t.iter().enumerate() {
            let (m, c) = common::transition(&i[k], &o[k]);
            prop_assert!((tr.magnitude - m).abs() <= 1e-9 * m.max(1.0));
            prop_assert!((tr.direction - c).abs() <= 1e-9);
        }
        let oracle = common::ttv_rows(&i, &o);
        for (a, b) in scores(&tokens, &i, &o).iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn accumulation_equals_brute_force_sum(
        n in 2usize..16,
        layers in prop::collection::btree_set(1usize..20, 1..8),
        values in prop::collection::vec(0.0f64..5.0, 16 * 20),
        order_seed in any::<u64>(),
    ) {
        use rand::{seq::SliceRandom, SeedableRng};
        let set: BTreeSet<usize> = layers.clone();
        let vectors: Vec<TtvVector> = layers
            .iter()
            .map(|&l| TtvVector {
                tokens: (0..n).collect(),
                scores: (0..n).map(|t| values[l * 16 + t]).collect(),
                layer: l,
                sub_block: SubBlock::LayerTotal,
            })
            .collect();
        let mut order: Vec<usize> = (0..vectors.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(order_seed));
        let mut acc = AccumulatedTtv::new();
        for &k in &order {
            prop_assert_eq!(acc.accumulate(&vectors[k], &set), AccumulateStatus::Added);
        }
        prop_assert_eq!(acc.covered_layers(), set);
        let got = acc.scores();
        for t in 0..n {
            let brute: f64 = layers.iter().map(|&l| values[l * 16 + t]).sum();
            prop_assert!((got[t] - brute).abs() <= 1e-9 * brute.max(1.0));
        }
    }
}

#[test]
fn spec_examples() {
    let one = |i: [f64; 2], o: [f64; 2]| module_transition(&[0], &mat(&[i.to_vec()]), &mat(&[o.to_vec()])).unwrap()[0];
    let t = one([3.0, 4.0], [6.0, 8.0]);
    assert_eq!((t.magnitude, t.direction), (2.0, 1.0));
    let t = one([1.0, 0.0], [0.0, 5.0]);
    assert_eq!((t.magnitude, t.direction), (5.0, 0.0));
    let t = one([1.0, 0.0], [-2.0, 0.0]);
    assert_eq!((t.magnitude, t.direction), (2.0, -1.0));

    // Directions (0.9, 0, -0.9) with magnitudes (1, 2, 1): softmax over (0.1, 1.0, 0.1).
    let i = vec![vec![1.0, 0.0]; 3];
    let c = 0.9f64;
    let s = (1.0 - c * c).sqrt();
    let o = vec![vec![c, s], vec![0.0, 2.0], vec![-c, s]];
    let got = scores(&[0, 1, 2], &i, &o);
    let e = [(0.1f64).exp(), 1.0f64.exp(), (0.1f64).exp()];
    let z: f64 = e.iter().sum();
    let want = [e[0] / z, 2.0 * e[1] / z, e[2] / z];
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-12);
    }
    assert!(got[1] / 2.0 > got[0] && (got[0] - got[2]).abs() < 1e-15);

    let a = TtvVector { tokens: vec![0, 1], scores: vec![0.5, 0.5], layer: 3, sub_block: SubBlock::Attention };
    let f = TtvVector { tokens: vec![0, 1], scores: vec![0.2, 0.8], layer: 3, sub_block: SubBlock::Ffn };
    assert_eq!(ttv_layer(&a, &f).unwrap().scores, vec![0.7, 1.3]);

    let set: BTreeSet<usize> = (7..=12).collect();
    let mut acc = AccumulatedTtv::new();
    let v13 = TtvVector { layer: 13, ..a.clone() };
    assert_eq!(acc.accumulate(&v13, &set), AccumulateStatus::OutsideSet);
    assert!(acc.is_empty());
}
