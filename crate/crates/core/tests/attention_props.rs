use a2fpn::attention::{
    dot_product_attention, dot_product_attention_oracle, kernel_attention, linear_attention, linear_attention_oracle,
    linear_similarity, normalized_feature_map, AttentionConfig, Variant, DEFAULT_EPS,
};
use a2fpn::autodiff::{Tape, Tensor};
use a2fpn::rng::seeded;
use a2fpn::selftest::relative_error;
use proptest::prelude::*;

fn qkv(seed: u64, n: usize, d_k: usize, d_v: usize) -> (Tensor, Tensor, Tensor) {
    let mut rng = seeded(seed);
    (
        Tensor::uniform(&[n, d_k], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[n, d_k], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[n, d_v], -1.0, 1.0, &mut rng),
    )
}

/// Smallest linear-attention normalizer over all queries; tiny values mean
/// the query is almost antipodal to every key and the ratio is ill-conditioned.
fn min_normalizer(q: &Tensor, k: &Tensor) -> f64 {
    let d = q.shape()[1];
    q.data()
        .chunks(d)
        .map(|qi| k.data().chunks(d).map(|kj| linear_similarity(qi, kj, DEFAULT_EPS)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let cols = t.shape()[1];
    let data = perm.iter().flat_map(|&r| t.data()[r * cols..(r + 1) * cols].to_vec()).collect();
    Tensor::from_vec(t.shape(), data).unwrap()
}

fn rotation(n: usize, shift: usize) -> Vec<usize> {
    (0..n).map(|i| (i + shift) % n).collect()
}

/// Every output row lies inside the per-column range of `v` (convex weights).
fn within_value_hull(out: &Tensor, v: &Tensor, slack: f64) -> bool {
    let (n, d) = (v.shape()[0], v.shape()[1]);
    (0..d).all(|j| {
        let col: Vec<f64> = (0..n).map(|i| v.at(&[i, j])).collect();
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (0..out.shape()[0]).all(|i| {
            let o = out.at(&[i, j]);
            o >= lo - slack && o <= hi + slack
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_matches_quadratic_oracle(seed in any::<u64>(), n in 1usize..=64, d_k in 1usize..=16, d_v in 1usize..=16) {
        let (q, k, v) = qkv(seed, n, d_k, d_v);
        let fast = linear_attention(&Tape::no_grad(), &q, &k, &v, DEFAULT_EPS).unwrap();
        let slow = linear_attention_oracle(&q, &k, &v, DEFAULT_EPS).unwrap();
        prop_assert!(relative_error(&fast, &slow) <= 1e-12);
    }

    #[test]
    fn kernel_form_agrees_with_linear(seed in any::<u64>(), n in 1usize..=32, d_k in 1usize..=8, d_v in 1usize..=8) {
        let (q, k, v) = qkv(seed, n, d_k, d_v);
        prop_assume!(min_normalizer(&q, &k) >= 1e-6);
        let tape = Tape::no_grad();
        let via_kernel = AttentionConfig::new(d_k, d_v, Variant::Kernel).unwrap().apply(&tape, &q, &k, &v).unwrap();
        let direct = linear_attention(&tape, &q, &k, &v, DEFAULT_EPS).unwrap();
        prop_assert!(relative_error(&via_kernel, &direct) <= 1e-12);
    }

    #[test]
    fn dot_product_matches_shifted_softmax(seed in any::<u64>(), n in 1usize..=48, d_k in 1usize..=8, d_v in 1usize..=8) {
        let (q, k, v) = qkv(seed, n, d_k, d_v);
        let out = dot_product_attention(&Tape::no_grad(), &q, &k, &v).unwrap();
        let want = dot_product_attention_oracle(&q, &k, &v).unwrap();
        prop_assert!(relative_error(&out, &want) <= 1e-12);
    }

    #[test]
    fn outputs_are_convex_combinations_of_values(seed in any::<u64>(), n in 1usize..=32, d in 1usize..=8) {
        let (q, k, v) = qkv(seed, n, d, d);
        prop_assume!(min_normalizer(&q, &k) >= 1e-6);
        let tape = Tape::no_grad();
        for variant in Variant::ALL {
            let out = AttentionConfig::new(d, d, variant).unwrap().apply(&tape, &q, &k, &v).unwrap();
            prop_assert!(within_value_hull(&out, &v, 1e-12), "{variant}");
        }
    }

    #[test]
    fn invariant_to_joint_key_value_permutation(seed in any::<u64>(), n in 2usize..=24, shift in 1usize..24) {
        let (q, k, v) = qkv(seed, n, 4, 3);
        let perm = rotation(n, shift % n);
        let tape = Tape::no_grad();
        for variant in Variant::ALL {
            let cfg = AttentionConfig::new(4, 3, variant).unwrap();
            let base = cfg.apply(&tape, &q, &k, &v).unwrap();
            let moved = cfg.apply(&tape, &q, &permute_rows(&k, &perm), &permute_rows(&v, &perm)).unwrap();
            prop_assert!(base.max_abs_diff(&moved) <= 1e-12, "{variant}");
        }
    }

    #[test]
    fn equivariant_to_query_permutation(seed in any::<u64>(), n in 2usize..=24, shift in 1usize..24) {
        let (q, k, v) = qkv(seed, n, 3, 2);
        let perm = rotation(n, shift % n);
        let tape = Tape::no_grad();
        for variant in Variant::ALL {
            let cfg = AttentionConfig::new(3, 2, variant).unwrap();
            let base = cfg.apply(&tape, &q, &k, &v).unwrap();
            let moved = cfg.apply(&tape, &permute_rows(&q, &perm), &k, &v).unwrap();
            prop_assert!(permute_rows(&base, &perm).max_abs_diff(&moved) <= 1e-12, "{variant}");
        }
    }

    #[test]
    fn linear_similarity_stays_in_unit_band(seed in any::<u64>(), d in 1usize..=16) {
        let (q, k, _) = qkv(seed, 1, d, 1);
        let s = linear_similarity(q.data(), k.data(), DEFAULT_EPS);
        prop_assert!((0.0..=2.0 + 1e-12).contains(&s));
    }
}

#[test]
fn feature_map_is_one_then_unit_vector() {
    let (q, _, _) = qkv(5, 9, 6, 1);
    let phi = normalized_feature_map(&Tape::no_grad(), &q, DEFAULT_EPS).unwrap();
    assert_eq!(phi.shape(), &[9, 7]);
    for row in phi.data().chunks(7) {
        assert_eq!(row[0], 1.0);
        let norm = row[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}

#[test]
fn kernel_attention_with_constant_kernel_averages_values() {
    let (q, k, v) = qkv(8, 6, 2, 3);
    let tape = Tape::no_grad();
    let ones = |_: &Tape, x: &Tensor| Ok(Tensor::ones(&[x.shape()[0], 1]));
    let out = kernel_attention(&tape, &q, &k, &v, ones, ones).unwrap();
    for j in 0..3 {
        let mean: f64 = (0..6).map(|i| v.at(&[i, j])).sum::<f64>() / 6.0;
        for i in 0..6 {
            assert!((out.at(&[i, j]) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_rows_give_identical_outputs() {
    let row = [0.3, -0.7, 0.2];
    let q = Tensor::from_vec(&[4, 3], row.repeat(4)).unwrap();
    let (_, k, v) = qkv(3, 4, 3, 2);
    let out = linear_attention(&Tape::no_grad(), &q, &k, &v, DEFAULT_EPS).unwrap();
    for i in 1..4 {
        assert_eq!(out.data()[i * 2..i * 2 + 2], out.data()[..2]);
    }
}
