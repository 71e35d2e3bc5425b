//! Property tests of the distillation objective and the evaluation metrics,
//! each against an independent plain-loop oracle.

use abm_core::data::TokenId;
use abm_core::decoder::Direction;
use abm_core::metrics::{edit_distance, exprate_at_k, EvalReport};
use abm_core::model::gradient_check_case;
use abm_core::objective::{ce_loss, kl_value, reverse_steps, soften, total_loss};
use abm_core::{Tape, Tensor, Variant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn col(v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(&[v.len(), 1], v).unwrap()
}

fn softmax_oracle(z: &[f64], s: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / s).exp()).collect();
    let t: f64 = e.iter().sum();
    e.iter().map(|v| v / t).collect()
}

/// `S² Σ_steps Σ_k p_k (ln p_k − ln q_k)` written out directly.
fn kl_oracle(a: &[Vec<f64>], b: &[Vec<f64>], s: f64) -> f64 {
    let mut total = 0.0;
    for (za, zb) in a.iter().zip(b) {
        let p = softmax_oracle(za, s);
        let q = softmax_oracle(zb, s);
        for (pk, qk) in p.iter().zip(&q) {
            if *pk > 0.0 {
                total += pk * (pk.ln() - qk.ln());
            }
        }
    }
    s * s * total
}

fn logit_rows(steps: usize, k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-8.0f64..8.0, k), steps)
}

fn pair_of_rows() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> {
    (1usize..6, 2usize..9).prop_flat_map(|(t, k)| (logit_rows(t, k), logit_rows(t, k), 0.25f64..6.0))
}

fn tensors(rows: &[Vec<f64>]) -> Vec<Tensor<f64>> {
    rows.iter().map(|r| col(r)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kl_is_non_negative((a, b, s) in pair_of_rows()) {
        let v = kl_value(&tensors(&a), &tensors(&b), s).unwrap();
        prop_assert!(v >= -1e-9, "kl = {}", v);
    }

    #[test]
    fn kl_of_identical_rows_is_exactly_zero((a, _b, s) in pair_of_rows()) {
        let t = tensors(&a);
        prop_assert_eq!(kl_value(&t, &t, s).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn kl_matches_the_direct_sum((a, b, s) in pair_of_rows()) {
        let got = kl_value(&tensors(&a), &tensors(&b), s).unwrap();
        let want = kl_oracle(&a, &b, s);
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn unit_temperature_is_plain_softmax(z in prop::collection::vec(-20.0f64..20.0, 1..12)) {
        let got = soften(&z, 1.0).unwrap();
        let want = softmax_oracle(&z, 1.0);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn softening_preserves_the_argmax(
        z in prop::collection::vec(-20.0f64..20.0, 2..12),
        s in 0.1f64..20.0,
    ) {
        let arg = |v: &[f64]| {
            let mut best = 0;
            for (i, x) in v.iter().enumerate() {
                if *x > v[best] {
                    best = i;
                }
            }
            best
        };
        // Ties in the input may break either way after rounding; skip them.
        let top = arg(&z);
        prop_assume!(z.iter().enumerate().all(|(i, v)| i == top || z[top] - v > 1e-9));
        let p = soften(&z, s).unwrap();
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert_eq!(arg(&p), top);
    }

    #[test]
    fn step_reversal_is_an_involution(v in prop::collection::vec(any::<u32>(), 0..40)) {
        prop_assert_eq!(reverse_steps(&reverse_steps(&v)), v.clone());
        let r = reverse_steps(&v);
        for i in 0..v.len() {
            prop_assert_eq!(r[i], v[v.len() - 1 - i]);
        }
    }
}

#[test]
fn temperature_scaling_is_s_squared_times_softened_kl() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let a: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
        let s: f64 = rng.random_range(0.5..5.0);
        // Dividing the logits by S and using unit temperature must give the
        // same divergence up to the S² factor.
        let scaled = |rows: &[Vec<f64>]| rows.iter().map(|r| r.iter().map(|v| v / s).collect()).collect::<Vec<Vec<f64>>>();
        let at_s = kl_value(&tensors(&a), &tensors(&b), s).unwrap();
        let at_one = kl_value(&tensors(&scaled(&a)), &tensors(&scaled(&b)), 1.0).unwrap();
        assert!((at_s - s * s * at_one).abs() <= 1e-10 * at_s.abs().max(1.0));
    }
}

#[test]
fn zero_lambda_objective_is_the_cross_entropy_sum() {
    for variant in [Variant::Abm, Variant::Aum] {
        for seed in 0..3 {
            let (model, image, target) = gradient_check_case(variant, seed).unwrap();

            let mut tape = Tape::new();
            let fmap = model.encode(&mut tape, &image, None).unwrap();
            let outs = model.teacher_forced(&mut tape, &fmap, &target).unwrap();
            let loss = total_loss(&mut tape, &outs[0], &outs[1], &target, 0.0, 2.0, false).unwrap();
            let b = loss.breakdown;
            assert_eq!(b.total, b.ce_l2r + b.ce_r2l, "total must equal the summed cross-entropies");
            assert!(b.kl > 0.0, "the two branches differ, so the unweighted KL is positive");
            let full = tape.backward(loss.var).unwrap();

            let mut tape2 = Tape::new();
            let fmap2 = model.encode(&mut tape2, &image, None).unwrap();
            let outs2 = model.teacher_forced(&mut tape2, &fmap2, &target).unwrap();
            let a = ce_loss(&mut tape2, &outs2[0], &target).unwrap();
            let c = ce_loss(&mut tape2, &outs2[1], &target).unwrap();
            let ce = tape2.add(a, c).unwrap();
            assert_eq!(tape2.value(ce).item(), b.total);
            let only = tape2.backward(ce).unwrap();

            for id in model.store.ids() {
                let g1 = full.param_or_zero(&model.store, id);
                let g2 = only.param_or_zero(&model.store, id);
                assert_eq!(g1.data(), g2.data(), "{variant} seed {seed}: {}", model.store.name(id));
            }
        }
    }
}

#[test]
fn directions_order_targets_as_mirrors() {
    let t: Vec<TokenId> = vec![3, 4, 5, 6];
    assert_eq!(Direction::R2L.order(&Direction::R2L.order(&t)), t);
    assert_eq!(Direction::L2R.order(&t), t);
}

/// Memoized recursion from the front of both strings, structurally unlike
/// the two-row table in the library.
fn levenshtein_oracle(a: &[TokenId], b: &[TokenId]) -> usize {
    fn go(a: &[TokenId], b: &[TokenId], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if i == a.len() {
            b.len() - j
        } else if j == b.len() {
            a.len() - i
        } else if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo).min(go(a, b, i, j + 1, memo)).min(go(a, b, i + 1, j + 1, memo))
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, 0, 0, &mut memo)
}

#[test]
fn edit_distance_agrees_with_oracle_on_ten_thousand_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..10_000 {
        let alphabet = rng.random_range(1..6u32);
        let seq = |rng: &mut ChaCha8Rng| {
            let n = rng.random_range(0..14);
            (0..n).map(|_| rng.random_range(0..alphabet)).collect::<Vec<TokenId>>()
        };
        let a = seq(&mut rng);
        let b = seq(&mut rng);
        assert_eq!(edit_distance(&a, &b), levenshtein_oracle(&a, &b), "{a:?} vs {b:?}");
    }
}

fn short_seq() -> impl Strategy<Value = Vec<TokenId>> {
    prop::collection::vec(3u32..7, 0..10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn edit_distance_is_a_metric(a in short_seq(), b in short_seq(), c in short_seq()) {
        let d = edit_distance;
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert_eq!(d(&a, &b) == 0, a == b);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
        prop_assert!(d(&a, &b) >= a.len().abs_diff(b.len()));
    }

    #[test]
    fn exprate_at_zero_is_exact_match(pairs in prop::collection::vec((short_seq(), short_seq()), 1..30)) {
        let (preds, refs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let exact = preds.iter().zip(&refs).filter(|(p, r)| p == r).count();
        let want = 100.0 * exact as f64 / refs.len() as f64;
        prop_assert_eq!(exprate_at_k(&preds, &refs, 0).unwrap(), want);
    }

    #[test]
    fn report_rates_are_ordered_percentages(
        pairs in prop::collection::vec((short_seq(), prop::collection::vec(3u32..7, 1..10)), 1..30),
    ) {
        let (preds, refs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let r = EvalReport::compute(&preds, &refs).unwrap();
        prop_assert!(r.exprate <= r.le1 && r.le1 <= r.le2);
        for v in [r.exprate, r.le1, r.le2] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
        prop_assert!(r.wer >= 0.0);
        for &(_, p, s) in &r.prefix_suffix {
            prop_assert!((0.0..=100.0).contains(&p) && (0.0..=100.0).contains(&s));
        }
        for v in r.by_length.values() {
            prop_assert!((0.0..=100.0).contains(v));
        }
    }
}
