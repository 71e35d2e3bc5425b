//! Properties of attention, coverage, masking and decoding on small
//! double-precision models.

use abm_core::attention::AttentionConfig;
use abm_core::data::{Bitmap, TokenId};
use abm_core::decoder::DecoderConfig;
use abm_core::encoder::EncoderConfig;
use abm_core::{Model, ModelConfig, ObjectiveSettings, Tape, Variant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(variant: Variant, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        variant,
        encoder: EncoderConfig {
            blocks: 2,
            layers_per_block: 1,
            growth_rate: 4,
            initial_channels: 4,
            out_channels: 8,
            downsample_factor: 4,
        },
        decoder: DecoderConfig {
            hidden: 8,
            attn_dim: 8,
            vocab_size,
            attention: AttentionConfig {
                coverage_channels: 2,
                small_kernel: 3,
                large_kernel: Some(5),
            },
        },
    }
}

/// Model with every parameter nudged so no unit sits at an exact zero.
fn model(variant: Variant, vocab_size: usize, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::new(small_config(variant, vocab_size), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        for v in m.store.tensor_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    m
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Bitmap {
    let mut b = Bitmap::new(h, w);
    for v in &mut b.data {
        *v = rng.random_range(0.0f32..1.0);
    }
    b
}

/// Places `image` on an `h×w` canvas; padding gets `fill` ink and a 0 mask.
fn on_canvas(image: &Bitmap, h: usize, w: usize, fill: f32) -> (Bitmap, Bitmap) {
    let mut canvas = Bitmap::new(h, w);
    let mut mask = Bitmap::new(h, w);
    for y in 0..h {
        for x in 0..w {
            if y < image.height && x < image.width {
                canvas.set(y, x, image.get(y, x));
                mask.set(y, x, 1.0);
            } else {
                canvas.set(y, x, fill);
            }
        }
    }
    (canvas, mask)
}

fn objective() -> ObjectiveSettings {
    ObjectiveSettings {
        lambda: 0.5,
        temperature: 2.0,
        detach_target: false,
    }
}

#[derive(Debug, Clone)]
struct Case {
    seed: u64,
    h: usize,
    w: usize,
    pad_h: usize,
    pad_w: usize,
    target: Vec<TokenId>,
}

fn cases() -> impl Strategy<Value = Case> {
    (any::<u64>(), 6usize..24, 6usize..32, 0usize..10, 0usize..14, prop::collection::vec(3u32..8, 1..6)).prop_map(
        |(seed, h, w, pad_h, pad_w, target)| Case {
            seed,
            h,
            w,
            pad_h,
            pad_w,
            target,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_is_a_distribution_over_valid_cells(case in cases()) {
        let m = model(Variant::Abm, 8, case.seed % 7);
        let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
        let img = random_image(&mut rng, case.h, case.w);
        let (canvas, mask) = on_canvas(&img, case.h + case.pad_h, case.w + case.pad_w, 0.0);
        let mut tape = Tape::new();
        let fmap = m.encode(&mut tape, &canvas, Some(&mask)).unwrap();
        let cell_mask = fmap.mask.data().to_vec();
        prop_assert!(cell_mask.iter().any(|&v| v != 0.0));
        let outs = m.teacher_forced(&mut tape, &fmap, &case.target).unwrap();
        for out in &outs {
            let t = case.target.len();
            prop_assert_eq!(out.logits.len(), t + 1);
            prop_assert_eq!(out.alphas.len(), t + 1);
            prop_assert_eq!(out.attention.history.len(), t + 1);
            let mut coverage = vec![0.0; fmap.cells()];
            for &a in &out.alphas {
                let alpha = tape.value(a).data().to_vec();
                let total: f64 = alpha.iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-6, "sum {}", total);
                for (v, &valid) in alpha.iter().zip(&cell_mask) {
                    prop_assert!(*v >= 0.0);
                    if valid == 0.0 {
                        prop_assert_eq!(*v, 0.0);
                    }
                }
                for (c, v) in coverage.iter_mut().zip(&alpha) {
                    *c += v;
                }
            }
            let beta = tape.value(out.attention.beta).data().to_vec();
            for (b, c) in beta.iter().zip(&coverage) {
                prop_assert!((b - c).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn padding_with_a_mask_leaves_the_loss_unchanged(case in cases()) {
        let m = model(Variant::Abm, 8, case.seed % 5);
        let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
        let img = random_image(&mut rng, case.h, case.w);
        let (canvas, mask) = on_canvas(&img, case.h + case.pad_h, case.w + case.pad_w, 0.0);
        let solo = m.loss(&mut Tape::new(), &img, None, &case.target, &objective()).unwrap().breakdown;
        let padded = m.loss(&mut Tape::new(), &canvas, Some(&mask), &case.target, &objective()).unwrap().breakdown;
        for (a, b) in [
            (solo.total, padded.total),
            (solo.ce_l2r, padded.ce_l2r),
            (solo.ce_r2l, padded.ce_r2l),
            (solo.kl, padded.kl),
        ] {
            prop_assert!((a - b).abs() <= 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn ink_under_the_mask_has_no_influence(case in cases(), fill in 0.1f32..1.0) {
        prop_assume!(case.pad_h + case.pad_w > 0);
        let m = model(Variant::Abm, 8, case.seed % 5);
        let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
        let img = random_image(&mut rng, case.h, case.w);
        let (h, w) = (case.h + case.pad_h, case.w + case.pad_w);
        let (clean, mask) = on_canvas(&img, h, w, 0.0);
        let (dirty, _) = on_canvas(&img, h, w, fill);
        let a = m.loss(&mut Tape::new(), &clean, Some(&mask), &case.target, &objective()).unwrap().breakdown;
        let b = m.loss(&mut Tape::new(), &dirty, Some(&mask), &case.target, &objective()).unwrap().breakdown;
        prop_assert_eq!(a, b);
    }
}

/// Two symbols plus the end marker give 3 choices per step, so 3 steps
/// admit at most 39 distinct hypotheses and a width of 64 prunes nothing.
const EXHAUSTIVE: usize = 64;

#[test]
fn exhaustive_beam_scores_at_least_every_narrower_beam() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..12 {
        for variant in [Variant::UniL2R, Variant::UniR2L] {
            let m = model(variant, 5, seed);
            let img = random_image(&mut rng, 16, 20);
            let best = m.recognize(&img, None, Some(EXHAUSTIVE), 3).unwrap();
            let greedy = m.recognize(&img, None, None, 3).unwrap();
            let width_one = m.recognize(&img, None, Some(1), 3).unwrap();
            assert_eq!(greedy, width_one, "width 1 must reproduce greedy decoding");
            for width in 1..=6 {
                let d = m.recognize(&img, None, Some(width), 3).unwrap();
                assert!(d.score() <= best.score() + 1e-12, "width {width}: {} > {}", d.score(), best.score());
            }
        }
    }
}

#[test]
fn beam_outputs_respect_the_length_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..6 {
        let m = model(Variant::Abm, 10, seed);
        let img = random_image(&mut rng, 20, 28);
        for beam in [None, Some(3)] {
            for max_len in [1, 4, 9] {
                let d = m.recognize(&img, None, beam, max_len).unwrap();
                assert!(d.tokens.len() <= max_len);
                assert_eq!(d.alphas.len(), d.emitted.len());
                assert_eq!(d.truncated, d.tokens.len() == d.emitted.len());
            }
        }
    }
}

#[test]
fn blank_image_decoding_terminates() {
    for variant in Variant::ALL {
        let m = model(variant, 10, 3);
        let blank = Bitmap::new(32, 48);
        for beam in [None, Some(4)] {
            let d = m.recognize(&blank, None, beam, 20).unwrap();
            assert!(d.tokens.len() <= 20);
            assert!(d.log_prob.is_finite());
            assert!(d.alphas.iter().flatten().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn every_branch_can_decode() {
    let m = model(Variant::Abm, 10, 4);
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(1), 16, 16);
    for name in m.branch_names() {
        m.recognize(&img, Some(&name), Some(2), 5).unwrap();
    }
    assert!(m.recognize(&img, Some("nope"), None, 5).is_err());
}
