mod common;

use proptest::prelude::*;

use mim::data::{AttributedText, CorpusSpec};
use mim::encoder::{encode, seeded_encoder_params, EncoderConfig, GateMode};
use mim::harness::{accuracy, auc, f1};
use mim::tensor::ParamSet;

fn side(tokens: Vec<usize>, attrs: Vec<Vec<usize>>) -> AttributedText {
    attrs.into_iter().enumerate().fold(AttributedText::new(tokens), |t, (i, a)| t.with_attribute(format!("type{i}"), a))
}

fn arb_side(vocab: usize) -> impl Strategy<Value = AttributedText> {
    let tok = 4..vocab;
    (
        prop::collection::vec(tok.clone(), 1..5),
        prop::collection::vec(prop::collection::vec(tok, 1..3), 0..3),
    )
        .prop_map(|(t, a)| side(t, a))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pinned_gates_reduce_to_the_reference_encoder(
        x in arb_side(30),
        y in arb_side(30),
        seed in 0u64..1000,
        pre_norm in any::<bool>(),
        heads in prop::sample::select(vec![1usize, 2, 4]),
        per_layer_gates in any::<bool>(),
    ) {
        let cfg = EncoderConfig {
            vocab_size: 30, d: 8, heads, ffn_dim: 16, layers: 2, max_len: 32, init_std: 0.4, pre_norm, per_layer_gates,
            ..Default::default()
        };
        let params: ParamSet<f64> = seeded_encoder_params(&cfg, true, seed).unwrap();
        let got = encode(&x, &y, &params, &cfg, GateMode::Pinned).unwrap();
        let want = common::reference_encode(&x, &y, &params, &cfg);
        prop_assert_eq!(got.token_states.values().len(), want.len());
        for (a, b) in got.token_states.values().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn learned_gates_change_the_encoding_only_with_attributes(seed in 0u64..1000, x in arb_side(30), y in arb_side(30)) {
        let cfg = EncoderConfig { vocab_size: 30, d: 8, heads: 2, ffn_dim: 16, max_len: 32, init_std: 0.4, ..Default::default() };
        let params: ParamSet<f64> = seeded_encoder_params(&cfg, true, seed).unwrap();
        let bare_x = AttributedText::new(x.tokens.clone());
        let bare_y = AttributedText::new(y.tokens.clone());
        let learned = encode(&bare_x, &bare_y, &params, &cfg, GateMode::Learned).unwrap();
        let pinned = encode(&bare_x, &bare_y, &params, &cfg, GateMode::Pinned).unwrap();
        prop_assert_eq!(learned.token_states, pinned.token_states);
        let learned = encode(&x, &y, &params, &cfg, GateMode::Learned).unwrap();
        prop_assert!(learned.gates.iter().all(|&g| g > 0.0 && g < 1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn auc_matches_pair_counting(
        data in prop::collection::vec((0u8..12, 0u8..2), 1..200),
    ) {
        let scores: Vec<f64> = data.iter().map(|&(s, _)| s as f64 / 11.0).collect();
        let labels: Vec<u8> = data.iter().map(|&(_, l)| l).collect();
        prop_assert_eq!(auc(&scores, &labels), common::brute_auc(&scores, &labels));
    }

    #[test]
    fn auc_ignores_strictly_increasing_transforms(
        data in prop::collection::vec((-5.0f64..5.0, 0u8..2), 2..100),
    ) {
        let scores: Vec<f64> = data.iter().map(|&(s, _)| s).collect();
        let labels: Vec<u8> = data.iter().map(|&(_, l)| l).collect();
        let squashed: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
        prop_assert_eq!(auc(&scores, &labels), auc(&squashed, &labels));
    }

    #[test]
    fn reversing_scores_complements_auc(
        data in prop::collection::vec((0u8..20, 0u8..2), 2..100),
    ) {
        let scores: Vec<f64> = data.iter().map(|&(s, _)| s as f64).collect();
        let labels: Vec<u8> = data.iter().map(|&(_, l)| l).collect();
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        if let (Some(a), Some(b)) = (auc(&scores, &labels), auc(&negated, &labels)) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_metrics_are_bounded(
        data in prop::collection::vec((0.0f64..1.0, 0u8..2), 1..100),
        threshold in 0.0f64..1.0,
    ) {
        let scores: Vec<f64> = data.iter().map(|&(s, _)| s).collect();
        let labels: Vec<u8> = data.iter().map(|&(_, l)| l).collect();
        let a = accuracy(&scores, &labels, threshold);
        let f = f1(&scores, &labels, threshold);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((0.0..=1.0).contains(&f));
    }
}

#[test]
fn corpus_vocabulary_covers_every_generated_token() {
    let spec = CorpusSpec { num_train: 200, num_valid: 20, num_test: 20, ..Default::default() };
    let corpus = mim::data::generate_corpus(&spec).unwrap();
    let v = spec.vocab_size();
    for (_, split) in corpus.splits() {
        for e in split {
            for s in [&e.x, &e.y] {
                assert!(s.tokens.iter().chain(s.attributes.iter().flat_map(|a| a.tokens.iter())).all(|&t| t >= 4 && t < v));
            }
        }
    }
}
