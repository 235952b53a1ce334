//! Randomized checks of cross-module invariants.

use e2p_core::data::tokenizer::TokenId;
use e2p_core::eval::{example_nll, paired_t_test, perplexity, rouge, RougeVariant};
use e2p_core::lm::{pretrain, softmax, PretrainConfig};
use e2p_core::prefix::kto_from_probabilities;
use e2p_core::{
    train_e2p, AdamWConfig, ByteTokenizer, E2pExample, Example, LanguageModel, LmConfig, Objective, Projection,
    TrainConfig,
};
use proptest::prelude::*;

fn tiny_lm(seed: u64) -> LanguageModel {
    LanguageModel::new(LmConfig {
        vocab_size: 260,
        hidden_dim: 16,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 32,
        seed,
        ..LmConfig::default()
    })
    .unwrap()
}

fn words() -> impl Strategy<Value = Vec<String>> {
    proptest::collection::vec(prop::sample::select(vec!["a", "b", "c", "A", "d"]), 0..9)
        .prop_map(|w| w.into_iter().map(String::from).collect())
}

fn lcs_brute(c: &[String], r: &[String]) -> usize {
    (0u32..1 << c.len())
        .filter_map(|mask| {
            let sub: Vec<&String> = (0..c.len()).filter(|i| mask >> i & 1 == 1).map(|i| &c[i]).collect();
            let mut it = r.iter();
            sub.iter().all(|s| it.any(|x| x == *s)).then_some(sub.len())
        })
        .max()
        .unwrap_or(0)
}

/// Two-sided p for integer df from the finite trigonometric series.
fn t_series(t: f64, df: usize) -> f64 {
    let theta = (t.abs() / (df as f64).sqrt()).atan();
    let (s, c) = (theta.sin(), theta.cos());
    let mut term = if df % 2 == 1 { c } else { 1.0 };
    let mut sum = if df % 2 == 1 && df == 1 { 0.0 } else { term };
    let mut k = if df % 2 == 1 { 2 } else { 1 };
    while k + 1 < df {
        term *= k as f64 / (k as f64 + 1.0) * c * c;
        sum += term;
        k += 2;
    }
    let a = if df % 2 == 1 {
        2.0 / std::f64::consts::PI * (theta + s * sum)
    } else {
        s * sum
    };
    1.0 - a
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampling_distribution_sums_to_one(
        logits in proptest::collection::vec(-50.0f64..50.0, 1..300),
        temperature in 0.05f64..5.0,
    ) {
        let p = softmax(&logits, temperature);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn kto_loss_moves_with_the_label(
        p in 0.01f64..0.98,
        step in 0.001f64..0.01,
        alpha in 0.0f64..3.0,
    ) {
        let pos = |q: f64| kto_from_probabilities(&[q], &[1], alpha).unwrap();
        let neg = |q: f64| kto_from_probabilities(&[q], &[0], alpha).unwrap();
        prop_assert!(pos(p + step) <= pos(p));
        if alpha > 0.0 {
            prop_assert!(neg(p + step) >= neg(p));
        } else {
            prop_assert_eq!(neg(p + step), 0.0);
        }
    }

    #[test]
    fn rouge_agrees_with_brute_force(c in words(), r in words()) {
        let (cs, rs) = (c.join(" "), r.join(" "));
        let lc: Vec<String> = c.iter().map(|w| w.to_lowercase()).collect();
        let lr: Vec<String> = r.iter().map(|w| w.to_lowercase()).collect();
        let l = rouge(&cs, &rs, RougeVariant::L);
        prop_assert!((0.0..=1.0).contains(&l));
        prop_assert_eq!(l == 1.0, lc == lr);
        if !lc.is_empty() && !lr.is_empty() {
            let lcs = lcs_brute(&lc, &lr) as f64;
            let want = if lcs == 0.0 {
                0.0
            } else {
                let (p, q) = (lcs / lc.len() as f64, lcs / lr.len() as f64);
                2.0 * p * q / (p + q)
            };
            prop_assert!((l - want).abs() < 1e-12);
        }
        for v in [RougeVariant::One, RougeVariant::Two] {
            prop_assert!((rouge(&cs, &rs, v) - rouge(&rs, &cs, v)).abs() < 1e-12);
        }
    }

    #[test]
    fn t_test_matches_series_oracle(
        diffs in proptest::collection::vec(-2.0f64..2.0, 2..40),
        shift in -1.0f64..1.0,
    ) {
        let a: Vec<f64> = diffs.iter().map(|d| d + shift).collect();
        let b = vec![0.0; a.len()];
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        prop_assume!(var > 1e-12);
        let r = paired_t_test(&a, &b).unwrap();
        let t = mean / (var / n).sqrt();
        prop_assert!((r.t - t).abs() < 1e-9 * t.abs().max(1.0));
        prop_assert!((r.p - t_series(t, a.len() - 1)).abs() < 1e-6);
        prop_assert_eq!(r.significant, r.p < 0.05);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn perplexity_is_exp_of_mean_loss(seed in 0u64..1000, texts in proptest::collection::vec("[a-z ]{1,12}", 1..5)) {
        let lm = tiny_lm(seed);
        let items: Vec<(Option<Vec<f64>>, Example)> = texts
            .iter()
            .map(|t| (None, Example::from_text(ByteTokenizer.encode(&format!("<|model|>\n{t}")))))
            .collect();
        let (ppl, per) = perplexity(&lm, &items).unwrap();
        let direct: Vec<f64> = items.iter().map(|(_, e)| example_nll(&lm, None, e).unwrap()).collect();
        prop_assert_eq!(&per, &direct);
        let mean = direct.iter().sum::<f64>() / direct.len() as f64;
        prop_assert!((ppl - mean.exp()).abs() < 1e-9 * ppl);
    }

    #[test]
    fn training_changes_exactly_the_projection(seed in 0u64..1000, n in 2usize..6) {
        let lm = tiny_lm(seed).freeze();
        let before: Vec<Vec<f64>> = lm.parameters().iter().map(|t| t.data().to_vec()).collect();
        let data: Vec<E2pExample> = (0..n)
            .map(|i| E2pExample {
                embedding: vec![i as f64 * 0.3, 1.0 - i as f64 * 0.2, 0.5],
                example: Example::from_text(ByteTokenizer.encode("<|model|>\nxyz")),
                profile_len: 0,
                label: None,
            })
            .collect();
        let cfg = TrainConfig { epochs: 2, batch_size: 2, learning_rate: 1e-2, seed, ..TrainConfig::default() };
        let (phi, report) = train_e2p(&lm, &data, Objective::Lm, &cfg).unwrap();
        prop_assert!(lm.verify().is_ok());
        prop_assert_eq!(report.lm_digest.as_str(), lm.digest());
        let after: Vec<Vec<f64>> = lm.parameters().iter().map(|t| t.data().to_vec()).collect();
        prop_assert_eq!(before, after);
        let init = Projection::new(3, 16, 16, seed).unwrap();
        for (a, b) in init.parameters().iter().zip(phi.parameters()) {
            prop_assert_ne!(a.data(), b.data());
        }
    }
}

#[test]
fn pretraining_memorizes_a_tiny_corpus() {
    let corpus: Vec<Vec<TokenId>> = (0..4).map(|_| ByteTokenizer.encode("<|model|>\nabcabcabc")).collect();
    let cfg = LmConfig {
        hidden_dim: 32,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 32,
        ..LmConfig::default()
    };
    let opts = PretrainConfig {
        epochs: 150,
        batch_size: 4,
        optimizer: AdamWConfig {
            learning_rate: 1e-2,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        seed: 3,
    };
    let (lm, _) = pretrain(&corpus, &cfg, &opts).unwrap();
    let items = vec![(None, Example::from_text(corpus[0].clone()))];
    let (ppl, _) = perplexity(&lm, &items).unwrap();
    assert!(ppl < 1.1, "perplexity {ppl}");
}
