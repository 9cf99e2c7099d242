mod oracle;

use multictx::metrics::{bleu4, cider_d, meteor_exact, rouge_l, EvalPair, Smoothing};
use proptest::prelude::*;

fn to_pairs(cases: &[oracle::Case]) -> Vec<EvalPair> {
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| EvalPair {
            image_key: i.to_string(),
            hypothesis: c.hyp.clone(),
            references: c.refs.clone(),
        })
        .collect()
}

#[test]
fn bleu_and_cider_match_oracles_on_fixtures() {
    for (i, fx) in oracle::fixtures().iter().enumerate() {
        let pairs = to_pairs(fx);
        let b = bleu4(&pairs, Smoothing::None).unwrap();
        let c = cider_d(&pairs).unwrap();
        assert!(
            (b - oracle::bleu4(fx)).abs() < 1e-6,
            "fixture {i}: bleu {b} vs {}",
            oracle::bleu4(fx)
        );
        assert!(
            (c - oracle::cider_d(fx)).abs() < 1e-6,
            "fixture {i}: cider {c} vs {}",
            oracle::cider_d(fx)
        );
        let r = rouge_l(&pairs).unwrap();
        assert!((r - oracle::rouge_l(fx)).abs() < 1e-9);
    }
}

#[test]
fn fixtures_are_not_degenerate() {
    for (i, fx) in oracle::fixtures().into_iter().enumerate() {
        assert!(fx.len() <= 10);
        let b = oracle::bleu4(&fx);
        let c = oracle::cider_d(&fx);
        assert!(b > 0.0 && b < 1.0, "fixture {i} bleu {b}");
        assert!(c > 0.0, "cider {c}");
    }
}

fn token() -> impl Strategy<Value = String> {
    prop::sample::select(vec![
        "a", "dog", "cat", "on", "the", "mat", "runs", "red", "park", "sits",
    ])
    .prop_map(String::from)
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(token(), 1..12)
}

fn pair_strategy() -> impl Strategy<Value = EvalPair> {
    (sentence(), prop::collection::vec(sentence(), 1..4)).prop_map(|(h, r)| EvalPair {
        image_key: String::new(),
        hypothesis: h,
        references: r,
    })
}

fn pairs_strategy() -> impl Strategy<Value = Vec<EvalPair>> {
    prop::collection::vec(pair_strategy(), 1..8).prop_map(|mut v| {
        for (i, p) in v.iter_mut().enumerate() {
            p.image_key = i.to_string();
        }
        v
    })
}

proptest! {
    #[test]
    fn scores_stay_in_range(pairs in pairs_strategy()) {
        for s in [Smoothing::None, Smoothing::AddOne] {
            let b = bleu4(&pairs, s).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
        }
        let r = rouge_l(&pairs).unwrap();
        let m = meteor_exact(&pairs).unwrap();
        let c = cider_d(&pairs).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&m));
        prop_assert!((0.0..=10.0 + 1e-9).contains(&c));
    }

    #[test]
    fn pair_order_is_irrelevant(pairs in pairs_strategy(), seed in any::<u64>()) {
        let mut shuffled = pairs.clone();
        let len = shuffled.len();
        for i in (1..len).rev() {
            shuffled.swap(i, (seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize);
        }
        prop_assert_eq!(bleu4(&pairs, Smoothing::None).unwrap(), bleu4(&shuffled, Smoothing::None).unwrap());
        prop_assert_eq!(rouge_l(&pairs).unwrap(), rouge_l(&shuffled).unwrap());
        prop_assert_eq!(cider_d(&pairs).unwrap(), cider_d(&shuffled).unwrap());
        prop_assert_eq!(meteor_exact(&pairs).unwrap(), meteor_exact(&shuffled).unwrap());
    }

    #[test]
    fn extra_reference_never_hurts(p in pair_strategy(), extra in sentence()) {
        let mut more = p.clone();
        more.references.push(extra);
        let one = [p];
        let two = [more];
        prop_assert!(rouge_l(&two).unwrap() >= rouge_l(&one).unwrap());
        prop_assert!(meteor_exact(&two).unwrap() >= meteor_exact(&one).unwrap());
    }

    #[test]
    fn smoothing_only_raises_bleu(pairs in pairs_strategy()) {
        prop_assert!(bleu4(&pairs, Smoothing::None).unwrap() <= bleu4(&pairs, Smoothing::AddOne).unwrap());
    }

    #[test]
    fn bleu_and_cider_agree_with_oracles(pairs in pairs_strategy()) {
        let cases: Vec<oracle::Case> = pairs
            .iter()
            .map(|p| oracle::Case { hyp: p.hypothesis.clone(), refs: p.references.clone() })
            .collect();
        prop_assert!((bleu4(&pairs, Smoothing::None).unwrap() - oracle::bleu4(&cases)).abs() < 1e-9);
        prop_assert!((cider_d(&pairs).unwrap() - oracle::cider_d(&cases)).abs() < 1e-9);
    }
}
