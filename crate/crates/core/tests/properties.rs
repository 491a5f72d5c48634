use fineprune::harness::ExperimentConfig;
use fineprune::pruning::{select_global_topv, select_local_topv, select_threshold};
use fineprune::schedule::PruneSchedule;
use fineprune::Real;
use proptest::prelude::*;

fn score_layers() -> impl Strategy<Value = Vec<Vec<Real>>> {
    prop::collection::vec(prop::collection::vec(-5.0..5.0 as Real, 1..40), 1..5)
}

fn kept(masks: &[Vec<bool>]) -> usize {
    masks.iter().flatten().filter(|&&k| k).count()
}

fn subset(inner: &[Vec<bool>], outer: &[Vec<bool>]) -> bool {
    inner
        .iter()
        .flatten()
        .zip(outer.iter().flatten())
        .all(|(&a, &b)| b || !a)
}

proptest! {
    #[test]
    fn topv_masks_nest(scores in score_layers(), a in 0.0..=1.0 as Real, b in 0.0..=1.0 as Real) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let l_lo = select_local_topv(&scores, lo).unwrap();
        let l_hi = select_local_topv(&scores, hi).unwrap();
        prop_assert!(subset(&l_lo, &l_hi));
        let g_lo = select_global_topv(&scores, lo).unwrap();
        let g_hi = select_global_topv(&scores, hi).unwrap();
        prop_assert!(subset(&g_lo, &g_hi));
        let total: usize = scores.iter().map(Vec::len).sum();
        prop_assert_eq!(kept(&g_hi), (hi as f64 * total as f64 + 0.5).floor() as usize);
    }

    #[test]
    fn threshold_keeps_at_least_target(scores in score_layers(), v in 0.0..=1.0 as Real, tau in 0.05..0.95 as Real) {
        let total: usize = scores.iter().map(Vec::len).sum();
        let s = select_threshold(&scores, tau, v).unwrap();
        prop_assert!(kept(&s.masks) >= (v as f64 * total as f64 + 0.5).floor() as usize);
    }

    #[test]
    fn schedule_is_non_increasing(total in 10usize..500, v in 0.0..=1.0 as Real, w in 0.0..0.4f64, r in 0.4..1.0f64) {
        let s = PruneSchedule::from_fractions(total, v, w, r, 4).unwrap();
        let mut prev = s.target_leftover(0).unwrap();
        prop_assert_eq!(prev, 1.0);
        for t in 1..=total {
            let cur = s.target_leftover(t).unwrap();
            prop_assert!(cur <= prev);
            prop_assert!(cur >= v);
            prev = cur;
        }
    }

    #[test]
    fn config_survives_toml(seed in 0..=i64::MAX as u64, v in 0.01..=1.0f64, lambda in 0.0..100.0f64) {
        let c = ExperimentConfig::preset("tiny").unwrap().with_overrides(&[
            format!("seed={seed}"),
            format!("leftover={v}"),
            format!("pruning.lambda_gum={lambda}"),
        ]).unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }
}
