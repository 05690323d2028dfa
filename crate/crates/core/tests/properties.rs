use proptest::prelude::*;

use ties::attention::{read_atns, write_atns, AttentionStack, TokenLayout};
use ties::exec::Execution;
use ties::policy::{calibrate, soft_ties_select, split_budget, trust_weight, PruneConfig};
use ties::rankmetrics::{kendall_tau_b, rank_scores};
use ties::strategies::{select, FeatureMatrix, StrategyKind, StrategySpec};
use ties::ScoreVector;

fn scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u8..12, 2..max_len).prop_map(|v| v.into_iter().map(f64::from).collect())
}

fn kind() -> impl Strategy<Value = StrategyKind> {
    prop::sample::select(StrategyKind::ALL.to_vec())
}

proptest! {
    #[test]
    fn tau_is_bounded_and_symmetric(a in scores(40), seed in any::<u64>()) {
        let n = a.len();
        let negated: Vec<f64> = a.iter().map(|x| -x).collect();
        let b: Vec<f64> = (0..n).map(|i| ((seed >> (i % 60)) & 7) as f64).collect();
        let ra = rank_scores(&ScoreVector::new(a).unwrap());
        let rb = rank_scores(&ScoreVector::new(b).unwrap());
        let ab = kendall_tau_b(&ra, &rb).unwrap();
        let ba = kendall_tau_b(&rb, &ra).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ab.value));
        prop_assert_eq!(ab.value, ba.value);
        let self_tau = kendall_tau_b(&ra, &ra).unwrap();
        prop_assert!(self_tau.degenerate || (self_tau.value - 1.0).abs() < 1e-12);
        let rev = kendall_tau_b(&ra, &rank_scores(&ScoreVector::new(negated).unwrap())).unwrap();
        prop_assert!(rev.degenerate || (rev.value + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pure_selection_is_exact(s in scores(80), k_frac in 0.0f64..=1.0, kind in kind(), d in 1usize..4) {
        let n = s.len();
        let k = ((k_frac * n as f64) as usize).min(n);
        let f = FeatureMatrix::new(n, d, (0..n * d).map(|i| ((i * 37) % 11) as f64).collect()).unwrap();
        let sel = select(&StrategySpec::new(kind, k), &ScoreVector::new(s).unwrap(), Some(&f)).unwrap();
        prop_assert_eq!(sel.retained.len(), k);
        prop_assert!(sel.retained.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(sel.retained.iter().all(|&i| i < n));
    }

    #[test]
    fn soft_selection_splits_budget(s in scores(80), w in 0.0f64..=1.0, ratio in 0.01f64..=1.0, alt in kind()) {
        let n = s.len();
        let cfg = PruneConfig { prune_ratio: ratio, alt_strategy: alt, ..PruneConfig::default() };
        prop_assume!(cfg.budget(n).is_ok());
        let budget = cfg.budget(n).unwrap();
        let f = FeatureMatrix::new(n, 2, (0..2 * n).map(|i| (i % 5) as f64).collect()).unwrap();
        let sel = soft_ties_select(&ScoreVector::new(s).unwrap(), w, &cfg, Some(&f)).unwrap();
        prop_assert_eq!(sel.retained.len(), budget);
        prop_assert_eq!(sel.n_top + sel.n_alt, budget);
        prop_assert_eq!((sel.n_top, sel.n_alt), split_budget(w, budget));
    }

    #[test]
    fn trust_weight_is_a_decreasing_ramp(taus in prop::collection::vec(-1.0f64..=1.0, 2..60), a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
        let p = calibrate(&taus, "prop").unwrap();
        prop_assert!(p.q10 <= p.q25 && p.q25 <= p.tau_med && p.tau_med <= p.q75 && p.q75 <= p.q90);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (wl, wh) = (trust_weight(lo, &p), trust_weight(hi, &p));
        prop_assert!((0.0..=1.0).contains(&wl.value) && (0.0..=1.0).contains(&wh.value));
        prop_assert!(wl.degenerate || wl.value >= wh.value);
    }

    #[test]
    fn atns_round_trip_within_f32(layers in 2usize..4, heads in 1usize..3, n_l in 1usize..4, n_v in 2usize..6, seed in any::<u32>()) {
        let n = n_l + n_v;
        let mut data = Vec::with_capacity(layers * heads * n * n);
        for r in 0..layers * heads * n {
            let row: Vec<f64> = (0..n).map(|c| 1.0 + ((seed as usize + r * 7 + c * 13) % 17) as f64).collect();
            let sum: f64 = row.iter().sum();
            data.extend(row.into_iter().map(|x| x / sum));
        }
        let stack = AttentionStack::new(layers, heads, n, TokenLayout::language_first(n_l, n_v), data).unwrap();
        let mut buf = Vec::new();
        write_atns(&stack, &mut buf).unwrap();
        let back = read_atns(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.layout(), stack.layout());
        for (x, y) in back.data().iter().zip(stack.data()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn execution_modes_agree(n in 0usize..500) {
        let f = |i: usize| (i as f64 * 0.37).cos();
        prop_assert_eq!(Execution::Sequential.map(n, f), Execution::Parallel.map(n, f));
    }
}
