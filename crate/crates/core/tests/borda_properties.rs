use filter_triage::susceptibility::{
    borda_rank, rank_by_distance, select_filters, DistanceMatrix, EmdMetric, SelectionMode,
};
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..8, 1usize..16).prop_flat_map(|(n, f)| (Just(n), Just(f), prop::collection::vec(0.0f64..5.0, n * f)))
}

fn dm(n: usize, f: usize, v: Vec<f64>) -> DistanceMatrix {
    DistanceMatrix::new(2, EmdMetric::Marginal, (0..n as u64).collect(), f, v).unwrap()
}

/// Direct re-statement of the vote: per row, rank r (0-based, ties to the
/// lower index) earns max(0, 10 - r).
fn oracle_scores(n: usize, f: usize, v: &[f64]) -> Vec<u64> {
    let mut s = vec![0u64; f];
    for i in 0..n {
        let row = &v[i * f..(i + 1) * f];
        for j in 0..f {
            let rank = (0..f)
                .filter(|&k| row[k] > row[j] || (row[k] == row[j] && k < j))
                .count();
            s[j] += 10u64.saturating_sub(rank as u64);
        }
    }
    s
}

proptest! {
    #[test]
    fn scores_match_oracle_and_order_is_sorted((n, f, v) in matrix()) {
        let r = borda_rank(&dm(n, f, v.clone()));
        prop_assert_eq!(&r.scores, &oracle_scores(n, f, &v));
        let mut sorted = r.order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..f).collect::<Vec<_>>());
        prop_assert!(r.order.windows(2).all(|w| r.scores[w[0]] >= r.scores[w[1]]));
        let per_row: u64 = (0..f.min(10) as u64).map(|p| 10 - p).sum();
        prop_assert_eq!(r.scores.iter().sum::<u64>(), per_row * n as u64);
    }

    #[test]
    fn row_order_does_not_matter((n, f, v) in matrix(), rot in 0usize..8) {
        let mut rows: Vec<Vec<f64>> = v.chunks(f).map(<[f64]>::to_vec).collect();
        rows.rotate_left(rot % n);
        let a = borda_rank(&dm(n, f, v));
        let b = borda_rank(&dm(n, f, rows.concat()));
        prop_assert_eq!(a.scores, b.scores);
        prop_assert_eq!(a.order, b.order);
    }

    #[test]
    fn positive_row_scaling_keeps_scores((n, f, v) in matrix(), scales in prop::collection::vec(0.5f64..4.0, 8)) {
        let scaled: Vec<f64> = v.iter().enumerate().map(|(k, &x)| x * scales[k / f]).collect();
        let a = borda_rank(&dm(n, f, v));
        let b = borda_rank(&dm(n, f, scaled));
        prop_assert_eq!(&a.scores, &b.scores);
        // Mean distance only breaks score ties, so the order is fixed when
        // all scores are distinct.
        let mut s = a.scores.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() == f {
            prop_assert_eq!(a.order, b.order);
        }
    }

    #[test]
    fn most_and_least_are_disjoint_unless_all((n, f, v) in matrix(), frac in 0.05f64..0.5) {
        let r = borda_rank(&dm(n, f, v));
        let most = select_filters(&r, SelectionMode::Most, frac).unwrap();
        let least = select_filters(&r, SelectionMode::Least, frac).unwrap();
        prop_assert_eq!(most.selected.len(), least.selected.len());
        if 2 * most.selected.len() <= f {
            prop_assert!(most.selected.iter().all(|s| !least.selected.contains(s)));
        }
    }

    #[test]
    fn single_vector_ranking_is_descending_argsort(v in prop::collection::vec(0.0f64..3.0, 1..30)) {
        let r = rank_by_distance(1, &v).unwrap();
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        prop_assert_eq!(r.order, idx);
    }
}
