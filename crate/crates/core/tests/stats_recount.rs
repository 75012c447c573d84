use proptest::prelude::*;
use splitcache_core::StatsAccumulator;

#[derive(Debug, Clone)]
struct Log {
    n: usize,
    k: usize,
    p: usize,
    tokens: Vec<(Vec<usize>, Vec<usize>)>,
}

fn distinct(n: usize, len: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle().prop_map(move |v| v[..len].to_vec())
}

fn log() -> impl Strategy<Value = Log> {
    (2usize..=16)
        .prop_flat_map(|n| (Just(n), 1..n))
        .prop_flat_map(|(n, k)| (Just(n), Just(k), k..=n))
        .prop_flat_map(|(n, k, p)| {
            let token = (distinct(n, k), distinct(n, p));
            (Just(n), Just(k), Just(p), prop::collection::vec(token, 1..=100))
        })
        .prop_map(|(n, k, p, tokens)| Log { n, k, p, tokens })
}

/// Frequency ranks (1-based) before each token, recomputed from scratch.
fn ranks(freq: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..freq.len()).collect();
    order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
    let mut rank = vec![0; freq.len()];
    for (r, e) in order.into_iter().enumerate() {
        rank[e] = r + 1;
    }
    rank
}

struct Recount {
    hit: Vec<f64>,
    pred: Vec<f64>,
    pred_hit: Vec<Vec<f64>>,
}

fn recount(log: &Log) -> Recount {
    let q = log.tokens.len();
    let mut freq = vec![0u64; log.n];
    let mut hits = vec![0u64; log.n + 1];
    let mut pred = vec![0u64; log.p];
    let mut pred_hits = vec![vec![0u64; log.n + 1]; log.p];
    for (act, predicted) in &log.tokens {
        let rank = ranks(&freq);
        for c in 1..=log.n {
            hits[c] += act.iter().filter(|&&e| rank[e] <= c).count() as u64;
            for (y, &e) in predicted.iter().enumerate() {
                if rank[e] <= c {
                    pred_hits[y][c] += 1;
                }
            }
        }
        for (y, e) in predicted.iter().enumerate() {
            if act.contains(e) {
                pred[y] += 1;
            }
        }
        for &e in act {
            freq[e] += 1;
        }
    }
    Recount {
        hit: hits.iter().map(|&h| h as f64 / (q * log.k) as f64).collect(),
        pred: pred.iter().map(|&h| h as f64 / q as f64).collect(),
        pred_hit: pred_hits.iter().map(|row| row.iter().map(|&h| h as f64 / q as f64).collect()).collect(),
    }
}

fn accumulate(log: &Log) -> StatsAccumulator {
    let mut acc = StatsAccumulator::new(1, log.n, log.k, log.p);
    for (act, predicted) in &log.tokens {
        acc.observe(0, act, predicted);
    }
    acc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_brute_force_recount(log in log()) {
        let acc = accumulate(&log);
        let want = recount(&log);
        let snap = acc.snapshot().unwrap();
        for c in 1..=log.n {
            prop_assert_eq!(acc.hit_rate(0, c).unwrap(), want.hit[c]);
            prop_assert_eq!(snap.h(0, c), want.hit[c]);
            for y in 1..=log.p {
                prop_assert_eq!(acc.pred_hit(0, y, c).unwrap(), want.pred_hit[y - 1][c]);
                prop_assert_eq!(snap.ph(0, y, c), want.pred_hit[y - 1][c]);
            }
        }
        for y in 1..=log.p {
            prop_assert_eq!(acc.pred_accuracy(0, y).unwrap(), want.pred[y - 1]);
        }
    }

    #[test]
    fn curves_are_monotone_and_saturate(log in log()) {
        let snap = accumulate(&log).snapshot().unwrap();
        for c in 1..log.n {
            prop_assert!(snap.h(0, c) <= snap.h(0, c + 1));
            for y in 1..=log.p {
                prop_assert!(snap.ph(0, y, c) <= snap.ph(0, y, c + 1));
            }
        }
        prop_assert!((snap.h(0, log.n) - 1.0).abs() < 1e-12);
        for y in 1..=log.p {
            prop_assert!((snap.ph(0, y, log.n) - 1.0).abs() < 1e-12);
        }
        if log.p == log.n {
            let total: f64 = (1..=log.p).map(|y| snap.p(0, y)).sum();
            prop_assert!((total - log.k as f64).abs() < 1e-9);
        }
    }
}
