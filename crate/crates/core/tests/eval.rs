use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reasonrec::datasets::{self, Interaction, ItemDescription, SplitDataset};
use reasonrec::eval::{self, ndcg_at_k, recall_at_k, DEFAULT_KS};
use reasonrec::Result;

/// `users` users, each with two events on a catalog of `items`; the test item
/// is drawn at random.
fn split(users: usize, items: usize, seed: u64) -> SplitDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let catalog: Vec<ItemDescription> = (0..items).map(|i| ItemDescription::placeholder(&i.to_string())).collect();
    let mut events = Vec::new();
    for u in 0..users {
        for t in 0..2 {
            let item = if u < items && t == 0 { u } else { rng.gen_range(0..items) };
            events.push(Interaction { user_id: u.to_string(), item_id: item.to_string(), rating: 5.0, timestamp: t });
        }
    }
    datasets::leave_one_out_split(&events, &catalog)
}

#[test]
fn indicator_scorer_is_perfect() {
    let s = split(30, 20, 1);
    let scorer = |u: usize| -> Result<Vec<f64>> {
        let mut v = vec![0.0; s.n_items()];
        v[s.test[u].item] = 1.0;
        Ok(v)
    };
    let r = eval::evaluate(&scorer, &s, &DEFAULT_KS).unwrap();
    assert!(r.recall.iter().chain(&r.ndcg).all(|&x| x == 1.0));
}

#[test]
fn constant_scorer_matches_brute_force() {
    let s = split(40, 20, 2);
    let scorer = |_u: usize| -> Result<Vec<f64>> { Ok(vec![0.25; 20]) };
    let r = eval::evaluate(&scorer, &s, &DEFAULT_KS).unwrap();
    for (p, &k) in DEFAULT_KS.iter().enumerate() {
        let (mut rec, mut g) = (0.0, 0.0);
        for t in &s.test {
            // Ties go to the lower index, so the target sits at its id position.
            let rank = t.item + 1;
            if rank <= k {
                rec += 1.0;
                g += 1.0 / ((rank + 1) as f64).log2();
            }
        }
        let n = s.test.len() as f64;
        assert!((r.recall[p] - rec / n).abs() < 1e-15);
        assert!((r.ndcg[p] - g / n).abs() < 1e-15);
    }
}

#[test]
fn random_scorer_recall_tracks_k_over_catalog() {
    let (users, items) = (10_000, 50);
    let s = split(users, items, 3);
    let scorer = |u: usize| -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000_003 * u as u64 + 17);
        Ok((0..items).map(|_| rng.gen()).collect())
    };
    let r = eval::evaluate(&scorer, &s, &[1, 5, 10, 20]).unwrap();
    for (p, &k) in r.ks.iter().enumerate() {
        let expected = k as f64 / items as f64;
        let sigma = (expected * (1.0 - expected) / users as f64).sqrt();
        assert!((r.recall[p] - expected).abs() < 3.0 * sigma, "K={k}: {} vs {expected}", r.recall[p]);
    }
}

#[test]
fn rank_helpers_agree_with_metric_functions() {
    let ranks = [1usize, 3, 7, 20, 2];
    let r = eval::metrics_from_ranks(&ranks, &[5]).unwrap();
    let rec: f64 = ranks.iter().map(|&x| recall_at_k(x, 5).unwrap()).sum::<f64>() / 5.0;
    let g: f64 = ranks.iter().map(|&x| ndcg_at_k(x, 5).unwrap()).sum::<f64>() / 5.0;
    assert_eq!((r.recall[0], r.ndcg[0]), (rec, g));
    assert_eq!(r.recall_at(5), Some(0.6));
    assert!(r.to_tsv().starts_with("k\trecall\tndcg\tusers\n5\t0.6\t"));
}

#[test]
fn wrong_score_width_is_rejected() {
    let s = split(5, 10, 4);
    let scorer = |_u: usize| -> Result<Vec<f64>> { Ok(vec![0.0; 9]) };
    assert!(eval::evaluate(&scorer, &s, &DEFAULT_KS).is_err());
}

#[test]
fn fast_scorer_has_positive_finite_mean() {
    let scorer = |_u: usize| -> Result<Vec<f64>> { Ok(vec![1.0; 4]) };
    let users: Vec<usize> = (0..50).collect();
    let t = eval::timing_benchmark(&scorer, &users, 8, 2).unwrap();
    assert!(t.mean_seconds_per_sample > 0.0 && t.mean_seconds_per_sample.is_finite());
    assert_eq!(t.timed_batches, 7);
    assert_eq!(t.timed_samples, 56);
}

#[test]
fn doubling_the_sleep_roughly_doubles_the_mean() {
    let sleeper = |ms: u64| move |_u: usize| -> Result<Vec<f64>> {
        std::thread::sleep(Duration::from_millis(ms));
        Ok(vec![0.0])
    };
    let users: Vec<usize> = (0..20).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (a, b) = pool.install(|| {
        (
            eval::timing_benchmark(&sleeper(4), &users, 5, 1).unwrap().mean_seconds_per_sample,
            eval::timing_benchmark(&sleeper(8), &users, 5, 1).unwrap().mean_seconds_per_sample,
        )
    });
    let ratio = b / a;
    assert!((1.6..2.4).contains(&ratio), "{a} -> {b} (ratio {ratio})");
}
