mod common;

use abmt::encoder::{EncoderConfig, EncoderState};
use abmt::evaluation::{cmc, evaluate, mean_average_precision, rank_gallery, RetrievalSplit};
use abmt::pseudo_labels::{
    cluster_means, dbscan, generate_pseudo_labels, k_reciprocal_rerank, kmeans_pp, pairwise_euclidean, ClusterConfig,
    ClusteringMethod, NOISE,
};
use abmt::tensor::Tensor;
use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn pairwise_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts = rand_points(&mut rng, 10, 4);
    let oracle = distance_oracle(&pts);
    let d = pairwise_euclidean(&Tensor::from_rows(&pts).unwrap());
    for i in 0..10 {
        for j in 0..10 {
            assert!((d.get(i, j) - oracle[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn rerank_eight_points_against_set_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pts = rand_points(&mut rng, 8, 3);
    let d = distance_oracle(&pts);
    let cfg = ClusterConfig {
        k1: 3,
        k2: 2,
        ..ClusterConfig::default()
    };
    let got = k_reciprocal_rerank(&to_matrix(&d), &cfg).unwrap();
    let want = rerank_oracle(&d, 3, 2, cfg.lambda_rerank);
    for i in 0..8 {
        assert_eq!(got.get(i, i), 0.0);
        for j in 0..8 {
            assert!((got.get(i, j) - want[i][j]).abs() < 1e-9);
        }
    }
}

#[test]
fn rerank_bounds_and_linear_blend() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let n = rng.random_range(6..20);
        let pts = rand_points(&mut rng, n, 3);
        let d = to_matrix(&distance_oracle(&pts));
        let at = |lambda: f64| {
            let cfg = ClusterConfig {
                k1: 4,
                k2: 2,
                lambda_rerank: lambda,
                ..ClusterConfig::default()
            };
            k_reciprocal_rerank(&d, &cfg).unwrap()
        };
        let (r0, r5, r1) = (at(0.0), at(0.5), at(1.0));
        for i in 0..n {
            for j in 0..n {
                let jac = r0.get(i, j);
                assert!((0.0..=1.0 + 1e-12).contains(&jac));
                assert!(r5.get(i, j) <= d.get(i, j).max(1.0) + 1e-12);
                assert!((r5.get(i, j) - 0.5 * (r0.get(i, j) + r1.get(i, j))).abs() < 1e-12);
                assert_eq!(r5.get(i, j), r5.get(j, i));
            }
        }
    }
}

#[test]
fn dbscan_against_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let n = rng.random_range(1..=40);
        let pts = rand_points(&mut rng, n, 2);
        let d = distance_oracle(&pts);
        let eps = rng.random_range(0.05..0.6);
        let min_pts = rng.random_range(2..6);
        assert_eq!(canonical(&dbscan(&to_matrix(&d), eps, min_pts)), dbscan_oracle(&d, eps, min_pts));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dbscan_permutation_equivariant(seed in any::<u64>(), n in 2usize..30, eps in 0.1f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = rand_points(&mut rng, n, 2);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
        let base = dbscan(&to_matrix(&distance_oracle(&pts)), eps, 3);
        let moved = dbscan(&to_matrix(&distance_oracle(&permuted)), eps, 3);
        // Border points touching two clusters may follow the order, so only
        // noise and core co-membership are compared.
        let d = distance_oracle(&pts);
        let core = |i: usize| (0..n).filter(|&j| d[i][j] <= eps).count() >= 3;
        for a in 0..n {
            prop_assert_eq!(base[perm[a]] == NOISE, moved[a] == NOISE);
            for b in 0..n {
                if core(perm[a]) && core(perm[b]) {
                    prop_assert_eq!(base[perm[a]] == base[perm[b]], moved[a] == moved[b]);
                }
            }
        }
    }

    #[test]
    fn dbscan_clusters_grow_from_core_points(seed in any::<u64>(), n in 1usize..40, min_pts in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = distance_oracle(&rand_points(&mut rng, n, 2));
        let labels = dbscan(&to_matrix(&d), 0.3, min_pts);
        let core = |i: usize| (0..n).filter(|&j| d[i][j] <= 0.3).count() >= min_pts;
        for l in labels.iter().copied().filter(|&l| l >= 0) {
            prop_assert!((0..n).any(|i| labels[i] == l && core(i)));
        }
        for i in (0..n).filter(|&i| core(i)) {
            for j in (0..n).filter(|&j| d[i][j] <= 0.3) {
                prop_assert!(labels[j] != NOISE);
                if core(j) {
                    prop_assert_eq!(labels[i], labels[j]);
                }
            }
        }
    }

    #[test]
    fn kmeans_inertia_never_increases(seed in any::<u64>(), n in 3usize..40, k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = rand_points(&mut rng, n, 3);
        let k = k.min(n);
        let km = kmeans_pp(&Tensor::from_rows(&pts).unwrap(), k, seed, 50).unwrap();
        for w in km.inertia.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        // Recompute the final inertia from the assignment and centroids.
        let recomputed: f64 = (0..n)
            .map(|i| euclid(&pts[i], &km.centroids[km.assignment[i] as usize]).powi(2))
            .sum();
        prop_assert!((recomputed - km.inertia.last().unwrap()).abs() < 1e-9);
    }

    #[test]
    fn evaluation_orthogonal_invariance(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = rand_tensor(&mut rng, vec![4, 2], -1.0, 1.0);
        let g = rand_tensor(&mut rng, vec![12, 2], -1.0, 1.0);
        let ids = |n: usize, rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(0..3)).collect::<Vec<i64>>();
        let (qi, gi) = (ids(4, &mut rng), ids(12, &mut rng));
        let (qc, gc) = (vec![0; 4], vec![1; 12]);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (c, s) = (theta.cos(), theta.sin());
        let rot = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = (0..t.rows()).map(|i| {
                let r = t.row(i);
                vec![c * r[0] - s * r[1], s * r[0] + c * r[1]]
            }).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let a = RetrievalSplit::new(q.clone(), g.clone(), qi.clone(), gi.clone(), qc.clone(), gc.clone()).unwrap();
        let b = RetrievalSplit::new(rot(&q), rot(&g), qi, gi, qc, gc).unwrap();
        match (evaluate(&a, &[1, 5]), evaluate(&b, &[1, 5])) {
            (Ok(x), Ok(y)) => {
                prop_assert!((x.map - y.map).abs() < 1e-12);
                for k in [1, 5] {
                    prop_assert!((x.cmc[&k] - y.cmc[&k]).abs() < 1e-12);
                }
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "only one side failed"),
        }
    }

    #[test]
    fn cmc_monotone_and_bounds_map(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_split(&mut rng);
        let ranks: Vec<usize> = (1..=s.gallery_ids.len()).collect();
        if let Ok(m) = evaluate(&s, &ranks) {
            let curve: Vec<f64> = ranks.iter().map(|k| m.cmc[k]).collect();
            for w in curve.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
            prop_assert_eq!(*curve.last().unwrap(), 1.0);
            prop_assert!(m.map <= *curve.last().unwrap() + 1e-15);
        }
    }
}

#[test]
fn retrieval_against_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 50 {
        let s = random_split(&mut rng);
        let oracle = retrieval_oracle(&s);
        let valid: Vec<(f64, usize)> = oracle.iter().flatten().copied().collect();
        if valid.is_empty() {
            assert!(evaluate(&s, &[1]).is_err());
            continue;
        }
        let map = valid.iter().map(|v| v.0).sum::<f64>() / valid.len() as f64;
        assert!((mean_average_precision(&s).unwrap() - map).abs() < 1e-12);
        let ks = [1, 2, 5, 10];
        for (k, got) in ks.iter().zip(cmc(&s, &ks).unwrap()) {
            let want = valid.iter().filter(|v| v.1 <= *k).count() as f64 / valid.len() as f64;
            assert_eq!(got, want);
        }
        let m = evaluate(&s, &[1]).unwrap();
        assert_eq!(m.num_skipped, oracle.iter().filter(|o| o.is_none()).count());
        for q in 0..s.query_ids.len() {
            if let Ok(order) = rank_gallery(&s, q) {
                let mut naive: Vec<usize> = order.clone();
                naive.sort_by(|&a, &b| {
                    let da = euclid(s.query_sigs.row(q), s.gallery_sigs.row(a));
                    let db = euclid(s.query_sigs.row(q), s.gallery_sigs.row(b));
                    da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                });
                assert_eq!(order, naive);
            }
        }
        checked += 1;
    }
}

#[test]
fn cluster_means_against_grouped_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, d) = (30, 5);
    let fa = rand_tensor(&mut rng, vec![n, d], -1.0, 1.0);
    let fm = rand_tensor(&mut rng, vec![n, d], -1.0, 1.0);
    let assignment: Vec<i64> = (0..n).map(|_| rng.random_range(-1..4) * 3).collect();
    let (ma, mm, dense) = cluster_means(&fa, &fm, &assignment).unwrap();
    let ids: std::collections::BTreeSet<i64> = assignment.iter().copied().filter(|&l| l >= 0).collect();
    for (c, id) in ids.iter().enumerate() {
        for (f, means) in [(&fa, &ma), (&fm, &mm)] {
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == *id).collect();
            let mut mean = vec![0.0; d];
            for &i in &members {
                for k in 0..d {
                    mean[k] += f.row(i)[k] / members.len() as f64;
                }
            }
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            for k in 0..d {
                assert!((means.row(c)[k] - mean[k] / norm).abs() < 1e-12);
            }
            assert!((means.row(c).iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
        assert!((0..n).all(|i| (assignment[i] == *id) == (dense[i] == c as i64)));
    }
    assert!((0..n).all(|i| (assignment[i] < 0) == (dense[i] == NOISE)));
}

#[test]
fn well_separated_identities_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (c, per, parts, d_in) = (5, 8, 2, 3);
    let mut data = Vec::new();
    let mut truth = Vec::new();
    let centers: Vec<Vec<f64>> = (0..c).map(|_| (0..d_in).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
    for (id, center) in centers.iter().enumerate() {
        for _ in 0..per {
            for _ in 0..parts {
                data.extend(center.iter().map(|v| v + rng.random_range(-0.01..0.01)));
            }
            truth.push(id as i64);
        }
    }
    let x = Tensor::new(vec![c * per, parts, d_in], data).unwrap();
    // Any encoder maps identical inputs identically, so tight groups stay tight.
    let cfg = EncoderConfig {
        d_in,
        num_classes: 2,
        ..EncoderConfig::default()
    };
    let teacher = EncoderState::new(cfg, 3).unwrap();
    let cluster = ClusterConfig {
        eps: Some(0.05),
        k1: 6,
        k2: 2,
        lambda_rerank: 1.0,
        ..ClusterConfig::default()
    };
    let pl = generate_pseudo_labels(&teacher, &x, None, &cluster, ClusteringMethod::DbscanRerank, 0).unwrap();
    assert_eq!(pl.k, c);
    assert_eq!(canonical(&pl.assignment), canonical(&truth));
    for i in 0..pl.k {
        let norm = pl.means_a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}
