mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use qure::evaluator::{average_precision, preference_rate_from_scores, recall_at_k, map_at_k, set_relevance, Choice, GroundTruth};
use qure::miner::{sample_negative, strategy_set, two_drops_set, Strategy as MiningStrategy};
use qure::rng::stream_rng;
use qure::scorer::{embed_image, fuse_query, relevance_score, RankedEntry};
use qure::store::{decode_embeddings, write_embeddings};
use qure::trainer::{adamw_step, loss_and_gradients, AdamWConfig, OptimizerState, TrainingExample};
use qure::{AdapterParams, EmbeddingMatrix, RankedList, TruthTable};

use common::*;

fn dyadic_scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-64i32..=64, 5..80).prop_map(|v| {
        let mut s: Vec<f64> = v.into_iter().map(|x| x as f64 / 32.0).collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s
    })
}

fn ranked(qid: &str, ids: &[String]) -> RankedList {
    RankedList {
        query_id: qid.into(),
        entries: ids.iter().map(|id| RankedEntry { image_id: id.clone(), score: 0.0 }).collect(),
        target_rank: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn two_drops_matches_oracle_and_is_contiguous(scores in dyadic_scores(), t in any::<prop::sample::Index>()) {
        let pos = t.index(scores.len()) + 1;
        let v = view(&scores, pos);
        let got = two_drops_set(&v, v.target_score(), 1).ok();
        let want = brute_two_drops(&scores, pos);
        prop_assert_eq!(got.as_ref().map(|s| s.negatives.iter().map(|r| r + 1).collect::<BTreeSet<_>>()), want);
        if let Some(set) = got {
            prop_assert!(set.negatives.windows(2).all(|w| w[1] == w[0] + 1));
            prop_assert!(set.negatives.iter().all(|&r| scores[r] < v.target_score()));
            prop_assert!(!set.negatives.contains(&v.target_row()));
        }
    }

    #[test]
    fn two_drops_affine_invariant(scores in dyadic_scores(), t in any::<prop::sample::Index>(), e in -3i32..=3, b in -64i32..=64) {
        let pos = t.index(scores.len()) + 1;
        let a = 2f64.powi(e);
        let moved: Vec<f64> = scores.iter().map(|s| a * s + b as f64 / 32.0).collect();
        let (v, mv) = (view(&scores, pos), view(&moved, pos));
        prop_assert_eq!(
            two_drops_set(&v, v.target_score(), 1).map(|s| s.negatives),
            two_drops_set(&mv, mv.target_score(), 1).map(|s| s.negatives)
        );
    }

    #[test]
    fn strategies_exclude_target_and_sampling_stays_inside(
        scores in dyadic_scores(), t in any::<prop::sample::Index>(), k in 1usize..30, seed in any::<u64>()
    ) {
        let pos = t.index(scores.len()) + 1;
        let v = view(&scores, pos);
        for strategy in MiningStrategy::ALL {
            if let Ok(set) = strategy_set(&v, v.target_score(), strategy, k, 1) {
                prop_assert!(!set.negatives.contains(&v.target_row()));
                if !set.is_empty() {
                    let n = sample_negative(&set, &mut stream_rng(seed, &[]));
                    prop_assert!(set.negatives.contains(&n));
                }
            }
        }
    }

    #[test]
    fn fused_query_is_unit_and_scale_invariant(seed in any::<u64>(), d in 1usize..12, c in 0.01f32..100.0) {
        let mut rng = stream_rng(seed, &[]);
        let mut p = random_params(&mut rng, d, d, 50.0);
        p.b_fuse.iter_mut().for_each(|b| *b = 0.0);
        let (x, t) = (random_vec(&mut rng, d), random_vec(&mut rng, d));
        let q = fuse_query(&p, &x, &t).unwrap();
        let norm: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        let xs: Vec<f32> = x.iter().map(|v| v * c).collect();
        let ts: Vec<f32> = t.iter().map(|v| v * c).collect();
        let qs = fuse_query(&p, &xs, &ts).unwrap();
        prop_assert!(q.iter().zip(&qs).all(|(a, b)| (a - b).abs() < 1e-5));
        let v = embed_image(&p, &random_vec(&mut rng, d)).unwrap();
        let s = relevance_score(&p, &q, &v);
        prop_assert!(s.abs() <= p.inv_tau() * (1.0 + 1e-12));
    }

    #[test]
    fn gradients_match_finite_differences(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, &[]);
        let p = random_params(&mut rng, 8, 8, 20.0);
        let data: Vec<[Vec<f32>; 4]> = (0..3).map(|_| std::array::from_fn(|_| random_vec(&mut rng, 8))).collect();
        let batch: Vec<TrainingExample> = data
            .iter()
            .map(|[a, b, c, d]| TrainingExample { query_id: "q", x_img: a, x_txt: b, pos: c, neg: d })
            .collect();
        let (loss, grads) = loss_and_gradients(&p, &batch).unwrap();
        let f = |p: &AdapterParams| data.iter().map(|[a, b, c, d]| brute_loss(p, a, b, c, d)).sum::<f64>() / 3.0;
        prop_assert!((loss - f(&p)).abs() < 1e-12);
        let flat = p.to_flat();
        let g = grads.to_flat();
        let central = |i: usize, h: f64| {
            let (mut up, mut dn) = (flat.clone(), flat.clone());
            up[i] += h;
            dn[i] -= h;
            (f(&AdapterParams::from_flat(8, 8, &up).unwrap()) - f(&AdapterParams::from_flat(8, 8, &dn).unwrap())) / (2.0 * h)
        };
        let h = 1e-4;
        for (i, &gi) in g.iter().enumerate() {
            // Richardson step removes the O(h^2) term, which can dominate
            // coordinates whose gradient is small next to the curvature.
            let fd = (4.0 * central(i, h / 2.0) - central(i, h)) / 3.0;
            let rel = (fd - gi).abs() / fd.abs().max(gi.abs()).max(1e-6);
            prop_assert!(rel < 1e-4, "coordinate {}: fd {} analytic {}", i, fd, gi);
        }
    }

    #[test]
    fn temperature_stays_clamped(seed in any::<u64>(), lr in 1e-4f64..5.0, gt in -1e3f64..1e3) {
        let mut rng = stream_rng(seed, &[]);
        let mut p = random_params(&mut rng, 3, 2, 100.0);
        let mut st = OptimizerState::new(&p);
        let mut g = random_params(&mut rng, 3, 2, 2.0);
        g.log_inv_tau = gt;
        let cfg = AdamWConfig { lr, ..Default::default() };
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut st, &cfg).unwrap();
            prop_assert!((1.0..=100.0 + 1e-9).contains(&p.inv_tau()));
        }
    }

    #[test]
    fn embedding_files_round_trip(dim in 1usize..9, rows in prop::collection::vec(prop::collection::vec(-1e6f32..1e6, 8), 0..20)) {
        let m = EmbeddingMatrix::from_rows(dim, rows.iter().enumerate().map(|(i, r)| (format!("id-{i}-é"), r[..dim].to_vec()))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.qure");
        write_embeddings(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        prop_assert_eq!(decode_embeddings(&bytes).unwrap(), m);
    }

    #[test]
    fn recall_monotone_in_k_and_map_agrees_at_one(seed in any::<u64>(), n_img in 2usize..40, n_q in 1usize..20) {
        let mut rng = stream_rng(seed, &[]);
        use rand::seq::SliceRandom;
        use rand::Rng;
        let ids: Vec<String> = (0..n_img).map(|i| format!("i{i}")).collect();
        let mut lists = Vec::new();
        let mut truth = Vec::new();
        for q in 0..n_q {
            let mut order = ids.clone();
            order.shuffle(&mut rng);
            truth.push(GroundTruth { query_id: format!("q{q}"), relevant_ids: vec![ids[rng.random_range(0..n_img)].clone()] });
            lists.push(ranked(&format!("q{q}"), &order));
        }
        let table = TruthTable::new(truth).unwrap();
        let mut prev = 0.0;
        for k in 1..=n_img {
            let r = recall_at_k(&lists, &table, k).unwrap();
            prop_assert!(r >= prev && (0.0..=100.0).contains(&r));
            prev = r;
        }
        prop_assert_eq!(prev, 100.0);
        prop_assert!((map_at_k(&lists, &table, 1).unwrap() - recall_at_k(&lists, &table, 1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ap_ignores_order_of_irrelevant_tail(seed in any::<u64>(), k in 1usize..10) {
        use rand::seq::SliceRandom;
        let mut rng = stream_rng(seed, &[]);
        let mut ids: Vec<String> = (0..20).map(|i| format!("i{i}")).collect();
        ids.shuffle(&mut rng);
        let rel: std::collections::HashSet<String> = ids[..3].iter().cloned().collect();
        let mut ranking: Vec<&str> = ids.iter().map(String::as_str).collect();
        ranking.shuffle(&mut rng);
        let base = average_precision(&ranking, &rel, k);
        let mut tail: Vec<&str> = ranking[k..].iter().copied().filter(|id| !rel.contains(*id)).collect();
        tail.shuffle(&mut rng);
        let mut shuffled: Vec<&str> = ranking[..k].to_vec();
        shuffled.extend(ranking[k..].iter().copied().filter(|id| rel.contains(*id)));
        shuffled.extend(tail);
        prop_assert_eq!(base, average_precision(&shuffled, &rel, k));
    }

    #[test]
    fn preference_conditioning_survives_positive_affine(
        raw in prop::collection::vec((-32i32..32, -32i32..32, any::<bool>()), 1..40), e in -3i32..=3, b in -64i32..=64
    ) {
        let a = 2f64.powi(e);
        let items: Vec<(f64, f64, Choice)> = raw
            .iter()
            .map(|&(x, y, c)| (x as f64 / 8.0, y as f64 / 8.0, if c { Choice::Set1 } else { Choice::Set2 }))
            .collect();
        let moved: Vec<(f64, f64, Choice)> = items.iter().map(|&(x, y, c)| (a * x + b as f64 / 8.0, a * y + b as f64 / 8.0, c)).collect();
        match (preference_rate_from_scores(&items), preference_rate_from_scores(&moved)) {
            (Ok(p), Ok(q)) => prop_assert_eq!(p, q),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "definedness changed"),
        }
    }

    #[test]
    fn set_relevance_permutation_invariant_and_bounded(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = stream_rng(seed, &[]);
        let ds = random_dataset(&mut rng, 4, 10, 1);
        let p = random_params(&mut rng, 4, 3, 30.0);
        let q = &ds.queries()[0];
        let mut set: Vec<String> = (0..5).map(|_| ds.corpus.id(rng.random_range(0..10)).to_owned()).collect();
        let s = set_relevance(&p, &ds, q, &set).unwrap();
        let (xi, xt) = ds.query_inputs(0);
        let members: Vec<f64> = set.iter().map(|id| brute_score(&p, xi, xt, ds.corpus.row_by_id(id).unwrap())).collect();
        let (lo, hi) = members.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
        set.shuffle(&mut rng);
        prop_assert!((set_relevance(&p, &ds, q, &set).unwrap() - s).abs() < 1e-12);
    }
}

#[test]
fn set_relevance_of_identical_images_is_their_score() {
    let mut rng = stream_rng(5, &[]);
    let ds = random_dataset(&mut rng, 4, 6, 1);
    let p = AdapterParams::identity_init(4, 4, 10.0, 0.0, &mut rng);
    let q = &ds.queries()[0];
    let id = ds.corpus.id(2).to_owned();
    let s = set_relevance(&p, &ds, q, &vec![id.clone(); 5]).unwrap();
    let (xi, xt) = ds.query_inputs(0);
    assert!((s - brute_score(&p, xi, xt, ds.corpus.row(2))).abs() < 1e-12);
    assert!(set_relevance(&p, &ds, q, &vec![id; 4]).is_err());
}

#[test]
fn training_is_thread_count_independent() {
    use qure::{generate, train, SynthConfig, TrainingConfig};
    let ds = generate(&SynthConfig { n_corpus: 150, n_queries: 50, ..Default::default() })
        .unwrap()
        .into_dataset("train")
        .unwrap();
    let cfg = TrainingConfig { n_epoch: 4, n_def: 2, batch_size: 8, learning_rate: 0.01, ..Default::default() };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| train(&cfg, &ds, None).unwrap())
    };
    let (a, la) = run(1);
    let (b, lb) = run(5);
    assert_eq!(a.encode().unwrap(), b.encode().unwrap());
    assert_eq!(la, lb);
}
