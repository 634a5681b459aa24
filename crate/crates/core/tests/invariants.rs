use autocompressor::compressor::{segment_randomized, CompressorConfig};
use autocompressor::corpus::Tokenizer;
use autocompressor::icl::{argmax, calibrate};
use autocompressor::rerank::{rank_by_scores, recall_at_k};
use autocompressor::retrieval::{fusion_order, smooth, RetrievedSet};
use autocompressor::scalar::tolerance;
use autocompressor::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn is_permutation(p: &[usize], n: usize) -> bool {
    let mut s = p.to_vec();
    s.sort_unstable();
    s == (0..n).collect::<Vec<_>>()
}

proptest! {
    #[test]
    fn randomized_segments_partition_within_bounds(
        doc_len in 1usize..600,
        lo in 1usize..40,
        span in 0usize..60,
        seed in any::<u64>(),
    ) {
        let cfg = CompressorConfig {
            min_len: lo,
            max_len: lo + span,
            pair_sum: None,
            ..CompressorConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hi = lo + span;
        let feasible = doc_len <= lo || (1..=doc_len).any(|k| k * lo <= doc_len && doc_len <= k * hi);
        let seg = match segment_randomized(doc_len, &cfg, &mut rng) {
            Ok(s) => s,
            Err(e) => {
                prop_assert!(!feasible, "{}", e);
                return Ok(());
            }
        };
        let lens = seg.lengths();
        prop_assert_eq!(lens.iter().sum::<usize>(), doc_len);
        prop_assert!(seg.validate(doc_len).is_ok());
        if !seg.undersized {
            for &l in &lens[..lens.len() - 1] {
                prop_assert!(l >= lo && l <= lo + span);
            }
            prop_assert!(*lens.last().unwrap() <= lo + span);
        }
    }

    #[test]
    fn pair_sum_segments_pair_up(pairs in 1usize..6, seed in any::<u64>()) {
        let cfg = CompressorConfig::default();
        let p = cfg.pair_sum.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seg = segment_randomized(pairs * p, &cfg, &mut rng).unwrap();
        let lens = seg.lengths();
        prop_assert_eq!(lens.len(), 2 * pairs);
        for w in lens.chunks(2) {
            prop_assert_eq!(w[0] + w[1], p);
            prop_assert!(w.iter().all(|&l| l >= cfg.min_len && l <= cfg.max_len));
        }
    }

    #[test]
    fn tokenizer_round_trips_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let t = Tokenizer.encode_bytes(&bytes);
        prop_assert_eq!(Tokenizer.decode_bytes(&t), bytes);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), causal in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = if causal { rows } else { cols };
        let x = Tensor::<f64>::uniform(&[rows, cols], -30.0, 30.0, &mut rng);
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v, causal).unwrap();
        for r in 0..rows {
            let sum: f64 = g.value(s).row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < tolerance::SOFTMAX_SUM);
        }
    }

    #[test]
    fn ranking_is_a_descending_permutation(scores in proptest::collection::vec(-50.0f64..50.0, 1..30)) {
        let r = rank_by_scores(&scores);
        prop_assert!(is_permutation(&r, scores.len()));
        for w in r.windows(2) {
            prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
        }
    }

    #[test]
    fn recall_is_monotone_in_k(n in 1usize..12, gold in 0usize..12, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        ids.shuffle(&mut rng);
        let golds = vec![vec![format!("c{gold}")]];
        let ranked = vec![ids];
        let mut prev = 0.0;
        for k in 1..=n + 1 {
            let r = recall_at_k(&ranked, &golds, k);
            prop_assert!((0.0..=1.0).contains(&r) && r >= prev);
            prev = r;
        }
    }

    #[test]
    fn retrieval_weights_and_orders(sims in proptest::collection::vec(-5.0f64..5.0, 1..10), with_dist in any::<bool>()) {
        let set = RetrievedSet::from_scores(sims.iter().enumerate().map(|(i, s)| (format!("p{i}"), *s)).collect());
        let total: f64 = set.entries.iter().map(|e| e.lambda).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for w in set.entries.windows(2) {
            prop_assert!(w[0].similarity >= w[1].similarity);
        }
        let dist: Vec<f64> = sims.iter().map(|s| s * s).collect();
        let order = fusion_order(&set, if with_dist { Some(&dist) } else { None });
        prop_assert!(is_permutation(&order, sims.len()));
        prop_assert_eq!(*order.last().unwrap(), if with_dist {
            (0..sims.len()).fold(0, |b, i| if dist[i] < dist[b] { i } else { b })
        } else {
            0
        });
    }

    #[test]
    fn smoothing_is_bounded_by_its_inputs(pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..20)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        for ((s, x), y) in smooth(&a, &b).iter().zip(&a).zip(&b) {
            prop_assert!(*s >= x.min(*y) && *s <= x.max(*y));
        }
    }

    #[test]
    fn uniform_calibration_keeps_the_argmax(
        log_n in 1u32..4,
        raw in proptest::collection::vec(1e-6f64..1.0, 8),
    ) {
        let n = 1usize << log_n;
        let z: f64 = raw[..n].iter().sum();
        let probs: Vec<f64> = raw[..n].iter().map(|p| p / z).collect();
        let uniform = vec![1.0 / n as f64; n];
        prop_assert_eq!(argmax(&calibrate(&probs, &uniform)), argmax(&probs));
    }
}
