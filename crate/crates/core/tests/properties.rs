use microcor_core::eval::{bleu, exact_match, recall_at_k, rouge_n, token_f1, CommentPair, RetrievalResult};
use microcor_core::models::{DualEncoder, EncodeMode, ToyLm, ToyLmConfig, Tokenizer};
use microcor_core::retriever::{fuse, top_k, EmbeddingIndex};
use microcor_core::tensor::{dot, l2_normalize, Tensor};
use microcor_core::datagen::vocab;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_lm(seed: u64) -> ToyLm {
    let mut cfg = ToyLmConfig::new(24);
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 24;
    cfg.max_seq = 24;
    cfg.adapter_hidden = 16;
    ToyLm::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn unit_rows(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    rows.into_iter()
        .map(|r| {
            let n = l2_normalize(&r);
            if dot(&n, &n) == 0.0 {
                let mut e = vec![0.0; r.len()];
                e[0] = 1.0;
                e
            } else {
                n
            }
        })
        .collect()
}

/// Exhaustive oracle: score every row, sort by (-score, id).
fn brute_force(query: &[f64], rows: &[Vec<f64>], ids: &[usize]) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = ids.iter().zip(rows).map(|(&id, r)| (id, dot(query, r))).collect();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            let (a, b) = (all[i], all[j]);
            if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                all.swap(i, j);
            }
        }
    }
    all
}

fn words(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..6, 0..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn appending_rows_leaves_earlier_logits_bit_identical(seed in 0u64..1000, len in 1usize..12, extra in 1usize..6) {
        let lm = small_lm(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let full = Tensor::randn(&[len + extra, 16], 1.0, &mut rng);
        let prefix = Tensor::new(vec![len, 16], full.data()[..len * 16].to_vec()).unwrap();
        let (a, _) = lm.lm_forward(&prefix).unwrap();
        let (b, _) = lm.lm_forward(&full).unwrap();
        prop_assert_eq!(a.rows(), len);
        prop_assert_eq!(b.rows(), len + extra);
        prop_assert_eq!(a.data(), &b.data()[..a.data().len()]);
    }

    #[test]
    fn fusion_endpoints_and_unit_norm(a in prop::collection::vec(-3.0f64..3.0, 8), m in prop::collection::vec(-3.0f64..3.0, 8), beta in 0.0f64..1.0) {
        let a = l2_normalize(&a);
        let m = l2_normalize(&m);
        prop_assume!(dot(&a, &a) > 0.5 && dot(&m, &m) > 0.5);
        prop_assert_eq!(fuse(&a, &m, 0.0), m.clone());
        prop_assert_eq!(fuse(&a, &m, 1.0), a.clone());
        let f = fuse(&a, &m, beta);
        let n = dot(&f, &f).sqrt();
        prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ranking_is_invariant_to_row_order(seed in 0u64..1000, n in 2usize..32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = unit_rows((0..n).map(|_| Tensor::randn(&[6], 1.0, &mut rng).into_data()).collect());
        let ids: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
        let q = l2_normalize(&Tensor::randn(&[6], 1.0, &mut rng).into_data());
        let a = EmbeddingIndex::new(rows.clone(), ids.clone(), String::new()).unwrap().search(&q, n).unwrap();
        let b = EmbeddingIndex::new(rows.iter().rev().cloned().collect(), ids.iter().rev().copied().collect(), String::new())
            .unwrap()
            .search(&q, n)
            .unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn recall_is_monotone_in_k(lists in prop::collection::vec((prop::collection::vec(0usize..20, 10), 0usize..20), 1..30)) {
        let results: Vec<RetrievalResult> = lists
            .into_iter()
            .enumerate()
            .map(|(i, (ranked, target))| RetrievalResult { query_id: i, ranked, target })
            .collect();
        let mut prev = 0.0;
        for k in 1..=10 {
            let r = recall_at_k(&results, k).unwrap();
            prop_assert!(r >= prev);
            prop_assert!((0.0..=1.0).contains(&r));
            prev = r;
        }
    }

    #[test]
    fn metrics_are_bounded_and_symmetric(pairs in prop::collection::vec((words(8), words(8)), 1..8)) {
        let fwd: Vec<CommentPair<u8>> = pairs.iter().enumerate().map(|(i, (h, r))| CommentPair::new(i, h.clone(), r.clone())).collect();
        let rev: Vec<CommentPair<u8>> = pairs.iter().enumerate().map(|(i, (h, r))| CommentPair::new(i, r.clone(), h.clone())).collect();
        for v in [bleu(&fwd, 4).unwrap(), rouge_n(&fwd, 1).unwrap(), rouge_n(&fwd, 2).unwrap(), token_f1(&fwd).unwrap(), exact_match(&fwd).unwrap()] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v), "{}", v);
        }
        prop_assert_eq!(token_f1(&fwd).unwrap(), token_f1(&rev).unwrap());
        prop_assert_eq!(exact_match(&fwd).unwrap(), exact_match(&rev).unwrap());
    }

    #[test]
    fn identical_pairs_maximize_every_metric(refs in prop::collection::vec(prop::collection::vec(0u8..6, 4..8), 1..6)) {
        let same: Vec<CommentPair<u8>> = refs.iter().enumerate().map(|(i, r)| CommentPair::new(i, r.clone(), r.clone())).collect();
        prop_assert!((bleu(&same, 4).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(rouge_n(&same, 2).unwrap(), 1.0);
        prop_assert_eq!(token_f1(&same).unwrap(), 1.0);
        prop_assert_eq!(exact_match(&same).unwrap(), 1.0);
    }

    #[test]
    fn tokenizer_round_trips_word_sequences(idx in prop::collection::vec(any::<prop::sample::Index>(), 0..20)) {
        let tok = Tokenizer::micro_cor();
        let all: Vec<&str> = vocab::all_words().collect();
        let text = idx.iter().map(|i| all[i.index(all.len())]).collect::<Vec<_>>().join(" ");
        let ids = tok.encode(&text).unwrap();
        prop_assert_eq!(tok.decode(&ids).unwrap(), text);
    }

    #[test]
    fn both_mode_is_the_normalized_sum_of_towers(seed in 0u64..1000, text in prop::collection::vec(0usize..20, 1..8)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = DualEncoder::new(20, 8, &mut rng);
        let image = Tensor::randn(&[8], 1.0, &mut rng).into_data();
        let both = enc.encode_multimodal(&text, &image, EncodeMode::Both).unwrap();
        let sum = l2_normalize(&enc.pre_normalized(&text, &image).unwrap());
        for (a, b) in both.iter().zip(&sum) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!((dot(&both, &both).sqrt() - 1.0).abs() < 1e-9);
        // Bag of words: permuting the text changes nothing.
        let mut shuffled = text.clone();
        shuffled.reverse();
        prop_assert_eq!(enc.text_tower(&text).unwrap(), enc.text_tower(&shuffled).unwrap());
    }
}

/// 100 random queries over databases of up to 64 rows, with deliberate
/// duplicate rows so ties occur, against an exhaustive selection sort.
#[test]
fn search_equals_exhaustive_oracle_on_100_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for q in 0..100 {
        let n = 1 + (q * 37) % 64;
        let mut rows = unit_rows((0..n).map(|_| Tensor::randn(&[5], 1.0, &mut rng).into_data()).collect());
        // Duplicate every third row onto a later slot to force exact ties.
        for i in (0..n).step_by(3) {
            let j = (i * 7 + 1) % n;
            rows[j] = rows[i].clone();
        }
        let mut ids: Vec<usize> = (0..n).map(|i| (i * 13 + q) % 97).collect();
        ids.sort_unstable();
        ids.dedup();
        let rows = rows[..ids.len()].to_vec();
        ids.reverse();
        let query = l2_normalize(&Tensor::randn(&[5], 1.0, &mut rng).into_data());
        let index = EmbeddingIndex::new(rows.clone(), ids.clone(), String::new()).unwrap();
        let got = index.search(&query, ids.len()).unwrap();
        assert_eq!(got, brute_force(&query, &rows, &ids), "query {q}");
        assert_eq!(top_k(brute_force(&query, &rows, &ids), 3), brute_force(&query, &rows, &ids)[..3.min(ids.len())].to_vec());
    }
}
