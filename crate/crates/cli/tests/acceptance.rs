//! The full acceptance run: gradient suite, two complete `repro-all` runs at
//! the default scale, and the oracle fixtures. Prints one line per
//! criterion, then fails if any criterion failed.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use microcor_cli::layout::{read_jsonl, FreezeRecord, Layout, Timing};
use microcor_core::checkpoint::Checkpoint;
use microcor_core::datagen::load_dataset;
use microcor_core::eval::{bleu, read_report, recall_at_k, rouge_n_pair, token_f1_pair, CommentPair, Report, RetrievalResult, REPORT_JSONL};
use microcor_core::models::{Tokenizer, ToyLm};
use microcor_core::retriever::{info_nce_loss, EmbeddingIndex, Fusion, RetrieverParams};
use microcor_core::tensor::{dot, Tensor};
use microcor_core::types::MultimodalQuery;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn microcor(args: &[&str], out: &Path) -> (bool, String, Duration) {
    let start = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_microcor"))
        .args(args)
        .env("MICROCOR_OUT", out)
        .output()
        .unwrap();
    let text = format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    (o.status.success(), text, start.elapsed())
}

fn gradient_suite(tmp: &Path) -> Verdict {
    let (ok, text, t) = microcor(&["gradcheck"], tmp);
    let worst = text
        .lines()
        .find_map(|l| l.split("max relative error ").nth(1))
        .and_then(|r| r.split_whitespace().next())
        .and_then(|x| x.parse::<f64>().ok())
        .unwrap_or(f64::INFINITY);
    verdict(
        ok && worst < 1e-4 && t < Duration::from_secs(120),
        format!("max relative error {worst:.2e}, {:.1} s", t.as_secs_f64()),
    )
}

fn freeze_discipline(out: &Path) -> Verdict {
    let l = Layout::new(out);
    let records: Vec<FreezeRecord> = read_jsonl(&l.freeze_log()).unwrap();
    let lm_now = Checkpoint::load(l.lm()).unwrap().sha256();
    let enc_now = Checkpoint::load(l.encoder()).unwrap().sha256();
    let mut ok = true;
    for (command, model, now) in [
        ("train-retriever-stage1", "lm", &lm_now),
        ("train-retriever-stage1", "encoder", &enc_now),
        ("train-entity-adapter", "lm", &lm_now),
        ("train-entity-adapter", "encoder", &enc_now),
    ] {
        match records.iter().find(|r| r.command == command && r.model == model) {
            Some(r) => ok &= r.identical && r.before == r.after && &r.after == now,
            None => ok = false,
        }
    }
    verdict(ok, format!("{} hash records, lm {}", records.len(), &lm_now[..12]))
}

fn retrieval_ordering(report: &Report, out: &Path) -> Verdict {
    let r1 = |mode: &str| {
        report
            .retrieval
            .iter()
            .find(|r| r.mode == mode)
            .and_then(|r| r.ks.iter().position(|&k| k == 1).map(|i| r.recall[i]))
            .unwrap_or(f64::NAN)
    };
    let (zero, abl, fused) = (r1("zero-shot"), r1("w/o adapter"), r1("fused"));
    let timings: Vec<Timing> = read_jsonl(&Layout::new(out).timings_log()).unwrap();
    let pipeline: f64 = timings
        .iter()
        .filter(|t| {
            [
                "datagen",
                "pretrain-lm",
                "train-encoders",
                "train-retriever-stage1",
                "train-retriever-stage2",
                "train-retriever-ablation",
                "build-index",
                "eval-retrieval",
            ]
            .contains(&t.command.as_str())
        })
        .map(|t| t.seconds)
        .sum();
    let tok = Tokenizer::load(out.join("data/vocab.txt")).unwrap();
    let (docs, examples) = load_dataset(&out.join("data"), &tok).unwrap();
    let test = examples.iter().filter(|e| e.split.is_test()).count();
    verdict(
        zero < abl && abl < fused && fused - abl >= 0.05 && fused > 0.60 && pipeline < 900.0 && test == 512 && docs.len() == 2048,
        format!("R@1 {zero:.4} < {abl:.4} < {fused:.4} on {test} queries / {} documents, pipeline {pipeline:.0} s", docs.len()),
    )
}

fn commenting(report: &Report, mode: &str) -> (f64, f64) {
    report
        .commenting
        .iter()
        .find(|r| r.mode == mode)
        .map(|r| (r.token_f1, r.bleu))
        .unwrap_or((f64::NAN, f64::NAN))
}

fn commenting_ordering(report: &Report) -> Verdict {
    let (nr, rag, uni) = (commenting(report, "no-retrieval"), commenting(report, "rag"), commenting(report, "unicorn"));
    verdict(
        nr.0 < rag.0 && rag.0 < uni.0 && nr.1 < rag.1 && rag.1 < uni.1 && rag.0 - nr.0 >= 0.05 && uni.0 - rag.0 >= 0.05,
        format!(
            "token-F1 {:.4} < {:.4} < {:.4}, BLEU {:.4} < {:.4} < {:.4}",
            nr.0, rag.0, uni.0, nr.1, rag.1, uni.1
        ),
    )
}

fn oracle_dominance(report: &Report) -> Verdict {
    let (uni, oracle) = (commenting(report, "unicorn").0, commenting(report, "oracle").0);
    verdict(oracle >= uni - 0.01, format!("oracle {oracle:.4} vs unicorn {uni:.4}"))
}

fn exhaustive(query: &[f64], rows: &[Vec<f64>], ids: &[usize]) -> Vec<(usize, f64)> {
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

/// Trained query embeddings against random sub-databases of trained document
/// embeddings, each with one duplicated row so a tie must break by id.
fn brute_force_equivalence(out: &Path) -> Verdict {
    let l = Layout::new(out);
    let tok = Tokenizer::load(out.join("data/vocab.txt")).unwrap();
    let (_, examples) = load_dataset(&out.join("data"), &tok).unwrap();
    let lm = ToyLm::from_checkpoint(&Checkpoint::load(l.lm()).unwrap()).unwrap();
    let params = RetrieverParams::from_checkpoint(&Checkpoint::load(l.retriever()).unwrap()).unwrap();
    let index = EmbeddingIndex::load(l.index()).unwrap();
    let queries: Vec<&MultimodalQuery> = examples.iter().filter(|e| e.split.is_test()).take(100).map(|e| &e.query).collect();
    let emb = params.embed_queries(&lm, &queries, Fusion::Learned).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let mut matched = 0;
    for q in &emb {
        let n = rng.random_range(2..=64);
        let picks = sample(&mut rng, index.len(), n - 1).into_vec();
        let mut ids: Vec<usize> = picks.iter().map(|&i| index.ids()[i]).collect();
        let mut rows: Vec<Vec<f64>> = picks.iter().map(|&i| index.embeddings()[i].clone()).collect();
        rows.push(rows[0].clone());
        ids.push(index.len() + ids[0]);
        let sub = EmbeddingIndex::new(rows.clone(), ids.clone(), String::new()).unwrap();
        if sub.search(q, n).unwrap() == exhaustive(q, &rows, &ids) {
            matched += 1;
        }
    }
    verdict(matched == emb.len() && emb.len() == 100, format!("{matched}/{} orderings identical", emb.len()))
}

fn toks(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn metric_oracles() -> Verdict {
    let x = Tensor::full(&[4, 3], 0.5);
    let nce = info_nce_loss(&x, &x, 1.0).unwrap();
    let b = bleu(&[CommentPair::new(0, toks("the cat sat"), toks("the cat sat down"))], 4).unwrap();
    let (h, r) = (toks("the cat sat on mat"), toks("the cat lay on the mat"));
    let errors = [
        (nce - 4f64.ln()).abs(),
        (b - (1.0f64 - 4.0 / 3.0).exp()).abs(),
        (rouge_n_pair(&h, &r, 1) - 8.0 / 11.0).abs(),
        (rouge_n_pair(&h, &r, 2) - 2.0 / 9.0).abs(),
        (token_f1_pair(&toks("a a b"), &toks("a b b")) - 2.0 / 3.0).abs(),
    ];
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut monotone = true;
    for _ in 0..50 {
        let results: Vec<RetrievalResult> = (0..40)
            .map(|i| RetrievalResult {
                query_id: i,
                ranked: (0..12).map(|_| rng.random_range(0..20)).collect(),
                target: rng.random_range(0..20),
            })
            .collect();
        let recalls: Vec<f64> = (1..=12).map(|k| recall_at_k(&results, k).unwrap()).collect();
        monotone &= recalls.windows(2).all(|w| w[0] <= w[1]);
    }
    verdict(worst < 1e-9 && monotone, format!("worst fixture error {worst:.1e}, recall monotone {monotone}"))
}

#[test]
fn acceptance() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut verdicts = vec![("gradient suite", gradient_suite(a.path()))];

    // One core: the two reproduction runs go one after the other.
    let (ok_a, log_a, t_a) = microcor(&["repro-all"], a.path());
    assert!(ok_a, "first repro-all failed:\n{log_a}");
    let report = read_report(&a.path().join(REPORT_JSONL)).unwrap();
    verdicts.push(("freeze discipline", freeze_discipline(a.path())));
    verdicts.push(("retrieval ordering", retrieval_ordering(&report, a.path())));
    verdicts.push(("commenting ordering", commenting_ordering(&report)));
    verdicts.push(("oracle dominance", oracle_dominance(&report)));
    verdicts.push(("brute-force search", brute_force_equivalence(a.path())));
    verdicts.push(("metric oracles", metric_oracles()));

    let (ok_b, log_b, t_b) = microcor(&["repro-all"], b.path());
    assert!(ok_b, "second repro-all failed:\n{log_b}");
    let same = fs::read(a.path().join(REPORT_JSONL)).unwrap() == fs::read(b.path().join(REPORT_JSONL)).unwrap();
    let limit = Duration::from_secs(30 * 60);
    verdicts.push((
        "determinism",
        verdict(
            same && t_a < limit && t_b < limit,
            format!("reports identical {same}, runs {:.0} s and {:.0} s", t_a.as_secs_f64(), t_b.as_secs_f64()),
        ),
    ));

    for (i, (name, v)) in verdicts.iter().enumerate() {
        println!("criterion {} {name}: {} ({})", i + 1, if v.passed { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed: Vec<usize> = verdicts.iter().enumerate().filter(|(_, (_, v))| !v.passed).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
