use std::fs;
use std::path::Path;
use std::time::Instant;

use microcor_core::checkpoint::Checkpoint;
use microcor_core::datagen::{build_corpus, dataset_checksum, load_dataset, load_queries, write_dataset, IMAGE_DIM};
use microcor_core::eval::{
    commenting_row, emit_report, read_report, recall_at_k, CommentPair, CommentingRow, Report, RetrievalResult, RetrievalRow, REPORT_JSONL,
};
use microcor_core::generator::{
    document, generate_with_entities, generate_with_retrieval, generate_without_retrieval, rag_baseline_generate, train_entity_adapter,
    write_transcript, EntityAdapter, EntityView, TranscriptRecord,
};
use microcor_core::gradsuite;
use microcor_core::models::{pretrain_toy_lm, DualEncoder, Tokenizer, ToyLm};
use microcor_core::retriever::{
    train_dual_encoder, train_retriever_stage1, train_retriever_stage2, EmbeddingIndex, Fusion, RetrievalSet, RetrieverParams, StageConfig,
};
use microcor_core::types::{CoRExample, EntityDocument, MultimodalQuery, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::layout::{upsert_jsonl, FreezeRecord, Layout, Timing};
use crate::{CliError, Command, Mode, RunConfig};

const VOCAB_FILE: &str = "vocab.txt";

type Res<T = ()> = Result<T, CliError>;

struct Dataset {
    tok: Tokenizer,
    documents: Vec<EntityDocument>,
    examples: Vec<CoRExample>,
}

impl Dataset {
    fn load(cfg: &RunConfig) -> Res<Self> {
        let dir = cfg.data_dir();
        if !dir.join(microcor_core::datagen::DOCUMENTS_FILE).exists() {
            return Err(missing(&dir.join(microcor_core::datagen::DOCUMENTS_FILE), "datagen"));
        }
        let vocab = dir.join(VOCAB_FILE);
        let tok = if vocab.exists() {
            Tokenizer::load(&vocab)?
        } else {
            Tokenizer::micro_cor()
        };
        let (documents, examples) = load_dataset(&dir, &tok)?;
        Ok(Self { tok, documents, examples })
    }

    fn train(&self) -> Vec<&CoRExample> {
        self.examples.iter().filter(|e| e.split == Split::Train).collect()
    }

    fn test(&self) -> Vec<&CoRExample> {
        self.examples.iter().filter(|e| e.split.is_test()).collect()
    }
}

fn missing(path: &Path, producer: &str) -> CliError {
    CliError::Runtime(format!("missing artifact {}; run {producer} first", path.display()))
}

fn load_ck(path: &Path, producer: &str) -> Res<Checkpoint> {
    if !path.exists() {
        return Err(missing(path, producer));
    }
    Ok(Checkpoint::load(path)?)
}

fn load_lm(l: &Layout) -> Res<ToyLm> {
    let lm = ToyLm::from_checkpoint(&load_ck(&l.lm(), "pretrain-lm")?)?;
    if !lm.is_frozen() {
        return Err(CliError::Runtime(format!("{} is not frozen", l.lm().display())));
    }
    Ok(lm)
}

fn load_encoder(l: &Layout) -> Res<DualEncoder> {
    Ok(DualEncoder::from_checkpoint(&load_ck(&l.encoder(), "train-encoders")?)?)
}

fn load_retriever(path: &Path, producer: &str) -> Res<RetrieverParams> {
    Ok(RetrieverParams::from_checkpoint(&load_ck(path, producer)?)?)
}

fn load_xi(l: &Layout, lm: &ToyLm) -> Res<EntityAdapter> {
    Ok(EntityAdapter::from_checkpoint(lm, &load_ck(&l.xi(), "train-entity-adapter")?)?)
}

/// Untrained retriever on top of the pretrained encoder.
fn initial_retriever(cfg: &RunConfig, lm: &ToyLm, enc: DualEncoder) -> RetrieverParams {
    RetrieverParams::new(lm.config().d_model, enc, &mut ChaCha8Rng::seed_from_u64(cfg.retriever_init_seed))
}

fn file_hash(path: &Path) -> Res<String> {
    Ok(Checkpoint::load(path)?.sha256())
}

fn save(ck: Checkpoint, path: &Path) -> Res {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    ck.save(path)?;
    Ok(())
}

/// Records before/after hashes and fails if any frozen model changed.
fn check_frozen(l: &Layout, command: &str, pairs: Vec<(&str, String, String)>) -> Res {
    let records: Vec<FreezeRecord> = pairs
        .into_iter()
        .map(|(model, before, after)| FreezeRecord {
            command: command.to_string(),
            model: model.to_string(),
            identical: before == after,
            before,
            after,
        })
        .collect();
    let changed: Vec<String> = records.iter().filter(|r| !r.identical).map(|r| r.model.clone()).collect();
    upsert_jsonl(&l.freeze_log(), records, |r| (r.command.clone(), r.model.clone()))?;
    if !changed.is_empty() {
        return Err(CliError::Runtime(format!("frozen model changed during {command}: {}", changed.join(", "))));
    }
    for m in ["lm", "encoder"] {
        if let Some(r) = crate::layout::read_jsonl::<FreezeRecord>(&l.freeze_log())?
            .iter()
            .find(|r| r.command == command && r.model == m)
        {
            println!("{command}: {m} sha256 {} unchanged", &r.after[..16]);
        }
    }
    Ok(())
}

fn datagen(cfg: &RunConfig) -> Res {
    let tok = Tokenizer::micro_cor();
    let corpus = build_corpus(&cfg.corpus, &tok)?;
    let dir = cfg.data_dir();
    write_dataset(&dir, &corpus.documents, &corpus.examples, &tok)?;
    tok.save(dir.join(VOCAB_FILE))?;
    println!(
        "datagen: {} documents, {} train / {} test / {} golden examples, sha256 {}",
        corpus.documents.len(),
        corpus.train().count(),
        corpus.test().count(),
        corpus.golden().count(),
        dataset_checksum(&dir)?
    );
    Ok(())
}

fn pretrain_lm(cfg: &RunConfig, l: &Layout) -> Res {
    let data = Dataset::load(cfg)?;
    let mut lm = ToyLm::new(cfg.lm_config(data.tok.vocab_size()), &mut ChaCha8Rng::seed_from_u64(cfg.lm.init_seed));
    let train: Vec<CoRExample> = data.train().into_iter().cloned().collect();
    let log = pretrain_toy_lm(&mut lm, &train, &data.documents, &cfg.pretrain)?;
    save(lm.to_checkpoint(), &l.lm())?;
    println!(
        "pretrain-lm: loss {:.4} -> {:.4} over {} epochs, frozen sha256 {}",
        log.first(),
        log.last(),
        log.epoch_losses.len(),
        lm.to_checkpoint().sha256()
    );
    Ok(())
}

fn train_encoders(cfg: &RunConfig, l: &Layout) -> Res {
    let data = Dataset::load(cfg)?;
    let mut enc = DualEncoder::new(data.tok.vocab_size(), IMAGE_DIM, &mut ChaCha8Rng::seed_from_u64(cfg.encoder_init_seed));
    let log = train_dual_encoder(&mut enc, &data.documents, &cfg.encoder)?;
    save(enc.to_checkpoint(), &l.encoder())?;
    println!("train-encoders: loss {:.4} -> {:.4}", log.first(), log.last());
    Ok(())
}

fn train_retriever(cfg: &RunConfig, l: &Layout, stage: u8, ablation: bool) -> Res {
    let command = Command::TrainRetriever { stage, ablation }.name();
    let data = Dataset::load(cfg)?;
    let lm = load_lm(l)?;
    let lm_before = file_hash(&l.lm())?;
    let train = data.train();
    let set = RetrievalSet::new(&lm, &train, &data.documents)?;
    let (mut params, stage_cfg, dest) = match (stage, ablation) {
        (1, _) => (initial_retriever(cfg, &lm, load_encoder(l)?), cfg.stage1.clone(), l.stage1()),
        (_, false) => (load_retriever(&l.stage1(), "train-retriever --stage 1")?, cfg.stage2.clone(), l.retriever()),
        (_, true) => (
            initial_retriever(cfg, &lm, load_encoder(l)?),
            StageConfig {
                fusion: Fusion::Fixed(0.0),
                ..cfg.stage2.clone()
            },
            l.ablation(),
        ),
    };
    let enc_before = params.encoder.to_checkpoint().sha256();
    let beta_before = params.fusion_logit.value().data()[0];
    let log = if stage == 1 {
        train_retriever_stage1(&mut params, &set, &stage_cfg)?
    } else {
        train_retriever_stage2(&mut params, &set, &stage_cfg)?
    };
    let mut frozen = vec![("lm", lm_before, lm.to_checkpoint().sha256())];
    if stage == 1 {
        frozen.push(("encoder", enc_before, params.encoder.to_checkpoint().sha256()));
        frozen.push((
            "fusion",
            beta_before.to_bits().to_string(),
            params.fusion_logit.value().data()[0].to_bits().to_string(),
        ));
    }
    check_frozen(l, command, frozen)?;
    save(params.to_checkpoint(), &dest)?;
    println!("{command}: loss {:.4} -> {:.4}, beta {:.4}", log.first(), log.last(), params.beta());
    Ok(())
}

fn build_index(cfg: &RunConfig, l: &Layout) -> Res {
    let data = Dataset::load(cfg)?;
    let params = load_retriever(&l.retriever(), "train-retriever --stage 2")?;
    let index = EmbeddingIndex::build(&params, &data.documents)?;
    index.save(l.index())?;
    println!("build-index: {} documents, params sha256 {}", index.len(), index.params_checksum());
    Ok(())
}

fn load_index_for(path: &Path, params: &RetrieverParams) -> Res<EmbeddingIndex> {
    if !path.exists() {
        return Err(missing(path, "build-index"));
    }
    let index = EmbeddingIndex::load(path)?;
    if index.params_checksum() != params.checksum() {
        return Err(CliError::Runtime(format!(
            "index {} was built from different retriever parameters; rerun build-index",
            path.display()
        )));
    }
    Ok(index)
}

fn recall_row(
    mode: &str,
    params: &RetrieverParams,
    index: &EmbeddingIndex,
    fusion: Fusion,
    hidden: &[Vec<f64>],
    test: &[&CoRExample],
    ks: &[usize],
) -> Res<RetrievalRow> {
    let kmax = *ks.iter().max().expect("validated non-empty");
    if kmax > index.len() {
        return Err(CliError::Config(format!("k = {kmax} exceeds the {} indexed documents", index.len())));
    }
    let queries: Vec<&MultimodalQuery> = test.iter().map(|e| &e.query).collect();
    let emb = params.embed_queries_with_hidden(&queries, hidden, fusion)?;
    let results = emb
        .iter()
        .zip(test)
        .map(|(q, e)| {
            Ok(RetrievalResult {
                query_id: e.id,
                ranked: index.search(q, kmax)?.into_iter().map(|(id, _)| id).collect(),
                target: e.target,
            })
        })
        .collect::<Result<Vec<_>, microcor_core::Error>>()?;
    let recall = ks.iter().map(|&k| recall_at_k(&results, k)).collect::<Result<Vec<_>, _>>()?;
    Ok(RetrievalRow {
        mode: mode.to_string(),
        ks: ks.to_vec(),
        recall,
    })
}

fn existing_report(l: &Layout) -> Res<Report> {
    let path = l.root.join(REPORT_JSONL);
    if path.exists() {
        Ok(read_report(&path)?)
    } else {
        Ok(Report::default())
    }
}

fn write_report(l: &Layout, retrieval: Vec<RetrievalRow>, commenting: Vec<CommentingRow>) -> Res {
    let report = Report::new(retrieval, commenting);
    emit_report(&l.root, &report)?;
    print!("{}", report.to_text());
    Ok(())
}

fn eval_retrieval(cfg: &RunConfig, l: &Layout) -> Res {
    let data = Dataset::load(cfg)?;
    let lm = load_lm(l)?;
    let test = data.test();
    let queries: Vec<&MultimodalQuery> = test.iter().map(|e| &e.query).collect();
    let hidden = lm.hidden_states(&queries)?;

    let mut rows = Vec::new();
    let zero = initial_retriever(cfg, &lm, load_encoder(l)?);
    let zero_index = EmbeddingIndex::build(&zero, &data.documents)?;
    rows.push(recall_row("zero-shot", &zero, &zero_index, Fusion::Learned, &hidden, &test, &cfg.ks)?);
    if l.ablation().exists() {
        let abl = load_retriever(&l.ablation(), "train-retriever --stage 2 --ablation")?;
        let abl_index = EmbeddingIndex::build(&abl, &data.documents)?;
        rows.push(recall_row("w/o adapter", &abl, &abl_index, Fusion::Fixed(0.0), &hidden, &test, &cfg.ks)?);
    } else {
        println!("eval-retrieval: no ablation checkpoint, skipping the w/o adapter row");
    }
    let fused = load_retriever(&l.retriever(), "train-retriever --stage 2")?;
    let index = load_index_for(&l.index(), &fused)?;
    rows.push(recall_row("fused", &fused, &index, Fusion::Learned, &hidden, &test, &cfg.ks)?);

    let old = existing_report(l)?;
    write_report(l, rows, old.commenting)
}

fn train_xi(cfg: &RunConfig, l: &Layout) -> Res {
    let command = Command::TrainEntityAdapter.name();
    let data = Dataset::load(cfg)?;
    let lm = load_lm(l)?;
    let lm_before = file_hash(&l.lm())?;
    let enc_before = file_hash(&l.encoder())?;
    let train = data.train();
    let triples: Vec<(&MultimodalQuery, &EntityDocument, &[usize])> = train
        .iter()
        .map(|e| Ok((&e.query, document(&data.documents, e.target)?, e.comment.as_slice())))
        .collect::<Result<_, microcor_core::Error>>()?;
    let mut xi = EntityAdapter::from_lm(&lm);
    let log = train_entity_adapter(&mut xi, &lm, &triples, &cfg.xi)?;
    check_frozen(
        l,
        command,
        vec![
            ("lm", lm_before, lm.to_checkpoint().sha256()),
            ("encoder", enc_before, file_hash(&l.encoder())?),
        ],
    )?;
    save(xi.to_checkpoint(), &l.xi())?;
    println!("{command}: loss {:.4} -> {:.4}", log.first(), log.last());
    Ok(())
}

fn generate(cfg: &RunConfig, l: &Layout, query: &Path, index: Option<&Path>) -> Res {
    let data = Dataset::load(cfg)?;
    let lm = load_lm(l)?;
    let params = load_retriever(&l.retriever(), "train-retriever --stage 2")?;
    let xi = load_xi(l, &lm)?;
    let index_path = index.map(Path::to_path_buf).unwrap_or_else(|| l.index());
    let index = load_index_for(&index_path, &params)?;
    if !query.exists() {
        return Err(CliError::Runtime(format!("query file {} does not exist", query.display())));
    }
    let queries = load_queries(query, &data.tok)?;
    let refs: Vec<&MultimodalQuery> = queries.iter().map(|(_, q)| q).collect();
    let states = generate_with_retrieval(&lm, &params, &xi, &refs, &data.documents, &index, cfg.max_new_tokens)?;
    let mut records = Vec::with_capacity(states.len());
    for ((id, _), s) in queries.iter().zip(&states) {
        let r = s
            .retrieval
            .as_ref()
            .ok_or_else(|| CliError::Runtime("generation finished without retrieval".into()))?;
        let rec = TranscriptRecord {
            query_id: *id,
            retrieved_doc_id: r.doc_id,
            score: r.score.unwrap_or(f64::NAN),
            comment: data.tok.decode(&s.emitted)?,
        };
        println!("{}", serde_json::to_string(&rec).map_err(|e| CliError::Runtime(e.to_string()))?);
        records.push(rec);
    }
    fs::create_dir_all(l.transcripts())?;
    write_transcript(&l.transcripts().join("generate.jsonl"), &records)?;
    Ok(())
}

fn eval_commenting(cfg: &RunConfig, l: &Layout, modes: &[Mode]) -> Res {
    let modes: Vec<Mode> = if modes.is_empty() {
        Mode::ALL.to_vec()
    } else {
        Mode::ALL.into_iter().filter(|m| modes.contains(m)).collect()
    };
    let data = Dataset::load(cfg)?;
    let lm = load_lm(l)?;
    let test = data.test();
    let queries: Vec<&MultimodalQuery> = test.iter().map(|e| &e.query).collect();
    let max_new = cfg.max_new_tokens;
    let needs_retriever = modes.iter().any(|m| matches!(m, Mode::Rag | Mode::Unicorn));
    let needs_xi = modes.iter().any(|m| matches!(m, Mode::Unicorn | Mode::Oracle));
    let retriever = if needs_retriever {
        let p = load_retriever(&l.retriever(), "train-retriever --stage 2")?;
        let index = load_index_for(&l.index(), &p)?;
        Some((p, index))
    } else {
        None
    };
    let xi = if needs_xi { Some(load_xi(l, &lm)?) } else { None };

    let mut rows = Vec::new();
    for mode in modes {
        let outputs: Vec<Vec<usize>> = match mode {
            Mode::NoRetrieval => generate_without_retrieval(&lm, &queries, max_new)?,
            Mode::Rag => {
                let (p, index) = retriever.as_ref().expect("loaded above");
                rag_baseline_generate(&lm, &data.tok, p, &queries, &data.documents, index, max_new)?
                    .into_iter()
                    .map(|(_, o)| o)
                    .collect()
            }
            Mode::Unicorn => {
                let (p, index) = retriever.as_ref().expect("loaded above");
                let xi = xi.as_ref().expect("loaded above");
                let states = generate_with_retrieval(&lm, p, xi, &queries, &data.documents, index, max_new)?;
                let records = test
                    .iter()
                    .zip(&states)
                    .map(|(e, s)| {
                        let r = s.retrieval.as_ref().expect("retrieval always fires");
                        Ok(TranscriptRecord {
                            query_id: e.id,
                            retrieved_doc_id: r.doc_id,
                            score: r.score.unwrap_or(f64::NAN),
                            comment: data.tok.decode(&s.emitted)?,
                        })
                    })
                    .collect::<Result<Vec<_>, microcor_core::Error>>()?;
                fs::create_dir_all(l.transcripts())?;
                write_transcript(&l.transcripts().join("unicorn.jsonl"), &records)?;
                states.into_iter().map(|s| s.emitted).collect()
            }
            Mode::Oracle => {
                let xi = xi.as_ref().expect("loaded above");
                let gold = test
                    .iter()
                    .map(|e| document(&data.documents, e.target))
                    .collect::<Result<Vec<_>, _>>()?;
                generate_with_entities(&lm, xi, &queries, &gold, EntityView::Adapted, max_new)?
                    .into_iter()
                    .map(|s| s.emitted)
                    .collect()
            }
        };
        let pairs: Vec<CommentPair<usize>> = test
            .iter()
            .zip(outputs)
            .map(|(e, h)| CommentPair::new(e.id, h, e.comment.clone()))
            .collect();
        rows.push(commenting_row(mode.name(), &pairs)?);
    }

    let old = existing_report(l)?;
    let mut commenting = old.commenting;
    commenting.retain(|r| !rows.iter().any(|n| n.mode == r.mode));
    commenting.extend(rows);
    write_report(l, old.retrieval, commenting)
}

fn gradcheck() -> Res {
    let cases = gradsuite::run(gradsuite::STEP)?;
    let mut worst: f64 = 0.0;
    for c in &cases {
        println!(
            "gradcheck: {:<36} max rel {:.3e} max abs {:.3e} over {} entries",
            c.name, c.report.max_rel_error, c.report.max_abs_error, c.report.checked
        );
        worst = worst.max(c.report.max_rel_error);
    }
    println!("gradcheck: max relative error {worst:.3e} over {} cases (tolerance {:.0e})", cases.len(), gradsuite::TOLERANCE);
    if let Some(bad) = cases.iter().find(|c| !c.passed()) {
        return Err(CliError::Runtime(format!(
            "gradient mismatch in {}: relative error {:.3e}",
            bad.name, bad.report.max_rel_error
        )));
    }
    Ok(())
}

const PIPELINE: [fn() -> Command; 10] = [
    || Command::Datagen,
    || Command::PretrainLm,
    || Command::TrainEncoders,
    || Command::TrainRetriever { stage: 1, ablation: false },
    || Command::TrainRetriever { stage: 2, ablation: false },
    || Command::TrainRetriever { stage: 2, ablation: true },
    || Command::BuildIndex,
    || Command::EvalRetrieval { k: None },
    || Command::TrainEntityAdapter,
    || Command::EvalCommenting { mode: Vec::new() },
];

fn repro_all(cfg: &RunConfig, l: &Layout) -> Res {
    for f in [l.root.join(REPORT_JSONL), l.freeze_log(), l.timings_log()] {
        if f.exists() {
            fs::remove_file(f)?;
        }
    }
    for step in PIPELINE {
        execute(&step(), cfg)?;
    }
    Ok(())
}

fn dispatch(command: &Command, cfg: &RunConfig, l: &Layout) -> Res {
    match command {
        Command::Datagen => datagen(cfg),
        Command::PretrainLm => pretrain_lm(cfg, l),
        Command::TrainEncoders => train_encoders(cfg, l),
        Command::TrainRetriever { stage, ablation } => {
            if *ablation && *stage != 2 {
                return Err(CliError::Config("--ablation applies to --stage 2 only".into()));
            }
            train_retriever(cfg, l, *stage, *ablation)
        }
        Command::BuildIndex => build_index(cfg, l),
        Command::EvalRetrieval { .. } => eval_retrieval(cfg, l),
        Command::TrainEntityAdapter => train_xi(cfg, l),
        Command::Generate { query, index } => generate(cfg, l, query, index.as_deref()),
        Command::EvalCommenting { mode } => eval_commenting(cfg, l, mode),
        Command::Gradcheck => gradcheck(),
        Command::ReproAll => repro_all(cfg, l),
    }
}

/// Runs one command. A failure leaves `<command>.failed` in the output
/// root; success removes any stale marker and logs the wall time.
pub fn execute(command: &Command, cfg: &RunConfig) -> Res {
    let l = Layout::new(&cfg.out);
    let name = command.name();
    fs::create_dir_all(&l.root).map_err(|e| CliError::Config(format!("cannot create output root {}: {e}", l.root.display())))?;
    let marker = l.failed_marker(name);
    let start = Instant::now();
    match dispatch(command, cfg, &l) {
        Ok(()) => {
            if marker.exists() {
                fs::remove_file(&marker)?;
            }
            let t = Timing {
                command: name.to_string(),
                seconds: start.elapsed().as_secs_f64(),
            };
            upsert_jsonl(&l.timings_log(), vec![t], |t| t.command.clone())
        }
        Err(e) => {
            let _ = fs::write(&marker, format!("{e}\n"));
            Err(e)
        }
    }
}
