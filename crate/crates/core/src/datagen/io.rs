//! JSONL persistence for documents and examples.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::vocab;
use crate::error::{Error, Result};
use crate::models::Tokenizer;
use crate::types::{CoRExample, EntityDocument, MultimodalQuery, RelationKind, Split};

pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const EXAMPLES_FILE: &str = "examples.jsonl";

#[derive(Serialize, Deserialize)]
struct DocumentLine {
    id: usize,
    features: Vec<f64>,
    caption: String,
    metadata: String,
}

#[derive(Serialize, Deserialize)]
struct ExampleLine {
    id: usize,
    query_entity: usize,
    relation: RelationKind,
    features: Vec<f64>,
    question: String,
    target: usize,
    comment: String,
    split: Split,
}

/// The query part of an example line; other fields are ignored, so an
/// examples file doubles as a query file.
#[derive(Deserialize)]
struct QueryLine {
    id: usize,
    features: Vec<f64>,
    question: String,
}

fn write_lines<T: Serialize>(path: &Path, rows: impl Iterator<Item = Result<T>>) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, &row?).map_err(|e| Error::contract(e.to_string()))?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn write_dataset(dir: &Path, documents: &[EntityDocument], examples: &[CoRExample], tokenizer: &Tokenizer) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_lines(
        &dir.join(DOCUMENTS_FILE),
        documents.iter().map(|d| {
            Ok(DocumentLine {
                id: d.id,
                features: d.features.clone(),
                caption: tokenizer.decode(&d.caption)?,
                metadata: tokenizer.decode(&d.metadata)?,
            })
        }),
    )?;
    write_lines(
        &dir.join(EXAMPLES_FILE),
        examples.iter().map(|e| {
            Ok(ExampleLine {
                id: e.id,
                query_entity: e.query_entity,
                relation: e.relation,
                features: e.query.image.clone(),
                question: tokenizer.decode(&e.query.question)?,
                target: e.target,
                comment: tokenizer.decode(&e.comment)?,
                split: e.split,
            })
        }),
    )
}

fn parse_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    let name = path.display().to_string();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: name.clone(),
        line,
        msg,
    };
    if !text.is_empty() && !text.ends_with('\n') {
        let line = text.lines().count();
        return Err(parse_err(line, "truncated line (missing newline)".into()));
    }
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(i + 1, e.to_string())))
        .collect()
}

/// Reads a dataset written by [`write_dataset`], checking referential
/// integrity between examples and documents.
pub fn load_dataset(dir: &Path, tokenizer: &Tokenizer) -> Result<(Vec<EntityDocument>, Vec<CoRExample>)> {
    let doc_path = dir.join(DOCUMENTS_FILE);
    let ex_path = dir.join(EXAMPLES_FILE);
    let line_err = |path: &Path, line: usize, e: Error| Error::Parse {
        path: path.display().to_string(),
        line,
        msg: e.to_string(),
    };

    let mut documents = Vec::new();
    for (i, d) in parse_lines::<DocumentLine>(&doc_path)?.into_iter().enumerate() {
        if d.id != i {
            return Err(line_err(&doc_path, i + 1, Error::contract(format!("document id {} out of order", d.id))));
        }
        documents.push(EntityDocument {
            id: d.id,
            features: d.features,
            caption: tokenizer.encode(&d.caption).map_err(|e| line_err(&doc_path, i + 1, e))?,
            comment: None,
            metadata: tokenizer.encode(&d.metadata).map_err(|e| line_err(&doc_path, i + 1, e))?,
        });
    }

    let instruction = tokenizer.encode(vocab::INSTRUCTION)?;
    let mut examples = Vec::new();
    for (i, e) in parse_lines::<ExampleLine>(&ex_path)?.into_iter().enumerate() {
        let err = |e: Error| line_err(&ex_path, i + 1, e);
        if e.target >= documents.len() || e.query_entity >= documents.len() {
            return Err(err(Error::contract(format!("example {} references a missing document", e.id))));
        }
        examples.push(CoRExample {
            id: e.id,
            query_entity: e.query_entity,
            relation: e.relation,
            query: MultimodalQuery {
                question: tokenizer.encode(&e.question).map_err(err)?,
                image: e.features,
                instruction: instruction.clone(),
            },
            target: e.target,
            comment: tokenizer.encode(&e.comment).map_err(err)?,
            caption: documents[e.target].caption.clone(),
            split: e.split,
        });
    }
    Ok((documents, examples))
}

/// Reads `(query id, query)` pairs from line-delimited JSON with `id`,
/// `features` and `question` fields.
pub fn load_queries(path: &Path, tokenizer: &Tokenizer) -> Result<Vec<(usize, MultimodalQuery)>> {
    let instruction = tokenizer.encode(vocab::INSTRUCTION)?;
    let name = path.display().to_string();
    parse_lines::<QueryLine>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, q)| {
            let question = tokenizer.encode(&q.question).map_err(|e| Error::Parse {
                path: name.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            Ok((
                q.id,
                MultimodalQuery {
                    question,
                    image: q.features,
                    instruction: instruction.clone(),
                },
            ))
        })
        .collect()
}

/// SHA-256 over both dataset files.
pub fn dataset_checksum(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for f in [DOCUMENTS_FILE, EXAMPLES_FILE] {
        h.update(fs::read(dir.join(f))?);
    }
    Ok(hex::encode(h.finalize()))
}
