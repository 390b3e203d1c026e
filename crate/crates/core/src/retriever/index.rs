use std::path::Path;

use crate::checkpoint::{bytes_record, record_bytes, Checkpoint};
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};
use crate::types::EntityDocument;

use super::{RetrieverParams, TextChoice};

/// Unit-norm document embeddings with their ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    embeddings: Vec<Vec<f64>>,
    ids: Vec<usize>,
    params_checksum: String,
}

impl EmbeddingIndex {
    pub fn new(embeddings: Vec<Vec<f64>>, ids: Vec<usize>, params_checksum: String) -> Result<Self> {
        if embeddings.len() != ids.len() {
            return Err(Error::shape("index", &[embeddings.len()], &[ids.len()]));
        }
        if let Some(first) = embeddings.first() {
            let e = first.len();
            for (i, row) in embeddings.iter().enumerate() {
                if row.len() != e {
                    return Err(Error::shape("index row", &[row.len()], &[e]));
                }
                let norm = dot(row, row).sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::contract(format!("index row {i} has norm {norm}")));
                }
            }
        }
        Ok(Self {
            embeddings,
            ids,
            params_checksum,
        })
    }

    /// Embeds every document by caption and metadata.
    pub fn build(params: &RetrieverParams, documents: &[EntityDocument]) -> Result<Self> {
        let docs: Vec<&EntityDocument> = documents.iter().collect();
        let emb = params.embed_documents(&docs, TextChoice::Caption)?;
        Self::new(emb, documents.iter().map(|d| d.id).collect(), params.checksum())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn params_checksum(&self) -> &str {
        &self.params_checksum
    }

    pub fn embedding_of(&self, id: usize) -> Option<&[f64]> {
        self.ids
            .iter()
            .position(|&i| i == id)
            .map(|r| self.embeddings[r].as_slice())
    }

    /// Top-k `(doc id, score)` by descending score, ties by ascending id.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if self.is_empty() {
            return Err(Error::contract("retrieval over an empty index"));
        }
        if k == 0 || k > self.len() {
            return Err(Error::contract(format!("k = {k} outside 1..={}", self.len())));
        }
        let e = self.embeddings[0].len();
        if query.len() != e {
            return Err(Error::shape("query embedding", &[query.len()], &[e]));
        }
        let scores: Vec<(usize, f64)> = self
            .ids
            .iter()
            .zip(&self.embeddings)
            .map(|(&id, row)| (id, dot(query, row)))
            .collect();
        Ok(top_k(scores, k))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        if self.is_empty() {
            return Err(Error::contract("cannot persist an empty index"));
        }
        let e = self.embeddings[0].len();
        let mut ck = Checkpoint::new();
        ck.push(
            "index.embeddings",
            Tensor::new(vec![self.len(), e], self.embeddings.concat())?,
        );
        ck.push(
            "index.ids",
            Tensor::vector(self.ids.iter().map(|&i| i as f64).collect()),
        );
        ck.push("index.params_sha256", bytes_record(self.params_checksum.as_bytes()));
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let emb = ck.require("index.embeddings")?;
        let ids = ck.require("index.ids")?;
        let sum = String::from_utf8(record_bytes(ck.require("index.params_sha256")?))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rows = (0..emb.rows()).map(|r| emb.row(r).to_vec()).collect();
        Self::new(rows, ids.data().iter().map(|&v| v as usize).collect(), sum)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Sorts by descending score then ascending id and keeps `k`.
pub fn top_k(mut scores: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scores.truncate(k);
    scores
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index() -> EmbeddingIndex {
        EmbeddingIndex::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![7, 3, 5],
            "x".into(),
        )
        .unwrap()
    }

    #[test]
    fn exact_match_ranks_first_with_unit_score() {
        let r = index().search(&[0.0, 1.0], 1).unwrap();
        assert_eq!(r, vec![(3, 1.0)]);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let r = index().search(&[1.0, 0.0], 2).unwrap();
        assert_eq!(r, vec![(5, 1.0), (7, 1.0)]);
    }

    #[test]
    fn bad_k_and_empty_index() {
        assert!(index().search(&[1.0, 0.0], 0).is_err());
        assert!(index().search(&[1.0, 0.0], 4).is_err());
        let empty = EmbeddingIndex::new(vec![], vec![], String::new()).unwrap();
        assert!(empty.search(&[1.0], 1).is_err());
    }

    #[test]
    fn rejects_non_unit_rows() {
        assert!(EmbeddingIndex::new(vec![vec![2.0, 0.0]], vec![0], String::new()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let i = index();
        assert_eq!(EmbeddingIndex::from_checkpoint(&i.to_checkpoint().unwrap()).unwrap(), i);
    }
}
