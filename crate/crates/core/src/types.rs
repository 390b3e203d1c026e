//! Records shared between the dataset generator, the retriever and the
//! generator.

use serde::{Deserialize, Serialize};

pub type TokenId = usize;

/// Query image features plus question tokens, with the retriever-side
/// instruction tag kept separate from the question the language model reads.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalQuery {
    pub question: Vec<TokenId>,
    pub image: Vec<f64>,
    pub instruction: Vec<TokenId>,
}

impl MultimodalQuery {
    pub fn is_empty(&self) -> bool {
        self.question.is_empty() && self.image.is_empty()
    }

    /// Text seen by the dual encoder: instruction tag followed by the question.
    pub fn encoder_text(&self) -> Vec<TokenId> {
        self.instruction
            .iter()
            .chain(&self.question)
            .copied()
            .collect()
    }
}

/// A database entry. Documents are embedded by the dual encoder only.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityDocument {
    pub id: usize,
    pub features: Vec<f64>,
    pub caption: Vec<TokenId>,
    pub comment: Option<Vec<TokenId>>,
    pub metadata: Vec<TokenId>,
}

impl EntityDocument {
    /// Caption followed by metadata: the text that describes the entity.
    pub fn description(&self) -> Vec<TokenId> {
        self.caption.iter().chain(&self.metadata).copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationKind {
    StageChange,
    ColorChange,
    SizeChange,
    SameGroupOtherCategory,
}

impl RelationKind {
    pub const ALL: [RelationKind; 4] = [
        RelationKind::StageChange,
        RelationKind::ColorChange,
        RelationKind::SizeChange,
        RelationKind::SameGroupOtherCategory,
    ];
}

/// `Golden` examples are a verified subset of the test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Golden,
}

impl Split {
    pub fn is_test(self) -> bool {
        matches!(self, Split::Test | Split::Golden)
    }
}

/// Query, target document and ground-truth comment.
#[derive(Debug, Clone, PartialEq)]
pub struct CoRExample {
    pub id: usize,
    pub query_entity: usize,
    pub relation: RelationKind,
    pub query: MultimodalQuery,
    pub target: usize,
    /// Comment tokens without the trailing end-of-sequence marker.
    pub comment: Vec<TokenId>,
    pub caption: Vec<TokenId>,
    pub split: Split,
}
