use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{bleu, exact_match, rouge_n, token_f1, CommentPair};
use crate::error::{Error, Result};

pub const REPORT_JSONL: &str = "report.jsonl";
pub const REPORT_TXT: &str = "report.txt";
pub const RETRIEVAL_MODES: [&str; 3] = ["zero-shot", "w/o adapter", "fused"];
pub const COMMENTING_MODES: [&str; 4] = ["no-retrieval", "rag", "unicorn", "oracle"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRow {
    pub mode: String,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommentingRow {
    pub mode: String,
    pub queries: usize,
    pub token_f1: f64,
    pub bleu: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub exact_match: f64,
}

/// All commenting metrics for one mode.
pub fn commenting_row<T: std::hash::Hash + Eq + Clone>(mode: &str, pairs: &[CommentPair<T>]) -> Result<CommentingRow> {
    Ok(CommentingRow {
        mode: mode.to_string(),
        queries: pairs.len(),
        token_f1: token_f1(pairs)?,
        bleu: bleu(pairs, 4)?,
        rouge1: rouge_n(pairs, 1)?,
        rouge2: rouge_n(pairs, 2)?,
        exact_match: exact_match(pairs)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingFlag {
    pub name: String,
    pub holds: bool,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Retrieval(RetrievalRow),
    Commenting(CommentingRow),
    Flag(OrderingFlag),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub retrieval: Vec<RetrievalRow>,
    pub commenting: Vec<CommentingRow>,
    pub flags: Vec<OrderingFlag>,
}

fn rank(modes: &[&str], mode: &str) -> usize {
    modes.iter().position(|m| *m == mode).unwrap_or(modes.len())
}

impl Report {
    /// Sorts rows into canonical mode order and derives ordering flags.
    pub fn new(mut retrieval: Vec<RetrievalRow>, mut commenting: Vec<CommentingRow>) -> Self {
        retrieval.sort_by_key(|r| rank(&RETRIEVAL_MODES, &r.mode));
        commenting.sort_by_key(|r| rank(&COMMENTING_MODES, &r.mode));
        let mut flags = Vec::new();

        let r1 = |mode: &str| {
            retrieval
                .iter()
                .find(|r| r.mode == mode)
                .and_then(|r| r.recall.first().copied())
        };
        let k = retrieval.first().and_then(|r| r.ks.first()).copied().unwrap_or(1);
        for (hi, lo, min_gap) in [("w/o adapter", "zero-shot", 0.0), ("fused", "w/o adapter", 0.0), ("fused", "w/o adapter", 0.05)] {
            if let (Some(a), Some(b)) = (r1(hi), r1(lo)) {
                let name = if min_gap > 0.0 {
                    format!("{hi} >= {lo} + {min_gap} [recall@{k}]")
                } else {
                    format!("{hi} > {lo} [recall@{k}]")
                };
                let holds = if min_gap > 0.0 { a - b >= min_gap } else { a > b };
                flags.push(OrderingFlag {
                    name,
                    holds,
                    margin: a - b,
                });
            }
        }

        let metric = |mode: &str, f: fn(&CommentingRow) -> f64| commenting.iter().find(|r| r.mode == mode).map(f);
        let metrics: [(&str, fn(&CommentingRow) -> f64); 2] = [("token-f1", |r| r.token_f1), ("bleu", |r| r.bleu)];
        for (mname, f) in metrics {
            for (hi, lo) in [("rag", "no-retrieval"), ("unicorn", "rag")] {
                if let (Some(a), Some(b)) = (metric(hi, f), metric(lo, f)) {
                    flags.push(OrderingFlag {
                        name: format!("{hi} > {lo} [{mname}]"),
                        holds: a > b,
                        margin: a - b,
                    });
                }
            }
        }
        if let (Some(a), Some(b)) = (metric("oracle", |r| r.token_f1), metric("unicorn", |r| r.token_f1)) {
            flags.push(OrderingFlag {
                name: "oracle >= unicorn - 0.01 [token-f1]".into(),
                holds: a >= b - 0.01,
                margin: a - b,
            });
        }
        Self {
            retrieval,
            commenting,
            flags,
        }
    }

    pub fn flag(&self, name: &str) -> Option<&OrderingFlag> {
        self.flags.iter().find(|f| f.name == name)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let lines = self
            .retrieval
            .iter()
            .cloned()
            .map(Line::Retrieval)
            .chain(self.commenting.iter().cloned().map(Line::Commenting))
            .chain(self.flags.iter().cloned().map(Line::Flag));
        for l in lines {
            out.push_str(&serde_json::to_string(&l).map_err(|e| Error::contract(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if !self.retrieval.is_empty() {
            s.push_str("Retrieval (Micro-CoR test)\n");
            let ks = &self.retrieval[0].ks;
            let _ = write!(s, "{:<14}", "mode");
            for k in ks {
                let _ = write!(s, "{:>10}", format!("R@{k}"));
            }
            s.push('\n');
            for r in &self.retrieval {
                let _ = write!(s, "{:<14}", r.mode);
                for v in &r.recall {
                    let _ = write!(s, "{v:>10.4}");
                }
                s.push('\n');
            }
            s.push('\n');
        }
        if !self.commenting.is_empty() {
            s.push_str("Commenting (Micro-CoR test; token-F1 and exact match replace METEOR and BEM)\n");
            let _ = writeln!(
                s,
                "{:<14}{:>9}{:>10}{:>10}{:>10}{:>10}{:>10}",
                "mode", "queries", "token-F1", "BLEU", "ROUGE-1", "ROUGE-2", "exact"
            );
            for r in &self.commenting {
                let _ = writeln!(
                    s,
                    "{:<14}{:>9}{:>10.4}{:>10.4}{:>10.4}{:>10.4}{:>10.4}",
                    r.mode, r.queries, r.token_f1, r.bleu, r.rouge1, r.rouge2, r.exact_match
                );
            }
            s.push('\n');
        }
        if !self.flags.is_empty() {
            s.push_str("Orderings\n");
            for f in &self.flags {
                let _ = writeln!(s, "  [{}] {} (margin {:+.4})", if f.holds { "x" } else { " " }, f.name, f.margin);
            }
        }
        s
    }

    pub fn from_jsonl(text: &str, path: &str) -> Result<Self> {
        let mut report = Report::default();
        for (i, line) in text.lines().enumerate() {
            let l: Line = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            match l {
                Line::Retrieval(r) => report.retrieval.push(r),
                Line::Commenting(r) => report.commenting.push(r),
                Line::Flag(f) => report.flags.push(f),
            }
        }
        Ok(report)
    }
}

/// Writes `report.jsonl` and `report.txt` into `dir`.
pub fn emit_report(dir: &Path, report: &Report) -> Result<()> {
    if report.retrieval.is_empty() && report.commenting.is_empty() {
        return Err(Error::contract("report has no metric block"));
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_JSONL), report.to_jsonl()?)?;
    fs::write(dir.join(REPORT_TXT), report.to_text())?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Report> {
    Report::from_jsonl(&fs::read_to_string(path)?, &path.display().to_string())
}
