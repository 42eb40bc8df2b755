//! Pattern accuracy (P), logical form accuracy (LF) and the retrieval /
//! grounding capacities.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::retriever::{NeighborCount, RetrievalIndex};
use crate::sql_logic::{delexicalize, queries_equal, PatternId, SqlQuery};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub example_id: String,
    pub gold: SqlQuery,
    pub retrieved_pattern: PatternId,
    /// `None` when grounding failed.
    pub predicted: Option<SqlQuery>,
}

impl EvalRecord {
    pub fn gold_pattern(&self) -> PatternId {
        delexicalize(&self.gold).id()
    }

    pub fn pattern_correct(&self) -> bool {
        self.retrieved_pattern == self.gold_pattern()
    }

    pub fn form_correct(&self) -> bool {
        self.predicted.as_ref().is_some_and(|p| queries_equal(p, &self.gold))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PatternBreakdown {
    pub n: usize,
    pub pattern_correct: usize,
    pub form_correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "LF")]
    pub lf: f64,
    pub r_capacity: usize,
    pub rg_capacity: usize,
    pub n: usize,
    /// Keyed by gold pattern.
    pub per_pattern: BTreeMap<PatternId, PatternBreakdown>,
}

pub fn pattern_accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyEval);
    }
    Ok(records.iter().filter(|r| r.pattern_correct()).count() as f64 / records.len() as f64)
}

pub fn logical_form_accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyEval);
    }
    Ok(records.iter().filter(|r| r.form_correct()).count() as f64 / records.len() as f64)
}

pub fn r_capacity(records: &[EvalRecord]) -> usize {
    records
        .iter()
        .filter(|r| r.pattern_correct())
        .map(EvalRecord::gold_pattern)
        .collect::<BTreeSet<_>>()
        .len()
}

pub fn rg_capacity(records: &[EvalRecord]) -> usize {
    records
        .iter()
        .filter(|r| r.form_correct())
        .map(EvalRecord::gold_pattern)
        .collect::<BTreeSet<_>>()
        .len()
}

impl EvalReport {
    pub fn from_records(records: &[EvalRecord]) -> Result<Self> {
        let mut per_pattern: BTreeMap<PatternId, PatternBreakdown> = BTreeMap::new();
        for r in records {
            let b = per_pattern.entry(r.gold_pattern()).or_default();
            b.n += 1;
            b.pattern_correct += usize::from(r.pattern_correct());
            b.form_correct += usize::from(r.form_correct());
        }
        Ok(EvalReport {
            p: pattern_accuracy(records)?,
            lf: logical_form_accuracy(records)?,
            r_capacity: r_capacity(records),
            rg_capacity: rg_capacity(records),
            n: records.len(),
            per_pattern,
        })
    }

    /// Aligned plain-text table: the aggregate metrics, then one row per gold pattern.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>8}", "metric", "value");
        let _ = writeln!(s, "{:<12} {:>8.4}", "P", self.p);
        let _ = writeln!(s, "{:<12} {:>8.4}", "LF", self.lf);
        let _ = writeln!(s, "{:<12} {:>8}", "R-capacity", self.r_capacity);
        let _ = writeln!(s, "{:<12} {:>8}", "RG-capacity", self.rg_capacity);
        let _ = writeln!(s, "{:<12} {:>8}", "n", self.n);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<6} {:>6} {:>6} {:>6}  template", "id", "n", "P", "LF");
        for (id, b) in &self.per_pattern {
            let _ = writeln!(
                s,
                "{:<6} {:>6} {:>6.3} {:>6.3}  {}",
                id.to_string(),
                b.n,
                b.pattern_correct as f64 / b.n as f64,
                b.form_correct as f64 / b.n as f64,
                id.pattern()
            );
        }
        s
    }

    /// Line-delimited metric records (`metric`, `value`, `n`, `seed`).
    pub fn to_jsonl(&self, seed: u64) -> String {
        let metrics = [
            ("P", self.p),
            ("LF", self.lf),
            ("r_capacity", self.r_capacity as f64),
            ("rg_capacity", self.rg_capacity as f64),
        ];
        let mut s = String::new();
        for (name, value) in metrics {
            let line = serde_json::json!({"metric": name, "value": value, "n": self.n, "seed": seed});
            s.push_str(&line.to_string());
            s.push('\n');
        }
        s
    }
}

/// Predicts every example of `test` against `index` and scores the results.
pub fn evaluate(model: &Model, index: &RetrievalIndex, test: &Dataset, k: NeighborCount) -> Result<(EvalReport, Vec<EvalRecord>)> {
    if test.is_empty() {
        return Err(Error::EmptyEval);
    }
    let k = k.resolve(index.len());
    let records = test
        .examples
        .par_iter()
        .map(|ex| {
            let pred = model.predict(index, ex, test.schema(ex), k)?;
            Ok(EvalRecord {
                example_id: ex.id.clone(),
                gold: ex.gold.clone(),
                retrieved_pattern: pred.retrieval.chosen_pattern,
                predicted: pred.grounded.ok().map(|g| g.query),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((EvalReport::from_records(&records)?, records))
}
