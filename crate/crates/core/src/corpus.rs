//! Dataset ingestion, tokenization, value alignment, and subset samplers.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sql_logic::{delexicalize, enumerate_taxonomy, parse_query, PatternId, SqlQuery, SqlRecord};

/// Dataset artifact format version.
const DATASET_VERSION: u32 = 1;

/// Lowercased tokens: alphanumeric runs stay whole, every other
/// non-space character becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text).into_iter().map(|(t, _)| t).collect()
}

/// Like [`tokenize`], also returning the byte range of each token in `text`.
pub fn tokenize_with_offsets(text: &str) -> Vec<(String, Range<usize>)> {
    let mut out = Vec::new();
    let mut word: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            word.get_or_insert(i);
            continue;
        }
        if let Some(start) = word.take() {
            out.push((text[start..i].to_lowercase(), start..i));
        }
        if !ch.is_whitespace() {
            let end = i + ch.len_utf8();
            out.push((text[i..end].to_lowercase(), i..end));
        }
    }
    if let Some(start) = word {
        out.push((text[start..].to_lowercase(), start..text.len()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub table_id: String,
    pub headers: Vec<String>,
}

impl TableSchema {
    pub fn new(table_id: impl Into<String>, headers: Vec<String>) -> Result<Self> {
        let table_id = table_id.into();
        if headers.is_empty() {
            return Err(Error::malformed(None, format!("table `{table_id}` has no headers")));
        }
        if headers.iter().any(|h| h.trim().is_empty()) {
            return Err(Error::malformed(None, format!("table `{table_id}` has an empty header")));
        }
        Ok(TableSchema { table_id, headers })
    }
}

/// Inclusive token range of a condition value inside the question.
pub type Span = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub question: String,
    pub tokens: Vec<String>,
    pub table_id: String,
    pub gold: SqlQuery,
    /// One entry per gold condition; `None` when the value is not in the question.
    pub value_spans: Vec<Option<Span>>,
}

impl Example {
    /// Tokenizes the question and aligns condition values.
    pub fn new(id: impl Into<String>, question: impl Into<String>, table_id: impl Into<String>, gold: SqlQuery) -> Self {
        let question = question.into();
        let mut ex = Example {
            id: id.into(),
            tokens: tokenize(&question),
            question,
            table_id: table_id.into(),
            gold,
            value_spans: Vec::new(),
        };
        align_value_spans(&mut ex);
        ex
    }

    pub fn pattern(&self) -> PatternId {
        delexicalize(&self.gold).id()
    }

    pub fn is_aligned(&self) -> bool {
        self.value_spans.iter().all(Option::is_some)
    }
}

/// Fills `value_spans` with the first contiguous occurrence of each
/// tokenized condition value; `None` when absent. Conditions are visited in
/// canonical order and prefer an occurrence that does not overlap the spans
/// already taken.
pub fn align_value_spans(example: &mut Example) {
    let mut spans: Vec<Option<Span>> = vec![None; example.gold.conditions.len()];
    let mut taken: Vec<Span> = Vec::new();
    for (i, c) in example.gold.canonical_conditions() {
        let needle = tokenize(&c.value);
        let all = find_spans(&example.tokens, &needle);
        let free = all
            .iter()
            .find(|&&(b, e)| taken.iter().all(|&(tb, te)| e < tb || b > te))
            .or(all.first())
            .copied();
        if let Some(s) = free {
            taken.push(s);
        }
        spans[i] = free;
    }
    example.value_spans = spans;
}

fn find_spans(haystack: &[String], needle: &[String]) -> Vec<Span> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return Vec::new();
    }
    haystack
        .windows(needle.len())
        .enumerate()
        .filter(|(_, w)| *w == needle)
        .map(|(b, _)| (b, b + needle.len() - 1))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub schemas: BTreeMap<String, TableSchema>,
}

impl Dataset {
    /// Builds a dataset, checking table references and column ranges.
    pub fn new(examples: Vec<Example>, schemas: impl IntoIterator<Item = TableSchema>) -> Result<Self> {
        let schemas: BTreeMap<_, _> = schemas.into_iter().map(|s| (s.table_id.clone(), s)).collect();
        for ex in &examples {
            let schema = schemas
                .get(&ex.table_id)
                .ok_or_else(|| Error::UnknownTable(ex.table_id.clone()))?;
            if ex.gold.max_column() >= schema.headers.len() {
                return Err(Error::SchemaMismatch {
                    column: ex.gold.max_column(),
                    headers: schema.headers.len(),
                });
            }
        }
        Ok(Dataset { examples, schemas })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn schema(&self, example: &Example) -> &TableSchema {
        &self.schemas[&example.table_id]
    }

    /// New dataset over the given example indices, keeping only referenced schemas.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let examples: Vec<Example> = indices.iter().map(|&i| self.examples[i].clone()).collect();
        let schemas = examples
            .iter()
            .map(|e| (e.table_id.clone(), self.schemas[&e.table_id].clone()))
            .collect();
        Dataset { examples, schemas }
    }

    /// Union by example id; examples of `other` already present are skipped.
    pub fn union(&self, other: &Dataset) -> Dataset {
        let mut out = self.clone();
        let seen: std::collections::HashSet<&str> = self.examples.iter().map(|e| e.id.as_str()).collect();
        for ex in &other.examples {
            if !seen.contains(ex.id.as_str()) {
                out.schemas
                    .entry(ex.table_id.clone())
                    .or_insert_with(|| other.schemas[&ex.table_id].clone());
                out.examples.push(ex.clone());
            }
        }
        out
    }

    /// Subset whose gold pattern passes `keep`.
    pub fn filter_patterns(&self, keep: impl Fn(PatternId) -> bool) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.examples[i].pattern())).collect();
        self.select(&idx)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Artifact<'a> {
            version: u32,
            schemas: Vec<&'a TableSchema>,
            examples: &'a [Example],
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(
            &mut w,
            &Artifact {
                version: DATASET_VERSION,
                schemas: self.schemas.values().collect(),
                examples: &self.examples,
            },
        )?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        #[derive(Deserialize)]
        struct Artifact {
            version: u32,
            schemas: Vec<TableSchema>,
            examples: Vec<Example>,
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let a: Artifact = serde_json::from_reader(BufReader::new(file))?;
        if a.version != DATASET_VERSION {
            return Err(Error::VersionMismatch(format!(
                "dataset version {} (expected {DATASET_VERSION})",
                a.version
            )));
        }
        Dataset::new(a.examples, a.schemas)
    }
}

/// Counts collected while reading WikiSQL files.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub records: usize,
    pub examples: usize,
    pub dropped_duplicate_columns: usize,
    pub unaligned_examples: usize,
    pub tables: usize,
}

#[derive(Deserialize)]
struct QuestionLine {
    question: String,
    table_id: String,
    sql: SqlRecord,
}

#[derive(Deserialize)]
struct TableLine {
    id: String,
    header: Vec<String>,
}

/// Reads a WikiSQL questions file and tables file (one JSON record per line).
///
/// Gold queries repeating a where-column are dropped and counted; any other
/// malformed line aborts with its 1-based line number.
pub fn load_wikisql(questions_path: &Path, tables_path: &Path) -> Result<(Dataset, IngestReport)> {
    let mut report = IngestReport::default();
    let mut schemas = BTreeMap::new();
    for (lineno, line) in read_lines(tables_path)? {
        let t: TableLine = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(Some(lineno), format!("{}: {e}", tables_path.display())))?;
        let schema = TableSchema::new(t.id, t.header).map_err(|e| relocate(e, lineno))?;
        schemas.insert(schema.table_id.clone(), schema);
    }
    report.tables = schemas.len();

    let stem = questions_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("q")
        .to_string();
    let mut examples = Vec::new();
    for (lineno, line) in read_lines(questions_path)? {
        report.records += 1;
        let q: QuestionLine = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(Some(lineno), format!("{}: {e}", questions_path.display())))?;
        let gold = match parse_query(&q.sql) {
            Ok(g) => g,
            Err(Error::MalformedRecord { reason, .. }) if reason.starts_with("duplicate where column") => {
                report.dropped_duplicate_columns += 1;
                continue;
            }
            Err(e) => return Err(relocate(e, lineno)),
        };
        let schema = schemas
            .get(&q.table_id)
            .ok_or_else(|| Error::malformed(Some(lineno), format!("unknown table id `{}`", q.table_id)))?;
        if gold.max_column() >= schema.headers.len() {
            return Err(Error::malformed(
                Some(lineno),
                format!("column {} out of range for table `{}`", gold.max_column(), q.table_id),
            ));
        }
        let ex = Example::new(format!("{stem}-{lineno}"), q.question, q.table_id, gold);
        if !ex.is_aligned() {
            report.unaligned_examples += 1;
        }
        examples.push(ex);
    }
    if report.dropped_duplicate_columns > 0 {
        log::warn!(
            "dropped {} records with repeated where columns",
            report.dropped_duplicate_columns
        );
    }
    report.examples = examples.len();
    let dataset = Dataset::new(examples, schemas.into_values())?;
    Ok((dataset, report))
}

fn relocate(e: Error, lineno: usize) -> Error {
    match e {
        Error::MalformedRecord { reason, .. } => Error::malformed(Some(lineno), reason),
        other => other,
    }
}

/// Non-blank lines with 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// A labeled question pair for paraphrase pre-training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphrasePair {
    pub first: String,
    pub second: String,
    pub is_paraphrase: bool,
}

/// Reads `question1 \t question2 \t label` lines.
pub fn load_paraphrase_pairs(path: &Path) -> Result<Vec<ParaphrasePair>> {
    read_lines(path)?
        .into_iter()
        .map(|(lineno, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            let [first, second, label] = fields[..] else {
                return Err(Error::malformed(Some(lineno), "expected three tab-separated fields"));
            };
            let is_paraphrase = match label.trim() {
                "1" => true,
                "0" => false,
                other => return Err(Error::malformed(Some(lineno), format!("label `{other}` is not 0 or 1"))),
            };
            Ok(ParaphrasePair {
                first: first.to_string(),
                second: second.to_string(),
                is_paraphrase,
            })
        })
        .collect()
}

pub fn write_paraphrase_pairs(path: &Path, pairs: &[ParaphrasePair]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        writeln!(w, "{}\t{}\t{}", p.first, p.second, u8::from(p.is_paraphrase)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Count per taxonomy pattern; indexed by `PatternId`.
pub fn pattern_histogram(dataset: &Dataset) -> Vec<usize> {
    let mut hist = vec![0; enumerate_taxonomy().len()];
    for ex in &dataset.examples {
        hist[ex.pattern().index()] += 1;
    }
    hist
}

/// The `k` most frequent patterns, ties broken by smaller id. Zero-count patterns are excluded.
pub fn top_patterns(histogram: &[usize], k: usize) -> Vec<PatternId> {
    let mut ids: Vec<usize> = (0..histogram.len()).filter(|&i| histogram[i] > 0).collect();
    ids.sort_by(|&a, &b| histogram[b].cmp(&histogram[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids.into_iter().map(|i| PatternId(i as u16)).collect()
}

fn indices_by_pattern(dataset: &Dataset) -> BTreeMap<PatternId, Vec<usize>> {
    let mut map: BTreeMap<PatternId, Vec<usize>> = BTreeMap::new();
    for (i, ex) in dataset.examples.iter().enumerate() {
        map.entry(ex.pattern()).or_default().push(i);
    }
    map
}

/// `n` examples uniformly without replacement, in source order.
pub fn sample_random(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > dataset.len() {
        return Err(Error::SampleTooLarge {
            requested: n,
            available: dataset.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, dataset.len(), n).into_vec();
    picked.sort_unstable();
    Ok(dataset.select(&picked))
}

/// Exactly `per_pattern` examples of each listed pattern.
pub fn sample_uniform(dataset: &Dataset, pattern_ids: &[PatternId], per_pattern: usize, seed: u64) -> Result<Dataset> {
    let counts = vec![per_pattern; pattern_ids.len()];
    sample_per_pattern(dataset, pattern_ids, &counts, seed)
}

/// Source-proportional sampling at `ratio` with a per-pattern `floor`.
pub fn sample_hybrid(
    dataset: &Dataset,
    pattern_ids: &[PatternId],
    ratio: f64,
    floor: usize,
    seed: u64,
) -> Result<Dataset> {
    if !(ratio > 0.0) {
        return Err(Error::malformed(None, format!("hybrid ratio must be positive, got {ratio}")));
    }
    let hist = pattern_histogram(dataset);
    let counts: Vec<usize> = pattern_ids
        .iter()
        .map(|p| hybrid_count(hist[p.index()], ratio, floor))
        .collect();
    sample_per_pattern(dataset, pattern_ids, &counts, seed)
}

/// Target count of the hybrid sampler for a pattern with `source` examples.
pub fn hybrid_count(source: usize, ratio: f64, floor: usize) -> usize {
    floor.max((source as f64 * ratio).round() as usize)
}

fn sample_per_pattern(dataset: &Dataset, pattern_ids: &[PatternId], counts: &[usize], seed: u64) -> Result<Dataset> {
    let by_pattern = indices_by_pattern(dataset);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    for (&pattern, &want) in pattern_ids.iter().zip(counts) {
        let pool = by_pattern.get(&pattern).map(Vec::as_slice).unwrap_or(&[]);
        if pool.len() < want {
            return Err(Error::InsufficientPattern {
                pattern,
                available: pool.len(),
                requested: want,
            });
        }
        picked.extend(index::sample(&mut rng, pool.len(), want).into_iter().map(|i| pool[i]));
    }
    picked.sort_unstable();
    picked.dedup();
    Ok(dataset.select(&picked))
}
