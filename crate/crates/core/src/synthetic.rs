//! Templated questions over generated tables, for desk-scale experiments.
//!
//! Every question names its select column and each condition column
//! verbatim, conditions are phrased in canonical order (`=`, `>`, `<`), and
//! values are copied from a fixed pool, so gold queries and value spans are
//! known exactly.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dataset, Example, ParaphrasePair, TableSchema};
use crate::error::{Error, Result};
use crate::sql_logic::{AggOp, CmpOp, Condition, LogicalPattern, SqlQuery};

/// (text columns, numeric columns) per domain.
const DOMAINS: [([&str; 4], [&str; 4]); 6] = [
    (["team", "coach", "home city", "stadium"], ["wins", "losses", "points", "goals"]),
    (["title", "director", "studio", "genre"], ["release year", "budget", "rating", "runtime"]),
    (["candidate", "party", "district", "state"], ["votes", "seats", "turnout", "margin"]),
    (["artist", "album", "label", "producer"], ["sales", "tracks", "weeks", "chart position"]),
    (["school", "principal", "county", "mascot"], ["students", "teachers", "founded", "enrollment"]),
    (["model", "maker", "engine", "country"], ["price", "horsepower", "doors", "mpg"]),
];

const TEXT_VALUES: [&str; 24] = [
    "red hawks", "blue lake", "north shore", "silver star", "paris", "london", "maria lopez", "john smith",
    "green valley", "iron works", "golden gate", "oak ridge", "tokyo", "berlin", "delta force", "alpha one",
    "kim park", "lee chen", "new haven", "el dorado", "twin peaks", "ann ford", "cape town", "rio",
];

const SELECT_PHRASES: [&[&str]; 6] = [
    &["what is the {}", "which {}", "name the {}", "tell me the {}"],
    &["what is the highest {}", "what is the maximum {}", "name the largest {}"],
    &["what is the lowest {}", "what is the minimum {}", "name the smallest {}"],
    &["how many {}", "what is the number of {}", "count the {}"],
    &["what is the total {}", "what is the sum of {}", "name the combined {}"],
    &["what is the average {}", "what is the mean {}", "name the typical {}"],
];

const COND_PHRASES: [&[&str]; 3] = [
    &["when {c} is {v}", "where {c} is {v}", "with {c} {v}", "for {c} equal to {v}"],
    &["when {c} is more than {v}", "with {c} above {v}", "where {c} is greater than {v}", "for {c} over {v}"],
    &["when {c} is less than {v}", "with {c} below {v}", "where {c} is smaller than {v}", "for {c} under {v}"],
];

/// The twelve patterns of the synthetic corpus; the first eight are the
/// "seen" patterns of the hot-swap experiment.
pub fn synthetic_patterns() -> Vec<LogicalPattern> {
    use AggOp::*;
    use CmpOp::*;
    [
        (None, vec![Eq]),
        (Count, vec![Eq]),
        (Max, vec![Eq]),
        (Min, vec![Eq]),
        (None, vec![Gt]),
        (None, vec![Lt]),
        (None, vec![Eq, Eq]),
        (Sum, vec![Eq]),
        (Count, vec![Gt]),
        (Max, vec![Lt]),
        (Avg, vec![Eq]),
        (None, vec![Eq, Gt]),
    ]
    .into_iter()
    .map(|(a, ops)| LogicalPattern::new(a, ops).expect("valid pattern"))
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub n_tables: usize,
    pub patterns: Vec<LogicalPattern>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_train: 600,
            n_dev: 100,
            n_test: 200,
            n_tables: 30,
            patterns: synthetic_patterns(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone)]
struct Table {
    schema: TableSchema,
    text: Vec<usize>,
    numeric: Vec<usize>,
}

fn make_tables(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Table>> {
    (0..n)
        .map(|i| {
            let (text, numeric) = DOMAINS[i % DOMAINS.len()];
            let mut cols: Vec<(&str, bool)> = text
                .choose_multiple(rng, 3)
                .map(|&c| (c, true))
                .chain(numeric.choose_multiple(rng, 3).map(|&c| (c, false)))
                .collect();
            cols.shuffle(rng);
            let headers: Vec<String> = cols.iter().map(|(c, _)| capitalize(c)).collect();
            Ok(Table {
                schema: TableSchema::new(format!("synth-{i}"), headers)?,
                text: (0..cols.len()).filter(|&j| cols[j].1).collect(),
                numeric: (0..cols.len()).filter(|&j| !cols[j].1).collect(),
            })
        })
        .collect()
}

fn capitalize(s: &str) -> String {
    s.split(' ')
        .map(|w| {
            let mut c = w.chars();
            c.next().map_or(String::new(), |f| f.to_uppercase().chain(c).collect())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// A random query of `pattern` over `table`, or `None` if the table lacks columns.
fn random_query(pattern: &LogicalPattern, table: &Table, rng: &mut ChaCha8Rng) -> Option<SqlQuery> {
    let n_eq = pattern.cond_ops().iter().filter(|&&o| o == CmpOp::Eq).count();
    let n_num = pattern.cond_ops().len() - n_eq;
    let numeric_select = matches!(pattern.agg(), AggOp::Max | AggOp::Min | AggOp::Sum | AggOp::Avg);
    let mut text = table.text.clone();
    let mut numeric = table.numeric.clone();
    text.shuffle(rng);
    numeric.shuffle(rng);
    let select = if numeric_select { numeric.pop()? } else { text.pop()? };
    if text.len() < n_eq || numeric.len() < n_num {
        return None;
    }
    let mut values: Vec<&str> = TEXT_VALUES.choose_multiple(rng, n_eq).copied().collect();
    let conditions = pattern
        .cond_ops()
        .iter()
        .map(|&op| {
            let (column, value) = match op {
                CmpOp::Eq => (text.pop().unwrap(), values.pop().unwrap().to_string()),
                _ => (numeric.pop().unwrap(), rng.gen_range(1..100).to_string()),
            };
            Condition { column, op, value }
        })
        .collect();
    SqlQuery::new(select, pattern.agg(), conditions).ok()
}

/// One random phrasing of `query`; conditions are expected in canonical order.
fn render(query: &SqlQuery, schema: &TableSchema, rng: &mut ChaCha8Rng) -> String {
    let name = |c: usize| schema.headers[c].to_lowercase();
    let sel = SELECT_PHRASES[query.agg.code()].choose(rng).unwrap();
    let mut q = sel.replace("{}", &name(query.select_column));
    for (i, (_, c)) in query.canonical_conditions().into_iter().enumerate() {
        let phrase = COND_PHRASES[c.op.code()].choose(rng).unwrap();
        q.push_str(if i == 0 { " " } else { " and " });
        q.push_str(&phrase.replace("{c}", &name(c.column)).replace("{v}", &c.value));
    }
    if rng.gen_bool(0.5) {
        q.push('?');
    }
    q
}

/// Train, dev and test sets with pairwise disjoint question strings and
/// patterns assigned round-robin.
pub fn generate(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if config.patterns.is_empty() || config.n_tables == 0 {
        return Err(Error::EmptyInput("synthetic corpus needs patterns and tables"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tables = make_tables(config.n_tables, &mut rng)?;
    let mut seen = HashSet::new();
    let mut split = |name: &str, n: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut examples = Vec::with_capacity(n);
        let mut attempts = 0;
        while examples.len() < n {
            attempts += 1;
            if attempts > 100 * n + 1000 {
                return Err(Error::EmptyInput("could not generate enough distinct questions"));
            }
            let pattern = &config.patterns[examples.len() % config.patterns.len()];
            let table = tables.choose(rng).unwrap();
            let Some(query) = random_query(pattern, table, rng) else { continue };
            let question = render(&query, &table.schema, rng);
            if !seen.insert(question.clone()) {
                continue;
            }
            let ex = Example::new(format!("{name}-{}", examples.len()), question, table.schema.table_id.clone(), query);
            debug_assert!(ex.is_aligned());
            examples.push(ex);
        }
        Dataset::new(examples, tables.iter().map(|t| t.schema.clone()))
    };
    let train = split("train", config.n_train, &mut rng)?;
    let dev = split("dev", config.n_dev, &mut rng)?;
    let test = split("test", config.n_test, &mut rng)?;
    Ok(SyntheticCorpus { train, dev, test })
}

/// Half positive pairs (two phrasings of one query), half negative pairs
/// (queries of different patterns on the same table).
pub fn paraphrase_pairs(n: usize, patterns: &[LogicalPattern], seed: u64) -> Result<Vec<ParaphrasePair>> {
    if patterns.len() < 2 {
        return Err(Error::EmptyInput("paraphrase pairs need at least two patterns"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tables = make_tables(DOMAINS.len() * 2, &mut rng)?;
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let table = tables.choose(&mut rng).unwrap();
        let a = patterns.choose(&mut rng).unwrap();
        let Some(qa) = random_query(a, table, &mut rng) else { continue };
        let first = render(&qa, &table.schema, &mut rng);
        let is_paraphrase = pairs.len() % 2 == 0;
        let second = if is_paraphrase {
            render(&qa, &table.schema, &mut rng)
        } else {
            let b = patterns.iter().filter(|p| *p != a).collect::<Vec<_>>();
            let b = b.choose(&mut rng).unwrap();
            let Some(qb) = random_query(b, table, &mut rng) else { continue };
            render(&qb, &table.schema, &mut rng)
        };
        pairs.push(ParaphrasePair {
            first,
            second,
            is_paraphrase,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::pattern_histogram;

    #[test]
    fn corpus_shape() {
        let c = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!((c.train.len(), c.dev.len(), c.test.len()), (600, 100, 200));
        let hist = pattern_histogram(&c.train);
        let ids: Vec<usize> = synthetic_patterns().iter().map(|p| p.id().index()).collect();
        assert_eq!(hist.iter().filter(|&&n| n > 0).count(), 12);
        assert!(ids.iter().all(|&i| hist[i] == 50));
        let train_q: HashSet<&str> = c.train.examples.iter().map(|e| e.question.as_str()).collect();
        assert!(c.test.examples.iter().all(|e| !train_q.contains(e.question.as_str())));
        assert!(c.train.examples.iter().chain(&c.test.examples).all(Example::is_aligned));
    }

    #[test]
    fn deterministic() {
        let a = generate(&SyntheticConfig { seed: 3, ..SyntheticConfig::default() }).unwrap();
        let b = generate(&SyntheticConfig { seed: 3, ..SyntheticConfig::default() }).unwrap();
        assert_eq!(a.train, b.train);
        let p = paraphrase_pairs(50, &synthetic_patterns(), 1).unwrap();
        assert_eq!(p, paraphrase_pairs(50, &synthetic_patterns(), 1).unwrap());
        assert_eq!(p.iter().filter(|x| x.is_paraphrase).count(), 25);
    }

    #[test]
    fn headers_are_mentioned() {
        let c = generate(&SyntheticConfig::default()).unwrap();
        for ex in &c.train.examples {
            let s = c.train.schema(ex);
            let q = ex.question.to_lowercase();
            assert!(q.contains(&s.headers[ex.gold.select_column].to_lowercase()), "{q}");
        }
    }
}
