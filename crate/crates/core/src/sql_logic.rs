//! Logical forms, their delexicalized patterns, and the pattern taxonomy.
//!
//! A [`SqlQuery`] is a single-table query: one selected column with an
//! optional aggregation and up to four AND-joined comparison conditions.
//! Stripping columns and values leaves a [`LogicalPattern`]; there are
//! 6 aggregations times 35 condition multisets, 210 patterns in total.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of where-conditions in a query.
pub const MAX_CONDITIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AggOp {
    None,
    Max,
    Min,
    Count,
    Sum,
    Avg,
}

impl AggOp {
    /// All aggregations in the WikiSQL code order.
    pub const ALL: [AggOp; 6] = [
        AggOp::None,
        AggOp::Max,
        AggOp::Min,
        AggOp::Count,
        AggOp::Sum,
        AggOp::Avg,
    ];

    pub fn from_code(code: i64) -> Option<Self> {
        usize::try_from(code).ok().and_then(|i| Self::ALL.get(i).copied())
    }

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn keyword(self) -> &'static str {
        match self {
            AggOp::None => "",
            AggOp::Max => "MAX",
            AggOp::Min => "MIN",
            AggOp::Count => "COUNT",
            AggOp::Sum => "SUM",
            AggOp::Avg => "AVG",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Gt,
    Lt,
}

impl CmpOp {
    pub const ALL: [CmpOp; 3] = [CmpOp::Eq, CmpOp::Gt, CmpOp::Lt];

    pub fn from_code(code: i64) -> Option<Self> {
        usize::try_from(code).ok().and_then(|i| Self::ALL.get(i).copied())
    }

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Gt => ">",
            CmpOp::Lt => "<",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub column: usize,
    pub op: CmpOp,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SqlQuery {
    pub select_column: usize,
    pub agg: AggOp,
    pub conditions: Vec<Condition>,
}

impl SqlQuery {
    /// Builds a query, enforcing the condition-count and distinct-column invariants.
    pub fn new(select_column: usize, agg: AggOp, conditions: Vec<Condition>) -> Result<Self> {
        if conditions.len() > MAX_CONDITIONS {
            return Err(Error::malformed(
                None,
                format!("{} conditions, at most {MAX_CONDITIONS} allowed", conditions.len()),
            ));
        }
        for (i, c) in conditions.iter().enumerate() {
            if c.value.trim().is_empty() {
                return Err(Error::malformed(None, format!("condition {i} has an empty value")));
            }
            if conditions[..i].iter().any(|p| p.column == c.column) {
                return Err(Error::malformed(
                    None,
                    format!("duplicate where column {}", c.column),
                ));
            }
        }
        Ok(SqlQuery {
            select_column,
            agg,
            conditions,
        })
    }

    /// Largest column index referenced anywhere in the query.
    pub fn max_column(&self) -> usize {
        self.conditions
            .iter()
            .map(|c| c.column)
            .chain(std::iter::once(self.select_column))
            .max()
            .unwrap_or(0)
    }

    /// Conditions stably sorted into the canonical operator order used by templates.
    pub fn canonical_conditions(&self) -> Vec<(usize, &Condition)> {
        let mut conds: Vec<(usize, &Condition)> = self.conditions.iter().enumerate().collect();
        conds.sort_by_key(|(_, c)| c.op);
        conds
    }
}

/// A raw WikiSQL `sql` record: `{sel, agg, conds: [[col, op, value], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlRecord {
    pub sel: i64,
    pub agg: i64,
    pub conds: Vec<(i64, i64, serde_json::Value)>,
}

/// Converts a WikiSQL-convention record into a validated query.
pub fn parse_query(record: &SqlRecord) -> Result<SqlQuery> {
    let select_column = usize::try_from(record.sel)
        .map_err(|_| Error::malformed(None, format!("negative select column {}", record.sel)))?;
    let agg = AggOp::from_code(record.agg)
        .ok_or_else(|| Error::malformed(None, format!("aggregation code {} out of range", record.agg)))?;
    let conditions = record
        .conds
        .iter()
        .map(|(col, op, value)| {
            let column = usize::try_from(*col)
                .map_err(|_| Error::malformed(None, format!("negative where column {col}")))?;
            let op = CmpOp::from_code(*op)
                .ok_or_else(|| Error::malformed(None, format!("operator code {op} out of range")))?;
            let value = match value {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(n) => n.to_string(),
                other => {
                    return Err(Error::malformed(None, format!("unsupported condition value {other}")))
                }
            };
            Ok(Condition { column, op, value })
        })
        .collect::<Result<Vec<_>>>()?;
    SqlQuery::new(select_column, agg, conditions)
}

/// Inverse of [`parse_query`].
pub fn to_record(query: &SqlQuery) -> SqlRecord {
    SqlRecord {
        sel: query.select_column as i64,
        agg: query.agg.code() as i64,
        conds: query
            .conditions
            .iter()
            .map(|c| (c.column as i64, c.op.code() as i64, serde_json::Value::String(c.value.clone())))
            .collect(),
    }
}

/// Aggregation plus the sorted multiset of comparison operators.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LogicalPattern {
    agg: AggOp,
    cond_ops: Vec<CmpOp>,
}

impl LogicalPattern {
    pub fn new(agg: AggOp, mut cond_ops: Vec<CmpOp>) -> Result<Self> {
        if cond_ops.len() > MAX_CONDITIONS {
            return Err(Error::malformed(None, "pattern with more than 4 conditions"));
        }
        cond_ops.sort();
        Ok(LogicalPattern { agg, cond_ops })
    }

    pub fn agg(&self) -> AggOp {
        self.agg
    }

    pub fn cond_ops(&self) -> &[CmpOp] {
        &self.cond_ops
    }

    pub fn id(&self) -> PatternId {
        let pos = where_patterns()
            .iter()
            .position(|w| w == &self.cond_ops)
            .expect("canonical condition multiset is always enumerated");
        PatternId((self.agg.code() * where_patterns().len() + pos) as u16)
    }
}

impl fmt::Display for LogicalPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", pattern_to_template(self))
    }
}

/// Stable index of a pattern in [`enumerate_taxonomy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatternId(pub u16);

impl PatternId {
    pub fn pattern(self) -> &'static LogicalPattern {
        &enumerate_taxonomy()[self.0 as usize]
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for PatternId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{:03}", self.0)
    }
}

pub fn delexicalize(query: &SqlQuery) -> LogicalPattern {
    let mut cond_ops: Vec<CmpOp> = query.conditions.iter().map(|c| c.op).collect();
    cond_ops.sort();
    LogicalPattern {
        agg: query.agg,
        cond_ops,
    }
}

/// The 35 condition multisets, ordered by size then lexicographically.
fn where_patterns() -> &'static [Vec<CmpOp>] {
    static WHERE: OnceLock<Vec<Vec<CmpOp>>> = OnceLock::new();
    WHERE.get_or_init(|| {
        let mut out = vec![Vec::new()];
        let mut frontier = vec![Vec::<CmpOp>::new()];
        for _ in 0..MAX_CONDITIONS {
            let mut next = Vec::new();
            for prefix in &frontier {
                // non-decreasing extension keeps each multiset in canonical order once
                for op in CmpOp::ALL {
                    if prefix.last().is_none_or(|&last| last <= op) {
                        let mut p = prefix.clone();
                        p.push(op);
                        next.push(p);
                    }
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    })
}

/// All 210 patterns: aggregation-major, then condition count, then operator order.
pub fn enumerate_taxonomy() -> &'static [LogicalPattern] {
    static ALL: OnceLock<Vec<LogicalPattern>> = OnceLock::new();
    ALL.get_or_init(|| {
        AggOp::ALL
            .iter()
            .flat_map(|&agg| {
                where_patterns().iter().map(move |ops| LogicalPattern {
                    agg,
                    cond_ops: ops.clone(),
                })
            })
            .collect()
    })
}

/// Number of distinct where-clause multisets.
pub fn where_pattern_count() -> usize {
    where_patterns().len()
}

/// SQL keyword tokens. Each has a dedicated element token in the encoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SqlElement {
    Select,
    Where,
    And,
    Agg(AggOp),
    Cmp(CmpOp),
    Col,
}

impl SqlElement {
    /// The element tokens in the order they appear in the encoder input.
    pub const ALL: [SqlElement; 12] = [
        SqlElement::Select,
        SqlElement::Where,
        SqlElement::And,
        SqlElement::Agg(AggOp::Max),
        SqlElement::Agg(AggOp::Min),
        SqlElement::Agg(AggOp::Count),
        SqlElement::Agg(AggOp::Sum),
        SqlElement::Agg(AggOp::Avg),
        SqlElement::Cmp(CmpOp::Eq),
        SqlElement::Cmp(CmpOp::Gt),
        SqlElement::Cmp(CmpOp::Lt),
        SqlElement::Col,
    ];

    pub fn token(self) -> &'static str {
        match self {
            SqlElement::Select => "[SELECT]",
            SqlElement::Where => "[WHERE]",
            SqlElement::And => "[AND]",
            SqlElement::Agg(AggOp::Max) => "[MAX]",
            SqlElement::Agg(AggOp::Min) => "[MIN]",
            SqlElement::Agg(AggOp::Count) => "[COUNT]",
            SqlElement::Agg(AggOp::Sum) => "[SUM]",
            SqlElement::Agg(AggOp::Avg) => "[AVG]",
            // NONE has no keyword and never appears in a template
            SqlElement::Agg(AggOp::None) => "[COL]",
            SqlElement::Cmp(CmpOp::Eq) => "[=]",
            SqlElement::Cmp(CmpOp::Gt) => "[>]",
            SqlElement::Cmp(CmpOp::Lt) => "[<]",
            SqlElement::Col => "[COL]",
        }
    }

    /// Position of this element among [`SqlElement::ALL`].
    pub fn index(self) -> usize {
        Self::ALL
            .iter()
            .position(|&e| e == self)
            .unwrap_or(Self::ALL.len() - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotKind {
    SelectCol,
    WhereCol,
    WhereVal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateToken {
    Fixed(SqlElement),
    Slot { kind: SlotKind, cond: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotTemplate {
    pub pattern: LogicalPattern,
    pub tokens: Vec<TemplateToken>,
}

impl SlotTemplate {
    pub fn slot_count(&self) -> usize {
        self.tokens
            .iter()
            .filter(|t| matches!(t, TemplateToken::Slot { .. }))
            .count()
    }
}

impl fmt::Display for SlotTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut slot = 0;
        let parts: Vec<String> = self
            .tokens
            .iter()
            .map(|t| match t {
                TemplateToken::Fixed(e) => e.token().trim_matches(['[', ']']).to_string(),
                TemplateToken::Slot { .. } => {
                    slot += 1;
                    format!("#{slot}")
                }
            })
            .collect();
        f.write_str(&parts.join(" "))
    }
}

pub fn pattern_to_template(pattern: &LogicalPattern) -> SlotTemplate {
    let mut tokens = vec![TemplateToken::Fixed(SqlElement::Select)];
    if pattern.agg != AggOp::None {
        tokens.push(TemplateToken::Fixed(SqlElement::Agg(pattern.agg)));
    }
    tokens.push(TemplateToken::Slot {
        kind: SlotKind::SelectCol,
        cond: 0,
    });
    for (i, &op) in pattern.cond_ops.iter().enumerate() {
        tokens.push(TemplateToken::Fixed(if i == 0 {
            SqlElement::Where
        } else {
            SqlElement::And
        }));
        tokens.push(TemplateToken::Slot {
            kind: SlotKind::WhereCol,
            cond: i,
        });
        tokens.push(TemplateToken::Fixed(SqlElement::Cmp(op)));
        tokens.push(TemplateToken::Slot {
            kind: SlotKind::WhereVal,
            cond: i,
        });
    }
    SlotTemplate {
        pattern: pattern.clone(),
        tokens,
    }
}

/// Renders `SELECT AGG(header) WHERE header op value AND ...`.
pub fn canonical_sql_string(query: &SqlQuery, headers: &[String]) -> Result<String> {
    let header = |col: usize| {
        headers.get(col).ok_or(Error::SchemaMismatch {
            column: col,
            headers: headers.len(),
        })
    };
    let mut out = format!("SELECT {}({})", query.agg.keyword(), header(query.select_column)?);
    for (i, c) in query.conditions.iter().enumerate() {
        out.push_str(if i == 0 { " WHERE " } else { " AND " });
        out.push_str(&format!("{} {} {}", header(c.column)?, c.op.symbol(), c.value));
    }
    Ok(out)
}

/// Lowercased, trimmed, internal whitespace collapsed.
pub fn normalize_value(value: &str) -> String {
    value
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Logical-form equality: conditions compared as a multiset with normalized values.
pub fn queries_equal(a: &SqlQuery, b: &SqlQuery) -> bool {
    if a.select_column != b.select_column || a.agg != b.agg || a.conditions.len() != b.conditions.len() {
        return false;
    }
    let key = |q: &SqlQuery| {
        let mut k: Vec<(usize, CmpOp, String)> = q
            .conditions
            .iter()
            .map(|c| (c.column, c.op, normalize_value(&c.value)))
            .collect();
        k.sort();
        k
    };
    key(a) == key(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn record(v: serde_json::Value) -> SqlRecord {
        serde_json::from_value(v).unwrap()
    }

    fn cond(column: usize, op: CmpOp, value: &str) -> Condition {
        Condition {
            column,
            op,
            value: value.into(),
        }
    }

    #[test]
    fn parses_figure_one_record() {
        let q = parse_query(&record(json!({"sel": 5, "agg": 0, "conds": [[2, 0, "South Korea"]]}))).unwrap();
        assert_eq!(q.select_column, 5);
        assert_eq!(q.agg, AggOp::None);
        assert_eq!(q.conditions, vec![cond(2, CmpOp::Eq, "South Korea")]);
    }

    #[test]
    fn parses_count_without_conditions() {
        let q = parse_query(&record(json!({"sel": 0, "agg": 3, "conds": []}))).unwrap();
        assert_eq!(q.agg, AggOp::Count);
        assert!(q.conditions.is_empty());
    }

    #[test]
    fn rejects_malformed_records() {
        let bad = [
            json!({"sel": 1, "agg": 0, "conds": [[0, 0, "a"], [0, 1, "b"]]}),
            json!({"sel": 1, "agg": 6, "conds": []}),
            json!({"sel": 1, "agg": 0, "conds": [[0, 3, "a"]]}),
            json!({"sel": -1, "agg": 0, "conds": []}),
            json!({"sel": 1, "agg": 0, "conds": [[0, 0, "a"], [1, 0, "b"], [2, 0, "c"], [3, 0, "d"], [4, 0, "e"]]}),
            json!({"sel": 1, "agg": 0, "conds": [[0, 0, "  "]]}),
        ];
        for r in bad {
            assert!(
                matches!(parse_query(&record(r.clone())), Err(Error::MalformedRecord { .. })),
                "{r}"
            );
        }
    }

    #[test]
    fn numeric_values_become_text() {
        let q = parse_query(&record(json!({"sel": 0, "agg": 0, "conds": [[1, 1, 2005]]}))).unwrap();
        assert_eq!(q.conditions[0].value, "2005");
    }

    #[test]
    fn delexicalize_examples() {
        let q = SqlQuery::new(5, AggOp::None, vec![cond(2, CmpOp::Eq, "South Korea")]).unwrap();
        let p = delexicalize(&q);
        assert_eq!(p, LogicalPattern::new(AggOp::None, vec![CmpOp::Eq]).unwrap());
        assert_eq!(pattern_to_template(&p).to_string(), "SELECT #1 WHERE #2 = #3");

        let count = SqlQuery::new(0, AggOp::Count, vec![]).unwrap();
        assert_eq!(delexicalize(&count).cond_ops(), &[] as &[CmpOp]);

        let a = SqlQuery::new(0, AggOp::Sum, vec![cond(1, CmpOp::Gt, "1"), cond(2, CmpOp::Eq, "x")]).unwrap();
        let b = SqlQuery::new(3, AggOp::Sum, vec![cond(2, CmpOp::Eq, "y"), cond(1, CmpOp::Gt, "2")]).unwrap();
        assert_eq!(delexicalize(&a), delexicalize(&b));
        assert_eq!(delexicalize(&a).cond_ops(), &[CmpOp::Eq, CmpOp::Gt]);
    }

    #[test]
    fn taxonomy_counts() {
        let all = enumerate_taxonomy();
        assert_eq!(all.len(), 210);
        assert_eq!(where_pattern_count(), 35);
        assert_eq!(all.iter().filter(|p| p.cond_ops().len() == 2).count(), 36);
        for (i, p) in all.iter().enumerate() {
            assert_eq!(p.id(), PatternId(i as u16));
        }
        // ordering: agg-major, then size, then operator order
        for w in all.windows(2) {
            let ka = (w[0].agg(), w[0].cond_ops().len(), w[0].cond_ops().to_vec());
            let kb = (w[1].agg(), w[1].cond_ops().len(), w[1].cond_ops().to_vec());
            assert!(ka < kb);
        }
    }

    #[test]
    fn templates() {
        use SlotKind::*;
        let t = pattern_to_template(&LogicalPattern::new(AggOp::None, vec![CmpOp::Eq]).unwrap());
        assert_eq!(
            t.tokens,
            vec![
                TemplateToken::Fixed(SqlElement::Select),
                TemplateToken::Slot { kind: SelectCol, cond: 0 },
                TemplateToken::Fixed(SqlElement::Where),
                TemplateToken::Slot { kind: WhereCol, cond: 0 },
                TemplateToken::Fixed(SqlElement::Cmp(CmpOp::Eq)),
                TemplateToken::Slot { kind: WhereVal, cond: 0 },
            ]
        );
        let t = pattern_to_template(&LogicalPattern::new(AggOp::Max, vec![]).unwrap());
        assert_eq!(
            t.tokens,
            vec![
                TemplateToken::Fixed(SqlElement::Select),
                TemplateToken::Fixed(SqlElement::Agg(AggOp::Max)),
                TemplateToken::Slot { kind: SelectCol, cond: 0 },
            ]
        );
        let t = pattern_to_template(&LogicalPattern::new(AggOp::None, vec![CmpOp::Gt, CmpOp::Eq]).unwrap());
        assert_eq!(t.slot_count(), 5);
        assert_eq!(t.tokens.iter().filter(|x| **x == TemplateToken::Fixed(SqlElement::And)).count(), 1);
        for p in enumerate_taxonomy() {
            assert_eq!(pattern_to_template(p).slot_count(), 1 + 2 * p.cond_ops().len());
        }
    }

    #[test]
    fn renders_sql() {
        let headers: Vec<String> = ["Player", "Country", "Points"].map(String::from).to_vec();
        let q = SqlQuery::new(2, AggOp::None, vec![cond(1, CmpOp::Eq, "South Korea")]).unwrap();
        assert_eq!(
            canonical_sql_string(&q, &headers).unwrap(),
            "SELECT (Points) WHERE Country = South Korea"
        );
        let q = SqlQuery::new(0, AggOp::Count, vec![]).unwrap();
        assert_eq!(canonical_sql_string(&q, &headers).unwrap(), "SELECT COUNT(Player)");
        let q = SqlQuery::new(7, AggOp::Count, vec![]).unwrap();
        assert!(matches!(canonical_sql_string(&q, &headers), Err(Error::SchemaMismatch { column: 7, .. })));
    }

    #[test]
    fn equality() {
        let a = SqlQuery::new(1, AggOp::None, vec![cond(2, CmpOp::Eq, "South  Korea "), cond(3, CmpOp::Gt, "5")]).unwrap();
        let b = SqlQuery::new(1, AggOp::None, vec![cond(3, CmpOp::Gt, "5"), cond(2, CmpOp::Eq, "south korea")]).unwrap();
        assert!(queries_equal(&a, &a));
        assert!(queries_equal(&a, &b));
        let mut c = b.clone();
        c.select_column = 0;
        assert!(!queries_equal(&a, &c));
    }
}
