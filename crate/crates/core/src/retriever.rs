//! Exact nearest-neighbor pattern retrieval over question vectors, the
//! negative-sampling loss that shapes those vectors, and index persistence.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::encoder::{example_layout, QuestionEncoder};
use crate::error::{Error, Result};
use crate::nn::{l2, log_sum_exp};
use crate::sql_logic::PatternId;

/// Number of negatives per training anchor.
pub const NEGATIVES: usize = 5;
/// Neighbors consulted by default.
pub const DEFAULT_K: usize = 10;
/// Retrieval sets smaller than this vote with a single neighbor.
pub const SMALL_SET_THRESHOLD: usize = 1000;

const INDEX_MAGIC: &[u8; 8] = b"RSQLIDX\0";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub q_vector: Vec<f64>,
    pub pattern: PatternId,
    pub example_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub entries: Vec<IndexEntry>,
    pub d_q: usize,
    pub source_tag: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub example_id: String,
    pub pattern: PatternId,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub neighbors: Vec<Neighbor>,
    pub chosen_pattern: PatternId,
}

/// How many neighbors vote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NeighborCount {
    /// 1 for retrieval sets under [`SMALL_SET_THRESHOLD`] entries, else [`DEFAULT_K`].
    #[default]
    Auto,
    Fixed(usize),
}

// written as "auto" or a number in config files
impl Serialize for NeighborCount {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            NeighborCount::Auto => s.serialize_str("auto"),
            NeighborCount::Fixed(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for NeighborCount {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(usize),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(k) if k > 0 => Ok(NeighborCount::Fixed(k)),
            Raw::Str(s) if s == "auto" => Ok(NeighborCount::Auto),
            _ => Err(serde::de::Error::custom("expected \"auto\" or a positive neighbor count")),
        }
    }
}

impl NeighborCount {
    pub fn resolve(self, index_size: usize) -> usize {
        match self {
            NeighborCount::Fixed(k) => k.max(1),
            NeighborCount::Auto if index_size < SMALL_SET_THRESHOLD => 1,
            NeighborCount::Auto => DEFAULT_K,
        }
    }
}

impl RetrievalIndex {
    pub fn new(d_q: usize, source_tag: impl Into<String>, entries: Vec<IndexEntry>) -> Result<Self> {
        for e in &entries {
            if e.q_vector.len() != d_q {
                return Err(Error::DimensionMismatch {
                    expected: d_q,
                    actual: e.q_vector.len(),
                });
            }
        }
        Ok(RetrievalIndex {
            entries,
            d_q,
            source_tag: source_tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Exact `k` nearest entries by L2 distance; ties keep index order.
    pub fn retrieve(&self, q: &[f64], k: usize) -> Result<RetrievalResult> {
        if self.entries.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if q.len() != self.d_q {
            return Err(Error::DimensionMismatch {
                expected: self.d_q,
                actual: q.len(),
            });
        }
        let k = k.clamp(1, self.entries.len());
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (l2(q, &e.q_vector), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        let neighbors: Vec<Neighbor> = scored
            .into_iter()
            .map(|(distance, i)| Neighbor {
                example_id: self.entries[i].example_id.clone(),
                pattern: self.entries[i].pattern,
                distance,
            })
            .collect();
        let chosen_pattern = vote(&neighbors);
        Ok(RetrievalResult {
            neighbors,
            chosen_pattern,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_u32::<LittleEndian>(INDEX_VERSION)?;
        w.write_u32::<LittleEndian>(self.d_q as u32)?;
        w.write_u64::<LittleEndian>(self.entries.len() as u64)?;
        write_str(w, &self.source_tag)?;
        for e in &self.entries {
            for &v in &e.q_vector {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        for e in &self.entries {
            w.write_u16::<LittleEndian>(e.pattern.0)?;
        }
        for e in &self.entries {
            write_str(w, &e.example_id)?;
        }
        Ok(())
    }

    /// Loads an index; `expected_d_q` rejects files built for another encoder.
    pub fn load(path: &Path, expected_d_q: Option<usize>) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |what: &str| Error::VersionMismatch(format!("{}: {what}", path.display()));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != INDEX_MAGIC {
            return Err(bad("not a retrieval index file"));
        }
        let io = |e| Error::io(path, e);
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != INDEX_VERSION {
            return Err(bad(&format!("index version {version}, expected {INDEX_VERSION}")));
        }
        let d_q = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if let Some(expected) = expected_d_q {
            if expected != d_q {
                return Err(Error::DimensionMismatch { expected, actual: d_q });
            }
        }
        let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let source_tag = read_str(&mut r).map_err(io)?;
        let mut vectors = Vec::with_capacity(n);
        for _ in 0..n {
            let mut v = vec![0.0; d_q];
            r.read_f64_into::<LittleEndian>(&mut v).map_err(io)?;
            vectors.push(v);
        }
        let mut patterns = Vec::with_capacity(n);
        for _ in 0..n {
            let p = r.read_u16::<LittleEndian>().map_err(io)?;
            if p as usize >= crate::sql_logic::enumerate_taxonomy().len() {
                return Err(bad(&format!("pattern id {p} outside the taxonomy")));
            }
            patterns.push(PatternId(p));
        }
        let mut entries = Vec::with_capacity(n);
        for (q_vector, pattern) in vectors.into_iter().zip(patterns) {
            entries.push(IndexEntry {
                q_vector,
                pattern,
                example_id: read_str(&mut r).map_err(io)?,
            });
        }
        RetrievalIndex::new(d_q, source_tag, entries)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> std::io::Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// Encodes every example of `dataset` with a frozen encoder.
pub fn build_index(dataset: &Dataset, encoder: &(impl QuestionEncoder + Sync), source_tag: &str) -> Result<RetrievalIndex> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let entries = dataset
        .examples
        .par_iter()
        .map(|ex| {
            let layout = example_layout(ex, dataset.schema(ex))?;
            Ok(IndexEntry {
                q_vector: encoder.encode(&layout).q,
                pattern: ex.pattern(),
                example_id: ex.id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RetrievalIndex::new(encoder.config().d_q, source_tag, entries)
}

/// A fresh index over `new_dataset` from the unchanged encoder; the encoder
/// is only borrowed immutably.
pub fn swap_retrieval_set(
    encoder: &(impl QuestionEncoder + Sync),
    new_dataset: &Dataset,
    source_tag: &str,
) -> Result<RetrievalIndex> {
    build_index(new_dataset, encoder, source_tag)
}

/// Most frequent pattern among `neighbors` (sorted by distance); ties go to
/// the pattern whose closest representative comes first.
pub fn vote(neighbors: &[Neighbor]) -> PatternId {
    let mut tally: HashMap<PatternId, (usize, usize)> = HashMap::new();
    for (rank, n) in neighbors.iter().enumerate() {
        tally.entry(n.pattern).or_insert((0, rank)).0 += 1;
    }
    tally
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .map(|(p, _)| p)
        .expect("vote needs at least one neighbor")
}

/// Value and gradients of the negative-sampling loss.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalLoss {
    pub loss: f64,
    pub distances: Vec<f64>,
    pub d_anchor: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negatives: Vec<Vec<f64>>,
}

/// `-log softmax(-d)[positive]` over the L2 distances from the anchor to the
/// positive and each negative.
pub fn retrieval_loss(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>]) -> Result<RetrievalLoss> {
    let dim = anchor.len();
    for v in std::iter::once(positive).chain(negatives.iter().map(Vec::as_slice)) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
    }
    let others: Vec<&[f64]> = std::iter::once(positive)
        .chain(negatives.iter().map(Vec::as_slice))
        .collect();
    let distances: Vec<f64> = others.iter().map(|o| l2(anchor, o)).collect();
    let logits: Vec<f64> = distances.iter().map(|d| -d).collect();
    let lse = log_sum_exp(&logits);
    let loss = distances[0] + lse;

    let mut d_anchor = vec![0.0; dim];
    let mut d_others = vec![vec![0.0; dim]; others.len()];
    for (j, (o, &d)) in others.iter().zip(&distances).enumerate() {
        let p = (logits[j] - lse).exp();
        let dl_dd = if j == 0 { 1.0 - p } else { -p };
        if d == 0.0 || dl_dd == 0.0 {
            continue;
        }
        for k in 0..dim {
            let unit = (anchor[k] - o[k]) / d;
            d_anchor[k] += dl_dd * unit;
            d_others[j][k] -= dl_dd * unit;
        }
    }
    let d_positive = d_others.remove(0);
    Ok(RetrievalLoss {
        loss,
        distances,
        d_anchor,
        d_positive,
        d_negatives: d_others,
    })
}

/// Indices of one positive and [`NEGATIVES`] negatives for an anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sextet {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Per-pattern example pools for drawing training sextets.
#[derive(Debug, Clone)]
pub struct TrainingSampler {
    patterns: Vec<PatternId>,
    by_pattern: BTreeMap<PatternId, Vec<usize>>,
}

impl TrainingSampler {
    pub fn new(patterns: Vec<PatternId>) -> Self {
        let mut by_pattern: BTreeMap<PatternId, Vec<usize>> = BTreeMap::new();
        for (i, &p) in patterns.iter().enumerate() {
            by_pattern.entry(p).or_default().push(i);
        }
        TrainingSampler { patterns, by_pattern }
    }

    pub fn from_dataset(dataset: &Dataset) -> Self {
        Self::new(dataset.examples.iter().map(|e| e.pattern()).collect())
    }

    /// True when at least one anchor can get both a positive and a negative.
    pub fn has_contrast(&self) -> bool {
        self.by_pattern.len() >= 2 && self.by_pattern.values().any(|v| v.len() >= 2)
    }

    pub fn sample(&self, anchor: usize, seed: u64) -> Result<Sextet> {
        self.sample_with(anchor, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Positive: another example with the anchor's pattern. Negatives: distinct
    /// examples of other patterns, drawn with replacement only when fewer than
    /// [`NEGATIVES`] exist.
    pub fn sample_with(&self, anchor: usize, rng: &mut impl Rng) -> Result<Sextet> {
        let pattern = self.patterns[anchor];
        let same = &self.by_pattern[&pattern];
        if same.len() < 2 {
            return Err(Error::NoPositiveAvailable(anchor));
        }
        let mut pick = rng.gen_range(0..same.len() - 1);
        if same[pick] == anchor {
            pick = same.len() - 1;
        }
        let positive = same[pick];

        let n_other = self.patterns.len() - same.len();
        if n_other == 0 {
            return Err(Error::NoNegativeAvailable(anchor));
        }
        // the k-th example outside the anchor's pattern, by global index
        let nth_other = |k: usize| -> usize {
            let mut lo = 0;
            let mut seen = 0;
            for &i in same {
                let gap = i - lo;
                if k < seen + gap {
                    return lo + (k - seen);
                }
                seen += gap;
                lo = i + 1;
            }
            lo + (k - seen)
        };
        let negatives = if n_other >= NEGATIVES {
            index::sample(rng, n_other, NEGATIVES).into_iter().map(nth_other).collect()
        } else {
            (0..NEGATIVES).map(|_| nth_other(rng.gen_range(0..n_other))).collect()
        };
        Ok(Sextet {
            anchor,
            positive,
            negatives,
        })
    }

    /// Redraws the negatives of `sextet` from `pool` when it holds at least
    /// [`NEGATIVES`] distinct examples of other patterns; returns whether it
    /// did. A training batch can then reuse encodings it already has.
    pub fn redraw_negatives_from(&self, sextet: &mut Sextet, pool: &[usize], rng: &mut impl Rng) -> bool {
        let pattern = self.patterns[sextet.anchor];
        let mut others: Vec<usize> = pool.iter().copied().filter(|&i| self.patterns[i] != pattern).collect();
        others.sort_unstable();
        others.dedup();
        if others.len() < NEGATIVES {
            return false;
        }
        sextet.negatives = index::sample(rng, others.len(), NEGATIVES).into_iter().map(|k| others[k]).collect();
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(v: &[f64], p: u16, id: &str) -> IndexEntry {
        IndexEntry {
            q_vector: v.to_vec(),
            pattern: PatternId(p),
            example_id: id.into(),
        }
    }

    fn neighbor(p: u16, d: f64) -> Neighbor {
        Neighbor {
            example_id: String::new(),
            pattern: PatternId(p),
            distance: d,
        }
    }

    #[test]
    fn retrieve_toy_index() {
        let idx = RetrievalIndex::new(
            2,
            "toy",
            vec![entry(&[0.0, 0.0], 1, "a"), entry(&[3.0, 4.0], 2, "b"), entry(&[1.0, 1.0], 3, "c")],
        )
        .unwrap();
        let r = idx.retrieve(&[3.0, 4.0], 1).unwrap();
        assert_eq!(r.neighbors[0].example_id, "b");
        assert_eq!(r.neighbors[0].distance, 0.0);
        assert_eq!(r.chosen_pattern, PatternId(2));

        // distances from (0.5, 0.5): a = 0.7071, c = 0.7071, b = 5.1478; tie keeps index order
        let r = idx.retrieve(&[0.5, 0.5], 10).unwrap();
        let ids: Vec<&str> = r.neighbors.iter().map(|n| n.example_id.as_str()).collect();
        assert_eq!(ids, ["a", "c", "b"]);
        assert!((r.neighbors[2].distance - (2.5f64 * 2.5 + 3.5 * 3.5).sqrt()).abs() < 1e-12);

        let empty = RetrievalIndex::new(2, "e", vec![]).unwrap();
        assert!(matches!(empty.retrieve(&[0.0, 0.0], 1), Err(Error::EmptyIndex)));
        assert!(matches!(idx.retrieve(&[0.0], 1), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn voting() {
        let mut ns: Vec<Neighbor> = (0..6).map(|i| neighbor(1, i as f64)).collect();
        ns.extend((0..4).map(|i| neighbor(2, i as f64 + 0.5)));
        ns.sort_by(|a, b| a.distance.total_cmp(&b.distance));
        assert_eq!(vote(&ns), PatternId(1));
        assert_eq!(vote(&[neighbor(1, 1.0), neighbor(2, 2.0)]), PatternId(1));
        assert_eq!(vote(&[neighbor(7, 0.3)]), PatternId(7));
    }

    #[test]
    fn loss_analytic_values() {
        let a = vec![0.0; 3];
        let pos = vec![0.0; 3];
        let negs: Vec<Vec<f64>> = (0..5).map(|_| vec![100.0, 0.0, 0.0]).collect();
        assert!(retrieval_loss(&a, &pos, &negs).unwrap().loss < 1e-20);

        let ring: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                let t = i as f64 * std::f64::consts::PI / 3.0;
                vec![t.cos(), t.sin(), 0.0]
            })
            .collect();
        let l = retrieval_loss(&a, &ring[0], &ring[1..]).unwrap();
        assert!((l.loss - 6f64.ln()).abs() < 1e-12);

        // distances [1, 2, 2, 2, 2, 2]
        let pos = vec![1.0, 0.0, 0.0];
        let negs: Vec<Vec<f64>> = (0..5).map(|_| vec![0.0, 2.0, 0.0]).collect();
        let expected = -((-1f64).exp() / ((-1f64).exp() + 5.0 * (-2f64).exp())).ln();
        assert!((retrieval_loss(&a, &pos, &negs).unwrap().loss - expected).abs() < 1e-14);

        assert!(matches!(
            retrieval_loss(&a, &[0.0], &negs),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let a = vec![0.3, -0.2, 0.9];
        let pos = vec![0.1, 0.4, -0.5];
        let negs: Vec<Vec<f64>> = (0..5)
            .map(|i| vec![(i as f64).sin(), (i as f64 * 2.0).cos(), 0.2 * i as f64])
            .collect();
        let l = retrieval_loss(&a, &pos, &negs).unwrap();
        let eps = 1e-6;
        for k in 0..3 {
            let mut up = a.clone();
            up[k] += eps;
            let mut dn = a.clone();
            dn[k] -= eps;
            let num = (retrieval_loss(&up, &pos, &negs).unwrap().loss - retrieval_loss(&dn, &pos, &negs).unwrap().loss) / (2.0 * eps);
            assert!((num - l.d_anchor[k]).abs() < 1e-8);
            let mut up = negs.clone();
            up[2][k] += eps;
            let mut dn = negs.clone();
            dn[2][k] -= eps;
            let num = (retrieval_loss(&a, &pos, &up).unwrap().loss - retrieval_loss(&a, &pos, &dn).unwrap().loss) / (2.0 * eps);
            assert!((num - l.d_negatives[2][k]).abs() < 1e-8);
        }
    }

    #[test]
    fn pooled_negatives() {
        let s = TrainingSampler::new([0, 0, 1, 1, 2, 2, 3, 4, 5].map(PatternId).to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut x = s.sample_with(0, &mut rng).unwrap();
        assert!(!s.redraw_negatives_from(&mut x, &[1, 2, 4], &mut rng));
        let pool = [0, 1, 2, 3, 4, 6, 7, 8];
        assert!(s.redraw_negatives_from(&mut x, &pool, &mut rng));
        let mut n = x.negatives.clone();
        n.sort_unstable();
        n.dedup();
        assert_eq!(n.len(), NEGATIVES);
        assert!(n.iter().all(|i| pool.contains(i) && *i >= 2));
    }

    #[test]
    fn sextets() {
        let patterns: Vec<PatternId> = (0..14).map(|i| PatternId(if i < 7 { 1 } else { 2 })).collect();
        let s = TrainingSampler::new(patterns.clone());
        assert!(s.has_contrast());
        for anchor in 0..14 {
            let x = s.sample(anchor, 42).unwrap();
            assert_ne!(x.positive, anchor);
            assert_eq!(patterns[x.positive], patterns[anchor]);
            assert_eq!(x.negatives.len(), NEGATIVES);
            assert!(x.negatives.iter().all(|&n| patterns[n] != patterns[anchor]));
            let mut uniq = x.negatives.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), NEGATIVES);
            assert_eq!(s.sample(anchor, 42).unwrap(), x);
        }

        let lonely = TrainingSampler::new(vec![PatternId(1), PatternId(2), PatternId(2)]);
        assert!(matches!(lonely.sample(0, 1), Err(Error::NoPositiveAvailable(0))));
        let x = lonely.sample(1, 1).unwrap();
        assert_eq!(x.positive, 2);
        assert!(x.negatives.iter().all(|&n| n == 0));

        let single = TrainingSampler::new(vec![PatternId(3); 4]);
        assert!(!single.has_contrast());
        assert!(matches!(single.sample(0, 1), Err(Error::NoNegativeAvailable(0))));
    }

    #[test]
    fn neighbor_count_presets() {
        assert_eq!(NeighborCount::Auto.resolve(881), 1);
        assert_eq!(NeighborCount::Auto.resolve(56_355), 10);
        assert_eq!(NeighborCount::Fixed(0).resolve(5), 1);
    }

    #[test]
    fn index_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        let idx = RetrievalIndex::new(2, "train", vec![entry(&[0.25, -1.5], 4, "x-1"), entry(&[1e-300, 7.0], 209, "é")]).unwrap();
        idx.save(&path).unwrap();
        assert_eq!(RetrievalIndex::load(&path, Some(2)).unwrap(), idx);
        assert!(matches!(
            RetrievalIndex::load(&path, Some(3)),
            Err(Error::DimensionMismatch { expected: 3, actual: 2 })
        ));
    }
}
