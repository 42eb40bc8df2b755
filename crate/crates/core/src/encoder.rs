//! Question encoder.
//!
//! The input sequence is `[CLS] E [SEP] Q [SEP] H`, where `E` lists the SQL
//! element tokens (separated by `[SEP]`), `Q` the question tokens and `H` the
//! table headers, each header closed by `[SEP]`. Every position is embedded as
//! token + segment + role + lexical-match embeddings, then read by one
//! bidirectional LSTM. The sequence summary (both directions' states averaged
//! over all positions) is projected affinely to
//! `d_q + 2·d_h`; the first `d_q` entries are the retrieval vector `q`, the
//! rest seed the grounder (`g`).
//!
//! Header positions additionally receive the mean contextual vector of the
//! question positions that mention one of their tokens, so a column pointer
//! can see how the column is used in the question.

use std::collections::HashMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Example, ParaphrasePair, TableSchema};
use crate::error::{Error, Result};
use crate::nn::{axpy, sigmoid, Adam, LstmParams, LstmStep, Params, Tensor};
use crate::sql_logic::SqlElement;

pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_q: usize,
    pub d_h: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Width of the pointer scorer's hidden layer.
    pub pointer_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_q: 256,
            d_h: 100,
            embed_dim: 64,
            hidden_dim: 64,
            pointer_dim: 256,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn projection_dim(&self) -> usize {
        self.d_q + 2 * self.d_h
    }

    /// Width of a contextual token vector.
    pub fn token_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_q", self.d_q),
            ("d_h", self.d_h),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("pointer_dim", self.pointer_dim),
        ] {
            if v == 0 {
                return Err(Error::malformed(None, format!("encoder dimension {name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Token vocabulary with an unknown-token fallback at id 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in [UNK, CLS, SEP] {
            v.insert(t);
        }
        for e in SqlElement::ALL {
            v.insert(e.token());
        }
        v
    }
}

impl Vocab {
    /// Special tokens plus every distinct token of `words`, sorted.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab::default();
        v.extend(words);
        v
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let ids: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if ids.len() != tokens.len() || tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::VersionMismatch("vocabulary is not a list of distinct tokens starting with [UNK]".into()));
        }
        Ok(Vocab { tokens, ids })
    }

    /// Adds unseen words (sorted, so the result does not depend on iteration order).
    /// Returns the number added.
    pub fn extend<'a>(&mut self, words: impl IntoIterator<Item = &'a str>) -> usize {
        let mut fresh: Vec<&str> = words.into_iter().filter(|w| !self.ids.contains_key(*w)).collect();
        fresh.sort_unstable();
        fresh.dedup();
        for w in &fresh {
            self.insert(w);
        }
        fresh.len()
    }

    fn insert(&mut self, w: &str) {
        if !self.ids.contains_key(w) {
            self.ids.insert(w.to_string(), self.tokens.len());
            self.tokens.push(w.to_string());
        }
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Cls,
    Element,
    Separator,
    Question,
    HeaderStart,
    HeaderCont,
}

impl Role {
    pub const COUNT: usize = 6;

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputLayout {
    pub tokens: Vec<String>,
    pub segment_ids: Vec<u8>,
    pub roles: Vec<Role>,
    /// Token also occurs on the other side (question vs. headers, or first vs. second sentence).
    pub matched: Vec<bool>,
    /// Position of each element token, indexed like [`SqlElement::ALL`]. Empty for pair layouts.
    pub element_positions: Vec<usize>,
    pub question_positions: Range<usize>,
    pub header_anchor_positions: Vec<usize>,
    pub header_ranges: Vec<Range<usize>>,
    /// Question positions mentioning a token of each header.
    pub header_links: Vec<Vec<usize>>,
}

impl InputLayout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn element_position(&self, e: SqlElement) -> usize {
        self.element_positions[e.index()]
    }
}

/// The element tokens used in every input, in a fixed order.
pub fn element_tokens() -> Vec<&'static str> {
    SqlElement::ALL.iter().map(|e| e.token()).collect()
}

/// Lays out `[CLS] E [SEP] Q [SEP] H` with headers tokenized and closed by `[SEP]`.
pub fn build_input(question_tokens: &[String], headers: &[String], element_tokens: &[&str]) -> Result<InputLayout> {
    if question_tokens.is_empty() {
        return Err(Error::EmptyInput("question has no tokens"));
    }
    if headers.is_empty() {
        return Err(Error::EmptyInput("table has no headers"));
    }
    let header_tokens: Vec<Vec<String>> = headers.iter().map(|h| tokenize(h)).collect();
    if header_tokens.iter().any(Vec::is_empty) {
        return Err(Error::EmptyInput("header has no tokens"));
    }

    let mut l = LayoutBuilder::default();
    l.push(CLS, 0, Role::Cls);
    let mut element_positions = Vec::with_capacity(element_tokens.len());
    for (i, e) in element_tokens.iter().enumerate() {
        if i > 0 {
            l.push(SEP, 0, Role::Separator);
        }
        element_positions.push(l.push(e, 0, Role::Element));
    }
    l.push(SEP, 0, Role::Separator);
    let q_start = l.tokens.len();
    for t in question_tokens {
        l.push(t, 1, Role::Question);
    }
    let question_positions = q_start..l.tokens.len();
    l.push(SEP, 1, Role::Separator);

    let mut header_ranges = Vec::with_capacity(headers.len());
    for toks in &header_tokens {
        let start = l.tokens.len();
        for (k, t) in toks.iter().enumerate() {
            l.push(t, 1, if k == 0 { Role::HeaderStart } else { Role::HeaderCont });
        }
        header_ranges.push(start..l.tokens.len());
        l.push(SEP, 1, Role::Separator);
    }

    let header_links: Vec<Vec<usize>> = header_tokens
        .iter()
        .map(|toks| {
            question_positions
                .clone()
                .filter(|&p| toks.contains(&l.tokens[p]))
                .collect()
        })
        .collect();
    for (links, range) in header_links.iter().zip(&header_ranges) {
        for &p in links {
            l.matched[p] = true;
        }
        for p in range.clone() {
            l.matched[p] = question_tokens.contains(&l.tokens[p]);
        }
    }

    Ok(InputLayout {
        header_anchor_positions: header_ranges.iter().map(|r| r.start).collect(),
        tokens: l.tokens,
        segment_ids: l.segments,
        roles: l.roles,
        matched: l.matched,
        element_positions,
        question_positions,
        header_ranges,
        header_links,
    })
}

/// Input layout of a dataset example against its table.
pub fn example_layout(example: &Example, schema: &TableSchema) -> Result<InputLayout> {
    build_input(&example.tokens, &schema.headers, &element_tokens())
}

/// Lays out `[CLS] Q1 [SEP] Q2 [SEP]` for paraphrase classification.
pub fn build_pair_input(first: &[String], second: &[String]) -> Result<InputLayout> {
    if first.is_empty() || second.is_empty() {
        return Err(Error::EmptyInput("paraphrase pair has an empty question"));
    }
    let mut l = LayoutBuilder::default();
    l.push(CLS, 0, Role::Cls);
    for t in first {
        let p = l.push(t, 0, Role::Question);
        l.matched[p] = second.contains(t);
    }
    l.push(SEP, 0, Role::Separator);
    let start = l.tokens.len();
    for t in second {
        let p = l.push(t, 1, Role::Question);
        l.matched[p] = first.contains(t);
    }
    let question_positions = start..l.tokens.len();
    l.push(SEP, 1, Role::Separator);
    Ok(InputLayout {
        tokens: l.tokens,
        segment_ids: l.segments,
        roles: l.roles,
        matched: l.matched,
        element_positions: Vec::new(),
        question_positions,
        header_anchor_positions: Vec::new(),
        header_ranges: Vec::new(),
        header_links: Vec::new(),
    })
}

#[derive(Default)]
struct LayoutBuilder {
    tokens: Vec<String>,
    segments: Vec<u8>,
    roles: Vec<Role>,
    matched: Vec<bool>,
}

impl LayoutBuilder {
    fn push(&mut self, token: &str, segment: u8, role: Role) -> usize {
        self.tokens.push(token.to_string());
        self.segments.push(segment);
        self.roles.push(role);
        self.matched.push(false);
        self.tokens.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub tok_emb: Tensor,
    pub seg_emb: Tensor,
    pub role_emb: Tensor,
    pub match_emb: Tensor,
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

impl EncoderParams {
    pub fn new(config: &EncoderConfig, vocab_size: usize, rng: &mut impl Rng) -> Self {
        let (e, h) = (config.embed_dim, config.hidden_dim);
        EncoderParams {
            tok_emb: Tensor::uniform(vocab_size, e, rng),
            seg_emb: Tensor::uniform(2, e, rng),
            role_emb: Tensor::uniform(Role::COUNT, e, rng),
            match_emb: Tensor::uniform(2, e, rng),
            fwd: LstmParams::new(e, h, rng),
            bwd: LstmParams::new(e, h, rng),
            proj_w: Tensor::uniform(config.projection_dim(), 2 * h, rng),
            proj_b: Tensor::uniform(config.projection_dim(), 1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            tok_emb: self.tok_emb.zeros_like(),
            seg_emb: self.seg_emb.zeros_like(),
            role_emb: self.role_emb.zeros_like(),
            match_emb: self.match_emb.zeros_like(),
            fwd: self.fwd.zeros_like(),
            bwd: self.bwd.zeros_like(),
            proj_w: self.proj_w.zeros_like(),
            proj_b: self.proj_b.zeros_like(),
        }
    }

    /// Appends freshly initialized embedding rows for `extra` new vocabulary entries.
    pub fn grow_vocab(&mut self, extra: usize, rng: &mut impl Rng) {
        let fresh = Tensor::uniform(extra, self.tok_emb.cols, rng);
        self.tok_emb.data.extend(fresh.data);
        self.tok_emb.rows += extra;
    }
}

impl Params for EncoderParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            ("encoder.tok_emb".to_string(), &self.tok_emb),
            ("encoder.seg_emb".to_string(), &self.seg_emb),
            ("encoder.role_emb".to_string(), &self.role_emb),
            ("encoder.match_emb".to_string(), &self.match_emb),
        ];
        v.extend(self.fwd.named("encoder.fwd"));
        v.extend(self.bwd.named("encoder.bwd"));
        v.push(("encoder.proj_w".to_string(), &self.proj_w));
        v.push(("encoder.proj_b".to_string(), &self.proj_b));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![
            ("encoder.tok_emb".to_string(), &mut self.tok_emb),
            ("encoder.seg_emb".to_string(), &mut self.seg_emb),
            ("encoder.role_emb".to_string(), &mut self.role_emb),
            ("encoder.match_emb".to_string(), &mut self.match_emb),
        ];
        v.extend(self.fwd.named_mut("encoder.fwd"));
        v.extend(self.bwd.named_mut("encoder.bwd"));
        v.push(("encoder.proj_w".to_string(), &mut self.proj_w));
        v.push(("encoder.proj_b".to_string(), &mut self.proj_b));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedQuestion {
    pub q: Vec<f64>,
    pub g: Vec<f64>,
    pub token_vectors: Vec<Vec<f64>>,
    pub layout: InputLayout,
}

/// Forward activations kept for backpropagation.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    ids: Vec<usize>,
    fwd: Vec<LstmStep>,
    /// Indexed by position, although computed right to left.
    bwd: Vec<LstmStep>,
    summary: Vec<f64>,
}

/// Anything that turns a layout into retrieval and grounding vectors.
pub trait QuestionEncoder {
    fn config(&self) -> &EncoderConfig;
    fn encode(&self, layout: &InputLayout) -> EncodedQuestion;
}

/// Borrowed view of encoder weights and vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct Encoder<'a> {
    pub config: &'a EncoderConfig,
    pub vocab: &'a Vocab,
    pub params: &'a EncoderParams,
}

impl QuestionEncoder for Encoder<'_> {
    fn config(&self) -> &EncoderConfig {
        self.config
    }

    fn encode(&self, layout: &InputLayout) -> EncodedQuestion {
        self.encode_traced(layout).0
    }
}

impl<'a> Encoder<'a> {
    pub fn new(config: &'a EncoderConfig, vocab: &'a Vocab, params: &'a EncoderParams) -> Self {
        Encoder { config, vocab, params }
    }

    fn embed(&self, layout: &InputLayout, ids: &[usize]) -> Vec<Vec<f64>> {
        let p = self.params;
        (0..layout.len())
            .map(|t| {
                let mut x = p.tok_emb.row(ids[t]).to_vec();
                axpy(1.0, p.seg_emb.row(layout.segment_ids[t] as usize), &mut x);
                axpy(1.0, p.role_emb.row(layout.roles[t].index()), &mut x);
                axpy(1.0, p.match_emb.row(usize::from(layout.matched[t])), &mut x);
                x
            })
            .collect()
    }

    pub fn encode_traced(&self, layout: &InputLayout) -> (EncodedQuestion, EncoderTrace) {
        let p = self.params;
        let h = self.config.hidden_dim;
        let n = layout.len();
        let ids: Vec<usize> = layout
            .tokens
            .iter()
            .map(|t| {
                let id = self.vocab.id(t);
                if id < p.tok_emb.rows {
                    id
                } else {
                    0
                }
            })
            .collect();
        let xs = self.embed(layout, &ids);

        let zero = vec![0.0; h];
        let mut fwd: Vec<LstmStep> = Vec::with_capacity(n);
        for x in &xs {
            let (hp, cp) = fwd.last().map_or((&zero, &zero), |s| (&s.h, &s.c));
            let s = p.fwd.step(x, hp, cp);
            fwd.push(s);
        }
        let mut bwd_rev: Vec<LstmStep> = Vec::with_capacity(n);
        for x in xs.iter().rev() {
            let (hp, cp) = bwd_rev.last().map_or((&zero, &zero), |s| (&s.h, &s.c));
            let s = p.bwd.step(x, hp, cp);
            bwd_rev.push(s);
        }
        bwd_rev.reverse();
        let bwd = bwd_rev;

        let mut token_vectors: Vec<Vec<f64>> = (0..n)
            .map(|t| {
                let mut v = fwd[t].h.clone();
                v.extend_from_slice(&bwd[t].h);
                v
            })
            .collect();
        for (links, range) in layout.header_links.iter().zip(&layout.header_ranges) {
            if links.is_empty() {
                continue;
            }
            let w = 1.0 / links.len() as f64;
            let mut mean = vec![0.0; 2 * h];
            for &q in links {
                axpy(w, &token_vectors[q], &mut mean);
            }
            for pos in range.clone() {
                axpy(1.0, &mean, &mut token_vectors[pos]);
            }
        }

        let mut summary = vec![0.0; 2 * h];
        let w = 1.0 / n as f64;
        for t in 0..n {
            axpy(w, &fwd[t].h, &mut summary[..h]);
            axpy(w, &bwd[t].h, &mut summary[h..]);
        }
        let mut v = p.proj_b.data.clone();
        p.proj_w.matvec_add(&summary, &mut v);
        let g = v.split_off(self.config.d_q);
        let enc = EncodedQuestion {
            q: v,
            g,
            token_vectors,
            layout: layout.clone(),
        };
        (enc, EncoderTrace { ids, fwd, bwd, summary })
    }

    /// Accumulates parameter gradients given upstream gradients of `q`, `g`
    /// and the token vectors (`d_tokens` may be shorter than the layout;
    /// missing rows count as zero).
    pub fn backward(
        &self,
        layout: &InputLayout,
        trace: &EncoderTrace,
        d_q: &[f64],
        d_g: &[f64],
        d_tokens: &[Vec<f64>],
        grads: &mut EncoderParams,
    ) {
        let p = self.params;
        let h = self.config.hidden_dim;
        let n = layout.len();

        let mut dv = d_q.to_vec();
        dv.extend_from_slice(d_g);
        axpy(1.0, &dv, &mut grads.proj_b.data);
        grads.proj_w.outer_add(&dv, &trace.summary);
        let mut ds = vec![0.0; 2 * h];
        p.proj_w.matvec_t_add(&dv, &mut ds);

        let mut d_out: Vec<Vec<f64>> = (0..n)
            .map(|t| d_tokens.get(t).cloned().unwrap_or_else(|| vec![0.0; 2 * h]))
            .collect();
        for (links, range) in layout.header_links.iter().zip(&layout.header_ranges) {
            if links.is_empty() {
                continue;
            }
            let mut total = vec![0.0; 2 * h];
            for pos in range.clone() {
                if let Some(d) = d_tokens.get(pos) {
                    axpy(1.0, d, &mut total);
                }
            }
            let w = 1.0 / links.len() as f64;
            for &q in links {
                axpy(w, &total, &mut d_out[q]);
            }
        }
        let w = 1.0 / n as f64;
        for d in &mut d_out {
            axpy(w, &ds, d);
        }

        let mut dxs = vec![vec![0.0; self.config.embed_dim]; n];
        let (mut dh_next, mut dc_next) = (vec![0.0; h], vec![0.0; h]);
        for t in (0..n).rev() {
            let mut dh = d_out[t][..h].to_vec();
            axpy(1.0, &dh_next, &mut dh);
            let (dx, dhp, dcp) = p.fwd.backward(&trace.fwd[t], &dh, &dc_next, &mut grads.fwd);
            axpy(1.0, &dx, &mut dxs[t]);
            dh_next = dhp;
            dc_next = dcp;
        }
        let (mut dh_next, mut dc_next) = (vec![0.0; h], vec![0.0; h]);
        for t in 0..n {
            let mut dh = d_out[t][h..].to_vec();
            axpy(1.0, &dh_next, &mut dh);
            let (dx, dhp, dcp) = p.bwd.backward(&trace.bwd[t], &dh, &dc_next, &mut grads.bwd);
            axpy(1.0, &dx, &mut dxs[t]);
            dh_next = dhp;
            dc_next = dcp;
        }

        for (t, dx) in dxs.iter().enumerate() {
            axpy(1.0, dx, grads.tok_emb.row_mut(trace.ids[t]));
            axpy(1.0, dx, grads.seg_emb.row_mut(layout.segment_ids[t] as usize));
            axpy(1.0, dx, grads.role_emb.row_mut(layout.roles[t].index()));
            axpy(1.0, dx, grads.match_emb.row_mut(usize::from(layout.matched[t])));
        }
    }
}

/// Logistic classifier over the projected `[CLS]` vector of a pair layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PairHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl PairHead {
    pub fn new(config: &EncoderConfig, rng: &mut impl Rng) -> Self {
        PairHead {
            w: Tensor::uniform(1, config.projection_dim(), rng),
            b: Tensor::zeros(1, 1),
        }
    }

    fn logit(&self, enc: &EncodedQuestion) -> f64 {
        let proj: Vec<f64> = enc.q.iter().chain(&enc.g).copied().collect();
        crate::nn::dot(&self.w.data, &proj) + self.b.data[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once held-out accuracy has not improved for this many epochs.
    pub patience: usize,
    /// Fraction of pairs held out to measure accuracy.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            learning_rate: 1e-3,
            batch_size: 12,
            max_epochs: 30,
            patience: 3,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub train_pairs: usize,
    pub holdout_pairs: usize,
    pub holdout_accuracy: f64,
    pub loss_per_epoch: Vec<f64>,
}

fn pair_layout(pair: &ParaphrasePair) -> Option<InputLayout> {
    build_pair_input(&tokenize(&pair.first), &tokenize(&pair.second)).ok()
}

/// Fraction of pairs whose paraphrase label the head predicts correctly.
pub fn pair_accuracy(encoder: &Encoder<'_>, head: &PairHead, pairs: &[ParaphrasePair]) -> f64 {
    let layouts: Vec<(InputLayout, bool)> = pairs
        .iter()
        .filter_map(|p| pair_layout(p).map(|l| (l, p.is_paraphrase)))
        .collect();
    if layouts.is_empty() {
        return 0.0;
    }
    let correct = layouts
        .iter()
        .filter(|(l, label)| (head.logit(&encoder.encode(l)) > 0.0) == *label)
        .count();
    correct as f64 / layouts.len() as f64
}

/// Trains all encoder parameters on binary paraphrase classification until
/// held-out accuracy stops improving. The vocabulary must already cover the
/// pairs (unknown words fall back to `[UNK]`).
pub fn pretrain_paraphrase(
    pairs: &[ParaphrasePair],
    config: &EncoderConfig,
    vocab: &Vocab,
    params: &mut EncoderParams,
    train: &PretrainConfig,
) -> Result<PretrainReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((pairs.len() as f64 * train.holdout_fraction).round() as usize).min(pairs.len() - 1);
    let holdout: Vec<ParaphrasePair> = order[..n_hold].iter().map(|&i| pairs[i].clone()).collect();
    let train_set: Vec<(InputLayout, bool)> = order[n_hold..]
        .iter()
        .filter_map(|&i| pair_layout(&pairs[i]).map(|l| (l, pairs[i].is_paraphrase)))
        .collect();
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut head = PairHead::new(config, &mut rng);
    let mut opt = Adam::new(0.9, 0.999);
    let mut best = (f64::NEG_INFINITY, params.clone());
    let mut since_best = 0;
    let mut losses = Vec::new();
    let mut idx: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = 0;
    for epoch in 0..train.max_epochs {
        epochs = epoch + 1;
        idx.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in idx.chunks(train.batch_size.max(1)) {
            let mut g_enc = params.zeros_like();
            let mut g_head = PairHead {
                w: head.w.zeros_like(),
                b: head.b.zeros_like(),
            };
            let enc = Encoder::new(config, vocab, params);
            for &i in batch {
                let (layout, label) = &train_set[i];
                let (e, trace) = enc.encode_traced(layout);
                let z = head.logit(&e);
                let y = if *label { 1.0 } else { 0.0 };
                // binary cross-entropy on the logit
                total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                let dz = (sigmoid(z) - y) / batch.len() as f64;
                let proj: Vec<f64> = e.q.iter().chain(&e.g).copied().collect();
                axpy(dz, &proj, &mut g_head.w.data);
                g_head.b.data[0] += dz;
                let dproj: Vec<f64> = head.w.data.iter().map(|w| w * dz).collect();
                let (dq, dg) = dproj.split_at(config.d_q);
                enc.backward(layout, &trace, dq, dg, &[], &mut g_enc);
            }
            if !total.is_finite() {
                return Err(Error::DivergedLoss { epoch });
            }
            let mut ps: Vec<&mut Tensor> = params.tensors_mut().into_iter().map(|(_, t)| t).collect();
            ps.push(&mut head.w);
            ps.push(&mut head.b);
            let mut gs: Vec<&Tensor> = g_enc.tensors().into_iter().map(|(_, t)| t).collect();
            gs.push(&g_head.w);
            gs.push(&g_head.b);
            let lrs = vec![train.learning_rate; ps.len()];
            opt.step(&mut ps, &gs, &lrs);
        }
        losses.push(total / train_set.len() as f64);
        let eval_pairs: &[ParaphrasePair] = if holdout.is_empty() { pairs } else { &holdout };
        let acc = pair_accuracy(&Encoder::new(config, vocab, params), &head, eval_pairs);
        log::info!("pretrain epoch {epochs}: loss {:.4} holdout acc {acc:.4}", losses[epoch]);
        if acc > best.0 {
            best = (acc, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        if acc >= 1.0 || since_best >= train.patience {
            break;
        }
    }
    *params = best.1;
    Ok(PretrainReport {
        epochs,
        train_pairs: train_set.len(),
        holdout_pairs: holdout.len(),
        holdout_accuracy: best.0,
        loss_per_epoch: losses,
    })
}

/// Largest relative error between `analytic` gradients and central finite
/// differences of `loss`, over `samples` randomly chosen coordinates
/// (every coordinate when `samples` is `None`).
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<P: Params + Clone>(
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> f64,
    samples: Option<usize>,
    step: f64,
    seed: u64,
) -> f64 {
    let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
    let total: usize = shapes.iter().sum();
    let mut coords: Vec<(usize, usize)> = Vec::new();
    match samples {
        None => {
            for (k, &len) in shapes.iter().enumerate() {
                coords.extend((0..len).map(|j| (k, j)));
            }
        }
        Some(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..n.min(total) {
                let mut flat = rng.gen_range(0..total);
                let mut k = 0;
                while flat >= shapes[k] {
                    flat -= shapes[k];
                    k += 1;
                }
                coords.push((k, flat));
            }
        }
    }
    let analytic_t = analytic.tensors();
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (k, j) in coords {
        let orig = params.tensors()[k].1.data[j];
        let set = |p: &mut P, v: f64| {
            p.tensors_mut()[k].1.data[j] = v;
        };
        set(&mut probe, orig + step);
        let up = loss(&probe);
        set(&mut probe, orig - step);
        let down = loss(&probe);
        set(&mut probe, orig);
        let numeric = (up - down) / (2.0 * step);
        let a = analytic_t[k].1.data[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}
