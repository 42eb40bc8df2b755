use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use retrosql::corpus::{tokenize, tokenize_with_offsets};
use retrosql::encoder::{build_input, element_tokens, Encoder, EncoderConfig, EncoderParams, QuestionEncoder, Vocab};
use retrosql::grounder::{ground, GrounderParams};
use retrosql::retriever::{retrieval_loss, IndexEntry, RetrievalIndex, TrainingSampler, NEGATIVES};
use retrosql::sql_logic::{
    delexicalize, enumerate_taxonomy, parse_query, pattern_to_template, queries_equal, to_record, AggOp, CmpOp, Condition,
    PatternId, SqlQuery, SqlRecord, MAX_CONDITIONS,
};

const OPS: [CmpOp; 3] = [CmpOp::Eq, CmpOp::Gt, CmpOp::Lt];

fn query() -> impl Strategy<Value = SqlQuery> {
    (0usize..8, 0usize..6, proptest::collection::vec((0usize..3, "[a-z0-9]{1,6}"), 0..=MAX_CONDITIONS)).prop_map(
        |(sel, agg, conds)| {
            // distinct where-columns 10, 11, ...
            let conditions = conds
                .into_iter()
                .enumerate()
                .map(|(i, (op, value))| Condition { column: 10 + i, op: OPS[op], value })
                .collect();
            SqlQuery::new(sel, AggOp::ALL[agg], conditions).unwrap()
        },
    )
}

proptest! {
    #[test]
    fn equality_ignores_condition_order_and_value_case(q in query(), rot in 0usize..4) {
        let mut p = q.clone();
        let n = p.conditions.len();
        if n > 0 {
            p.conditions.rotate_left(rot % n);
        }
        for c in &mut p.conditions {
            c.value = format!("  {} ", c.value.to_uppercase());
        }
        prop_assert!(queries_equal(&q, &q));
        prop_assert!(queries_equal(&q, &p));
        prop_assert!(queries_equal(&p, &q));
        let mut other = q.clone();
        other.select_column += 1;
        prop_assert!(!queries_equal(&q, &other));
    }

    #[test]
    fn pattern_ids_round_trip(q in query()) {
        let pattern = delexicalize(&q);
        prop_assert_eq!(pattern.id().pattern(), &pattern);
        prop_assert!(pattern.id().index() < 210);
        prop_assert_eq!(pattern_to_template(&pattern).slot_count(), 1 + 2 * q.conditions.len());
    }

    #[test]
    fn records_round_trip(q in query()) {
        prop_assert_eq!(parse_query(&to_record(&q)).unwrap(), q);
    }

    #[test]
    fn malformed_records_are_rejected(q in query(), agg in 6i64..50, op in 3i64..50) {
        let mut r = to_record(&q);
        r.agg = agg;
        prop_assert!(parse_query(&r).is_err());
        if let Some(c) = to_record(&q).conds.first().cloned() {
            let mut dup: SqlRecord = to_record(&q);
            dup.conds.push(c.clone());
            prop_assert!(parse_query(&dup).is_err());
            let mut bad_op = to_record(&q);
            bad_op.conds[0].1 = op;
            prop_assert!(parse_query(&bad_op).is_err());
        }
    }

    #[test]
    fn sextets_respect_patterns(labels in proptest::collection::vec(0u16..5, 2..60), anchor in any::<prop::sample::Index>(), seed in any::<u64>()) {
        let patterns: Vec<PatternId> = labels.iter().map(|&l| PatternId(l)).collect();
        let s = TrainingSampler::new(patterns.clone());
        let a = anchor.index(patterns.len());
        let same = patterns.iter().filter(|&&p| p == patterns[a]).count();
        let other = patterns.len() - same;
        match s.sample(a, seed) {
            Ok(x) => {
                prop_assert!(same >= 2 && other >= 1);
                prop_assert_ne!(x.positive, a);
                prop_assert_eq!(patterns[x.positive], patterns[a]);
                prop_assert_eq!(x.negatives.len(), NEGATIVES);
                prop_assert!(x.negatives.iter().all(|&n| patterns[n] != patterns[a]));
                if other >= NEGATIVES {
                    let mut d = x.negatives.clone();
                    d.sort_unstable();
                    d.dedup();
                    prop_assert_eq!(d.len(), NEGATIVES);
                }
                prop_assert_eq!(s.sample(a, seed).unwrap(), x);
            }
            Err(_) => prop_assert!(same < 2 || other == 0),
        }
    }

    #[test]
    fn retrieval_matches_full_scan(n in 1usize..80, k in 1usize..12, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries: Vec<IndexEntry> = (0..n)
            .map(|i| IndexEntry {
                q_vector: (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                pattern: PatternId(rng.gen_range(0..4)),
                example_id: i.to_string(),
            })
            .collect();
        let index = RetrievalIndex::new(3, "p", entries).unwrap();
        let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let got = index.retrieve(&q, k).unwrap();
        let mut dists: Vec<f64> = index
            .entries
            .iter()
            .map(|e| e.q_vector.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assert_eq!(got.neighbors.len(), k.min(n));
        for (nb, d) in got.neighbors.iter().zip(&dists) {
            prop_assert!((nb.distance - d).abs() < 1e-12);
        }
        prop_assert!(got.neighbors.iter().any(|nb| nb.pattern == got.chosen_pattern));
    }

    #[test]
    fn retrieval_loss_is_non_negative(v in proptest::collection::vec(-5.0f64..5.0, 28)) {
        let anchor = &v[..4];
        let positive = &v[4..8];
        let negatives: Vec<Vec<f64>> = v[8..].chunks(4).map(<[f64]>::to_vec).collect();
        let l = retrieval_loss(anchor, positive, &negatives).unwrap();
        prop_assert!(l.loss >= -1e-12);
        prop_assert!(l.loss.is_finite());
    }

    #[test]
    fn token_offsets_cover_tokens(text in "[a-zA-Z0-9 ,.?'-]{0,40}") {
        let with = tokenize_with_offsets(&text);
        prop_assert_eq!(with.iter().map(|(t, _)| t.clone()).collect::<Vec<_>>(), tokenize(&text));
        for (t, r) in &with {
            prop_assert_eq!(&text[r.clone()].to_lowercase(), t);
        }
    }
}

fn small_config(seed: u64) -> EncoderConfig {
    EncoderConfig {
        d_q: 4,
        d_h: 3,
        embed_dim: 4,
        hidden_dim: 3,
        pointer_dim: 5,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grounding_is_constrained_and_deterministic(
        pattern in 0usize..210,
        n_headers in 1usize..7,
        words in proptest::collection::vec("[a-z]{1,5}", 4..12),
        seed in any::<u64>(),
    ) {
        let pattern = &enumerate_taxonomy()[pattern];
        let n_cond = pattern.cond_ops().len();
        let question = words.join(" ");
        let headers: Vec<String> = (0..n_headers).map(|i| format!("h{i} {}", words[i % words.len()])).collect();
        let cfg = small_config(seed);
        let vocab = Vocab::build(words.iter().map(String::as_str));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_p = EncoderParams::new(&cfg, vocab.len(), &mut rng);
        let gr_p = GrounderParams::new(&cfg, &mut rng);
        let layout = build_input(&tokenize(&question), &headers, &element_tokens()).unwrap();
        let enc = Encoder::new(&cfg, &vocab, &enc_p).encode(&layout);
        let template = pattern_to_template(pattern);
        let result = ground(&gr_p, &template, &enc, &question);
        if n_cond > n_headers {
            prop_assert!(result.is_err());
            return Ok(());
        }
        let result = result.unwrap();
        prop_assert_eq!(&delexicalize(&result.query), pattern);
        prop_assert!(result.query.select_column < n_headers);
        let mut cols: Vec<usize> = result.query.conditions.iter().map(|c| c.column).collect();
        prop_assert!(cols.iter().all(|&c| c < n_headers));
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(cols.len(), n_cond);
        for c in &result.query.conditions {
            prop_assert!(question.contains(&c.value));
        }
        prop_assert!(result.step_log_probs.iter().all(|l| *l <= 0.0 && l.is_finite()));
        let again = ground(&gr_p, &template, &enc, &question).unwrap();
        prop_assert_eq!(again, result);
    }
}
