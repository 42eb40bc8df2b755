//! Joint training of encoder, retriever and grounder.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Dataset};
use crate::encoder::{example_layout, EncodedQuestion, EncoderTrace, InputLayout};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalReport};
use crate::grounder::grounding_loss;
use crate::model::Model;
use crate::nn::{axpy, Adam, Params, Tensor};
use crate::retriever::{build_index, retrieval_loss, NeighborCount, TrainingSampler};
use crate::sql_logic::pattern_to_template;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_encoder_retriever: f64,
    pub lr_grounder: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub eval_every: usize,
    /// Evaluations without dev LF improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub loss_weights: (f64, f64),
    pub neighbors: NeighborCount,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_encoder_retriever: 1e-3,
            lr_grounder: 1e-3,
            batch_size: 12,
            max_epochs: 1000,
            eval_every: 1,
            patience: 50,
            seed: 0,
            loss_weights: (1.0, 1.0),
            neighbors: NeighborCount::Auto,
        }
    }
}

impl TrainConfig {
    /// Learning rates meant for a large pretrained encoder.
    pub fn pretrained_backbone() -> Self {
        TrainConfig {
            lr_encoder_retriever: 2e-5,
            lr_grounder: 1e-3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::malformed(None, r.to_string()));
        if !(self.lr_encoder_retriever >= 0.0 && self.lr_grounder >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub retrieval: f64,
    pub grounding: f64,
}

/// One line of the training log, written after each dev evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_p: f64,
    pub dev_lf: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Parameters with the best dev LF seen.
    pub model: Model,
    pub epoch: usize,
    pub best_dev_lf: f64,
    pub best_epoch: usize,
    pub best_report: Option<EvalReport>,
    pub best_checkpoint_path: Option<PathBuf>,
    pub rng: ChaCha8Rng,
    pub losses: Vec<EpochLoss>,
    pub log: Vec<LogRecord>,
    /// False when the train set could not provide retrieval sextets.
    pub retrieval_trained: bool,
}

/// Every token the encoder sees for `dataset`: questions and headers.
pub fn dataset_words(dataset: &Dataset) -> Vec<String> {
    let mut words: Vec<String> = dataset.examples.iter().flat_map(|e| e.tokens.iter().cloned()).collect();
    for s in dataset.schemas.values() {
        for h in &s.headers {
            words.extend(tokenize(h));
        }
    }
    words
}

struct Grads {
    dq: Vec<f64>,
    dg: Vec<f64>,
    dtok: Vec<Vec<f64>>,
}

/// Trains `model` on `train`, evaluating on `dev` every `eval_every` epochs
/// against an index over `train`. With `out_dir`, the best checkpoint goes to
/// `best.ckpt` and evaluations to `train_log.jsonl`.
pub fn train(mut model: Model, train: &Dataset, dev: &Dataset, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainState> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let words = dataset_words(train);
    model.extend_vocab(words.iter().map(String::as_str), config.seed);

    let layouts: Vec<InputLayout> = train
        .examples
        .iter()
        .map(|e| example_layout(e, train.schema(e)))
        .collect::<Result<_>>()?;
    let templates: Vec<_> = train.examples.iter().map(|e| pattern_to_template(e.pattern().pattern())).collect();
    let sampler = TrainingSampler::from_dataset(train);
    let retrieval_on = sampler.has_contrast() && config.loss_weights.0 != 0.0;
    if !sampler.has_contrast() {
        log::warn!("train set lacks two patterns with two examples each; training grounding only");
    }
    let unaligned = train.examples.iter().filter(|e| !e.is_aligned()).count();
    if unaligned > 0 {
        log::warn!("{unaligned} train examples have values missing from the question; they get no grounding loss");
    }

    let mut log_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join("train_log.jsonl");
            Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(0.9, 0.999);
    let n_enc = model.encoder.tensors().len();
    let n_gr = model.grounder.tensors().len();
    let lrs: Vec<f64> = std::iter::repeat_n(config.lr_encoder_retriever, n_enc)
        .chain(std::iter::repeat_n(config.lr_grounder, n_gr))
        .collect();
    let (w_r, w_g) = config.loss_weights;

    let mut state = TrainState {
        model: model.clone(),
        epoch: 0,
        best_dev_lf: f64::NEG_INFINITY,
        best_epoch: 0,
        best_report: None,
        best_checkpoint_path: None,
        rng: rng.clone(),
        losses: Vec::new(),
        log: Vec::new(),
        retrieval_trained: retrieval_on,
    };
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum_r, mut sum_g, mut n_r, mut n_g) = (0.0, 0.0, 0, 0);
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut sextets = Vec::with_capacity(batch.len());
            if retrieval_on {
                for &a in batch {
                    if let Ok(s) = sampler.sample_with(a, &mut rng) {
                        sextets.push(s);
                    }
                }
                // negatives come from the batch itself when it is varied enough
                let pool: Vec<usize> = batch.iter().copied().chain(sextets.iter().map(|s| s.positive)).collect();
                for s in &mut sextets {
                    sampler.redraw_negatives_from(s, &pool, &mut rng);
                }
            }
            let mut needed: BTreeSet<usize> = batch.iter().copied().collect();
            for s in &sextets {
                needed.insert(s.positive);
                needed.extend(s.negatives.iter().copied());
            }
            let enc = model.encoder();
            let encoded: BTreeMap<usize, (EncodedQuestion, EncoderTrace)> =
                needed.iter().map(|&i| (i, enc.encode_traced(&layouts[i]))).collect();
            let mut grads: BTreeMap<usize, Grads> = encoded
                .iter()
                .map(|(&i, (e, _))| {
                    (
                        i,
                        Grads {
                            dq: vec![0.0; e.q.len()],
                            dg: vec![0.0; e.g.len()],
                            dtok: Vec::new(),
                        },
                    )
                })
                .collect();

            let mut batch_r = 0.0;
            for s in &sextets {
                let q = |i: usize| &encoded[&i].0.q;
                let negs: Vec<Vec<f64>> = s.negatives.iter().map(|&n| q(n).clone()).collect();
                let l = retrieval_loss(q(s.anchor), q(s.positive), &negs)?;
                batch_r += l.loss;
                let f = w_r * scale;
                axpy(f, &l.d_anchor, &mut grads.get_mut(&s.anchor).unwrap().dq);
                axpy(f, &l.d_positive, &mut grads.get_mut(&s.positive).unwrap().dq);
                for (&n, d) in s.negatives.iter().zip(&l.d_negatives) {
                    axpy(f, d, &mut grads.get_mut(&n).unwrap().dq);
                }
            }

            // every encoded example is a labelled training example, so all of them get a grounding loss
            let grounded: Vec<usize> = needed.iter().copied().filter(|&i| train.examples[i].is_aligned()).collect();
            let scale_g = w_g / grounded.len().max(1) as f64;
            let mut g_ground = model.grounder.zeros_like();
            let mut batch_g = 0.0;
            for &a in &grounded {
                let ex = &train.examples[a];
                let l = grounding_loss(&model.grounder, &templates[a], &encoded[&a].0, &ex.gold, &ex.value_spans, &mut g_ground)?;
                batch_g += l.loss;
                let gr = grads.get_mut(&a).unwrap();
                axpy(scale_g, &l.d_g, &mut gr.dg);
                gr.dtok = l
                    .d_tokens
                    .into_iter()
                    .map(|mut v| {
                        v.iter_mut().for_each(|x| *x *= scale_g);
                        v
                    })
                    .collect();
            }
            if !(batch_r + batch_g).is_finite() {
                if let Some(d) = out_dir {
                    model.save(&d.join("diverged.ckpt"))?;
                }
                return Err(Error::DivergedLoss { epoch });
            }
            sum_r += batch_r;
            sum_g += batch_g;
            n_r += sextets.len();
            n_g += grounded.len();

            let mut g_enc = model.encoder.zeros_like();
            for (i, (e, trace)) in &encoded {
                let gr = &grads[i];
                enc.backward(&e.layout, trace, &gr.dq, &gr.dg, &gr.dtok, &mut g_enc);
            }
            g_ground.tensors_mut().into_iter().for_each(|(_, t)| t.scale(scale_g));

            let mut gs: Vec<&Tensor> = g_enc.tensors().into_iter().map(|(_, t)| t).collect();
            gs.extend(g_ground.tensors().into_iter().map(|(_, t)| t));
            let mut ps: Vec<&mut Tensor> = model.encoder.tensors_mut().into_iter().map(|(_, t)| t).collect();
            ps.extend(model.grounder.tensors_mut().into_iter().map(|(_, t)| t));
            adam.step(&mut ps, &gs, &lrs);
        }
        let retrieval = sum_r / n_r.max(1) as f64;
        let grounding = sum_g / n_g.max(1) as f64;
        let loss = EpochLoss {
            epoch,
            total: w_r * retrieval + w_g * grounding,
            retrieval,
            grounding,
        };
        state.losses.push(loss);
        state.epoch = epoch;

        if epoch % config.eval_every == 0 || epoch == config.max_epochs {
            let index = build_index(train, &model.encoder(), "train")?;
            let (report, _) = evaluate(&model, &index, dev, config.neighbors)?;
            let rec = LogRecord {
                epoch,
                train_loss: loss.total,
                dev_p: report.p,
                dev_lf: report.lf,
            };
            log::info!(
                "epoch {epoch}: loss {:.4} (retrieval {:.4}, grounding {:.4}) dev P {:.4} LF {:.4}",
                loss.total,
                loss.retrieval,
                loss.grounding,
                report.p,
                report.lf
            );
            if let Some((w, p)) = log_file.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&*p, e))?;
                w.flush().map_err(|e| Error::io(&*p, e))?;
            }
            state.log.push(rec);
            if report.lf > state.best_dev_lf {
                state.best_dev_lf = report.lf;
                state.best_epoch = epoch;
                state.best_report = Some(report);
                state.model = model.clone();
                since_best = 0;
                if let Some(d) = out_dir {
                    let p = d.join("best.ckpt");
                    model.save(&p)?;
                    state.best_checkpoint_path = Some(p);
                }
            } else {
                since_best += 1;
            }
            if state.best_dev_lf >= 1.0 || since_best >= config.patience {
                break;
            }
        }
    }
    state.rng = rng;
    Ok(state)
}
