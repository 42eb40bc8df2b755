//! Encoder + grounder bundle: prediction and checkpoint files.
//!
//! Checkpoint layout: magic `RSQLCKPT`, `u32` version, `u64` header length,
//! a JSON header (config, vocabulary, tensor names and shapes), then every
//! tensor's values as little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, TableSchema};
use crate::encoder::{example_layout, EncodedQuestion, Encoder, EncoderConfig, EncoderParams, QuestionEncoder, Vocab};
use crate::error::{Error, Result};
use crate::grounder::{ground, GrounderParams, GroundingResult};
use crate::nn::{Params, Tensor};
use crate::retriever::{RetrievalIndex, RetrievalResult};
use crate::sql_logic::pattern_to_template;

const CKPT_MAGIC: &[u8; 8] = b"RSQLCKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub encoder: EncoderParams,
    pub grounder: GrounderParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub retrieval: RetrievalResult,
    /// `Err` when the template cannot be grounded on this table.
    pub grounded: Result<GroundingResult, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: EncoderConfig,
    vocab: Vec<String>,
    tensors: Vec<(String, usize, usize)>,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: EncoderConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = EncoderParams::new(&config, vocab.len(), &mut rng);
        let grounder = GrounderParams::new(&config, &mut rng);
        Ok(Model {
            config,
            vocab,
            encoder,
            grounder,
        })
    }

    pub fn encoder(&self) -> Encoder<'_> {
        Encoder::new(&self.config, &self.vocab, &self.encoder)
    }

    /// Adds unseen words with fresh embedding rows; returns how many were added.
    pub fn extend_vocab<'a>(&mut self, words: impl IntoIterator<Item = &'a str>, seed: u64) -> usize {
        let added = self.vocab.extend(words);
        if added > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            self.encoder.grow_vocab(added, &mut rng);
        }
        added
    }

    pub fn encode_example(&self, example: &Example, schema: &TableSchema) -> Result<EncodedQuestion> {
        Ok(self.encoder().encode(&example_layout(example, schema)?))
    }

    /// Retrieves a pattern for `example` from `index` and grounds it.
    pub fn predict(&self, index: &RetrievalIndex, example: &Example, schema: &TableSchema, k: usize) -> Result<Prediction> {
        let enc = self.encode_example(example, schema)?;
        let retrieval = index.retrieve(&enc.q, k)?;
        let template = pattern_to_template(retrieval.chosen_pattern.pattern());
        let grounded = ground(&self.grounder, &template, &enc, &example.question).map_err(|e| e.to_string());
        Ok(Prediction { retrieval, grounded })
    }

    pub fn encoder_checksum(&self) -> String {
        self.encoder.checksum()
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.encoder.tensors();
        v.extend(self.grounder.tensors());
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self.named();
        let header = Header {
            version: CKPT_VERSION,
            config: self.config,
            vocab: self.vocab.tokens().to_vec(),
            tensors: tensors.iter().map(|(n, t)| (n.clone(), t.rows, t.cols)).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let io = |e| Error::io(path, e);
        let file = File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        (|| -> std::io::Result<()> {
            w.write_all(CKPT_MAGIC)?;
            w.write_u32::<LittleEndian>(CKPT_VERSION)?;
            w.write_u64::<LittleEndian>(json.len() as u64)?;
            w.write_all(&json)?;
            for (_, t) in &tensors {
                for &v in &t.data {
                    w.write_f64::<LittleEndian>(v)?;
                }
            }
            w.flush()
        })()
        .map_err(io)
    }

    /// Loads a checkpoint. With `expected` set, any dimension difference is
    /// reported as a version mismatch.
    pub fn load(path: &Path, expected: Option<&EncoderConfig>) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let bad = |what: String| Error::VersionMismatch(format!("{}: {what}", path.display()));
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CKPT_MAGIC {
            return Err(bad("not a model checkpoint".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != CKPT_VERSION {
            return Err(bad(format!("checkpoint version {version}, expected {CKPT_VERSION}")));
        }
        let len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(io)?;
        let header: Header = serde_json::from_slice(&json)?;
        if let Some(exp) = expected {
            let dims = |c: &EncoderConfig| (c.d_q, c.d_h, c.embed_dim, c.hidden_dim, c.pointer_dim);
            if dims(exp) != dims(&header.config) {
                return Err(bad(format!(
                    "checkpoint dimensions (d_q, d_h, embed, hidden, pointer) = {:?}, expected {:?}",
                    dims(&header.config),
                    dims(exp)
                )));
            }
        }
        let vocab = Vocab::from_tokens(header.vocab)?;
        let mut model = Model::new(header.config, vocab)?;
        {
            let mut targets = model.encoder.tensors_mut();
            targets.extend(model.grounder.tensors_mut());
            if targets.len() != header.tensors.len() {
                return Err(bad(format!("{} tensors stored, {} expected", header.tensors.len(), targets.len())));
            }
            for ((name, t), (stored, rows, cols)) in targets.into_iter().zip(&header.tensors) {
                if &name != stored || t.rows != *rows || t.cols != *cols {
                    return Err(bad(format!("tensor {stored} [{rows}x{cols}] does not match {name} [{}x{}]", t.rows, t.cols)));
                }
                r.read_f64_into::<LittleEndian>(&mut t.data).map_err(io)?;
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            d_q: 6,
            d_h: 4,
            embed_dim: 5,
            hidden_dim: 3,
            pointer_dim: 5,
            seed: 7,
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let m = Model::new(small(), Vocab::build(["alpha", "beta"])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = Model::load(&p, Some(&small())).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.encoder_checksum(), m.encoder_checksum());
        for ((_, a), (_, b)) in m.named().into_iter().zip(back.named()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let m = Model::new(small(), Vocab::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let other = EncoderConfig { d_q: 8, ..small() };
        assert!(matches!(Model::load(&p, Some(&other)), Err(Error::VersionMismatch(_))));
        std::fs::write(&p, b"garbage!").unwrap();
        assert!(matches!(Model::load(&p, None), Err(Error::VersionMismatch(_))));
    }

    #[test]
    fn vocab_growth_keeps_old_rows() {
        let mut m = Model::new(small(), Vocab::build(["alpha"])).unwrap();
        let before = m.encoder.tok_emb.clone();
        assert_eq!(m.extend_vocab(["beta", "alpha", "gamma"], 1), 2);
        assert_eq!(m.encoder.tok_emb.rows, before.rows + 2);
        assert_eq!(&m.encoder.tok_emb.data[..before.data.len()], &before.data[..]);
        assert_eq!(m.vocab.len(), m.encoder.tok_emb.rows);
    }
}
