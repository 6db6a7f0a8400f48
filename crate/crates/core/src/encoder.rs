//! Toy stand-in for a pretrained text encoder.
//!
//! Row 0 of the output is a summary slot: the mean of the token embeddings
//! over the true length, so it carries no order information. Rows `1..=len`
//! hold token embedding plus a learned positional embedding; padding rows are
//! zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{HectoError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_embed: usize,
    /// Summary slot plus the longest token sequence.
    pub max_len: usize,
    pub frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 32,
            d_embed: 32,
            max_len: 24,
            frozen: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(HectoError::Config(format!("vocab_size must be >= 2, got {}", self.vocab_size)));
        }
        if self.max_len < 2 {
            return Err(HectoError::Config(format!("max_len must be >= 2, got {}", self.max_len)));
        }
        if self.d_embed == 0 {
            return Err(HectoError::Config("d_embed must be positive".into()));
        }
        Ok(())
    }

    pub fn max_tokens(&self) -> usize {
        self.max_len - 1
    }
}

/// Right-padded token ids with the true length of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub token_ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    /// Pads `sequences` with id 0 to the longest one.
    pub fn from_sequences<S: AsRef<[usize]>>(sequences: &[S]) -> Self {
        let width = sequences.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let token_ids = sequences
            .iter()
            .map(|s| {
                let mut row = s.as_ref().to_vec();
                row.resize(width, 0);
                row
            })
            .collect();
        TokenBatch {
            token_ids,
            lengths: sequences.iter().map(|s| s.as_ref().len()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Padded width `T`.
    pub fn width(&self) -> usize {
        self.token_ids.first().map_or(0, Vec::len)
    }

    pub fn tokens(&self, i: usize) -> &[usize] {
        &self.token_ids[i][..self.lengths[i]]
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.token_ids.len() != self.lengths.len() {
            return Err(HectoError::Data("token_ids and lengths disagree on batch size".into()));
        }
        let t = self.width();
        if t > cfg.max_tokens() {
            return Err(HectoError::Data(format!(
                "batch width {t} exceeds the {} token positions",
                cfg.max_tokens()
            )));
        }
        for (i, (row, &len)) in self.token_ids.iter().zip(&self.lengths).enumerate() {
            if row.len() != t {
                return Err(HectoError::Data(format!("row {i} is not padded to width {t}")));
            }
            if len == 0 || len > t {
                return Err(HectoError::Data(format!("row {i} has length {len} outside 1..={t}")));
            }
            if let Some(&bad) = row[..len].iter().find(|&&id| id >= cfg.vocab_size) {
                return Err(HectoError::Data(format!(
                    "row {i}: token id {bad} outside vocabulary of {}",
                    cfg.vocab_size
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    embedding: ParamId,
    positional: ParamId,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("shape is consistent")
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let embedding = store.register("encoder.embedding", uniform(rng, cfg.vocab_size, cfg.d_embed, 0.1))?;
        let positional = store.register("encoder.positional", uniform(rng, cfg.max_len, cfg.d_embed, 0.1))?;
        let enc = Encoder {
            cfg,
            embedding,
            positional,
        };
        enc.set_frozen(store, enc.cfg.frozen);
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.embedding, self.positional]
    }

    /// Frozen parameters are skipped by the optimizer; the forward pass is
    /// unaffected.
    pub fn set_frozen(&self, store: &mut ParamStore, frozen: bool) {
        for id in self.param_ids() {
            store.set_frozen(id, frozen);
        }
    }

    pub fn is_frozen(&self, store: &ParamStore) -> bool {
        store.get(self.embedding).frozen
    }

    pub fn checksum(&self, store: &ParamStore) -> u64 {
        store.checksum_where(|p| p.name.starts_with("encoder."))
    }

    /// One `(T + 1) × d_embed` tensor per sample.
    pub fn encode(&self, graph: &mut Graph, store: &ParamStore, batch: &TokenBatch) -> Result<Vec<Var>> {
        batch.validate(&self.cfg)?;
        let t = batch.width();
        let emb = graph.param(store, self.embedding);
        let pos = graph.param(store, self.positional);
        let positions: Vec<usize> = (0..t).collect();
        let mut out = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let len = batch.lengths[i];
            let tokens = graph.gather(emb, batch.tokens(i))?;
            // Summing the multiset in id order makes the slot bitwise
            // independent of token order.
            let mut sorted = batch.tokens(i).to_vec();
            sorted.sort_unstable();
            let bag = graph.gather(emb, &sorted)?;
            let summary = graph.mean_rows(bag);
            let p = graph.gather(pos, &positions[..len])?;
            let body = graph.add(tokens, p)?;
            let mut parts = vec![summary, body];
            if len < t {
                parts.push(graph.constant(Tensor::zeros(t - len, self.cfg.d_embed)));
            }
            out.push(graph.concat_rows(&parts)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn encoder(cfg: EncoderConfig) -> (Encoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(cfg, &mut store, &mut rng).unwrap();
        (enc, store)
    }

    fn encode_one(enc: &Encoder, store: &ParamStore, tokens: &[usize]) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let h = enc.encode(&mut g, store, &TokenBatch::from_sequences(&[tokens])).unwrap();
        g.value(h[0]).to_rows()
    }

    #[test]
    fn single_token_summary_is_its_embedding() {
        let (enc, store) = encoder(EncoderConfig::default());
        let h = encode_one(&enc, &store, &[5]);
        assert_eq!(h[0], store.value(enc.embedding).row_slice(5));
    }

    #[test]
    fn hand_mean_of_two_embeddings() {
        let cfg = EncoderConfig {
            vocab_size: 2,
            d_embed: 2,
            max_len: 3,
            frozen: false,
        };
        let (enc, mut store) = encoder(cfg);
        store
            .get_mut(enc.embedding)
            .tensor
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let h = encode_one(&enc, &store, &[0, 1]);
        assert_eq!(h[0], vec![0.5, 0.5]);
    }

    #[test]
    fn padding_rows_are_zero() {
        let (enc, store) = encoder(EncoderConfig::default());
        let mut g = Graph::new();
        let batch = TokenBatch::from_sequences(&[vec![1, 2, 3, 4], vec![7, 8]]);
        let h = enc.encode(&mut g, &store, &batch).unwrap();
        let rows = g.value(h[1]).to_rows();
        assert_eq!(rows.len(), 5);
        assert!(rows[3..].iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_out_of_vocabulary_ids() {
        let (enc, store) = encoder(EncoderConfig::default());
        let mut g = Graph::new();
        let batch = TokenBatch::from_sequences(&[vec![1, 32]]);
        assert!(matches!(enc.encode(&mut g, &store, &batch), Err(HectoError::Data(_))));
    }

    #[test]
    fn rejects_sequences_longer_than_the_position_table() {
        let (enc, store) = encoder(EncoderConfig::default());
        let mut g = Graph::new();
        let batch = TokenBatch::from_sequences(&[vec![1; 24]]);
        assert!(enc.encode(&mut g, &store, &batch).is_err());
    }

    #[test]
    fn config_invariants() {
        let bad = EncoderConfig {
            vocab_size: 1,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            max_len: 1,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn summary_slot_is_permutation_invariant(
            tokens in prop::collection::vec(0usize..32, 1..23),
            seed in any::<u64>(),
        ) {
            let (enc, store) = encoder(EncoderConfig::default());
            let mut shuffled = tokens.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = encode_one(&enc, &store, &tokens);
            let b = encode_one(&enc, &store, &shuffled);
            let bits = |r: &[f64]| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a[0]), bits(&b[0]));
        }

        #[test]
        fn token_rows_are_equivariant_without_positions(
            tokens in prop::collection::vec(0usize..32, 2..23),
            seed in any::<u64>(),
        ) {
            let (enc, mut store) = encoder(EncoderConfig::default());
            store.get_mut(enc.positional).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            let mut perm: Vec<usize> = (0..tokens.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<usize> = perm.iter().map(|&p| tokens[p]).collect();
            let a = encode_one(&enc, &store, &tokens);
            let b = encode_one(&enc, &store, &permuted);
            for (dst, &src) in perm.iter().enumerate() {
                prop_assert_eq!(&b[dst + 1], &a[src + 1]);
            }
        }
    }
}
