//! Self-attentive BiLSTM channel encoder and MLP attention pooling.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::nn::{self, AttentionParams, BiLstmParams, Initializer, LinearParams};
use crate::numerics::tensor::{ParamId, ParamStore, Scalar};

/// What the self-attention branch reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionInput {
    /// The embedded sequence, in parallel with the BiLSTM.
    #[default]
    Embeddings,
    /// The BiLSTM outputs.
    Bilstm,
}

/// Inverted dropout, active only when constructed with an RNG and a
/// positive rate.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Self {
            rate,
            rng: (rate > 0.0).then_some(rng),
        }
    }

    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        let (r, c) = g.shape(x);
        let mask = nn::dropout_mask::<T, _>(rng, r * c, self.rate);
        let mask = g.constant(r, c, mask)?;
        g.mul(x, mask)
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct ChannelParams {
    pub embedding: ParamId,
    pub bilstm: BiLstmParams,
    pub attention: AttentionParams,
    pub attention_input: AttentionInput,
}

impl ChannelParams {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        vocab_size: usize,
        emb_dim: usize,
        bilstm_out: usize,
        attn_dim: usize,
        heads: usize,
        attention_input: AttentionInput,
    ) -> Result<Self> {
        if !bilstm_out.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{prefix}: BiLSTM output size {bilstm_out} must be even"
            )));
        }
        let embedding = store.insert(format!("{prefix}.embedding"), init.embedding(vocab_size, emb_dim))?;
        let bilstm = BiLstmParams::register(store, init, &format!("{prefix}.bilstm"), emb_dim, bilstm_out / 2)?;
        let attn_in = match attention_input {
            AttentionInput::Embeddings => emb_dim,
            AttentionInput::Bilstm => bilstm_out,
        };
        let attention =
            AttentionParams::register(store, init, &format!("{prefix}.attention"), attn_in, attn_dim, heads)?;
        Ok(Self {
            embedding,
            bilstm,
            attention,
            attention_input,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.bilstm.output_dim() + self.attention.dim
    }
}

/// Per-position channel encodings (`L × d_enc`).
#[derive(Clone, Copy, Debug)]
pub struct ChannelEncoding {
    pub rows: Var,
}

/// Embeds `ids`, runs the BiLSTM and self-attention branches and
/// concatenates them per position.
pub fn encode_channel<T: Scalar>(
    g: &mut Graph<'_, T>,
    ids: &[usize],
    params: &ChannelParams,
    dropout: &mut Dropout,
) -> Result<ChannelEncoding> {
    if ids.is_empty() {
        return Err(Error::Contract("cannot encode an empty sequence".into()));
    }
    let embedded = g.gather(params.embedding, ids)?;
    let embedded = dropout.apply(g, embedded)?;
    let recurrent = params.bilstm.apply(g, embedded)?;
    let attn_in = match params.attention_input {
        AttentionInput::Embeddings => embedded,
        AttentionInput::Bilstm => recurrent,
    };
    let (attended, _) = nn::self_attention(g, attn_in, &params.attention)?;
    Ok(ChannelEncoding {
        rows: g.concat_cols(&[recurrent, attended])?,
    })
}

/// Scores `uᵀ tanh(W e_t + b)` per row.
#[derive(Clone, Copy, Debug)]
pub struct PoolParams {
    pub hidden: LinearParams,
    pub score: ParamId,
}

impl PoolParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            hidden: LinearParams::register(store, init, prefix, input, hidden, true)?,
            score: store.insert(format!("{prefix}.u"), init.matrix(1, hidden))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Summary {
    /// `1 × d_enc` weighted sum of the rows.
    pub vector: Var,
    /// `1 × L` attention weights.
    pub weights: Var,
}

pub fn attention_pool<T: Scalar>(
    g: &mut Graph<'_, T>,
    encoding: ChannelEncoding,
    params: &PoolParams,
) -> Result<Summary> {
    let hidden = params.hidden.apply(g, encoding.rows)?;
    let hidden = g.tanh(hidden);
    let u = g.param(params.score);
    let scores = g.matmul_t(u, hidden)?;
    let weights = g.softmax_rows(scores);
    let vector = g.matmul(weights, encoding.rows)?;
    Ok(Summary { vector, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel(store: &mut ParamStore<f64>, vocab: usize, input: AttentionInput) -> ChannelParams {
        let mut init = Initializer::new(3);
        ChannelParams::register(store, &mut init, "ch", vocab, 4, 6, 4, 1, input).unwrap()
    }

    #[test]
    fn output_dim_is_concatenation() {
        let mut store = ParamStore::new();
        let p = channel(&mut store, 5, AttentionInput::Embeddings);
        let mut g = Graph::new(&store);
        let e = encode_channel(&mut g, &[2, 3, 4], &p, &mut Dropout::disabled()).unwrap();
        assert_eq!(g.shape(e.rows), (3, 10));
        assert_eq!(p.output_dim(), 10);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let mut store = ParamStore::new();
        let p = channel(&mut store, 5, AttentionInput::Embeddings);
        let mut g = Graph::new(&store);
        assert!(matches!(
            encode_channel(&mut g, &[], &p, &mut Dropout::disabled()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn single_token_directions_agree_on_input() {
        let mut store = ParamStore::new();
        let p = channel(&mut store, 5, AttentionInput::Embeddings);
        // make backward weights equal to forward weights
        for part in ["W_ih", "W_hh", "b"] {
            let fwd = store.by_name(&format!("ch.bilstm.fwd.{part}")).unwrap().clone();
            *store.by_name_mut(&format!("ch.bilstm.bwd.{part}")).unwrap() = fwd;
        }
        let mut g = Graph::new(&store);
        let e = encode_channel(&mut g, &[3], &p, &mut Dropout::disabled()).unwrap();
        let row = g.value(e.rows).to_vec();
        assert_eq!(row[..3], row[3..6]);
        // attention over one token returns its value projection
        let emb = store.by_name("ch.embedding").unwrap().data()[3 * 4..4 * 4].to_vec();
        let wv = store.by_name("ch.attention.W_v").unwrap().data();
        for j in 0..4 {
            let v: f64 = (0..4).map(|k| wv[j * 4 + k] * emb[k]).sum();
            assert!((row[6 + j] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn permuted_vocabulary_gives_same_encoding() {
        let mut store = ParamStore::new();
        let p = channel(&mut store, 5, AttentionInput::Bilstm);
        let mut g = Graph::new(&store);
        let e = encode_channel(&mut g, &[2, 4, 3, 2], &p, &mut Dropout::disabled()).unwrap();
        let expected = g.value(e.rows).to_vec();

        // swap embedding rows 2 and 4, and the ids with them
        let mut permuted = store.clone();
        let table = permuted.by_name_mut("ch.embedding").unwrap().data_mut();
        for k in 0..4 {
            table.swap(2 * 4 + k, 4 * 4 + k);
        }
        let mut g = Graph::new(&permuted);
        let e = encode_channel(&mut g, &[4, 2, 3, 4], &p, &mut Dropout::disabled()).unwrap();
        assert_eq!(g.value(e.rows), expected.as_slice());
    }

    #[test]
    fn pool_of_identical_rows_is_that_row() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(9);
        let pool = PoolParams::register(&mut store, &mut init, "pool", 3, 5).unwrap();
        let mut g = Graph::new(&store);
        let rows = g.constant(4, 3, [0.5, -1.0, 2.0].repeat(4)).unwrap();
        let s = attention_pool(&mut g, ChannelEncoding { rows }, &pool).unwrap();
        for (got, want) in g.value(s.vector).iter().zip([0.5f64, -1.0, 2.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_pool_params_give_row_mean() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(9);
        let pool = PoolParams::register(&mut store, &mut init, "pool", 2, 3).unwrap();
        store.by_name_mut("pool.W").unwrap().data_mut().fill(0.0);
        store.by_name_mut("pool.u").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new(&store);
        let rows = g.constant(2, 2, vec![1.0, 4.0, 3.0, -2.0]).unwrap();
        let s = attention_pool(&mut g, ChannelEncoding { rows }, &pool).unwrap();
        assert_eq!(g.value(s.vector), &[2.0, 1.0]);
    }
}
