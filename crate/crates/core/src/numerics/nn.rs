//! Neural building blocks recorded on a [`Graph`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::graph::{softmax_in_place, Graph, Var};
use crate::numerics::tensor::{ParamId, ParamStore, Scalar, Tensor};

/// Seeded parameter initializer.
///
/// Matrices draw from uniform(−√(1/fan_in), √(1/fan_in)), biases start at
/// zero and embedding tables draw from normal(0, 0.1).
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        let bound = (1.0 / cols as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| T::from_f64(self.rng.random_range(-bound..=bound)))
            .collect();
        Tensor::new(vec![rows, cols], data).expect("sized")
    }

    pub fn bias<T: Scalar>(&mut self, len: usize) -> Tensor<T> {
        Tensor::zeros(vec![len])
    }

    pub fn embedding<T: Scalar>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let data = (0..rows * cols)
            .map(|_| T::from_f64(normal.sample(&mut self.rng)))
            .collect();
        Tensor::new(vec![rows, cols], data).expect("sized")
    }

    /// A fresh RNG derived from this one, for dropout masks and the like.
    pub fn fork(&mut self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.rng.random())
    }
}

/// Affine map `x·Wᵀ + b`.
#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        input: usize,
        output: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let weight = store.insert(format!("{prefix}.W"), init.matrix(output, input))?;
        let bias = if with_bias {
            Some(store.insert(format!("{prefix}.b"), init.bias(output))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul_t(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Weights of one LSTM direction. Gate blocks are stacked in the order
/// input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            w_ih: store.insert(format!("{prefix}.W_ih"), init.matrix(4 * hidden, input))?,
            w_hh: store.insert(format!("{prefix}.W_hh"), init.matrix(4 * hidden, hidden))?,
            bias: store.insert(format!("{prefix}.b"), init.bias(4 * hidden))?,
            hidden,
        })
    }
}

/// Hidden and cell state of an LSTM.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros<T: Scalar>(g: &mut Graph<'_, T>, hidden: usize) -> Self {
        Self {
            h: g.zeros(1, hidden),
            c: g.zeros(1, hidden),
        }
    }
}

/// One LSTM step on input row `x`.
pub fn lstm_cell_step<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    state: LstmState,
    weights: &LstmParams,
) -> Result<LstmState> {
    let w_ih = g.param(weights.w_ih);
    let projected = g.matmul_t(x, w_ih)?;
    lstm_step_projected(g, projected, state, weights)
}

/// LSTM step where `x·W_ihᵀ` has already been computed.
fn lstm_step_projected<T: Scalar>(
    g: &mut Graph<'_, T>,
    projected: Var,
    state: LstmState,
    weights: &LstmParams,
) -> Result<LstmState> {
    let hs = weights.hidden;
    if g.shape(state.h) != (1, hs) || g.shape(state.c) != (1, hs) {
        return Err(Error::shape(
            "lstm_cell_step",
            format!("state {:?} for hidden size {hs}", g.shape(state.h)),
        ));
    }
    let w_hh = g.param(weights.w_hh);
    let b = g.param(weights.bias);
    let rec = g.matmul_t(state.h, w_hh)?;
    let pre = g.add(projected, rec)?;
    let pre = g.add_row(pre, b)?;
    let i = g.slice_cols(pre, 0, hs)?;
    let f = g.slice_cols(pre, hs, 2 * hs)?;
    let cand = g.slice_cols(pre, 2 * hs, 3 * hs)?;
    let o = g.slice_cols(pre, 3 * hs, 4 * hs)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// Runs one LSTM direction over the rows of `xs`, returning the hidden
/// state per position in input order.
pub fn lstm_sequence<T: Scalar>(
    g: &mut Graph<'_, T>,
    xs: Var,
    weights: &LstmParams,
    reverse: bool,
) -> Result<Vec<Var>> {
    let len = g.shape(xs).0;
    let w_ih = g.param(weights.w_ih);
    let projected = g.matmul_t(xs, w_ih)?;
    let mut state = LstmState::zeros(g, weights.hidden);
    let mut out = vec![state.h; len];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    };
    for t in order {
        let row = g.row(projected, t)?;
        state = lstm_step_projected(g, row, state, weights)?;
        out[t] = state.h;
    }
    Ok(out)
}

/// Forward and backward LSTM pair.
#[derive(Clone, Copy, Debug)]
pub struct BiLstmParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiLstmParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        input: usize,
        hidden_per_direction: usize,
    ) -> Result<Self> {
        Ok(Self {
            forward: LstmParams::register(store, init, &format!("{prefix}.fwd"), input, hidden_per_direction)?,
            backward: LstmParams::register(store, init, &format!("{prefix}.bwd"), input, hidden_per_direction)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    /// Per-position concatenation of forward and backward hidden states.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, xs: Var) -> Result<Var> {
        let fwd = lstm_sequence(g, xs, &self.forward, false)?;
        let bwd = lstm_sequence(g, xs, &self.backward, true)?;
        let fwd = g.stack_rows(&fwd)?;
        let bwd = g.stack_rows(&bwd)?;
        g.concat_cols(&[fwd, bwd])
    }
}

/// Scaled dot-product self-attention with learned query/key/value maps.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        input: usize,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: store.insert(format!("{prefix}.W_q"), init.matrix(dim, input))?,
            key: store.insert(format!("{prefix}.W_k"), init.matrix(dim, input))?,
            value: store.insert(format!("{prefix}.W_v"), init.matrix(dim, input))?,
            dim,
            heads,
        })
    }
}

/// `softmax(Q·Kᵀ/√d_k)·V` per head, heads concatenated. Returns the output
/// and the per-head attention matrices.
pub fn self_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    input: Var,
    weights: &AttentionParams,
) -> Result<(Var, Vec<Var>)> {
    let (len, _) = g.shape(input);
    if len == 0 {
        return Err(Error::shape("self_attention", "empty sequence"));
    }
    let wq = g.param(weights.query);
    let wk = g.param(weights.key);
    let wv = g.param(weights.value);
    let q = g.matmul_t(input, wq)?;
    let k = g.matmul_t(input, wk)?;
    let v = g.matmul_t(input, wv)?;
    let head_dim = weights.dim / weights.heads;
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut outputs = Vec::with_capacity(weights.heads);
    let mut maps = Vec::with_capacity(weights.heads);
    for h in 0..weights.heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let (qh, kh, vh) = if weights.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, lo, hi)?,
                g.slice_cols(k, lo, hi)?,
                g.slice_cols(v, lo, hi)?,
            )
        };
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        outputs.push(g.matmul(attn, vh)?);
        maps.push(attn);
    }
    let out = if outputs.len() == 1 {
        outputs[0]
    } else {
        g.concat_cols(&outputs)?
    };
    Ok((out, maps))
}

/// Stable softmax cross-entropy on plain values: `(−log p[gold], p)`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], gold: usize) -> Result<(T, Vec<T>)> {
    if gold >= logits.len() {
        return Err(Error::Index {
            what: "classes",
            index: gold,
            len: logits.len(),
        });
    }
    let max = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let log_z = logits.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    let probs = logits.iter().map(|&x| (x - log_z).exp()).collect();
    Ok((log_z - logits[gold], probs))
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverted dropout mask: kept entries are scaled by 1/(1−rate).
pub fn dropout_mask<T: Scalar, R: Rng>(rng: &mut R, len: usize, rate: f64) -> Vec<T> {
    let keep = T::from_f64(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_lstm(hidden: usize, input: usize, fill: impl Fn(&str, usize) -> f64) -> (ParamStore<f64>, LstmParams) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(0);
        let p = LstmParams::register(&mut store, &mut init, "lstm", input, hidden).unwrap();
        for name in ["lstm.W_ih", "lstm.W_hh", "lstm.b"] {
            let t = store.by_name_mut(name).unwrap();
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x = fill(name, i);
            }
        }
        (store, p)
    }

    #[test]
    fn lstm_zero_case() {
        let (store, p) = single_lstm(3, 2, |_, _| 0.0);
        let mut g = Graph::new(&store);
        let x = g.row_vector(vec![0.0, 0.0]);
        let s = LstmState::zeros(&mut g, 3);
        let out = lstm_cell_step(&mut g, x, s, &p).unwrap();
        assert_eq!(g.value(out.h), &[0.0; 3]);
        assert_eq!(g.value(out.c), &[0.0; 3]);
    }

    #[test]
    fn lstm_large_forget_bias_keeps_zero_cell() {
        // bias layout: [i | f | g | o], hidden 2
        let (store, p) = single_lstm(2, 2, |name, i| {
            if name == "lstm.b" && (2..4).contains(&i) {
                10.0
            } else {
                0.0
            }
        });
        let mut g = Graph::new(&store);
        let x = g.row_vector(vec![0.0, 0.0]);
        let s = LstmState::zeros(&mut g, 2);
        let out = lstm_cell_step(&mut g, x, s, &p).unwrap();
        assert!(g.value(out.c).iter().all(|v| v.abs() < 1e-12));
        assert!(g.value(out.h).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn lstm_scalar_hand_case() {
        // 1-dim cell: input-gate bias 10, candidate weight on x = 1.
        let (store, p) = single_lstm(1, 1, |name, i| match (name, i) {
            ("lstm.b", 0) => 10.0,
            ("lstm.W_ih", 2) => 1.0,
            _ => 0.0,
        });
        let mut g = Graph::new(&store);
        let x = g.row_vector(vec![1.0]);
        let s = LstmState::zeros(&mut g, 1);
        let out = lstm_cell_step(&mut g, x, s, &p).unwrap();
        // independent scalar recomputation
        let i = 1.0 / (1.0 + (-10.0f64).exp());
        let cand = 1.0f64.tanh();
        let c = i * cand;
        let h = 0.5 * c.tanh();
        assert!((g.value(out.c)[0] - c).abs() < 1e-12);
        assert!((g.value(out.h)[0] - h).abs() < 1e-12);
        assert!((g.value(out.c)[0] - 0.76156).abs() < 1e-5);
        assert!((g.value(out.h)[0] - 0.32100).abs() < 1e-5);
    }

    #[test]
    fn lstm_rejects_wrong_state_size() {
        let (store, p) = single_lstm(2, 1, |_, _| 0.0);
        let mut g = Graph::new(&store);
        let x = g.row_vector(vec![1.0]);
        let s = LstmState::zeros(&mut g, 3);
        assert!(matches!(lstm_cell_step(&mut g, x, s, &p), Err(Error::Shape { .. })));
        let s = LstmState::zeros(&mut g, 2);
        let bad = g.row_vector(vec![1.0, 2.0]);
        assert!(lstm_cell_step(&mut g, bad, s, &p).is_err());
    }

    fn attention_store(
        q: Vec<f64>,
        k: Vec<f64>,
        v: Vec<f64>,
        input: usize,
        dim: usize,
    ) -> (ParamStore<f64>, AttentionParams) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(0);
        let p = AttentionParams::register(&mut store, &mut init, "att", input, dim, 1).unwrap();
        store.by_name_mut("att.W_q").unwrap().data_mut().copy_from_slice(&q);
        store.by_name_mut("att.W_k").unwrap().data_mut().copy_from_slice(&k);
        store.by_name_mut("att.W_v").unwrap().data_mut().copy_from_slice(&v);
        (store, p)
    }

    #[test]
    fn attention_single_token_returns_its_value() {
        let (store, p) = attention_store(vec![0.3, -1.0], vec![2.0, 0.5], vec![1.0, 2.0], 2, 1);
        let mut g = Graph::new(&store);
        let e = g.constant(1, 2, vec![0.5, -0.25]).unwrap();
        let (out, maps) = self_attention(&mut g, e, &p).unwrap();
        assert_eq!(g.value(maps[0]), &[1.0]);
        assert!((g.value(out)[0] - (0.5 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn attention_zero_query_is_uniform() {
        let (store, p) = attention_store(vec![0.0; 4], vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let mut g = Graph::new(&store);
        let e = g.constant(3, 2, vec![1.0, 2.0, -1.0, 0.0, 3.0, 5.0]).unwrap();
        let (out, _) = self_attention(&mut g, e, &p).unwrap();
        let mean = [1.0, 7.0 / 3.0];
        for row in g.value(out).chunks(2) {
            assert!((row[0] - mean[0]).abs() < 1e-12);
            assert!((row[1] - mean[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_two_token_hand_case() {
        // d = 1: q_t = 2e_t, k_t = e_t, v_t = 3e_t, e = [1, -1]
        let (store, p) = attention_store(vec![2.0], vec![1.0], vec![3.0], 1, 1);
        let mut g = Graph::new(&store);
        let e = g.constant(2, 1, vec![1.0, -1.0]).unwrap();
        let (out, maps) = self_attention(&mut g, e, &p).unwrap();
        // row 1 scores: [2, -2]; row 2 scores: [-2, 2]
        let a = 1.0 / (1.0 + (-4.0f64).exp());
        let expected = [a * 3.0 + (1.0 - a) * -3.0, (1.0 - a) * 3.0 + a * -3.0];
        for (got, want) in g.value(out).iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
        for row in g.value(maps[0]).chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_head_requires_divisible_dim() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(0);
        assert!(AttentionParams::register(&mut store, &mut init, "a", 4, 6, 4).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, p) = softmax_cross_entropy(&[0.0f64, 0.0], 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(p, vec![0.5, 0.5]);

        let (loss, _) = softmax_cross_entropy(&[1000.0f64, 0.0], 0).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);

        let (loss, p) = softmax_cross_entropy(&[1.0f64, 2.0, 3.0], 2).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        assert!((loss - (z.ln() - 3.0)).abs() < 1e-12);
        assert!((loss - 0.40761).abs() < 1e-5);
        for (got, want) in p.iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 1e-5);
        }
        assert!(matches!(softmax_cross_entropy(&[1.0f64], 1), Err(Error::Index { .. })));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }
}
