//! The word adapter and its two uses.
//!
//! A word adapter mixes a character-side vector `v_c` and a word-side
//! vector `v_w` of the same size with a single learned weight
//!
//! ```text
//! λ     = sigmoid(v_cᵀ · W_f · v_w)
//! fused = (1 − λ) · v_c + λ · v_w
//! ```
//!
//! The sentence-level adapter applies it to the two channel summaries to
//! form the intent feature. The character-level adapter applies it, per
//! character, to the slot decoder state and the state of the word that
//! contains the character, after a BiLSTM over the word encodings
//! conditioned on the intent.

use crate::corpus::Alignment;
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::nn::{BiLstmParams, Initializer};
use crate::numerics::tensor::{ParamId, ParamStore, Scalar};

/// The bilinear gate matrix `W_f` of one adapter instance.
#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub w_f: ParamId,
    pub dim: usize,
}

impl GateParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            w_f: store.insert(format!("{prefix}.W_f"), init.matrix(dim, dim))?,
            dim,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub vector: Var,
    /// 1×1 node holding λ.
    pub lambda: Var,
}

pub fn word_adapter<T: Scalar>(g: &mut Graph<'_, T>, v_c: Var, v_w: Var, gate: &GateParams) -> Result<Fused> {
    let (sc, sw) = (g.shape(v_c), g.shape(v_w));
    if sc != (1, gate.dim) || sw != (1, gate.dim) {
        return Err(Error::shape(
            "word_adapter",
            format!("v_c {sc:?}, v_w {sw:?}, gate dimension {}", gate.dim),
        ));
    }
    let w_f = g.param(gate.w_f);
    // (W_f v_w)ᵀ as a row
    let projected = g.matmul_t(v_w, w_f)?;
    let prod = g.mul(v_c, projected)?;
    let bilinear = g.sum(prod);
    let lambda = g.sigmoid(bilinear);
    let one = g.row_vector(vec![T::one()]);
    let keep = g.sub(one, lambda)?;
    let char_part = g.scale_by(v_c, keep)?;
    let word_part = g.scale_by(v_w, lambda)?;
    let vector = g.add(char_part, word_part)?;
    Ok(Fused { vector, lambda })
}

/// Fuses the character and word summary vectors into the intent feature.
pub fn sentence_level_fuse<T: Scalar>(g: &mut Graph<'_, T>, s_c: Var, s_w: Var, gate: &GateParams) -> Result<Fused> {
    word_adapter(g, s_c, s_w, gate)
}

#[derive(Clone, Copy, Debug)]
pub struct SlotAwareParams {
    pub bilstm: BiLstmParams,
}

impl SlotAwareParams {
    /// `dec_hidden` is split evenly between the two directions.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        word_dim: usize,
        intent_dim: usize,
        dec_hidden: usize,
    ) -> Result<Self> {
        if !dec_hidden.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "decoder hidden size {dec_hidden} must be even to split across directions"
            )));
        }
        Ok(Self {
            bilstm: BiLstmParams::register(
                store,
                init,
                &format!("{prefix}.bilstm"),
                word_dim + intent_dim,
                dec_hidden / 2,
            )?,
        })
    }
}

/// BiLSTM over `e^w_i ⊕ intent_embedding`; returns `M × dec_hidden`.
pub fn slot_aware_word_states<T: Scalar>(
    g: &mut Graph<'_, T>,
    word_encoding: Var,
    intent_embedding: Var,
    params: &SlotAwareParams,
) -> Result<Var> {
    let m = g.shape(word_encoding).0;
    if g.shape(intent_embedding).0 != 1 {
        return Err(Error::shape(
            "slot_aware_word_states",
            "intent embedding must be one row",
        ));
    }
    let repeated = g.stack_rows(&vec![intent_embedding; m])?;
    let inputs = g.concat_cols(&[word_encoding, repeated])?;
    params.bilstm.apply(g, inputs)
}

/// Fuses decoder state `h_c_t` of 0-based character `t` with the state of
/// the word containing it.
pub fn char_level_fuse<T: Scalar>(
    g: &mut Graph<'_, T>,
    h_c_t: Var,
    word_states: Var,
    alignment: &Alignment,
    t: usize,
    gate: &GateParams,
) -> Result<Fused> {
    if t >= alignment.len() {
        return Err(Error::Contract(format!(
            "character {t} outside a {}-character alignment",
            alignment.len()
        )));
    }
    let row = alignment.word_of(t);
    let m = g.shape(word_states).0;
    if row >= m {
        return Err(Error::Contract(format!(
            "character {} aligned to word {} of {m}",
            t + 1,
            row + 1
        )));
    }
    let word = g.row(word_states, row)?;
    word_adapter(g, h_c_t, word, gate)
}
