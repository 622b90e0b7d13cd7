//! Intent head, intent-conditioned slot decoder, joint loss and the full
//! forward pass with its ablation switches.

use serde::{Deserialize, Serialize};

use crate::adapters::{self, GateParams, SlotAwareParams};
use crate::corpus::EncodedSample;
use crate::encoder::{self, AttentionInput, ChannelEncoding, ChannelParams, Dropout, PoolParams};
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::nn::{self, Initializer, LinearParams, LstmParams, LstmState};
use crate::numerics::tensor::{ParamId, ParamStore, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Full,
    /// Intent from the character summary alone.
    NoSentenceWa,
    /// Slots from the decoder state alone.
    NoCharWa,
    /// Every character is fused with the same utterance-level word vector.
    NoMultiLevel,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Full,
        AblationMode::NoSentenceWa,
        AblationMode::NoCharWa,
        AblationMode::NoMultiLevel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoSentenceWa => "no_sentence_wa",
            AblationMode::NoCharWa => "no_char_wa",
            AblationMode::NoMultiLevel => "no_multi_level",
        }
    }

    fn uses_sentence_adapter(self) -> bool {
        self != AblationMode::NoSentenceWa
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

/// Which label the decoder is conditioned on during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feed {
    #[default]
    Gold,
    Predicted,
}

/// Word information shared by all characters in `no_multi_level` mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedWordSource {
    /// The word-channel summary, projected to the decoder size.
    #[default]
    Summary,
    /// The mean of the intent-conditioned word BiLSTM states.
    PooledStates,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub emb_dim: usize,
    pub enc_hidden: usize,
    pub attn_dim: usize,
    pub attn_heads: usize,
    pub pool_dim: usize,
    pub dec_hidden: usize,
    pub label_emb_dim: usize,
    pub attention_input: AttentionInput,
    pub ablation: AblationMode,
    pub intent_feed: Feed,
    pub slot_feed: Feed,
    pub shared_word_source: SharedWordSource,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            emb_dim: 64,
            enc_hidden: 128,
            attn_dim: 128,
            attn_heads: 1,
            pool_dim: 128,
            dec_hidden: 128,
            label_emb_dim: 32,
            attention_input: AttentionInput::Embeddings,
            ablation: AblationMode::Full,
            intent_feed: Feed::Gold,
            slot_feed: Feed::Gold,
            shared_word_source: SharedWordSource::Summary,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("emb_dim", self.emb_dim),
            ("enc_hidden", self.enc_hidden),
            ("attn_dim", self.attn_dim),
            ("attn_heads", self.attn_heads),
            ("pool_dim", self.pool_dim),
            ("dec_hidden", self.dec_hidden),
            ("label_emb_dim", self.label_emb_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.enc_hidden.is_multiple_of(2) {
            return Err(Error::Config("enc_hidden must be even".into()));
        }
        if !self.dec_hidden.is_multiple_of(2) {
            return Err(Error::Config("dec_hidden must be even".into()));
        }
        if !self.attn_dim.is_multiple_of(self.attn_heads) {
            return Err(Error::Config("attn_dim must be divisible by attn_heads".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn encoding_dim(&self) -> usize {
        self.enc_hidden + self.attn_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSizes {
    pub chars: usize,
    pub words: usize,
    pub slots: usize,
    pub intents: usize,
}

/// Parameter handles of the whole network. The values live in a
/// [`ParamStore`] built by [`Model::new`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub sizes: VocabSizes,
    pub char_channel: ChannelParams,
    pub word_channel: ChannelParams,
    pub char_pool: PoolParams,
    pub word_pool: PoolParams,
    pub sentence_gate: GateParams,
    pub intent_head: LinearParams,
    pub intent_embedding: ParamId,
    pub slot_embedding: ParamId,
    pub slot_start: ParamId,
    pub slot_decoder: LstmParams,
    pub slot_aware: SlotAwareParams,
    pub shared_word: LinearParams,
    pub char_gate: GateParams,
    pub slot_head: LinearParams,
}

impl Model {
    /// Registers every parameter, initialized from `seed`.
    pub fn new<T: Scalar>(config: ModelConfig, sizes: VocabSizes, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        if sizes.slots == 0 || sizes.intents == 0 || sizes.chars == 0 || sizes.words == 0 {
            return Err(Error::Config(format!("empty vocabulary in {sizes:?}")));
        }
        let c = &config;
        let d_enc = c.encoding_dim();
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let s = &mut store;
        let i = &mut init;
        let char_channel = ChannelParams::register(
            s,
            i,
            "char_encoder",
            sizes.chars,
            c.emb_dim,
            c.enc_hidden,
            c.attn_dim,
            c.attn_heads,
            c.attention_input,
        )?;
        let word_channel = ChannelParams::register(
            s,
            i,
            "word_encoder",
            sizes.words,
            c.emb_dim,
            c.enc_hidden,
            c.attn_dim,
            c.attn_heads,
            c.attention_input,
        )?;
        let char_pool = PoolParams::register(s, i, "char_pool", d_enc, c.pool_dim)?;
        let word_pool = PoolParams::register(s, i, "word_pool", d_enc, c.pool_dim)?;
        let sentence_gate = GateParams::register(s, i, "sentence_adapter", d_enc)?;
        let intent_head = LinearParams::register(s, i, "intent_head", d_enc, sizes.intents, true)?;
        let intent_embedding = s.insert("intent_embedding", i.embedding(sizes.intents, c.label_emb_dim))?;
        let slot_embedding = s.insert("slot_embedding", i.embedding(sizes.slots, c.label_emb_dim))?;
        let slot_start = s.insert("slot_decoder.start", i.embedding(1, c.label_emb_dim))?;
        let slot_decoder = LstmParams::register(s, i, "slot_decoder.lstm", d_enc + 2 * c.label_emb_dim, c.dec_hidden)?;
        let slot_aware = SlotAwareParams::register(s, i, "word_slot", d_enc, c.label_emb_dim, c.dec_hidden)?;
        let shared_word = LinearParams::register(s, i, "shared_word.proj", d_enc, c.dec_hidden, true)?;
        let char_gate = GateParams::register(s, i, "char_adapter", c.dec_hidden)?;
        let slot_head = LinearParams::register(s, i, "slot_head", c.dec_hidden, sizes.slots, true)?;
        let model = Self {
            config,
            sizes,
            char_channel,
            word_channel,
            char_pool,
            word_pool,
            sentence_gate,
            intent_head,
            intent_embedding,
            slot_embedding,
            slot_start,
            slot_decoder,
            slot_aware,
            shared_word,
            char_gate,
            slot_head,
        };
        Ok((model, store))
    }

    /// Rebuilds the handles for a loaded store, checking that names and
    /// shapes match this configuration.
    pub fn bind<T: Scalar>(config: ModelConfig, sizes: VocabSizes, store: &ParamStore<T>) -> Result<Self> {
        let (model, template) = Self::new::<T>(config, sizes, 0)?;
        if template.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                template.len(),
                store.len()
            )));
        }
        for ((name, t), (got_name, got)) in template.iter().zip(store.iter()) {
            if name != got_name || t.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {got_name:?} {:?} does not match expected {name:?} {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(model)
    }

    /// Parameters a mode never reads, by name prefix.
    pub fn unused_prefixes(&self, mode: AblationMode) -> Vec<&'static str> {
        match mode {
            AblationMode::Full | AblationMode::NoSentenceWa => {
                let mut v = vec!["shared_word."];
                if mode == AblationMode::NoSentenceWa {
                    v.extend(["sentence_adapter.", "word_pool."]);
                }
                v
            }
            AblationMode::NoCharWa => vec!["char_adapter.", "word_slot.", "shared_word."],
            AblationMode::NoMultiLevel => match self.config.shared_word_source {
                SharedWordSource::Summary => vec!["word_slot."],
                SharedWordSource::PooledStates => vec!["shared_word."],
            },
        }
    }

    /// Runs the network on one sample. In the train phase the sample must
    /// carry gold labels and the result carries the joint loss.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        sample: &EncodedSample,
        mode: AblationMode,
        phase: Phase,
        dropout: &mut Dropout,
    ) -> Result<ForwardOutput> {
        let n = sample.len();
        if n == 0 || sample.num_words() == 0 {
            return Err(Error::Contract("sample has no characters or no words".into()));
        }
        if sample.alignment.len() != n || sample.alignment.num_words() != sample.num_words() {
            return Err(Error::Contract(format!(
                "alignment covers {} characters and {} words, sample has {n} and {}",
                sample.alignment.len(),
                sample.alignment.num_words(),
                sample.num_words()
            )));
        }
        if phase == Phase::Train && !sample.is_labeled() {
            return Err(Error::Contract("train phase requires gold labels".into()));
        }
        if let Some(bad) = sample.slot_ids.iter().flatten().find(|&&s| s >= self.sizes.slots) {
            return Err(Error::Index {
                what: "slot labels",
                index: *bad,
                len: self.sizes.slots,
            });
        }
        let train = phase == Phase::Train;

        let e_c = encoder::encode_channel(g, &sample.char_ids, &self.char_channel, dropout)?;
        let e_w = encoder::encode_channel(g, &sample.word_ids, &self.word_channel, dropout)?;
        let s_c = encoder::attention_pool(g, e_c, &self.char_pool)?;
        let needs_word_summary = mode.uses_sentence_adapter()
            || (mode == AblationMode::NoMultiLevel && self.config.shared_word_source == SharedWordSource::Summary);
        let s_w = if needs_word_summary {
            Some(encoder::attention_pool(g, e_w, &self.word_pool)?)
        } else {
            None
        };

        // intent
        let mut lambda_sentence = None;
        let v_i = if mode.uses_sentence_adapter() {
            let fused =
                adapters::sentence_level_fuse(g, s_c.vector, s_w.expect("computed").vector, &self.sentence_gate)?;
            lambda_sentence = Some(g.scalar(fused.lambda).as_f64());
            fused.vector
        } else {
            s_c.vector
        };
        let intent_logits = self.intent_head.apply(g, v_i)?;
        let intent = head_prediction(g, intent_logits);
        let intent_loss = match sample.intent_id {
            Some(gold) => Some(g.cross_entropy(intent_logits, gold)?),
            None => None,
        };

        let fed_intent = match (train, self.config.intent_feed, sample.intent_id) {
            (true, Feed::Gold, Some(gold)) => gold,
            _ => intent.label,
        };
        let intent_emb = g.gather(self.intent_embedding, &[fed_intent])?;

        // word information for the character-level fusion
        enum WordInfo {
            None,
            PerWord(Var),
            Shared(Var),
        }
        let word_info = match mode {
            AblationMode::NoCharWa => WordInfo::None,
            AblationMode::Full | AblationMode::NoSentenceWa => WordInfo::PerWord(self.word_states(g, e_w, intent_emb)?),
            AblationMode::NoMultiLevel => match self.config.shared_word_source {
                SharedWordSource::Summary => {
                    WordInfo::Shared(self.shared_word.apply(g, s_w.expect("computed").vector)?)
                }
                SharedWordSource::PooledStates => {
                    let states = self.word_states(g, e_w, intent_emb)?;
                    WordInfo::Shared(g.mean_rows(states))
                }
            },
        };

        // slot decoding, left to right
        let mut state = LstmState::zeros(g, self.config.dec_hidden);
        let mut slot_dists = Vec::with_capacity(n);
        let mut slot_labels = Vec::with_capacity(n);
        let mut slot_losses = Vec::with_capacity(n);
        let mut lambda_chars = Vec::new();
        for t in 0..n {
            let prev = if t == 0 {
                g.param(self.slot_start)
            } else {
                let label = match (train, self.config.slot_feed, &sample.slot_ids) {
                    (true, Feed::Gold, Some(gold)) => gold[t - 1],
                    _ => slot_labels[t - 1],
                };
                g.gather(self.slot_embedding, &[label])?
            };
            let e_t = g.row(e_c.rows, t)?;
            let input = g.concat_cols(&[e_t, intent_emb, prev])?;
            state = nn::lstm_cell_step(g, input, state, &self.slot_decoder)?;
            let v_s = match &word_info {
                WordInfo::None => state.h,
                WordInfo::PerWord(states) => {
                    let f = adapters::char_level_fuse(g, state.h, *states, &sample.alignment, t, &self.char_gate)?;
                    lambda_chars.push(g.scalar(f.lambda).as_f64());
                    f.vector
                }
                WordInfo::Shared(shared) => {
                    let f = adapters::word_adapter(g, state.h, *shared, &self.char_gate)?;
                    lambda_chars.push(g.scalar(f.lambda).as_f64());
                    f.vector
                }
            };
            let logits = self.slot_head.apply(g, v_s)?;
            let pred = head_prediction(g, logits);
            if let Some(gold) = &sample.slot_ids {
                slot_losses.push(g.cross_entropy(logits, gold[t])?);
            }
            slot_labels.push(pred.label);
            slot_dists.push(pred.distribution);
        }

        let loss = match intent_loss {
            Some(il) if slot_losses.len() == n => {
                let mut terms = Vec::with_capacity(n + 1);
                terms.push(il);
                terms.extend(&slot_losses);
                Some(g.add_all(&terms)?)
            }
            _ => None,
        };

        Ok(ForwardOutput {
            intent,
            slots: SlotPrediction {
                distributions: slot_dists,
                labels: slot_labels,
            },
            loss,
            intent_loss,
            slot_losses,
            lambda_sentence,
            lambda_chars: (!lambda_chars.is_empty()).then_some(lambda_chars),
            encodings: (e_c, e_w),
        })
    }

    fn word_states<T: Scalar>(&self, g: &mut Graph<'_, T>, e_w: ChannelEncoding, intent_emb: Var) -> Result<Var> {
        adapters::slot_aware_word_states(g, e_w.rows, intent_emb, &self.slot_aware)
    }
}

fn head_prediction<T: Scalar>(g: &Graph<'_, T>, logits: Var) -> HeadPrediction {
    let values: Vec<f64> = g.value(logits).iter().map(|x| x.as_f64()).collect();
    let distribution = nn::softmax(&values);
    HeadPrediction {
        label: nn::argmax(&values),
        distribution,
    }
}

/// Distribution over a label set and its argmax (lowest index on ties).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadPrediction {
    pub distribution: Vec<f64>,
    pub label: usize,
}

pub type IntentPrediction = HeadPrediction;

#[derive(Clone, Debug, PartialEq)]
pub struct SlotPrediction {
    pub distributions: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

pub struct ForwardOutput {
    pub intent: IntentPrediction,
    pub slots: SlotPrediction,
    /// Intent cross-entropy plus the per-character slot cross-entropies.
    pub loss: Option<Var>,
    pub intent_loss: Option<Var>,
    pub slot_losses: Vec<Var>,
    pub lambda_sentence: Option<f64>,
    pub lambda_chars: Option<Vec<f64>>,
    pub encodings: (ChannelEncoding, ChannelEncoding),
}

/// Intent distribution and argmax from the head on `v_i`.
pub fn predict_intent<T: Scalar>(g: &mut Graph<'_, T>, v_i: Var, head: &LinearParams) -> Result<IntentPrediction> {
    let logits = head.apply(g, v_i)?;
    Ok(head_prediction(g, logits))
}

/// Slot distribution and argmax for one fused decoder state.
pub fn predict_slot<T: Scalar>(g: &mut Graph<'_, T>, v_s: Var, head: &LinearParams) -> Result<HeadPrediction> {
    let logits = head.apply(g, v_s)?;
    Ok(head_prediction(g, logits))
}

/// One decoder step on `e_c_t ⊕ intent_emb ⊕ prev_label_emb`.
pub fn slot_decoder_step<T: Scalar>(
    g: &mut Graph<'_, T>,
    e_c_t: Var,
    intent_emb: Var,
    prev_label_emb: Var,
    state: LstmState,
    weights: &LstmParams,
) -> Result<LstmState> {
    let input = g.concat_cols(&[e_c_t, intent_emb, prev_label_emb])?;
    nn::lstm_cell_step(g, input, state, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Alignment;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            emb_dim: 4,
            enc_hidden: 4,
            attn_dim: 4,
            attn_heads: 1,
            pool_dim: 3,
            dec_hidden: 4,
            label_emb_dim: 3,
            ..Default::default()
        }
    }

    fn sizes() -> VocabSizes {
        VocabSizes {
            chars: 10,
            words: 8,
            slots: 5,
            intents: 3,
        }
    }

    fn sample() -> EncodedSample {
        EncodedSample {
            char_ids: vec![2, 3, 4, 5, 6, 7, 8, 9],
            word_ids: vec![2, 3, 4, 5],
            alignment: Alignment::from_one_based(vec![1, 1, 1, 2, 3, 3, 4, 4]).unwrap(),
            slot_ids: Some(vec![1, 2, 2, 0, 0, 3, 4, 0]),
            intent_id: Some(2),
        }
    }

    #[test]
    fn output_shapes() {
        let (model, store) = Model::new::<f64>(tiny_config(), sizes(), 1).unwrap();
        for mode in AblationMode::ALL {
            let mut g = Graph::new(&store);
            let out = model
                .forward(&mut g, &sample(), mode, Phase::Train, &mut Dropout::disabled())
                .unwrap();
            assert_eq!(out.slots.distributions.len(), 8);
            assert_eq!(out.intent.distribution.len(), 3);
            assert!(out.loss.is_some());
            assert_eq!(out.slot_losses.len(), 8);
            for d in &out.slots.distributions {
                assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_heads_give_uniform_loss() {
        let (model, mut store) = Model::new::<f64>(tiny_config(), sizes(), 1).unwrap();
        for name in ["intent_head.W", "intent_head.b", "slot_head.W", "slot_head.b"] {
            store.by_name_mut(name).unwrap().data_mut().fill(0.0);
        }
        let mut g = Graph::new(&store);
        let out = model
            .forward(
                &mut g,
                &sample(),
                AblationMode::Full,
                Phase::Train,
                &mut Dropout::disabled(),
            )
            .unwrap();
        let expected = 3f64.ln() + 8.0 * 5f64.ln();
        assert!((g.scalar(out.loss.unwrap()) - expected).abs() < 1e-12);
        assert_eq!(out.intent.label, 0);
        assert!(out.slots.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn train_phase_needs_gold() {
        let (model, store) = Model::new::<f64>(tiny_config(), sizes(), 1).unwrap();
        let mut s = sample();
        s.slot_ids = None;
        let mut g = Graph::new(&store);
        assert!(matches!(
            model.forward(&mut g, &s, AblationMode::Full, Phase::Train, &mut Dropout::disabled()),
            Err(Error::Contract(_))
        ));
        let mut g = Graph::new(&store);
        let out = model
            .forward(&mut g, &s, AblationMode::Full, Phase::Infer, &mut Dropout::disabled())
            .unwrap();
        assert!(out.loss.is_none() && out.intent_loss.is_some());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.dec_hidden = 5;
        assert!(Model::new::<f32>(c, sizes(), 0).is_err());
        let mut c = tiny_config();
        c.attn_heads = 3;
        assert!(Model::new::<f32>(c, sizes(), 0).is_err());
    }

    #[test]
    fn parameter_names_are_disjoint_between_channels() {
        let (_, store) = Model::new::<f32>(tiny_config(), sizes(), 0).unwrap();
        let chars: Vec<_> = store.names().filter_map(|n| n.strip_prefix("char_encoder.")).collect();
        let words: Vec<_> = store.names().filter_map(|n| n.strip_prefix("word_encoder.")).collect();
        assert_eq!(chars, words);
        assert!(!chars.is_empty());
    }

    #[test]
    fn mode_strings_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
        }
        assert!("bogus".parse::<AblationMode>().is_err());
    }
}
