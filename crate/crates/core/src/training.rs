//! Joint training, evaluation, prediction and the saved model format.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::dataset::JsonSample;
use crate::corpus::{encode_sample, AlignedSample, EncodedDataset, EncodedSample, Utterance, Vocabularies};
use crate::decoders::{AblationMode, Feed, Model, ModelConfig, Phase, SharedWordSource, VocabSizes};
use crate::encoder::{AttentionInput, Dropout};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, extract_chunks, Labels, Metrics};
use crate::numerics::checkpoint;
use crate::numerics::gradcheck::DEFAULT_EPSILON;
use crate::numerics::graph::Graph;
use crate::numerics::nn::Initializer;
use crate::numerics::{finite_difference_check, AdamConfig, AdamState, GradCheckReport, Gradients, ParamStore, Scalar};
use crate::segmentation::{SegmentationDictionary, Segmenter, SegmenterConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

/// Every knob of a training run. Model dimensions sit at the top level so
/// a config file stays flat; only the segmenter is a nested table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
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
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement tolerated before stopping.
    pub patience: usize,
    /// Stop as soon as dev overall accuracy reaches 1.
    pub stop_at_perfect_dev: bool,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub precision: Precision,
    pub segmenter: SegmenterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let adam = AdamConfig::default();
        Self {
            emb_dim: m.emb_dim,
            enc_hidden: m.enc_hidden,
            attn_dim: m.attn_dim,
            attn_heads: m.attn_heads,
            pool_dim: m.pool_dim,
            dec_hidden: m.dec_hidden,
            label_emb_dim: m.label_emb_dim,
            attention_input: m.attention_input,
            ablation: m.ablation,
            intent_feed: m.intent_feed,
            slot_feed: m.slot_feed,
            shared_word_source: m.shared_word_source,
            dropout: m.dropout,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            stop_at_perfect_dev: true,
            seed: 1,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            clip_norm: 5.0,
            precision: Precision::F32,
            segmenter: SegmenterConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Reads TOML (`.toml`) or JSON (anything else).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            emb_dim: self.emb_dim,
            enc_hidden: self.enc_hidden,
            attn_dim: self.attn_dim,
            attn_heads: self.attn_heads,
            pool_dim: self.pool_dim,
            dec_hidden: self.dec_hidden,
            label_emb_dim: self.label_emb_dim,
            attention_input: self.attention_input,
            ablation: self.ablation,
            intent_feed: self.intent_feed,
            slot_feed: self.slot_feed,
            shared_word_source: self.shared_word_source,
            dropout: self.dropout,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let positive = [("batch_size", self.batch_size), ("max_epochs", self.max_epochs)];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        let reals = [("lr", self.lr), ("eps", self.eps), ("clip_norm", self.clip_norm)];
        if let Some((name, v)) = reals.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        self.segmenter.validate()
    }
}

/// Dictionary used when the config names none: the gold segmentations of
/// the training data when it carries them, else the surface strings of its
/// slot chunks.
pub fn derive_dictionary(train: &[JsonSample]) -> SegmentationDictionary {
    let mut dict = SegmentationDictionary::default();
    let with_words: Vec<_> = train.iter().filter_map(|(_, w)| w.as_ref()).collect();
    if !with_words.is_empty() {
        for w in with_words.into_iter().flatten() {
            dict.insert(w.clone());
        }
        return dict;
    }
    for (u, _) in train {
        if let Some(tags) = &u.slot_tags {
            for c in extract_chunks(tags) {
                dict.insert(u.chars[c.start..=c.end].iter().collect());
            }
        }
    }
    dict
}

/// Uses a sample's own segmentation when it has one, the segmenter
/// otherwise.
pub fn align_corpus(data: &[JsonSample], segmenter: &Segmenter) -> Result<Vec<AlignedSample>> {
    data.iter()
        .map(|(u, words)| {
            let words = match words {
                Some(w) => w.clone(),
                None => segmenter.segment(&u.chars)?,
            };
            AlignedSample::new(u.clone(), words)
        })
        .collect()
}

pub fn vocab_sizes(v: &Vocabularies) -> VocabSizes {
    VocabSizes {
        chars: v.chars.len(),
        words: v.words.len(),
        slots: v.slots.len(),
        intents: v.intents.len(),
    }
}

/// Loss and gradients of one sample under teacher forcing.
pub fn sample_gradients<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    sample: &EncodedSample,
    dropout: &mut Dropout,
) -> Result<(f64, Gradients<T>)> {
    let mut g = Graph::new(store);
    let out = model.forward(&mut g, sample, model.config.ablation, Phase::Train, dropout)?;
    let loss = out.loss.expect("train phase has a loss");
    let value = g.scalar(loss).as_f64();
    Ok((value, g.backward(loss)?))
}

/// Mean loss and mean gradients of a batch. Samples are visited in order,
/// so the sum is reproducible.
pub fn batch_gradients<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    batch: &[&EncodedSample],
    dropout: &mut Dropout,
) -> Result<(f64, Gradients<T>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut total = 0.0;
    let mut grads = Gradients::for_store(store);
    for sample in batch {
        let (loss, g) = sample_gradients(model, store, sample, dropout)?;
        total += loss;
        grads.accumulate(&g);
    }
    let n = batch.len() as f64;
    grads.scale(T::from_f64(1.0 / n));
    Ok((total / n, grads))
}

/// Greedy decoding of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub intent: usize,
    pub slots: Vec<usize>,
    pub lambda_sentence: Option<f64>,
    pub lambda_chars: Option<Vec<f64>>,
}

pub fn decode<T: Scalar>(model: &Model, store: &ParamStore<T>, sample: &EncodedSample) -> Result<Decoded> {
    let mut g = Graph::new(store);
    let out = model.forward(
        &mut g,
        sample,
        model.config.ablation,
        Phase::Infer,
        &mut Dropout::disabled(),
    )?;
    Ok(Decoded {
        intent: out.intent.label,
        slots: out.slots.labels,
        lambda_sentence: out.lambda_sentence,
        lambda_chars: out.lambda_chars,
    })
}

fn symbol(vocab: &crate::corpus::Vocab, id: usize) -> String {
    vocab.symbol(id).unwrap_or(crate::corpus::vocab::UNK).to_string()
}

fn labels_of(d: &Decoded, vocabs: &Vocabularies) -> Labels {
    Labels {
        tags: d.slots.iter().map(|&s| symbol(&vocabs.slots, s)).collect(),
        intent: symbol(&vocabs.intents, d.intent),
    }
}

fn gold_labels(u: &Utterance) -> Result<Labels> {
    match (&u.slot_tags, &u.intent) {
        (Some(tags), Some(intent)) => Ok(Labels {
            tags: tags.clone(),
            intent: intent.clone(),
        }),
        _ => Err(Error::Contract(format!("utterance {:?} has no gold labels", u.text()))),
    }
}

/// Encodes characters and words only, so gold labels unseen in training
/// count as errors rather than failing the run.
fn encode_unlabeled(sample: &AlignedSample, vocabs: &Vocabularies) -> Result<EncodedSample> {
    let stripped = AlignedSample {
        utterance: Utterance {
            chars: sample.utterance.chars.clone(),
            slot_tags: None,
            intent: None,
        },
        words: sample.words.clone(),
        alignment: sample.alignment.clone(),
    };
    encode_sample(&stripped, vocabs)
}

fn score<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    vocabs: &Vocabularies,
    samples: &[EncodedSample],
    golds: &[Labels],
) -> Result<Metrics> {
    let preds = samples
        .iter()
        .map(|s| decode(model, store, s).map(|d| labels_of(&d, vocabs)))
        .collect::<Result<Vec<_>>>()?;
    compute_metrics(golds, &preds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample joint loss over the epoch.
    pub train_loss: f64,
    /// Largest pre-clipping gradient norm seen in the epoch.
    pub max_grad_norm: f64,
    pub dev: Metrics,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    PerfectDev,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_dev: Metrics,
    pub stop_reason: StopReason,
    pub vocab_hash: String,
    pub parameters: usize,
    pub checkpoint: Option<PathBuf>,
}

/// Parameters in either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum Params {
    F32(ParamStore<f32>),
    F64(ParamStore<f64>),
}

impl Params {
    pub fn precision(&self) -> Precision {
        match self {
            Params::F32(_) => Precision::F32,
            Params::F64(_) => Precision::F64,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            Params::F32(s) => checkpoint::encode(s),
            Params::F64(s) => checkpoint::encode(s),
        }
    }

    pub fn num_values(&self) -> usize {
        match self {
            Params::F32(s) => s.num_values(),
            Params::F64(s) => s.num_values(),
        }
    }
}

macro_rules! with_params {
    ($params:expr, $s:ident => $body:expr) => {
        match $params {
            Params::F32($s) => $body,
            Params::F64($s) => $body,
        }
    };
}

pub const MODEL_FORMAT_VERSION: u32 = 1;
const PARAMS_FILE: &str = "params.bin";
const MANIFEST_FILE: &str = "manifest.json";
const VOCAB_FILE: &str = "vocab.json";
const DICTIONARY_FILE: &str = "dictionary.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: TrainConfig,
    pub sizes: VocabSizes,
    pub vocab_hash: String,
    pub best_epoch: usize,
}

/// A trained model with everything needed to run it on raw text.
#[derive(Clone, Debug)]
pub struct ModelArtifact {
    pub manifest: Manifest,
    pub vocabs: Vocabularies,
    pub dictionary: SegmentationDictionary,
    pub model: Model,
    pub params: Params,
}

impl ModelArtifact {
    /// Writes the model as a directory of four files.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| Error::io(p, e))
        };
        write(PARAMS_FILE, &self.params.encode())?;
        write(MANIFEST_FILE, serde_json::to_string_pretty(&self.manifest)?.as_bytes())?;
        write(VOCAB_FILE, serde_json::to_string(&self.vocabs)?.as_bytes())?;
        write(DICTIONARY_FILE, self.dictionary.to_file_contents().as_bytes())?;
        Ok(dir.to_path_buf())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read(&p).map_err(|e| Error::io(p, e))
        };
        let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?)?;
        if manifest.version != MODEL_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "model format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
                manifest.version
            )));
        }
        let vocabs: Vocabularies = serde_json::from_slice(&read(VOCAB_FILE)?)?;
        let found = vocabs.hash();
        if found != manifest.vocab_hash {
            return Err(Error::VocabMismatch {
                expected: manifest.vocab_hash,
                found,
            });
        }
        if vocab_sizes(&vocabs) != manifest.sizes {
            return Err(Error::Checkpoint("vocabulary sizes differ from the manifest".into()));
        }
        let dictionary = crate::segmentation::load_dictionary(&dir.join(DICTIONARY_FILE))?;
        let bytes = read(PARAMS_FILE)?;
        let config = manifest.config.model_config();
        let params = match manifest.config.precision {
            Precision::F32 => Params::F32(checkpoint::decode(&bytes)?),
            Precision::F64 => Params::F64(checkpoint::decode(&bytes)?),
        };
        let model = with_params!(&params, s => Model::bind(config, manifest.sizes, s)?);
        Ok(Self {
            manifest,
            vocabs,
            dictionary,
            model,
            params,
        })
    }

    /// The segmenter the model was trained with, reading its dictionary
    /// from the saved copy.
    pub fn segmenter(&self) -> Result<Segmenter> {
        let mut config = self.manifest.config.segmenter.clone();
        config.dictionary_path = None;
        Segmenter::from_config(&config, Some(self.dictionary.clone()))
    }

    pub fn decode(&self, sample: &EncodedSample) -> Result<Decoded> {
        with_params!(&self.params, s => decode(&self.model, s, sample))
    }

    /// Scores labeled data, segmenting it as during training.
    pub fn evaluate(&self, data: &[JsonSample]) -> Result<Metrics> {
        if data.is_empty() {
            return Err(Error::Contract("evaluation set is empty".into()));
        }
        let segmenter = self.segmenter()?;
        let aligned = align_corpus(data, &segmenter)?;
        let golds = data.iter().map(|(u, _)| gold_labels(u)).collect::<Result<Vec<_>>>()?;
        let encoded = aligned
            .iter()
            .map(|s| encode_unlabeled(s, &self.vocabs))
            .collect::<Result<Vec<_>>>()?;
        with_params!(&self.params, s => score(&self.model, s, &self.vocabs, &encoded, &golds))
    }

    /// Scores data that was encoded elsewhere; refuses a dataset encoded
    /// with different vocabularies.
    pub fn evaluate_encoded(&self, data: &EncodedDataset) -> Result<Metrics> {
        if data.vocab_hash != self.manifest.vocab_hash {
            return Err(Error::VocabMismatch {
                expected: self.manifest.vocab_hash.clone(),
                found: data.vocab_hash.clone(),
            });
        }
        if data.is_empty() {
            return Err(Error::Contract("evaluation set is empty".into()));
        }
        let golds = data
            .samples
            .iter()
            .map(|s| match (&s.slot_ids, s.intent_id) {
                (Some(slots), Some(intent)) => Ok(Labels {
                    tags: slots.iter().map(|&i| symbol(&self.vocabs.slots, i)).collect(),
                    intent: symbol(&self.vocabs.intents, intent),
                }),
                _ => Err(Error::Contract("encoded sample has no gold labels".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        with_params!(&self.params, s => score(&self.model, s, &self.vocabs, &data.samples, &golds))
    }

    pub fn predict(&self, utterances: &[Utterance], diagnostics: bool) -> Result<Vec<Prediction>> {
        let segmenter = self.segmenter()?;
        utterances
            .iter()
            .map(|u| {
                let words = segmenter.segment(&u.chars)?;
                let aligned = AlignedSample::new(Utterance::unlabeled(&u.text()), words)?;
                let encoded = encode_sample(&aligned, &self.vocabs)?;
                let d = self.decode(&encoded)?;
                let labels = labels_of(&d, &self.vocabs);
                Ok(Prediction {
                    chars: u.chars.iter().map(|c| c.to_string()).collect(),
                    slots: labels.tags,
                    intent: labels.intent,
                    lambda_sentence: if diagnostics { d.lambda_sentence } else { None },
                    lambda_chars: if diagnostics { d.lambda_chars } else { None },
                })
            })
            .collect()
    }
}

/// One line of prediction output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub chars: Vec<String>,
    pub slots: Vec<String>,
    pub intent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_sentence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_chars: Option<Vec<f64>>,
}

/// A finished run: its report and the best model.
pub struct TrainOutcome {
    pub report: TrainReport,
    pub artifact: ModelArtifact,
}

/// Trains on `train`, selects on `dev`, and writes the best model to `out`
/// when given.
pub fn train(
    config: &TrainConfig,
    train: &[JsonSample],
    dev: &[JsonSample],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Contract("development set is empty".into()));
    }
    let dictionary = match &config.segmenter.dictionary_path {
        Some(p) => crate::segmentation::load_dictionary(p)?,
        None => derive_dictionary(train),
    };
    let mut seg_config = config.segmenter.clone();
    seg_config.dictionary_path = None;
    let segmenter = Segmenter::from_config(&seg_config, Some(dictionary.clone()))?;
    let train_aligned = align_corpus(train, &segmenter)?;
    let dev_aligned = align_corpus(dev, &segmenter)?;
    let vocabs = Vocabularies::build(&train_aligned)?;
    let train_set = EncodedDataset::encode(&train_aligned, &vocabs)?;
    let dev_golds = dev.iter().map(|(u, _)| gold_labels(u)).collect::<Result<Vec<_>>>()?;
    let dev_set = dev_aligned
        .iter()
        .map(|s| encode_unlabeled(s, &vocabs))
        .collect::<Result<Vec<_>>>()?;
    let sizes = vocab_sizes(&vocabs);

    let data = RunData {
        config,
        vocabs: &vocabs,
        sizes,
        train: &train_set.samples,
        dev: &dev_set,
        dev_golds: &dev_golds,
    };
    let (model, params, mut report) = match config.precision {
        Precision::F32 => {
            let (m, s, r) = run::<f32>(&data)?;
            (m, Params::F32(s), r)
        }
        Precision::F64 => {
            let (m, s, r) = run::<f64>(&data)?;
            (m, Params::F64(s), r)
        }
    };
    report.vocab_hash = vocabs.hash();
    let artifact = ModelArtifact {
        manifest: Manifest {
            version: MODEL_FORMAT_VERSION,
            config: config.clone(),
            sizes,
            vocab_hash: report.vocab_hash.clone(),
            best_epoch: report.best_epoch,
        },
        vocabs,
        dictionary,
        model,
        params,
    };
    if let Some(dir) = out {
        report.checkpoint = Some(artifact.save(dir)?);
    }
    Ok(TrainOutcome { report, artifact })
}

struct RunData<'a> {
    config: &'a TrainConfig,
    vocabs: &'a Vocabularies,
    sizes: VocabSizes,
    train: &'a [EncodedSample],
    dev: &'a [EncodedSample],
    dev_golds: &'a [Labels],
}

fn norms_diagnostic<T: Scalar>(store: &ParamStore<T>) -> String {
    let mut norms: Vec<(f64, &str)> = store
        .iter()
        .map(|(name, t)| {
            let n = t.data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
            (n, name)
        })
        .collect();
    norms.sort_by(|a, b| b.0.total_cmp(&a.0));
    norms
        .iter()
        .take(5)
        .map(|(n, name)| format!("{name}={n:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn run<T: Scalar>(data: &RunData<'_>) -> Result<(Model, ParamStore<T>, TrainReport)> {
    let config = data.config;
    let (model, mut store) = Model::new::<T>(config.model_config(), data.sizes, config.seed)?;
    let mut adam = AdamState::new(&store, config.adam());
    let mut streams = Initializer::new(config.seed ^ 0x5eed_5eed);
    let mut shuffle_rng = streams.fork();
    let mut dropout = Dropout::new(config.dropout, streams.fork());

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, Metrics, ParamStore<T>)> = None;
    let mut stale = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut max_norm: f64 = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&EncodedSample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (loss, mut grads) = batch_gradients(&model, &store, &batch, &mut dropout)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss {loss} at epoch {epoch}, batch {}; largest parameter norms: {}",
                    b + 1,
                    norms_diagnostic(&store)
                )));
            }
            loss_sum += loss * batch.len() as f64;
            AdamState::complete(&store, &mut grads);
            max_norm = max_norm.max(grads.clip_global_norm(config.clip_norm));
            adam.step(&mut store, &grads)?;
        }
        let dev = score(&model, &store, data.vocabs, data.dev, data.dev_golds)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            max_grad_norm: max_norm,
            dev: dev.clone(),
        });
        let improved = best
            .as_ref()
            .is_none_or(|(_, m, _)| dev.overall_accuracy > m.overall_accuracy);
        if improved {
            best = Some((epoch, dev.clone(), store.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        if config.stop_at_perfect_dev && dev.overall_accuracy >= 1.0 {
            stop_reason = StopReason::PerfectDev;
            break;
        }
        if stale > config.patience {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    let (best_epoch, best_dev, best_store) = best.expect("at least one epoch");
    let report = TrainReport {
        config: config.clone(),
        epochs,
        best_epoch,
        best_dev,
        stop_reason,
        vocab_hash: String::new(),
        parameters: best_store.num_values(),
        checkpoint: None,
    };
    Ok((model, best_store, report))
}

/// Dimensions small enough for an exhaustive finite-difference check.
pub fn gradcheck_config() -> TrainConfig {
    TrainConfig {
        emb_dim: 4,
        enc_hidden: 4,
        attn_dim: 4,
        pool_dim: 4,
        dec_hidden: 4,
        label_emb_dim: 3,
        precision: Precision::F64,
        seed: 2,
        ..Default::default()
    }
}

/// Two hand-written utterances: 8 character ids, 7 word ids, 4 slot
/// labels, 2 intents, at most 6 characters and 4 words each.
pub fn gradcheck_corpus() -> Vec<AlignedSample> {
    let make = |text: &str, words: &[&str], tags: &[&str], intent: &str| {
        AlignedSample::new(
            Utterance {
                chars: text.chars().collect(),
                slot_tags: Some(tags.iter().map(|t| t.to_string()).collect()),
                intent: Some(intent.to_string()),
            },
            words.iter().map(|w| w.to_string()).collect(),
        )
        .expect("words cover the text")
    };
    vec![
        make(
            "甲乙丙丁戊己",
            &["甲乙", "丙丁", "戊", "己"],
            &["B-a", "I-a", "O", "O", "B-b", "O"],
            "X",
        ),
        make(
            "丙丁甲乙己",
            &["丙丁", "甲乙", "己"],
            &["O", "O", "B-a", "I-a", "O"],
            "Y",
        ),
    ]
}

/// Half-width of the uniform draw used for gradient-check parameters.
pub const GRADCHECK_SPREAD: f64 = 1.0;

/// Redraws every parameter uniformly from `[-spread, spread]`. The default
/// initialization leaves some gradients (attention pooling, zero biases)
/// near 1e-9, where central differences are pure roundoff; wider weights
/// keep every coordinate measurable.
pub fn spread_parameters(store: &mut ParamStore<f64>, seed: u64, spread: f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.random_range(-spread..=spread));
    }
}

/// Finite-difference check of the summed joint loss over `samples`, in
/// 64-bit, for the mode and dimensions in `config`.
pub fn gradient_check(config: &TrainConfig, samples: &[AlignedSample]) -> Result<GradCheckReport> {
    config.validate()?;
    let vocabs = Vocabularies::build(samples)?;
    let encoded = EncodedDataset::encode(samples, &vocabs)?.samples;
    let (model, mut store) = Model::new::<f64>(config.model_config(), vocab_sizes(&vocabs), config.seed)?;
    spread_parameters(&mut store, config.seed, GRADCHECK_SPREAD);
    finite_difference_check(&mut store, DEFAULT_EPSILON, |store, want| {
        let mut g = Graph::new(store);
        let mut losses = Vec::with_capacity(encoded.len());
        for s in &encoded {
            let out = model.forward(&mut g, s, model.config.ablation, Phase::Train, &mut Dropout::disabled())?;
            losses.push(out.loss.expect("train phase has a loss"));
        }
        let total = g.add_all(&losses)?;
        let grads = if want { Some(g.backward(total)?) } else { None };
        Ok((g.scalar(total), grads))
    })
}

/// Names of the parameters that received a nonzero gradient.
pub fn touched_parameters<T: Scalar>(store: &ParamStore<T>, grads: &Gradients<T>) -> BTreeSet<String> {
    store
        .ids()
        .filter(|&id| grads.get(id).is_some_and(|g| g.iter().any(|x| *x != T::zero())))
        .map(|id| store.name(id).to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::{generate, SyntheticSpec};

    fn tiny() -> TrainConfig {
        TrainConfig {
            emb_dim: 8,
            enc_hidden: 8,
            attn_dim: 8,
            pool_dim: 8,
            dec_hidden: 8,
            label_emb_dim: 4,
            batch_size: 4,
            max_epochs: 3,
            ..Default::default()
        }
    }

    fn corpus(n: usize) -> Vec<JsonSample> {
        generate(&SyntheticSpec {
            utterances: n,
            ..Default::default()
        })
        .samples
        .into_iter()
        .map(|s| (s.utterance, Some(s.words)))
        .collect()
    }

    #[test]
    fn config_round_trips_through_toml_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(TrainConfig::from_file(&p).unwrap(), c);
        let p = dir.path().join("c.json");
        std::fs::write(&p, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(TrainConfig::from_file(&p).unwrap(), c);
        std::fs::write(&p, r#"{"bogus": 1}"#).unwrap();
        assert!(matches!(TrainConfig::from_file(&p), Err(Error::Config(_))));
        std::fs::write(&p, r#"{"dec_hidden": 7}"#).unwrap();
        assert!(matches!(TrainConfig::from_file(&p), Err(Error::Config(_))));
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let c: TrainConfig =
            toml::from_str("ablation = \"no_char_wa\"\nseed = 3\n[segmenter]\nbackend = \"identity\"\n").unwrap();
        assert_eq!(c.ablation, AblationMode::NoCharWa);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.lr, 1e-3);
    }

    #[test]
    fn patience_zero_stops_after_first_flat_epoch() {
        let data = corpus(8);
        let mut c = tiny();
        c.patience = 0;
        c.max_epochs = 20;
        c.stop_at_perfect_dev = false;
        let out = train(&c, &data, &data, None).unwrap();
        let r = &out.report;
        if r.stop_reason == StopReason::Patience {
            let last = r.epochs.len();
            let prev_best = r.epochs[..last - 1]
                .iter()
                .map(|e| e.dev.overall_accuracy)
                .fold(f64::MIN, f64::max);
            assert!(r.epochs[last - 1].dev.overall_accuracy <= prev_best);
        } else {
            assert_eq!(r.epochs.len(), 20);
        }
    }

    #[test]
    fn best_epoch_is_first_maximum() {
        let data = corpus(8);
        let mut c = tiny();
        c.max_epochs = 6;
        c.stop_at_perfect_dev = false;
        c.patience = 100;
        let r = train(&c, &data, &data, None).unwrap().report;
        let best = r.epochs.iter().map(|e| e.dev.overall_accuracy).fold(f64::MIN, f64::max);
        let first = r.epochs.iter().position(|e| e.dev.overall_accuracy == best).unwrap() + 1;
        assert_eq!(r.best_epoch, first);
        assert_eq!(r.best_dev, r.epochs[first - 1].dev);
    }

    #[test]
    fn save_load_round_trip_and_evaluate() {
        let data = corpus(8);
        let dir = tempfile::tempdir().unwrap();
        let out = train(&tiny(), &data, &data, Some(dir.path())).unwrap();
        let loaded = ModelArtifact::load(dir.path()).unwrap();
        assert_eq!(loaded.params, out.artifact.params);
        let m = loaded.evaluate(&data).unwrap();
        assert_eq!(m, out.report.best_dev);
        assert!((0.0..=1.0).contains(&m.intent_accuracy));
        assert!(loaded.evaluate(&[]).is_err());
        let preds = loaded.predict(&[Utterance::unlabeled("一丁")], true).unwrap();
        assert_eq!(preds[0].slots.len(), 2);
        assert!(preds[0].lambda_sentence.is_some());
    }

    #[test]
    fn vocab_mismatch_is_refused() {
        let data = corpus(8);
        let out = train(&tiny(), &data, &data, None).unwrap();
        let aligned: Vec<AlignedSample> = data
            .iter()
            .map(|(u, w)| AlignedSample::new(u.clone(), w.clone().unwrap()).unwrap())
            .collect();
        let other = Vocabularies::build(&aligned[..2]).unwrap();
        let encoded = EncodedDataset::encode(&aligned[..2], &other).unwrap();
        assert!(matches!(
            out.artifact.evaluate_encoded(&encoded),
            Err(Error::VocabMismatch { .. })
        ));
        let same = EncodedDataset::encode(&aligned, &out.artifact.vocabs).unwrap();
        assert_eq!(out.artifact.evaluate_encoded(&same).unwrap(), out.report.best_dev);
    }

    #[test]
    fn tampered_vocabulary_is_refused() {
        let data = corpus(6);
        let dir = tempfile::tempdir().unwrap();
        train(&tiny(), &data, &data, Some(dir.path())).unwrap();
        let p = dir.path().join(VOCAB_FILE);
        let mut v: Vocabularies = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
        v.intents.add("Extra");
        std::fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
        assert!(matches!(
            ModelArtifact::load(dir.path()),
            Err(Error::VocabMismatch { .. })
        ));
    }

    #[test]
    fn first_epoch_lowers_loss() {
        let data = corpus(12);
        let mut c = tiny();
        c.max_epochs = 1;
        let before = {
            let out = train(&c, &data, &data, None).unwrap();
            out.report.epochs[0].train_loss
        };
        c.max_epochs = 2;
        let r = train(&c, &data, &data, None).unwrap().report;
        assert_eq!(r.epochs[0].train_loss, before);
        assert!(r.epochs[1].train_loss < r.epochs[0].train_loss);
    }

    #[test]
    fn derived_dictionary_uses_slot_chunks_without_gold_words() {
        let data: Vec<JsonSample> = corpus(6).into_iter().map(|(u, _)| (u, None)).collect();
        let d = derive_dictionary(&data);
        for (u, _) in &data {
            for c in extract_chunks(u.slot_tags.as_ref().unwrap()) {
                assert!(d.contains(&u.chars[c.start..=c.end].iter().collect::<String>()));
            }
        }
    }
}
