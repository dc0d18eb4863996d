//! Loss assembly, the training loop, checkpoints and the ablation grid.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::acoustic_context::ace_prediction_loss;
use crate::autograd::{Float, Graph, ParamSet, Var};
use crate::checkpoint::{Checkpoint, NamedArray};
use crate::corpus::{
    extract_context_window, extract_sentence_context, CorpusManifest, FeatureConfig, SpeakerPitchStats,
};
use crate::error::{invalid, Error, Result};
use crate::nn::{seeded_rng, ParamBuilder};
use crate::optim::{clip_global_norm, lr_schedule, Adam, AdamConfig};
use crate::text_context::{EmbeddingProvider, LateralMode, ProviderSpec, TextContextInput, EMBEDDING_GROUP};
use crate::tts::{phoneme_targets, AcousticModel, BatchItem, Mode, ModelConfig, ModelOutput};

/// Scalar loss components of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mel: f64,
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ace: Option<f64>,
    pub total: f64,
}

/// Loss components as graph nodes.
pub struct LossTerms {
    pub mel: Var,
    pub duration: Var,
    pub pitch: Var,
    pub energy: Var,
    pub ace: Option<Var>,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown<T: Float>(&self, g: &Graph<'_, T>) -> LossBreakdown {
        let s = |v: Var| g.scalar_value(v).f64();
        LossBreakdown {
            mel: s(self.mel),
            duration: s(self.duration),
            pitch: s(self.pitch),
            energy: s(self.energy),
            ace: self.ace.map(s),
            total: s(self.total),
        }
    }
}

/// Which encoder the auxiliary L1 term updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AceGradient {
    #[default]
    Both,
    AceOnly,
    AeOnly,
}

fn column<T: Float>(g: &mut Graph<'_, T>, vals: impl Iterator<Item = f64>) -> Var {
    let v: Vec<T> = vals.map(T::of).collect();
    g.constant(Array2::from_shape_vec((v.len(), 1), v).expect("column"))
}

fn mse<T: Float>(g: &mut Graph<'_, T>, pred: Var, target: Var) -> Var {
    let d = g.sub(pred, target);
    let sq = g.square(d);
    g.mean_all(sq)
}

/// Mel L1, duration MSE on log durations, voiced-masked pitch MSE, energy MSE and
/// the auxiliary L1 between acoustic context and target vectors, which covers only
/// items that have a previous utterance.
pub fn total_loss<T: Float>(
    g: &mut Graph<'_, T>,
    output: &ModelOutput,
    items: &[BatchItem],
    lambda_ace: f64,
    ace_gradient: AceGradient,
) -> Result<LossTerms> {
    let frames: usize = items.iter().map(|it| it.mel.nrows()).sum();
    let phonemes: usize = items.iter().map(|it| it.phonemes.len()).sum();
    let (mf, mb) = g.shape(output.mel);
    if frames != mf || items.first().map(|it| it.mel.ncols()) != Some(mb) {
        return Err(invalid(format!("predicted mel {:?} vs {frames} target frames", (mf, mb))));
    }
    for v in [output.log_durations, output.pitch, output.energy] {
        if g.shape(v) != (phonemes, 1) {
            return Err(invalid(format!("phoneme predictions {:?} vs {phonemes} phonemes", g.shape(v))));
        }
    }
    for it in items {
        let n = it.phonemes.len();
        if it.durations.len() != n || it.pitch.len() != n || it.pitch_mask.len() != n || it.energy.len() != n {
            return Err(invalid("phoneme-level targets do not match the phoneme count"));
        }
    }

    let views: Vec<_> = items.iter().map(|it| it.mel.view()).collect();
    let target_mel = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| invalid(e.to_string()))?;
    let target_mel = g.constant(target_mel.mapv(|v| T::of(v as f64)));
    let diff = g.sub(output.mel, target_mel);
    let abs = g.abs(diff);
    let mel = g.mean_all(abs);

    let log_d = column(g, items.iter().flat_map(|it| it.durations.iter().map(|&d| (d as f64).ln())));
    let duration = mse(g, output.log_durations, log_d);

    let voiced = items.iter().flat_map(|it| it.pitch_mask.iter()).filter(|&&m| m).count();
    let pitch = if voiced == 0 {
        g.zeros(1, 1)
    } else {
        let target = column(g, items.iter().flat_map(|it| it.pitch.iter().map(|&p| p as f64)));
        let mask = column(g, items.iter().flat_map(|it| it.pitch_mask.iter().map(|&m| if m { 1.0 } else { 0.0 })));
        let d = g.sub(output.pitch, target);
        let d = g.mul(d, mask);
        let sq = g.square(d);
        let s = g.sum_all(sq);
        g.scale(s, 1.0 / voiced as f64)
    };

    let e_target = column(g, items.iter().flat_map(|it| it.energy.iter().map(|&e| e as f64)));
    let energy = mse(g, output.energy, e_target);

    let ace = match (output.v_ace, output.v_ae) {
        (Some(a), Some(b)) => {
            let rows: Vec<usize> = items.iter().enumerate().filter(|(_, it)| it.prev_mel.is_some()).map(|(i, _)| i).collect();
            if rows.is_empty() {
                Some(g.zeros(1, 1))
            } else {
                let a = g.select_rows(a, &rows);
                let b = g.select_rows(b, &rows);
                let (a, b) = match ace_gradient {
                    AceGradient::Both => (a, b),
                    AceGradient::AceOnly => (a, g.detach(b)),
                    AceGradient::AeOnly => (g.detach(a), b),
                };
                Some(ace_prediction_loss(g, a, b)?)
            }
        }
        _ => None,
    };

    let mut total = g.add(mel, duration);
    total = g.add(total, pitch);
    total = g.add(total, energy);
    if let Some(a) = ace {
        if lambda_ace != 0.0 {
            let w = g.scale(a, lambda_ace);
            total = g.add(total, w);
        }
    }
    Ok(LossTerms { mel, duration, pitch, energy, ace, total })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub warmup: u64,
    pub max_steps: u64,
    pub seed: u64,
    pub lambda_ace: f64,
    pub ace_gradient: AceGradient,
    pub clip_norm: f64,
    /// Learning-rate multipliers per parameter group (e.g. `embedding`).
    pub group_scales: BTreeMap<String, f64>,
    pub ablation_id: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            warmup: 400,
            max_steps: 2000,
            seed: 0,
            lambda_ace: 1.0,
            ace_gradient: AceGradient::Both,
            clip_norm: 1.0,
            group_scales: BTreeMap::new(),
            ablation_id: "atce-bi".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if self.group_scales.values().any(|&s| !(s >= 0.0)) || !(self.lambda_ace >= 0.0) {
            return Err(invalid("learning-rate scales and the auxiliary weight must be non-negative"));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a trained model, stored in the checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub ablation_id: String,
    pub step: u64,
    pub model: ModelConfig,
    pub provider: ProviderSpec,
    pub features: FeatureConfig,
    pub speakers: Vec<String>,
    pub stats: Vec<SpeakerPitchStats>,
}

/// A model with its parameters and provider, ready for training or inference.
pub struct TrainedModel {
    pub meta: CheckpointMeta,
    pub model: AcousticModel,
    pub params: ParamSet<f32>,
    pub provider: Box<dyn EmbeddingProvider>,
}

impl TrainedModel {
    pub fn init(meta: CheckpointMeta, seed: u64) -> Result<Self> {
        let provider = meta.provider.build()?;
        let mut params = ParamSet::new();
        let mut rng = seeded_rng(seed);
        let model = AcousticModel::new(&mut ParamBuilder::new(&mut params, &mut rng), meta.model.clone(), provider.as_ref())?;
        Ok(Self { meta, model, params, provider })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_params(serde_json::to_string(&self.meta)?, &self.params))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&ck.meta)?;
        let mut m = Self::init(meta, 0)?;
        ck.load_into(&mut m.params)?;
        Ok(m)
    }

    pub fn stats_for(&self, speaker: &str) -> Result<&SpeakerPitchStats> {
        self.meta
            .stats
            .iter()
            .find(|s| s.speaker_id == speaker)
            .ok_or_else(|| invalid(format!("no pitch statistics for speaker `{speaker}`")))
    }

    pub fn speaker_index(&self, speaker: &str) -> Result<usize> {
        self.meta
            .speakers
            .iter()
            .position(|s| s == speaker)
            .ok_or_else(|| invalid(format!("speaker `{speaker}` unknown to the model")))
    }

    /// Text input for one utterance under the model's lateral mode, with `k` overriding
    /// the configured window length.
    pub fn text_input(&self, texts: &[&str], index: usize, k: Option<usize>) -> Result<TextContextInput> {
        let tce = &self.meta.model.tce;
        let window = match tce.mode {
            LateralMode::Implicit => extract_sentence_context(texts, index, tce.implicit_n_sentences)?,
            LateralMode::None => crate::corpus::ContextWindow::empty(),
            _ => extract_context_window(texts, index, k.unwrap_or(tce.k))?,
        };
        Ok(TextContextInput { target_text: texts[index].to_string(), window })
    }

    /// Phoneme ids of an utterance under the model's inventory.
    pub fn phoneme_ids(&self, phonemes: &[String]) -> Result<Vec<usize>> {
        phonemes
            .iter()
            .map(|p| self.meta.features.phoneme_id(p).ok_or_else(|| invalid(format!("unknown phoneme `{p}`"))))
            .collect()
    }

    /// Teacher-forcing items for every utterance, with ground-truth previous mels.
    pub fn training_items(&self, manifest: &CorpusManifest) -> Result<Vec<BatchItem>> {
        let mut out = Vec::with_capacity(manifest.num_utterances());
        for book in &manifest.books {
            let texts = book.texts();
            for (i, u) in book.utterances.iter().enumerate() {
                let stats = self.stats_for(&u.speaker_id)?;
                let (pitch, pitch_mask, energy) = phoneme_targets(u, stats)?;
                out.push(BatchItem {
                    phonemes: self.phoneme_ids(&u.phonemes)?,
                    speaker: self.speaker_index(&u.speaker_id)?,
                    durations: u.durations.clone(),
                    pitch,
                    pitch_mask,
                    energy,
                    mel: u.mel.clone(),
                    prev_mel: (i > 0).then(|| book.utterances[i - 1].mel.clone()),
                    text: self.text_input(&texts, i, None)?,
                });
            }
        }
        Ok(out)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Batch indices of a step: a seeded draw without replacement.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rand::seq::index::sample(&mut rng, n, batch.min(n)).into_vec()
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: TrainedModel,
    pub optimizer: Adam<f32>,
}

impl Trainer {
    pub fn new(model: TrainedModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut optimizer = Adam::new(&model.params, AdamConfig::default());
        if model.provider.trainable() {
            optimizer = optimizer.with_group_scale(EMBEDDING_GROUP, model.provider.lr_scale());
        }
        for (g, &s) in &config.group_scales {
            optimizer = optimizer.with_group_scale(g, s);
        }
        Ok(Self { config, model, optimizer })
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.steps()
    }

    /// Runs one optimizer step on the given items.
    pub fn step(&mut self, items: &[BatchItem]) -> Result<StepRecord> {
        let step = self.optimizer.steps() + 1;
        let m = &self.model;
        let (breakdown, mut grads) = {
            let mut g = Graph::new(&m.params);
            let out = m.model.forward(&mut g, items, m.provider.as_ref(), Mode::Train)?;
            let terms = total_loss(&mut g, &out, items, self.config.lambda_ace, self.config.ace_gradient)?;
            let b = terms.breakdown(&g);
            if !b.total.is_finite() {
                return Err(Error::NonFiniteLoss { step, detail: serde_json::to_string(&b)? });
            }
            let grads = g.backward(terms.total).into_param_grads();
            (b, grads)
        };
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("gradient norm {grad_norm}; loss {}", serde_json::to_string(&breakdown)?),
            });
        }
        let lr = lr_schedule(step, m.meta.model.d_model, self.config.warmup);
        self.optimizer.update(&mut self.model.params, &grads, lr)?;
        self.model.meta.step = step;
        Ok(StepRecord { step, lr, loss: breakdown, grad_norm })
    }

    /// Trains until `max_steps`, writing one JSON line per step.
    pub fn run(&mut self, items: &[BatchItem], log: &mut dyn Write) -> Result<Vec<StepRecord>> {
        if items.is_empty() {
            return Err(invalid("no training utterances"));
        }
        let mut records = Vec::new();
        while self.optimizer.steps() < self.config.max_steps {
            let idx = batch_indices(self.config.seed, self.optimizer.steps() + 1, items.len(), self.config.batch_size);
            let batch: Vec<BatchItem> = idx.iter().map(|&i| items[i].clone()).collect();
            let rec = self.step(&batch)?;
            serde_json::to_writer(&mut *log, &rec)?;
            log.write_all(b"\n")?;
            if rec.step % 100 == 0 || rec.step == 1 {
                info!(step = rec.step, total = rec.loss.total, lr = rec.lr, "training");
            }
            records.push(rec);
        }
        log.flush()?;
        Ok(records)
    }

    /// Optimizer moments and step count as a checkpoint.
    pub fn optimizer_checkpoint(&self) -> Checkpoint {
        let (m, v) = self.optimizer.moments();
        let mut arrays = Vec::with_capacity(2 * m.len());
        for (((_, p), m), v) in self.model.params.iter().zip(m).zip(v) {
            arrays.push(NamedArray { name: format!("m.{}", p.name), group: p.group.clone(), value: m.clone() });
            arrays.push(NamedArray { name: format!("v.{}", p.name), group: p.group.clone(), value: v.clone() });
        }
        let meta = serde_json::json!({ "step": self.optimizer.steps(), "train": self.config }).to_string();
        Checkpoint { meta, arrays }
    }

    pub fn save(&self, model_path: &Path, optimizer_path: &Path) -> Result<()> {
        self.model.save(model_path)?;
        self.optimizer_checkpoint().save(optimizer_path)
    }

    /// Restores parameters and optimizer state; training continues from the saved step.
    pub fn resume(model_path: &Path, optimizer_path: &Path, config: TrainConfig) -> Result<Self> {
        let model = TrainedModel::load(model_path)?;
        let mut t = Self::new(model, config)?;
        let ck = Checkpoint::load(optimizer_path)?;
        let meta: serde_json::Value = serde_json::from_str(&ck.meta)?;
        let step = meta["step"].as_u64().ok_or_else(|| Error::Format("optimizer state without step".into()))?;
        if ck.arrays.len() != 2 * t.model.params.len() {
            return Err(invalid("optimizer state does not match the model"));
        }
        let mut m = Vec::new();
        let mut v = Vec::new();
        for pair in ck.arrays.chunks(2) {
            m.push(pair[0].value.clone());
            v.push(pair[1].value.clone());
        }
        t.optimizer.restore(step, m, v)?;
        t.model.meta.step = step;
        Ok(t)
    }
}

/// One entry of an ablation suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub id: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Inference-time window length, when it differs from training.
    pub eval_k: Option<usize>,
    /// Reuse the checkpoint of another run instead of training.
    pub checkpoint_from: Option<String>,
}

pub const TABLE2_IDS: [&str; 8] = ["ace", "nakata", "tce-pre", "tce-suc", "tce-bi", "atce-pre", "atce-suc", "atce-bi"];
pub const TABLE1_KS: [usize; 4] = [16, 32, 64, 128];

/// Model configuration for an ablation id (`none`, an entry of `TABLE2_IDS`, or `atce-bi-k<k>`).
pub fn configure(id: &str, base: &ModelConfig) -> Result<ModelConfig> {
    let mut m = base.clone();
    let (ace, mode) = match id {
        "none" => (false, LateralMode::None),
        "ace" => (true, LateralMode::None),
        "nakata" => (false, LateralMode::Implicit),
        "tce-pre" => (false, LateralMode::Pre),
        "tce-suc" => (false, LateralMode::Suc),
        "tce-bi" => (false, LateralMode::Bi),
        "atce-pre" => (true, LateralMode::Pre),
        "atce-suc" => (true, LateralMode::Suc),
        "atce-bi" => (true, LateralMode::Bi),
        other => match other.strip_prefix("atce-bi-k").and_then(|k| k.parse::<usize>().ok()) {
            Some(k) => {
                m.tce.k = k;
                (true, LateralMode::Bi)
            }
            None => return Err(invalid(format!("unknown ablation id `{id}`"))),
        },
    };
    m.use_ace = ace;
    m.tce.mode = mode;
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Table1,
    Table2,
}

/// Run list of a suite, in report order.
pub fn ablation_matrix(suite: Suite, base: &ModelConfig, train: &TrainConfig) -> Vec<RunConfig> {
    let run = |id: String, eval_k: Option<usize>, from: Option<String>| {
        let model = configure(&id, base).expect("known id");
        let lambda = if model.use_ace { train.lambda_ace } else { 0.0 };
        RunConfig {
            train: TrainConfig { ablation_id: id.clone(), lambda_ace: lambda, ..train.clone() },
            id,
            model,
            eval_k,
            checkpoint_from: from,
        }
    };
    match suite {
        Suite::Table2 => TABLE2_IDS.iter().map(|id| run(id.to_string(), None, None)).collect(),
        Suite::Table1 => {
            let mut v: Vec<RunConfig> = TABLE1_KS.iter().map(|k| run(format!("atce-bi-k{k}"), None, None)).collect();
            let mut over = run("atce-bi-k128".into(), Some(64), Some("atce-bi-k128".into()));
            over.id = "atce-bi-k128-to-64".into();
            over.train.ablation_id = over.id.clone();
            v.push(over);
            v
        }
    }
}
