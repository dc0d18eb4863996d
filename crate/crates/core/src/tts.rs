//! Multi-speaker non-autoregressive acoustic model: relative-position transformer
//! encoder/decoder, additive speaker and context conditioning, and a variance
//! adaptor that predicts phoneme-level pitch and energy before length regulation.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::acoustic_context::{encode_acoustic_context, encode_acoustic_target, GstConfig, GstEncoder};
use crate::autograd::{Float, Graph, ParamId, Var};
use crate::corpus::{normalize_pitch, SpeakerPitchStats, Utterance};
use crate::error::{invalid, Error, Result};
use crate::nn::{broadcast_segments, Conv1d, LayerNorm, Linear, ParamBuilder, Segments};
use crate::text_context::{EmbeddingProvider, LateralMode, TceConfig, TextContextEncoder, TextContextInput};

/// Index of the relative-position embedding used between query `i` and key `j`.
pub fn relative_position_bucket(i: usize, j: usize, clip: usize) -> usize {
    let c = clip as i64;
    ((j as i64 - i as i64).clamp(-c, c) + c) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_filter: usize,
    pub ffn_kernel: usize,
    pub predictor_filter: usize,
    pub predictor_kernel: usize,
    pub clip_distance: usize,
    pub mel_bins: usize,
    pub n_phonemes: usize,
    pub n_speakers: usize,
    pub use_ace: bool,
    pub gst: GstConfig,
    pub tce: TceConfig,
}

impl ModelConfig {
    /// Desk-scale defaults with the given corpus dimensions.
    pub fn desk(mel_bins: usize, n_phonemes: usize, n_speakers: usize) -> Self {
        Self {
            d_model: 256,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ffn_filter: 256,
            ffn_kernel: 3,
            predictor_filter: 64,
            predictor_kernel: 3,
            clip_distance: 4,
            mel_bins,
            n_phonemes,
            n_speakers,
            use_ace: true,
            gst: GstConfig::default(),
            tce: TceConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_distance == 0 {
            return Err(invalid("clip distance must be at least 1"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(invalid(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.gst.out_dim != self.d_model {
            return Err(invalid(format!("acoustic context width {} != d_model {}", self.gst.out_dim, self.d_model)));
        }
        if self.mel_bins == 0 || self.n_phonemes == 0 || self.n_speakers == 0 {
            return Err(invalid("mel bins, phoneme and speaker counts must be positive"));
        }
        self.gst.validate()
    }

    pub fn uses_tce(&self) -> bool {
        self.tce.mode != LateralMode::None
    }
}

/// Multi-head self-attention whose keys and values are augmented with learned
/// embeddings of the clipped relative distance. Nothing depends on absolute position.
#[derive(Clone, Debug)]
pub struct RelativeSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    /// `[2·clip + 1 × d_head]`, shared by all heads.
    pub rel_key: ParamId,
    pub rel_value: ParamId,
    pub heads: usize,
    pub clip: usize,
}

impl RelativeSelfAttention {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, d: usize, heads: usize, clip: usize) -> Self {
        let dh = d / heads;
        Self {
            query: Linear::new(&mut pb.sub("query"), d, d, true),
            key: Linear::new(&mut pb.sub("key"), d, d, true),
            value: Linear::new(&mut pb.sub("value"), d, d, true),
            out: Linear::new(&mut pb.sub("out"), d, d, true),
            rel_key: pb.normal("rel_key", 2 * clip + 1, dh, (dh as f64).powf(-0.5)),
            rel_value: pb.normal("rel_value", 2 * clip + 1, dh, (dh as f64).powf(-0.5)),
            heads,
            clip,
        }
    }

    fn bucket_map(&self, len: usize, cache: &mut HashMap<usize, Rc<[usize]>>) -> Rc<[usize]> {
        cache
            .entry(len)
            .or_insert_with(|| {
                (0..len * len)
                    .map(|ij| relative_position_bucket(ij / len, ij % len, self.clip))
                    .collect::<Vec<_>>()
                    .into()
            })
            .clone()
    }

    /// Self-attention within each segment of the packed rows.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, segs: &Segments) -> Var {
        let d = g.shape(x).1;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let rk = g.param(self.rel_key);
        let rv = g.param(self.rel_value);
        let mut cache = HashMap::new();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let mut parts = Vec::with_capacity(segs.count());
            for (off, len) in segs.iter() {
                if len == 0 {
                    continue;
                }
                let map = self.bucket_map(len, &mut cache);
                let qs = g.slice_rows(qh, off, len);
                let ks = g.slice_rows(kh, off, len);
                let vs = g.slice_rows(vh, off, len);
                let content = g.matmul_t(qs, ks);
                let rel = g.matmul_t(qs, rk);
                let rel = g.row_gather(rel, len, map.clone());
                let logits = g.add(content, rel);
                let logits = g.scale(logits, scale);
                let w = g.softmax_rows(logits);
                let ctx = g.matmul(w, vs);
                let wb = g.row_scatter(w, 2 * self.clip + 1, map);
                let relv = g.matmul(wb, rv);
                parts.push(g.add(ctx, relv));
            }
            heads.push(if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) });
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.out.forward(g, cat)
    }
}

/// Post-norm transformer block with a convolutional feed-forward layer.
#[derive(Clone, Debug)]
pub struct FftBlock {
    pub attention: RelativeSelfAttention,
    pub norm1: LayerNorm,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub norm2: LayerNorm,
}

impl FftBlock {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Self {
        Self {
            attention: RelativeSelfAttention::new(&mut pb.sub("attention"), cfg.d_model, cfg.heads, cfg.clip_distance),
            norm1: LayerNorm::new(&mut pb.sub("norm1"), cfg.d_model),
            conv1: Conv1d::new(&mut pb.sub("conv1"), cfg.d_model, cfg.ffn_filter, cfg.ffn_kernel, 1),
            conv2: Conv1d::new(&mut pb.sub("conv2"), cfg.ffn_filter, cfg.d_model, 1, 1),
            norm2: LayerNorm::new(&mut pb.sub("norm2"), cfg.d_model),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, segs: &Segments) -> Var {
        let a = self.attention.forward(g, x, segs);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, x);
        let (f, _) = self.conv1.forward(g, x, segs);
        let f = g.relu(f);
        let (f, _) = self.conv2.forward(g, f, segs);
        let x = g.add(x, f);
        self.norm2.forward(g, x)
    }
}

/// Two convolutions with ReLU and layer norm, then a scalar projection per row.
#[derive(Clone, Debug)]
pub struct VariancePredictor {
    pub conv1: Conv1d,
    pub norm1: LayerNorm,
    pub conv2: Conv1d,
    pub norm2: LayerNorm,
    pub out: Linear,
}

impl VariancePredictor {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, d: usize, filter: usize, kernel: usize) -> Self {
        Self {
            conv1: Conv1d::new(&mut pb.sub("conv1"), d, filter, kernel, 1),
            norm1: LayerNorm::new(&mut pb.sub("norm1"), filter),
            conv2: Conv1d::new(&mut pb.sub("conv2"), filter, filter, kernel, 1),
            norm2: LayerNorm::new(&mut pb.sub("norm2"), filter),
            out: Linear::new(&mut pb.sub("out"), filter, 1, true),
        }
    }

    /// `[rows × 1]`
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, segs: &Segments) -> Var {
        let (h, _) = self.conv1.forward(g, x, segs);
        let h = g.relu(h);
        let h = self.norm1.forward(g, h);
        let (h, _) = self.conv2.forward(g, h, segs);
        let h = g.relu(h);
        let h = self.norm2.forward(g, h);
        self.out.forward(g, h)
    }
}

/// One utterance as seen by the model. Target fields may be empty at inference.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub phonemes: Vec<usize>,
    pub speaker: usize,
    pub durations: Vec<usize>,
    /// Phoneme-level normalized pitch (0 where `pitch_mask` is false).
    pub pitch: Vec<f32>,
    pub pitch_mask: Vec<bool>,
    pub energy: Vec<f32>,
    pub mel: Array2<f32>,
    pub prev_mel: Option<Array2<f32>>,
    pub text: TextContextInput,
}

/// Phoneme-level `(pitch, voiced mask, energy)`: normalized pitch averaged over a
/// phoneme's voiced frames and energy averaged over all its frames.
pub fn phoneme_targets(utt: &Utterance, stats: &SpeakerPitchStats) -> Result<(Vec<f32>, Vec<bool>, Vec<f32>)> {
    let n = utt.durations.len();
    let mut pitch = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    let mut energy = Vec::with_capacity(n);
    let mut t = 0;
    for &d in &utt.durations {
        let frames = t..t + d;
        let voiced: Vec<f64> = utt.pitch[frames.clone()].iter().filter(|&&p| p > 0.0).map(|&p| p as f64).collect();
        if voiced.is_empty() {
            pitch.push(0.0);
            mask.push(false);
        } else {
            let mut s = 0.0;
            for p in &voiced {
                s += normalize_pitch(*p, stats)?;
            }
            pitch.push((s / voiced.len() as f64) as f32);
            mask.push(true);
        }
        energy.push((utt.energy[frames].iter().map(|&e| e as f64).sum::<f64>() / d as f64) as f32);
        t += d;
    }
    Ok((pitch, mask, energy))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Teacher forcing with target durations, pitch and energy.
    Train,
    Infer,
}

/// Result of the variance adaptor.
pub struct Adapted {
    /// `[frames × d_model]`
    pub frames: Var,
    pub frame_segs: Segments,
    /// `[phonemes × 1]` each.
    pub log_durations: Var,
    pub pitch: Var,
    pub energy: Var,
    pub durations: Vec<Vec<usize>>,
}

pub struct ModelOutput {
    /// `[frames × mel_bins]`, packed per item.
    pub mel: Var,
    pub frame_segs: Segments,
    pub phoneme_segs: Segments,
    pub log_durations: Var,
    pub pitch: Var,
    pub energy: Var,
    pub durations: Vec<Vec<usize>>,
    pub v_ace: Option<Var>,
    pub v_ae: Option<Var>,
    pub v_tce: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct AcousticModel {
    pub config: ModelConfig,
    pub phoneme_embedding: ParamId,
    pub speaker_embedding: ParamId,
    pub encoder: Vec<FftBlock>,
    pub ace: Option<GstEncoder>,
    pub ae: Option<GstEncoder>,
    pub tce: Option<TextContextEncoder>,
    pub duration: VariancePredictor,
    pub pitch: VariancePredictor,
    pub energy: VariancePredictor,
    pub pitch_embedding: Linear,
    pub energy_embedding: Linear,
    pub decoder: Vec<FftBlock>,
    pub mel_out: Linear,
}

impl AcousticModel {
    /// Registers parameters for every enabled component. Disabled context encoders
    /// have no parameters.
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, config: ModelConfig, provider: &dyn EmbeddingProvider) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = (d as f64).powf(-0.5);
        let phoneme_embedding = pb.normal("phoneme_embedding", config.n_phonemes, d, std);
        let speaker_embedding = pb.normal("speaker_embedding", config.n_speakers, d, std);
        let encoder = (0..config.encoder_layers).map(|i| FftBlock::new(&mut pb.sub(&format!("encoder.{i}")), &config)).collect();
        let (ace, ae) = if config.use_ace {
            (
                Some(GstEncoder::new(&mut pb.sub("ace"), config.gst.clone(), config.mel_bins)),
                Some(GstEncoder::new(&mut pb.sub("ae"), config.gst.clone(), config.mel_bins)),
            )
        } else {
            (None, None)
        };
        let tce = config.uses_tce().then(|| TextContextEncoder::new(&mut pb.sub("tce"), config.tce.clone(), provider, d));
        let (f, k) = (config.predictor_filter, config.predictor_kernel);
        let duration = VariancePredictor::new(&mut pb.sub("duration"), d, f, k);
        let pitch = VariancePredictor::new(&mut pb.sub("pitch"), d, f, k);
        let energy = VariancePredictor::new(&mut pb.sub("energy"), d, f, k);
        let pitch_embedding = Linear::new(&mut pb.sub("pitch_embedding"), 1, d, true);
        let energy_embedding = Linear::new(&mut pb.sub("energy_embedding"), 1, d, true);
        let decoder = (0..config.decoder_layers).map(|i| FftBlock::new(&mut pb.sub(&format!("decoder.{i}")), &config)).collect();
        let mel_out = Linear::new(&mut pb.sub("mel_out"), d, config.mel_bins, true);
        Ok(Self {
            config,
            phoneme_embedding,
            speaker_embedding,
            encoder,
            ace,
            ae,
            tce,
            duration,
            pitch,
            energy,
            pitch_embedding,
            energy_embedding,
            decoder,
            mel_out,
        })
    }

    /// Raw transformer encoder output over packed phoneme ids.
    pub fn encoder_output<T: Float>(&self, g: &mut Graph<'_, T>, phonemes: &[Vec<usize>]) -> Result<(Var, Segments)> {
        let mut ids = Vec::new();
        for seq in phonemes {
            if seq.is_empty() {
                return Err(invalid("utterance without phonemes"));
            }
            for &p in seq {
                if p >= self.config.n_phonemes {
                    return Err(invalid(format!("phoneme id {p} outside inventory of {}", self.config.n_phonemes)));
                }
                ids.push(p);
            }
        }
        let segs = Segments::new(phonemes.iter().map(Vec::len).collect());
        let table = g.param(self.phoneme_embedding);
        let mut x = g.select_rows(table, &ids);
        for block in &self.encoder {
            x = block.forward(g, x, &segs);
        }
        Ok((x, segs))
    }

    /// Adds speaker embeddings and the per-item context vectors (`[B × d_model]`,
    /// `None` = disabled) to the encoder output.
    pub fn condition<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        encoded: Var,
        segs: &Segments,
        speakers: &[usize],
        contexts: &[Option<Var>],
    ) -> Result<Var> {
        if let Some(&s) = speakers.iter().find(|&&s| s >= self.config.n_speakers) {
            return Err(invalid(format!("speaker id {s} outside table of {}", self.config.n_speakers)));
        }
        if speakers.len() != segs.count() {
            return Err(invalid("one speaker per item required"));
        }
        let table = g.param(self.speaker_embedding);
        let rows: Vec<usize> = segs.row_owner().into_iter().map(|i| speakers[i]).collect();
        let spk = g.select_rows(table, &rows);
        let mut h = g.add(encoded, spk);
        for c in contexts.iter().flatten() {
            let b = broadcast_segments(g, *c, segs);
            h = g.add(h, b);
        }
        Ok(h)
    }

    /// Encoder output plus speaker and context conditioning.
    pub fn encode_phonemes<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        phonemes: &[Vec<usize>],
        speakers: &[usize],
        contexts: &[Option<Var>],
    ) -> Result<(Var, Segments)> {
        let (x, segs) = self.encoder_output(g, phonemes)?;
        let h = self.condition(g, x, &segs, speakers, contexts)?;
        Ok((h, segs))
    }

    /// Predicts duration, pitch and energy per phoneme, adds the (target or
    /// predicted) pitch and energy embeddings, and expands to frames.
    pub fn variance_adapt<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        encoded: Var,
        segs: &Segments,
        targets: Option<(&[Vec<usize>], &[Vec<f32>], &[Vec<f32>])>,
    ) -> Result<Adapted> {
        let log_durations = self.duration.forward(g, encoded, segs);
        let pitch = self.pitch.forward(g, encoded, segs);
        let column = |g: &mut Graph<'_, T>, vals: &[Vec<f32>]| -> Result<Var> {
            let flat: Vec<T> = vals.iter().flatten().map(|&v| T::of(v as f64)).collect();
            if flat.len() != segs.total() {
                return Err(invalid(format!("{} phoneme targets for {} phonemes", flat.len(), segs.total())));
            }
            Ok(g.constant(Array2::from_shape_vec((flat.len(), 1), flat).expect("column")))
        };
        let pitch_in = match targets {
            Some((_, p, _)) => column(g, p)?,
            None => g.detach(pitch),
        };
        let pe = self.pitch_embedding.forward(g, pitch_in);
        let h = g.add(encoded, pe);
        let energy = self.energy.forward(g, h, segs);
        let energy_in = match targets {
            Some((_, _, e)) => column(g, e)?,
            None => g.detach(energy),
        };
        let ee = self.energy_embedding.forward(g, energy_in);
        let h = g.add(h, ee);

        let durations: Vec<Vec<usize>> = match targets {
            Some((d, _, _)) => {
                for (dur, (_, len)) in d.iter().zip(segs.iter()) {
                    if dur.len() != len || dur.contains(&0) {
                        return Err(invalid("durations must be positive, one per phoneme"));
                    }
                }
                d.to_vec()
            }
            None => {
                let ld = g.value(log_durations);
                segs.iter()
                    .map(|(off, len)| (0..len).map(|i| rounded_duration(ld[[off + i, 0]].f64())).collect())
                    .collect()
            }
        };
        let (frames, frame_segs) = length_regulate(g, h, segs, &durations)?;
        Ok(Adapted { frames, frame_segs, log_durations, pitch, energy, durations })
    }

    /// Decoder stack and mel projection.
    pub fn decode_mel<T: Float>(&self, g: &mut Graph<'_, T>, frames: Var, segs: &Segments) -> Result<Var> {
        if segs.lens().contains(&0) {
            return Err(invalid("decoder input has no frames"));
        }
        let mut x = frames;
        for block in &self.decoder {
            x = block.forward(g, x, segs);
        }
        let mel = self.mel_out.forward(g, x);
        if g.value(mel).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite mel prediction".into()));
        }
        Ok(mel)
    }

    /// Full pass over a batch.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        items: &[BatchItem],
        provider: &dyn EmbeddingProvider,
        mode: Mode,
    ) -> Result<ModelOutput> {
        if items.is_empty() {
            return Err(invalid("empty batch"));
        }
        let v_ace = match &self.ace {
            Some(ace) => {
                let prev: Vec<Option<&Array2<f32>>> = items.iter().map(|it| it.prev_mel.as_ref()).collect();
                Some(encode_acoustic_context(g, ace, &prev)?)
            }
            None => None,
        };
        let v_tce = match &self.tce {
            Some(tce) => {
                let texts: Vec<TextContextInput> = items.iter().map(|it| it.text.clone()).collect();
                Some(tce.forward(g, &texts, provider)?)
            }
            None => None,
        };
        let phonemes: Vec<Vec<usize>> = items.iter().map(|it| it.phonemes.clone()).collect();
        let speakers: Vec<usize> = items.iter().map(|it| it.speaker).collect();
        let (h, phoneme_segs) = self.encode_phonemes(g, &phonemes, &speakers, &[v_ace, v_tce])?;

        let (durs, pitch, energy): (Vec<_>, Vec<_>, Vec<_>) = items
            .iter()
            .map(|it| (it.durations.clone(), it.pitch.clone(), it.energy.clone()))
            .fold((vec![], vec![], vec![]), |(mut a, mut b, mut c), (x, y, z)| {
                a.push(x);
                b.push(y);
                c.push(z);
                (a, b, c)
            });
        let targets = (mode == Mode::Train).then_some((&durs[..], &pitch[..], &energy[..]));
        let adapted = self.variance_adapt(g, h, &phoneme_segs, targets)?;
        let mel = self.decode_mel(g, adapted.frames, &adapted.frame_segs)?;

        let v_ae = match (&self.ae, mode) {
            (Some(ae), Mode::Train) => {
                let mels: Vec<&Array2<f32>> = items.iter().map(|it| &it.mel).collect();
                Some(encode_acoustic_target(g, ae, &mels)?)
            }
            _ => None,
        };
        Ok(ModelOutput {
            mel,
            frame_segs: adapted.frame_segs,
            phoneme_segs,
            log_durations: adapted.log_durations,
            pitch: adapted.pitch,
            energy: adapted.energy,
            durations: adapted.durations,
            v_ace,
            v_ae,
            v_tce,
        })
    }
}

/// `max(1, round(exp(log_duration)))`.
pub fn rounded_duration(log_duration: f64) -> usize {
    let d = log_duration.exp().round();
    if d.is_finite() && d >= 1.0 {
        d.min(1e6) as usize
    } else {
        1
    }
}

/// Repeats each phoneme row duration-many times.
pub fn length_regulate<T: Float>(
    g: &mut Graph<'_, T>,
    x: Var,
    segs: &Segments,
    durations: &[Vec<usize>],
) -> Result<(Var, Segments)> {
    let mut rows = Vec::new();
    let mut lens = Vec::with_capacity(segs.count());
    for ((off, len), d) in segs.iter().zip(durations) {
        if d.len() != len {
            return Err(invalid("one duration per phoneme required"));
        }
        let before = rows.len();
        for (i, &n) in d.iter().enumerate() {
            rows.extend(std::iter::repeat_n(off + i, n));
        }
        if rows.len() == before {
            return Err(Error::InvalidState("length regulator produced no frames".into()));
        }
        lens.push(rows.len() - before);
    }
    Ok((g.select_rows(x, &rows), Segments::new(lens)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamSet;
    use crate::corpus::ContextWindow;
    use crate::nn::seeded_rng;
    use crate::text_context::HashEmbeddingProvider;
    use ndarray::array;

    fn tiny_config(use_ace: bool, mode: LateralMode) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ffn_filter: 6,
            ffn_kernel: 3,
            predictor_filter: 4,
            predictor_kernel: 3,
            clip_distance: 4,
            mel_bins: 3,
            n_phonemes: 6,
            n_speakers: 3,
            use_ace,
            gst: GstConfig {
                conv_channels: vec![4],
                kernel: 3,
                stride: 2,
                reference_dim: 4,
                n_tokens: 10,
                token_dim: 4,
                heads: 2,
                attention_dim: 4,
                out_dim: 8,
            },
            tce: TceConfig { mode, k: 16, gru_hidden: 4, attention_dim: 4, implicit_n_sentences: 1 },
        }
    }

    fn build(cfg: ModelConfig, seed: u64) -> (ParamSet<f64>, AcousticModel, HashEmbeddingProvider) {
        let p = HashEmbeddingProvider::new(4);
        let mut ps = ParamSet::new();
        let mut rng = seeded_rng(seed);
        let m = AcousticModel::new(&mut ParamBuilder::new(&mut ps, &mut rng), cfg, &p).unwrap();
        (ps, m, p)
    }

    fn item(n: usize, speaker: usize, seed: usize) -> BatchItem {
        let phonemes: Vec<usize> = (0..n).map(|i| (i * 7 + seed) % 6).collect();
        let durations: Vec<usize> = (0..n).map(|i| 1 + (i + seed) % 3).collect();
        let frames: usize = durations.iter().sum();
        BatchItem {
            phonemes,
            speaker,
            durations,
            pitch: (0..n).map(|i| ((i + seed) as f32 * 0.3).sin()).collect(),
            pitch_mask: (0..n).map(|i| i % 4 != 0).collect(),
            energy: (0..n).map(|i| 0.5 + 0.1 * i as f32).collect(),
            mel: Array2::from_shape_fn((frames, 3), |(t, b)| ((t * 3 + b + seed) as f32 * 0.1).cos()),
            prev_mel: (seed % 2 == 0).then(|| Array2::from_shape_fn((5, 3), |(t, b)| (t + b) as f32 * 0.1)),
            text: TextContextInput {
                target_text: format!("ka mori {seed}."),
                window: ContextWindow { preceding: "UP sela.".into(), succeeding: "tupa ne.".into(), k: 16 },
            },
        }
    }

    #[test]
    fn bucket_examples_and_oracle() {
        assert_eq!(relative_position_bucket(3, 3, 4), 4);
        assert_eq!(relative_position_bucket(10, 3, 4), 0);
        assert_eq!(relative_position_bucket(2, 5, 4), 7);
        assert_eq!(relative_position_bucket(0, 10, 4), relative_position_bucket(0, 5, 4));
        for clip in [1usize, 4, 8] {
            for i in 0..=20usize {
                for j in 0..=20usize {
                    let d = j as i64 - i as i64;
                    let c = clip as i64;
                    let expect = if d < -c { 0 } else if d > c { 2 * c } else { d + c };
                    assert_eq!(relative_position_bucket(i, j, clip) as i64, expect);
                }
            }
        }
    }

    #[test]
    fn single_position_attends_to_itself() {
        let (ps, m, _) = build(tiny_config(false, LateralMode::None), 1);
        let att = &m.encoder[0].attention;
        let mut g = Graph::new(&ps);
        let x = g.constant(array![[0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8]]);
        let y = att.forward(&mut g, x, &Segments::new(vec![1]));
        // softmax over one key is 1; value gets the centre relative embedding.
        let v = att.value.forward(&mut g, x);
        let rv = g.param(att.rel_value);
        let centre = g.slice_rows(rv, 4, 1);
        let c2 = g.concat_cols(&[centre, centre]);
        let expect = g.add(v, c2);
        let expect = att.out.forward(&mut g, expect);
        for (a, b) in g.value(y).iter().zip(g.value(expect)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_has_no_absolute_position_state() {
        let (ps, m, _) = build(tiny_config(false, LateralMode::None), 2);
        // Only relative tables exist, sized by the clip distance, never by length.
        for (_, p) in ps.iter() {
            assert!(!p.name.contains("position"), "{}", p.name);
        }
        let att = &m.encoder[0].attention;
        assert_eq!(ps.value(att.rel_key).nrows(), 9);
        // The same sequence placed at different packed offsets gives identical rows.
        let seq = Array2::from_shape_fn((7, 8), |(i, j)| ((i * 8 + j) as f64 * 0.13).sin());
        let other = Array2::from_shape_fn((11, 8), |(i, j)| ((i + j) as f64 * 0.7).cos());
        let mut g = Graph::new(&ps);
        let a = g.constant(seq.clone());
        let ya = att.forward(&mut g, a, &Segments::new(vec![7]));
        let both = ndarray::concatenate(ndarray::Axis(0), &[other.view(), seq.view()]).unwrap();
        let b = g.constant(both);
        let yb = att.forward(&mut g, b, &Segments::new(vec![11, 7]));
        let tail = g.slice_rows(yb, 11, 7);
        assert_eq!(g.value(ya), g.value(tail));
        // Works for lengths well beyond any fixed table size.
        let long = g.constant(Array2::from_elem((300, 8), 0.1));
        let y = att.forward(&mut g, long, &Segments::new(vec![300]));
        assert!(g.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn distant_pairs_share_the_clipped_embedding() {
        let clip = 4;
        assert_eq!(relative_position_bucket(0, 10, clip), relative_position_bucket(0, 5, clip));
        assert_eq!(relative_position_bucket(10, 0, clip), relative_position_bucket(5, 0, clip));
    }

    #[test]
    fn conditioning_is_additive() {
        let (mut ps, m, _) = build(tiny_config(false, LateralMode::None), 3);
        let ph = vec![vec![0, 1, 2, 3]];
        let c = array![[0.5, -0.5, 1.0, 0.0, 0.2, 0.3, -0.1, 0.9]];
        let raw = {
            let mut g = Graph::new(&ps);
            let (x, _) = m.encoder_output(&mut g, &ph).unwrap();
            g.value(x).clone()
        };
        ps.value_mut(m.speaker_embedding).fill(0.0);
        {
            let mut g = Graph::new(&ps);
            let z = g.zeros(1, 8);
            let (h, _) = m.encode_phonemes(&mut g, &ph, &[1], &[Some(z), Some(z)]).unwrap();
            assert_eq!(g.value(h), &raw);
            let cv = g.constant(c.clone());
            let (h, _) = m.encode_phonemes(&mut g, &ph, &[1], &[Some(cv)]).unwrap();
            let back = g.value(h) - &c;
            for (a, b) in back.iter().zip(&raw) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let (ps, m, _) = build(tiny_config(false, LateralMode::None), 3);
        let mut g = Graph::new(&ps);
        let (h0, _) = m.encode_phonemes(&mut g, &ph, &[0], &[]).unwrap();
        let (h2, _) = m.encode_phonemes(&mut g, &ph, &[2], &[]).unwrap();
        let diff = g.value(h2) - g.value(h0);
        let table = ps.value(m.speaker_embedding);
        let expect = &table.row(2) - &table.row(0);
        for row in diff.rows() {
            for (a, b) in row.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(m.encode_phonemes(&mut g, &ph, &[3], &[]).is_err());
    }

    #[test]
    fn length_regulator_examples() {
        let ps = ParamSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let x = g.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let segs = Segments::new(vec![2]);
        let (y, s) = length_regulate(&mut g, x, &segs, &[vec![2, 3]]).unwrap();
        assert_eq!(s.lens(), &[5]);
        assert_eq!(g.value(y), &array![[1.0, 2.0], [1.0, 2.0], [3.0, 4.0], [3.0, 4.0], [3.0, 4.0]]);
        let (y, _) = length_regulate(&mut g, x, &segs, &[vec![1, 1]]).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(length_regulate(&mut g, x, &segs, &[vec![0, 0]]).is_err());
    }

    #[test]
    fn rounded_duration_rule() {
        assert_eq!(rounded_duration(0.0), 1);
        assert_eq!(rounded_duration(-5.0), 1);
        assert_eq!(rounded_duration(2f64.ln()), 2);
        assert_eq!(rounded_duration(3.4f64.ln()), 3);
        assert_eq!(rounded_duration(f64::NAN), 1);
    }

    #[test]
    fn teacher_forcing_with_predictions_matches_free_running() {
        let (ps, m, _) = build(tiny_config(false, LateralMode::None), 4);
        let ph = vec![vec![0, 1, 2, 3, 4]];
        let mut g = Graph::new(&ps);
        let (h, segs) = m.encode_phonemes(&mut g, &ph, &[0], &[]).unwrap();
        let free = m.variance_adapt(&mut g, h, &segs, None).unwrap();
        let p: Vec<f32> = g.value(free.pitch).iter().map(|&v| v as f32).collect();
        let e: Vec<f32> = g.value(free.energy).iter().map(|&v| v as f32).collect();
        // f32 targets round the predictions, so compare in f32 precision.
        let forced = m.variance_adapt(&mut g, h, &segs, Some((&free.durations, &[p], &[e]))).unwrap();
        for (a, b) in g.value(forced.frames).iter().zip(g.value(free.frames)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn decode_shapes_and_zero_projection() {
        let (mut ps, m, _) = build(tiny_config(false, LateralMode::None), 5);
        let frames = Array2::from_shape_fn((9, 8), |(i, j)| (i as f64 - j as f64) * 0.05);
        {
            let mut g = Graph::new(&ps);
            let x = g.constant(frames.clone());
            let a = m.decode_mel(&mut g, x, &Segments::new(vec![9])).unwrap();
            let b = m.decode_mel(&mut g, x, &Segments::new(vec![9])).unwrap();
            assert_eq!(g.shape(a), (9, 3));
            assert_eq!(g.value(a), g.value(b));
        }
        ps.value_mut(m.mel_out.w).fill(0.0);
        ps.value_mut(m.mel_out.b.unwrap()).fill(0.0);
        let mut g = Graph::new(&ps);
        let x = g.constant(frames);
        let a = m.decode_mel(&mut g, x, &Segments::new(vec![9])).unwrap();
        assert!(g.value(a).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn context_free_model_has_no_context_terms() {
        let (ps, m, p) = build(tiny_config(false, LateralMode::None), 6);
        assert!(m.ace.is_none() && m.ae.is_none() && m.tce.is_none());
        assert!(ps.iter().all(|(_, q)| !q.name.starts_with("ace") && !q.name.starts_with("tce")));
        let mut g = Graph::new(&ps);
        let out = m.forward(&mut g, &[item(4, 0, 1)], &p, Mode::Train).unwrap();
        assert!(out.v_ace.is_none() && out.v_ae.is_none() && out.v_tce.is_none());
    }

    #[test]
    fn output_shapes_over_batch_sizes() {
        let (ps, m, p) = build(tiny_config(true, LateralMode::Bi), 7);
        for b in [1usize, 4] {
            for t in [3usize, 17] {
                let items: Vec<BatchItem> = (0..b).map(|i| item(t, i % 3, i)).collect();
                let mut g = Graph::new(&ps);
                let out = m.forward(&mut g, &items, &p, Mode::Train).unwrap();
                let frames: usize = items.iter().map(|it| it.durations.iter().sum::<usize>()).sum();
                assert_eq!(g.shape(out.mel), (frames, 3));
                assert_eq!(g.shape(out.log_durations), (b * t, 1));
                assert_eq!(g.shape(out.pitch), (b * t, 1));
                assert_eq!(g.shape(out.v_ace.unwrap()), (b, 8));
                assert_eq!(g.shape(out.v_ae.unwrap()), (b, 8));
                let out = m.forward(&mut g, &items, &p, Mode::Infer).unwrap();
                let frames: usize = out.durations.iter().flatten().sum();
                assert_eq!(g.shape(out.mel), (frames, 3));
                assert!(out.v_ae.is_none());
            }
        }
    }

    #[test]
    fn batch_neighbours_do_not_leak() {
        let (ps, m, p) = build(tiny_config(true, LateralMode::Bi), 8);
        let target = item(5, 1, 2);
        let alone = {
            let mut g = Graph::new(&ps);
            let out = m.forward(&mut g, std::slice::from_ref(&target), &p, Mode::Train).unwrap();
            g.value(out.mel).clone()
        };
        let items = vec![item(9, 0, 1), target.clone(), item(12, 2, 4)];
        let mut g = Graph::new(&ps);
        let out = m.forward(&mut g, &items, &p, Mode::Train).unwrap();
        let off = out.frame_segs.offset(1);
        let mel = g.value(out.mel);
        for t in 0..alone.nrows() {
            for b in 0..3 {
                assert!((mel[[off + t, b]] - alone[[t, b]]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let (ps, m, p) = build(tiny_config(true, LateralMode::Bi), 9);
        let items = vec![item(6, 0, 2), item(4, 1, 3)];
        let run = || {
            let mut g = Graph::new(&ps);
            let out = m.forward(&mut g, &items, &p, Mode::Infer).unwrap();
            (g.value(out.mel).clone(), out.durations)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn phoneme_level_targets_pool_frames() {
        let utt = Utterance {
            book_id: "b".into(),
            speaker_id: "s".into(),
            index: 0,
            text: "ab".into(),
            phonemes: vec!["a".into(), "b".into(), "p".into()],
            durations: vec![2, 1, 2],
            pitch: vec![110.0, 130.0, 0.0, 100.0, 0.0],
            energy: vec![1.0, 0.5, 0.2, 0.4, 0.6],
            mel: Array2::zeros((5, 2)),
        };
        let stats = SpeakerPitchStats { speaker_id: "s".into(), mu: 100.0, sigma: 10.0, degenerate: false };
        let (p, mask, e) = phoneme_targets(&utt, &stats).unwrap();
        assert_eq!(mask, vec![true, false, true]);
        assert!((p[0] - 2.0).abs() < 1e-6 && p[1] == 0.0 && p[2].abs() < 1e-6);
        assert!((e[0] - 0.75).abs() < 1e-6 && (e[1] - 0.2).abs() < 1e-6 && (e[2] - 0.5).abs() < 1e-6);
    }
}
