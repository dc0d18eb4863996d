//! Sequential book synthesis: each utterance takes the previously synthesized mel
//! as its acoustic context.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::corpus::{denormalize_pitch, Book, CorpusManifest, Utterance};
use crate::error::{invalid, Result};
use crate::metrics::SynthesizedUtterance;
use crate::nn::seeded_rng;
use crate::text_context::TextContextInput;
use crate::training::TrainedModel;
use crate::tts::{BatchItem, Mode};

/// Replaces the textual context of utterance `target` by that of utterance `from`
/// in the same book.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextOverride {
    pub target: usize,
    pub from: usize,
}

impl std::str::FromStr for ContextOverride {
    type Err = crate::Error;

    /// Parses `idx=3:from=idx 9`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || invalid(format!("context override `{s}` is not of the form idx=N:from=idx M"));
        let (lhs, rhs) = s.split_once(':').ok_or_else(bad)?;
        let target = lhs.trim().strip_prefix("idx=").ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        let from = rhs
            .trim()
            .strip_prefix("from=")
            .and_then(|r| r.trim().strip_prefix("idx"))
            .ok_or_else(bad)?
            .trim()
            .parse()
            .map_err(|_| bad())?;
        Ok(Self { target, from })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthesisOptions {
    /// Character budget replacing the model's configured `k`.
    pub k_override: Option<usize>,
    pub overrides: Vec<ContextOverride>,
}

/// Result of synthesizing one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisOutput {
    pub book_id: String,
    pub index: usize,
    pub mel: Array2<f32>,
    pub durations: Vec<usize>,
    /// Speaker-normalized pitch per phoneme.
    pub pitch_normalized: Vec<f32>,
    /// Pitch per phoneme in Hz.
    pub pitch_hz: Vec<f32>,
    pub energy: Vec<f32>,
    /// Hz per frame; 0 on frames of unvoiced phonemes.
    pub f0: Vec<f32>,
    pub text: TextContextInput,
}

impl SynthesisOutput {
    pub fn to_metric_input(&self) -> SynthesizedUtterance {
        SynthesizedUtterance { book_id: self.book_id.clone(), index: self.index, mel: self.mel.clone(), f0: self.f0.clone() }
    }

    /// Energy repeated over each phoneme's frames.
    pub fn frame_energy(&self) -> Vec<f32> {
        self.energy.iter().zip(&self.durations).flat_map(|(&e, &d)| std::iter::repeat_n(e, d)).collect()
    }
}

/// One line of the synthesis sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarRecord {
    pub book_id: String,
    pub index: usize,
    pub frames: usize,
    pub k: usize,
    pub preceding_chars: usize,
    pub succeeding_chars: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub context_from: Option<usize>,
}

/// Synthesizes one utterance from caller-supplied text context and previous mel.
pub fn synthesize_with_context(
    model: &TrainedModel,
    utt: &Utterance,
    text: TextContextInput,
    prev_mel: Option<&Array2<f32>>,
) -> Result<SynthesisOutput> {
    let speaker = model.speaker_index(&utt.speaker_id)?;
    let stats = model.stats_for(&utt.speaker_id)?;
    let phonemes = model.phoneme_ids(&utt.phonemes)?;
    if let Some(m) = prev_mel {
        if m.ncols() != model.meta.features.mel_bins {
            return Err(invalid(format!("previous mel has {} bins, model expects {}", m.ncols(), model.meta.features.mel_bins)));
        }
    }
    let n = phonemes.len();
    let item = BatchItem {
        phonemes: phonemes.clone(),
        speaker,
        durations: vec![1; n],
        pitch: vec![0.0; n],
        pitch_mask: vec![false; n],
        energy: vec![0.0; n],
        mel: Array2::zeros((0, model.meta.features.mel_bins)),
        prev_mel: prev_mel.cloned(),
        text: text.clone(),
    };
    let mut g = Graph::new(&model.params);
    let out = model.model.forward(&mut g, std::slice::from_ref(&item), model.provider.as_ref(), Mode::Infer)?;
    let mel = g.value(out.mel).clone();
    let pitch_normalized: Vec<f32> = g.value(out.pitch).column(0).to_vec();
    let energy: Vec<f32> = g.value(out.energy).column(0).to_vec();
    let durations = out.durations.into_iter().next().unwrap_or_default();
    let pitch_hz = pitch_normalized
        .iter()
        .map(|&p| denormalize_pitch(p as f64, stats).map(|hz| hz.max(0.0) as f32))
        .collect::<Result<Vec<f32>>>()?;
    let mut f0 = Vec::with_capacity(mel.nrows());
    for ((&id, &hz), &d) in phonemes.iter().zip(&pitch_hz).zip(&durations) {
        let v = if model.meta.features.is_voiced(id) { hz } else { 0.0 };
        f0.extend(std::iter::repeat_n(v, d));
    }
    Ok(SynthesisOutput { book_id: utt.book_id.clone(), index: utt.index, mel, durations, pitch_normalized, pitch_hz, energy, f0, text })
}

/// Synthesizes a book in index order. Utterance 0 gets no acoustic context; each
/// later one is conditioned on the mel synthesized for its predecessor.
pub fn synthesize_book(model: &TrainedModel, book: &Book, opts: &SynthesisOptions) -> Result<Vec<SynthesisOutput>> {
    let texts = book.texts();
    let mut redirect = BTreeMap::new();
    for o in &opts.overrides {
        if o.target >= texts.len() || o.from >= texts.len() {
            return Err(invalid(format!("context override {}←{} outside book of {}", o.target, o.from, texts.len())));
        }
        redirect.insert(o.target, o.from);
    }
    if opts.k_override == Some(0) {
        return Err(invalid("k override must be positive"));
    }
    let mut outputs: Vec<SynthesisOutput> = Vec::with_capacity(book.utterances.len());
    for (i, utt) in book.utterances.iter().enumerate() {
        if utt.index != i {
            return Err(invalid(format!("book `{}` utterance {} carries index {}", book.id, i, utt.index)));
        }
        let source = redirect.get(&i).copied().unwrap_or(i);
        let mut text = model.text_input(&texts, source, opts.k_override)?;
        text.target_text = utt.text.clone();
        let prev = outputs.last().map(|o| &o.mel);
        let out = synthesize_with_context(model, utt, text, prev)?;
        tracing::debug!(
            book = %book.id,
            index = i,
            k = out.text.window.k,
            preceding = out.text.window.preceding.chars().count(),
            succeeding = out.text.window.succeeding.chars().count(),
            "synthesized"
        );
        outputs.push(out);
    }
    Ok(outputs)
}

/// Sidecar entries for a synthesized book.
pub fn sidecar_records(outputs: &[SynthesisOutput], opts: &SynthesisOptions) -> Vec<SidecarRecord> {
    outputs
        .iter()
        .map(|o| SidecarRecord {
            book_id: o.book_id.clone(),
            index: o.index,
            frames: o.mel.nrows(),
            k: o.text.window.k,
            preceding_chars: o.text.window.preceding.chars().count(),
            succeeding_chars: o.text.window.succeeding.chars().count(),
            context_from: opts.overrides.iter().rev().find(|c| c.target == o.index).map(|c| c.from),
        })
        .collect()
}

/// Packs synthesized books into a manifest with predicted durations, frame F0,
/// frame energy and mels, so it can be written with the corpus archive format.
pub fn outputs_to_manifest(template: &CorpusManifest, books: &[(&Book, Vec<SynthesisOutput>)]) -> CorpusManifest {
    let books = books
        .iter()
        .map(|(book, outs)| Book {
            id: book.id.clone(),
            utterances: book
                .utterances
                .iter()
                .zip(outs)
                .map(|(u, o)| Utterance {
                    book_id: u.book_id.clone(),
                    speaker_id: u.speaker_id.clone(),
                    index: u.index,
                    text: u.text.clone(),
                    phonemes: u.phonemes.clone(),
                    durations: o.durations.clone(),
                    pitch: o.f0.clone(),
                    energy: o.frame_energy(),
                    mel: o.mel.clone(),
                })
                .collect(),
        })
        .collect();
    CorpusManifest { features: template.features.clone(), speakers: template.speakers.clone(), books }
}

/// A context borrowed from another utterance of the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledContext {
    pub book_id: String,
    pub index: usize,
    pub text: TextContextInput,
    /// Ground-truth mel preceding the source utterance.
    pub prev_mel: Option<Array2<f32>>,
}

/// `n` contexts drawn uniformly without replacement from every other utterance of
/// the corpus; each carries that utterance's text window and preceding mel.
pub fn sample_random_contexts(
    model: &TrainedModel,
    corpus: &CorpusManifest,
    target: (&str, usize),
    n: usize,
    seed: u64,
) -> Result<Vec<SampledContext>> {
    let pool: Vec<(&Book, usize)> = corpus
        .books
        .iter()
        .flat_map(|b| (0..b.utterances.len()).map(move |i| (b, i)))
        .filter(|(b, i)| !(b.id == target.0 && *i == target.1))
        .collect();
    if n > pool.len() {
        return Err(invalid(format!("asked for {n} random contexts from a pool of {}", pool.len())));
    }
    let mut rng = seeded_rng(seed);
    let target_text = corpus
        .book(target.0)
        .and_then(|b| b.utterances.get(target.1))
        .ok_or_else(|| invalid(format!("no utterance {}#{}", target.0, target.1)))?
        .text
        .clone();
    sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|p| {
            let (book, i) = pool[p];
            let mut text = model.text_input(&book.texts(), i, None)?;
            text.target_text = target_text.clone();
            Ok(SampledContext {
                book_id: book.id.clone(),
                index: i,
                text,
                prev_mel: (i > 0).then(|| book.utterances[i - 1].mel.clone()),
            })
        })
        .collect()
}

/// Mean absolute difference of two contours over their common prefix.
pub fn mean_abs_difference(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, speaker_stats_table, GeneratorSpec};
    use crate::text_context::{LateralMode, ProviderSpec};
    use crate::training::{configure, CheckpointMeta};
    use crate::tts::ModelConfig;

    fn setup(id: &str) -> (CorpusManifest, TrainedModel) {
        let spec = GeneratorSpec { speakers: 2, books_per_speaker: 1, utterances_per_book: 5, ..Default::default() };
        let corpus = generate_synthetic_corpus(3, &spec).unwrap();
        let mut base = ModelConfig::desk(corpus.features.mel_bins, corpus.features.phonemes.len(), corpus.speakers.len());
        base.d_model = 16;
        base.ffn_filter = 16;
        base.predictor_filter = 8;
        base.gst.out_dim = 16;
        base.gst.token_dim = 8;
        base.gst.attention_dim = 8;
        base.gst.heads = 2;
        base.gst.reference_dim = 8;
        base.gst.conv_channels = vec![4];
        base.tce.gru_hidden = 8;
        base.tce.attention_dim = 8;
        base.tce.k = 16;
        let meta = CheckpointMeta {
            ablation_id: id.into(),
            step: 0,
            model: configure(id, &base).unwrap(),
            provider: ProviderSpec::ToyHash { dim: 8 },
            features: corpus.features.clone(),
            speakers: corpus.speakers.clone(),
            stats: speaker_stats_table(&corpus).unwrap().into_values().collect(),
        };
        let model = TrainedModel::init(meta, 1).unwrap();
        (corpus, model)
    }

    #[test]
    fn parses_context_override() {
        let o: ContextOverride = "idx=3:from=idx 9".parse().unwrap();
        assert_eq!(o, ContextOverride { target: 3, from: 9 });
        assert_eq!("idx=0:from=idx1".parse::<ContextOverride>().unwrap(), ContextOverride { target: 0, from: 1 });
        assert!("3:9".parse::<ContextOverride>().is_err());
        assert!("idx=a:from=idx 1".parse::<ContextOverride>().is_err());
    }

    #[test]
    fn book_outputs_are_ordered_and_consistent() {
        let (corpus, model) = setup("atce-bi");
        let book = &corpus.books[0];
        let outs = synthesize_book(&model, book, &SynthesisOptions::default()).unwrap();
        assert_eq!(outs.len(), book.utterances.len());
        for (i, o) in outs.iter().enumerate() {
            assert_eq!(o.index, i);
            assert_eq!(o.mel.nrows(), o.durations.iter().sum::<usize>());
            assert_eq!(o.f0.len(), o.mel.nrows());
            assert!(o.durations.iter().all(|&d| d >= 1));
        }
        let again = synthesize_book(&model, book, &SynthesisOptions::default()).unwrap();
        assert_eq!(outs, again);
    }

    #[test]
    fn explicit_context_reproduces_book_output() {
        let (corpus, model) = setup("atce-bi");
        let book = &corpus.books[0];
        let outs = synthesize_book(&model, book, &SynthesisOptions::default()).unwrap();
        let texts = book.texts();
        let text = model.text_input(&texts, 2, None).unwrap();
        let one = synthesize_with_context(&model, &book.utterances[2], text, Some(&outs[1].mel)).unwrap();
        assert_eq!(one, outs[2]);
        let first = synthesize_with_context(&model, &book.utterances[0], model.text_input(&texts, 0, None).unwrap(), None).unwrap();
        assert_eq!(first, outs[0]);
    }

    #[test]
    fn chain_is_causal() {
        let (mut corpus, model) = setup("atce-bi");
        let before = synthesize_book(&model, &corpus.books[0], &SynthesisOptions::default()).unwrap();
        // Utterance 2 sees at most k = 16 succeeding characters, which end inside utterance 3.
        corpus.books[0].utterances[4].text = "entirely different words".into();
        let after = synthesize_book(&model, &corpus.books[0], &SynthesisOptions::default()).unwrap();
        assert_eq!(before[..3], after[..3]);
    }

    #[test]
    fn disabled_context_is_order_independent() {
        let (corpus, model) = setup("none");
        assert_eq!(model.meta.model.tce.mode, LateralMode::None);
        let book = &corpus.books[0];
        let outs = synthesize_book(&model, book, &SynthesisOptions::default()).unwrap();
        for i in (0..book.utterances.len()).rev() {
            let text = model.text_input(&book.texts(), i, None).unwrap();
            let o = synthesize_with_context(&model, &book.utterances[i], text, None).unwrap();
            assert_eq!(o, outs[i]);
        }
    }

    #[test]
    fn single_utterance_book_uses_no_acoustic_context() {
        let (corpus, model) = setup("atce-bi");
        let mut book = corpus.books[0].clone();
        book.utterances.truncate(1);
        let outs = synthesize_book(&model, &book, &SynthesisOptions::default()).unwrap();
        let text = model.text_input(&book.texts(), 0, None).unwrap();
        assert_eq!(outs[0], synthesize_with_context(&model, &book.utterances[0], text, None).unwrap());
    }

    #[test]
    fn k_override_truncates_windows() {
        let (corpus, model) = setup("atce-bi");
        let opts = SynthesisOptions { k_override: Some(4), overrides: vec![] };
        let outs = synthesize_book(&model, &corpus.books[0], &opts).unwrap();
        for r in sidecar_records(&outs, &opts) {
            assert_eq!(r.k, 4);
            assert!(r.preceding_chars <= 4 && r.succeeding_chars <= 4);
        }
        assert_eq!(sidecar_records(&outs, &opts)[1].preceding_chars, 4);
    }

    #[test]
    fn context_override_swaps_text_window() {
        let (corpus, model) = setup("tce-bi");
        let book = &corpus.books[0];
        let opts = SynthesisOptions { k_override: None, overrides: vec![ContextOverride { target: 1, from: 3 }] };
        let outs = synthesize_book(&model, book, &opts).unwrap();
        let donor = model.text_input(&book.texts(), 3, None).unwrap();
        assert_eq!(outs[1].text.window, donor.window);
        assert_eq!(outs[1].text.target_text, book.utterances[1].text);
        assert_eq!(sidecar_records(&outs, &opts)[1].context_from, Some(3));
        let bad = SynthesisOptions { k_override: None, overrides: vec![ContextOverride { target: 9, from: 0 }] };
        assert!(synthesize_book(&model, book, &bad).is_err());
    }

    #[test]
    fn f0_follows_voicing_and_speaker_scale() {
        let (corpus, model) = setup("none");
        let utt = &corpus.books[0].utterances[0];
        let o = synthesize_with_context(&model, utt, model.text_input(&corpus.books[0].texts(), 0, None).unwrap(), None).unwrap();
        let stats = model.stats_for(&utt.speaker_id).unwrap();
        let mut frame = 0;
        for (k, p) in utt.phonemes.iter().enumerate() {
            let id = model.meta.features.phoneme_id(p).unwrap();
            let expected = (o.pitch_normalized[k] as f64 * stats.sigma + stats.mu) as f32;
            assert!((o.pitch_hz[k] - expected).abs() < 1e-3);
            for _ in 0..o.durations[k] {
                assert_eq!(o.f0[frame] > 0.0, model.meta.features.is_voiced(id));
                frame += 1;
            }
        }
    }

    #[test]
    fn unknown_speaker_is_rejected() {
        let (corpus, model) = setup("none");
        let mut utt = corpus.books[0].utterances[0].clone();
        utt.speaker_id = "ghost".into();
        let text = TextContextInput { target_text: utt.text.clone(), window: Default::default() };
        assert!(synthesize_with_context(&model, &utt, text, None).is_err());
    }

    #[test]
    fn random_contexts_are_seeded_and_exclude_target() {
        let (corpus, model) = setup("atce-bi");
        let a = sample_random_contexts(&model, &corpus, ("spk0-book0", 0), 3, 7).unwrap();
        let b = sample_random_contexts(&model, &corpus, ("spk0-book0", 0), 3, 7).unwrap();
        assert_eq!(a, b);
        let id = &corpus.books[0].id;
        let a = sample_random_contexts(&model, &corpus, (id, 2), 9, 1).unwrap();
        assert!(a.iter().all(|c| !(c.book_id == *id && c.index == 2)));
        assert!(sample_random_contexts(&model, &corpus, (id, 2), 10, 1).is_err());
    }

    #[test]
    fn mean_abs_difference_examples() {
        assert_eq!(mean_abs_difference(&[1.0, 2.0], &[1.0, 4.0, 9.0]), 1.0);
        assert_eq!(mean_abs_difference(&[], &[1.0]), 0.0);
    }
}
