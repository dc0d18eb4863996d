//! Ordered audiobook corpora: data model, context windows, speaker pitch
//! statistics and train/test splitting.

mod generator;
mod io;

pub use generator::{generate_synthetic_corpus, phoneme_inventory, CueLateral, GeneratorSpec, SyntheticVoice};
pub use io::{
    read_corpus, read_speaker_stats, write_corpus, write_speaker_stats, FeatureArchive,
    FEATURE_MAGIC, MANIFEST_SCHEMA,
};

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{invalid, Error, Result};

/// One utterance of a book with its frame-level features.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub book_id: String,
    pub speaker_id: String,
    /// Position within the book, `0..M`.
    pub index: usize,
    pub text: String,
    pub phonemes: Vec<String>,
    /// Frames per phoneme.
    pub durations: Vec<usize>,
    /// Hz per frame; 0 marks an unvoiced frame.
    pub pitch: Vec<f32>,
    pub energy: Vec<f32>,
    /// `[frames × mel_bins]`
    pub mel: Array2<f32>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.mel.nrows()
    }

    pub fn validate(&self, mel_bins: usize) -> Result<()> {
        let ctx = || format!("{}#{}", self.book_id, self.index);
        if self.phonemes.len() != self.durations.len() {
            return Err(invalid(format!("{}: {} phonemes but {} durations", ctx(), self.phonemes.len(), self.durations.len())));
        }
        if self.durations.iter().any(|&d| d == 0) {
            return Err(invalid(format!("{}: zero duration", ctx())));
        }
        let total: usize = self.durations.iter().sum();
        if total != self.mel.nrows() || total != self.pitch.len() || total != self.energy.len() {
            return Err(invalid(format!(
                "{}: durations sum to {total}, mel has {} frames, pitch {}, energy {}",
                ctx(),
                self.mel.nrows(),
                self.pitch.len(),
                self.energy.len()
            )));
        }
        if self.mel.ncols() != mel_bins {
            return Err(invalid(format!("{}: {} mel bins, expected {mel_bins}", ctx(), self.mel.ncols())));
        }
        if self.pitch.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(invalid(format!("{}: negative or non-finite pitch", ctx())));
        }
        Ok(())
    }
}

impl AsRef<str> for Utterance {
    fn as_ref(&self) -> &str {
        &self.text
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeInfo {
    pub symbol: String,
    pub voiced: bool,
}

/// Corpus-wide feature layout and phoneme inventory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub mel_bins: usize,
    /// Frames per second.
    pub frame_rate: f32,
    pub phonemes: Vec<PhonemeInfo>,
}

impl FeatureConfig {
    pub fn phoneme_id(&self, symbol: &str) -> Option<usize> {
        self.phonemes.iter().position(|p| p.symbol == symbol)
    }

    pub fn is_voiced(&self, id: usize) -> bool {
        self.phonemes.get(id).is_some_and(|p| p.voiced)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Book {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Book {
    pub fn texts(&self) -> Vec<&str> {
        self.utterances.iter().map(|u| u.text.as_str()).collect()
    }

    pub fn speaker_id(&self) -> Option<&str> {
        self.utterances.first().map(|u| u.speaker_id.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub features: FeatureConfig,
    pub speakers: Vec<String>,
    pub books: Vec<Book>,
}

impl CorpusManifest {
    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.books.iter().flat_map(|b| b.utterances.iter())
    }

    pub fn num_utterances(&self) -> usize {
        self.books.iter().map(|b| b.utterances.len()).sum()
    }

    pub fn book(&self, id: &str) -> Option<&Book> {
        self.books.iter().find(|b| b.id == id)
    }

    pub fn speaker_index(&self, id: &str) -> Option<usize> {
        self.speakers.iter().position(|s| s == id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for book in &self.books {
            if !seen.insert(book.id.as_str()) {
                return Err(invalid(format!("duplicate book id `{}`", book.id)));
            }
            for (i, u) in book.utterances.iter().enumerate() {
                if u.index != i || u.book_id != book.id {
                    return Err(invalid(format!("book `{}` is not ordered 0..M at position {i}", book.id)));
                }
                if self.speaker_index(&u.speaker_id).is_none() {
                    return Err(invalid(format!("unknown speaker `{}`", u.speaker_id)));
                }
                for p in &u.phonemes {
                    if self.features.phoneme_id(p).is_none() {
                        return Err(invalid(format!("unknown phoneme `{p}` in {}#{}", u.book_id, u.index)));
                    }
                }
                u.validate(self.features.mel_bins)?;
            }
        }
        Ok(())
    }
}

/// Per-speaker voiced-frame pitch statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerPitchStats {
    pub speaker_id: String,
    pub mu: f64,
    pub sigma: f64,
    /// Set when the speaker had zero pitch variance and `sigma` fell back to 1.
    pub degenerate: bool,
}

pub fn normalize_pitch(p: f64, stats: &SpeakerPitchStats) -> Result<f64> {
    if !p.is_finite() || p < 0.0 {
        return Err(invalid(format!("pitch {p} is not a finite non-negative value")));
    }
    if !(stats.sigma.is_finite() && stats.sigma > 0.0) || !stats.mu.is_finite() {
        return Err(invalid(format!("speaker `{}` has sigma {}", stats.speaker_id, stats.sigma)));
    }
    Ok((p - stats.mu) / stats.sigma)
}

pub fn denormalize_pitch(pbar: f64, stats: &SpeakerPitchStats) -> Result<f64> {
    if !pbar.is_finite() {
        return Err(invalid(format!("normalized pitch {pbar} is not finite")));
    }
    if !(stats.sigma.is_finite() && stats.sigma > 0.0) || !stats.mu.is_finite() {
        return Err(invalid(format!("speaker `{}` has sigma {}", stats.speaker_id, stats.sigma)));
    }
    Ok(pbar * stats.sigma + stats.mu)
}

/// Population mean and standard deviation over every voiced frame.
pub fn compute_speaker_stats<'a>(
    speaker_id: &str,
    utterances: impl IntoIterator<Item = &'a Utterance>,
) -> Result<SpeakerPitchStats> {
    let mut n = 0usize;
    let mut sum = 0.0f64;
    let mut voiced = Vec::new();
    for u in utterances {
        for &p in u.pitch.iter().filter(|&&p| p > 0.0) {
            n += 1;
            sum += p as f64;
            voiced.push(p as f64);
        }
    }
    if n == 0 {
        return Err(Error::EmptyStats(speaker_id.to_string()));
    }
    let mu = sum / n as f64;
    let var = voiced.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / n as f64;
    let sigma = var.sqrt();
    if sigma > 0.0 {
        Ok(SpeakerPitchStats { speaker_id: speaker_id.to_string(), mu, sigma, degenerate: false })
    } else {
        warn!(speaker = speaker_id, "zero pitch variance, falling back to sigma = 1");
        Ok(SpeakerPitchStats { speaker_id: speaker_id.to_string(), mu, sigma: 1.0, degenerate: true })
    }
}

/// Stats for every speaker of a manifest that has voiced frames.
pub fn speaker_stats_table(manifest: &CorpusManifest) -> Result<BTreeMap<String, SpeakerPitchStats>> {
    let mut table = BTreeMap::new();
    for spk in &manifest.speakers {
        let utts: Vec<&Utterance> = manifest.utterances().filter(|u| &u.speaker_id == spk).collect();
        if utts.is_empty() {
            continue;
        }
        table.insert(spk.clone(), compute_speaker_stats(spk, utts)?);
    }
    Ok(table)
}

/// Text laterals around a target utterance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub preceding: String,
    pub succeeding: String,
    /// Character budget per lateral.
    pub k: usize,
}

impl ContextWindow {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Re-cut both laterals to a smaller budget.
    pub fn truncated(&self, k: usize) -> Self {
        let pre: Vec<char> = self.preceding.chars().collect();
        let start = pre.len().saturating_sub(k);
        Self {
            preceding: pre[start..].iter().collect(),
            succeeding: self.succeeding.chars().take(k).collect(),
            k: k.min(self.k),
        }
    }
}

fn check_target<S>(book: &[S], target_index: usize) -> Result<()> {
    if target_index >= book.len() {
        return Err(invalid(format!(
            "target index {target_index} out of range for a book of {} utterances",
            book.len()
        )));
    }
    Ok(())
}

/// Last `k` characters before and first `k` characters after the target,
/// clamped at the book boundaries. Utterance texts are joined without separators.
pub fn extract_context_window<S: AsRef<str>>(book: &[S], target_index: usize, k: usize) -> Result<ContextWindow> {
    check_target(book, target_index)?;
    let mut preceding: Vec<char> = Vec::with_capacity(k);
    'outer: for text in book[..target_index].iter().rev() {
        for c in text.as_ref().chars().rev() {
            if preceding.len() == k {
                break 'outer;
            }
            preceding.push(c);
        }
    }
    preceding.reverse();
    let succeeding: String = book[target_index + 1..]
        .iter()
        .flat_map(|t| t.as_ref().chars())
        .take(k)
        .collect();
    Ok(ContextWindow { preceding: preceding.into_iter().collect(), succeeding, k })
}

/// Whole neighbouring utterances (one utterance = one sentence) on each side.
pub fn extract_sentence_context<S: AsRef<str>>(
    book: &[S],
    target_index: usize,
    n_sentences: usize,
) -> Result<ContextWindow> {
    check_target(book, target_index)?;
    let start = target_index.saturating_sub(n_sentences);
    let end = (target_index + 1 + n_sentences).min(book.len());
    let preceding: String = book[start..target_index].iter().map(|t| t.as_ref()).collect();
    let succeeding: String = book[target_index + 1..end].iter().map(|t| t.as_ref()).collect();
    let k = preceding.chars().count().max(succeeding.chars().count());
    Ok(ContextWindow { preceding, succeeding, k })
}

#[derive(Clone, Debug)]
pub struct CorpusSplit {
    pub train: CorpusManifest,
    pub test: CorpusManifest,
    /// Coverage problems such as a speaker with no training data.
    pub warnings: Vec<String>,
}

/// Moves the named books into the test manifest.
pub fn split_corpus(manifest: &CorpusManifest, held_out_books: &[&str]) -> Result<CorpusSplit> {
    for id in held_out_books {
        if manifest.book(id).is_none() {
            return Err(invalid(format!("unknown book id `{id}`")));
        }
    }
    let held: BTreeSet<&str> = held_out_books.iter().copied().collect();
    let (test_books, train_books): (Vec<Book>, Vec<Book>) =
        manifest.books.iter().cloned().partition(|b| held.contains(b.id.as_str()));
    let train_speakers: BTreeSet<&str> =
        train_books.iter().flat_map(|b| b.utterances.iter().map(|u| u.speaker_id.as_str())).collect();
    let mut warnings = Vec::new();
    for spk in &manifest.speakers {
        let in_test = test_books.iter().any(|b| b.utterances.iter().any(|u| &u.speaker_id == spk));
        if in_test && !train_speakers.contains(spk.as_str()) {
            let msg = format!("speaker `{spk}` has no training books after the split");
            warn!("{msg}");
            warnings.push(msg);
        }
    }
    let make = |books| CorpusManifest {
        features: manifest.features.clone(),
        speakers: manifest.speakers.clone(),
        books,
    };
    Ok(CorpusSplit { train: make(train_books), test: make(test_books), warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(mu: f64, sigma: f64) -> SpeakerPitchStats {
        SpeakerPitchStats { speaker_id: "s".into(), mu, sigma, degenerate: false }
    }

    fn utt_with_pitch(pitch: &[f32]) -> Utterance {
        Utterance {
            book_id: "b".into(),
            speaker_id: "s".into(),
            index: 0,
            text: "x".into(),
            phonemes: vec!["a".into()],
            durations: vec![pitch.len()],
            pitch: pitch.to_vec(),
            energy: vec![0.0; pitch.len()],
            mel: Array2::zeros((pitch.len(), 2)),
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_pitch(200.0, &stats(200.0, 50.0)).unwrap(), 0.0);
        assert_eq!(normalize_pitch(250.0, &stats(200.0, 50.0)).unwrap(), 1.0);
        assert!((normalize_pitch(180.0, &stats(200.0, 25.0)).unwrap() + 0.8).abs() < 1e-12);
        assert!(normalize_pitch(f64::NAN, &stats(200.0, 50.0)).is_err());
        assert!(normalize_pitch(100.0, &stats(200.0, 0.0)).is_err());
    }

    #[test]
    fn denormalize_examples() {
        assert_eq!(denormalize_pitch(0.0, &stats(200.0, 50.0)).unwrap(), 200.0);
        assert_eq!(denormalize_pitch(1.0, &stats(200.0, 50.0)).unwrap(), 250.0);
        assert!(denormalize_pitch(f64::INFINITY, &stats(200.0, 50.0)).is_err());
    }

    #[test]
    fn speaker_stats_examples() {
        let s = compute_speaker_stats("s", [&utt_with_pitch(&[100.0, 0.0, 200.0])]).unwrap();
        assert_eq!((s.mu, s.sigma, s.degenerate), (150.0, 50.0, false));

        let s = compute_speaker_stats("s", [&utt_with_pitch(&[120.0, 120.0, 120.0])]).unwrap();
        assert_eq!((s.mu, s.sigma, s.degenerate), (120.0, 1.0, true));

        let err = compute_speaker_stats("s", [&utt_with_pitch(&[0.0, 0.0])]).unwrap_err();
        assert!(matches!(err, Error::EmptyStats(_)));
    }

    #[test]
    fn context_window_examples() {
        let book = ["abc", "defg", "hi"];
        let w = extract_context_window(&book, 1, 2).unwrap();
        assert_eq!((w.preceding.as_str(), w.succeeding.as_str()), ("bc", "hi"));

        let w = extract_context_window(&book, 0, 10).unwrap();
        assert_eq!(w.preceding, "");
        assert_eq!(w.succeeding, "defghi");

        let w = extract_context_window(&book, 1, 0).unwrap();
        assert_eq!((w.preceding.as_str(), w.succeeding.as_str()), ("", ""));

        assert!(extract_context_window(&book, 3, 2).is_err());
    }

    #[test]
    fn sentence_context_examples() {
        let book = ["abc", "defg", "hi"];
        let w = extract_sentence_context(&book, 1, 1).unwrap();
        assert_eq!((w.preceding.as_str(), w.succeeding.as_str()), ("abc", "hi"));
        let w = extract_sentence_context(&book, 1, 0).unwrap();
        assert_eq!((w.preceding.as_str(), w.succeeding.as_str()), ("", ""));
        let w = extract_sentence_context(&book, 2, 1).unwrap();
        assert_eq!(w.succeeding, "");
        assert!(extract_sentence_context(&book, 5, 1).is_err());
    }

    #[test]
    fn windows_count_characters_not_bytes() {
        let book = ["こんにちは", "世界", "です"];
        let w = extract_context_window(&book, 1, 3).unwrap();
        assert_eq!(w.preceding, "にちは");
        assert_eq!(w.succeeding, "です");
    }

    #[test]
    fn truncation_matches_direct_extraction() {
        let book = ["abc", "defg", "hi", "jklmno"];
        let wide = extract_context_window(&book, 2, 6).unwrap();
        assert_eq!(wide.truncated(3), extract_context_window(&book, 2, 3).unwrap());
    }

    proptest! {
        #[test]
        fn pitch_round_trip(p in 1.0f64..1000.0, mu in 50.0f64..400.0, sigma in 0.5f64..100.0) {
            let s = stats(mu, sigma);
            let back = denormalize_pitch(normalize_pitch(p, &s).unwrap(), &s).unwrap();
            prop_assert!((back - p).abs() < 1e-9);
        }

        #[test]
        fn windows_nest_and_have_expected_length(
            texts in proptest::collection::vec("[a-z]{0,7}", 1..6),
            target in 0usize..6,
            k1 in 0usize..12,
            extra in 1usize..12,
        ) {
            let target = target % texts.len();
            let k2 = k1 + extra;
            let a = extract_context_window(&texts, target, k1).unwrap();
            let b = extract_context_window(&texts, target, k2).unwrap();
            let pre_total: usize = texts[..target].iter().map(|t| t.chars().count()).sum();
            let suc_total: usize = texts[target + 1..].iter().map(|t| t.chars().count()).sum();
            prop_assert_eq!(a.preceding.chars().count(), k1.min(pre_total));
            prop_assert_eq!(a.succeeding.chars().count(), k1.min(suc_total));
            prop_assert!(b.preceding.ends_with(&a.preceding));
            prop_assert!(b.succeeding.starts_with(&a.succeeding));
        }
    }
}
