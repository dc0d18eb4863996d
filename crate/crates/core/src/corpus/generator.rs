//! Deterministic synthetic audiobook corpus with planted context → prosody structure.
//!
//! Every utterance's phoneme-level pitch, in the speaker's generator units, is
//!
//! ```text
//! z = style_N + cue_shift_N + phoneme_offset(ph) + noise
//! style_N = book_bias + carry_N,   carry_N = carry_decay * carry_{N-1} + mood_step * mood_N
//! cue_shift_N = cue_delta * sign(#UP - #DOWN) over the cue lateral(s), cue_window characters wide
//! ```
//!
//! and the frame pitch is `base_hz + scale_hz * z` on voiced phonemes. `mood_N` is
//! +1 / -1 when the utterance's own text holds the bright / gloom word. The style
//! is rendered into every mel frame as a spectral tilt, so the previous
//! utterance's mel reveals it.

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{extract_context_window, Book, CorpusManifest, FeatureConfig, PhonemeInfo, Utterance};
use crate::error::{invalid, Result};
use crate::text_context::toy_tokenize;

/// Which lateral(s) of a target carry the pitch cue.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CueLateral {
    None,
    Preceding,
    Succeeding,
    Both,
}

/// Pitch range of one synthetic speaker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVoice {
    pub base_hz: f64,
    /// Hz per generator pitch unit.
    pub scale_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub speakers: usize,
    pub books_per_speaker: usize,
    pub utterances_per_book: usize,
    pub mel_bins: usize,
    pub frame_rate: f32,
    /// Filler words; lowercase ASCII letters only.
    pub vocabulary: Vec<String>,
    pub words_per_utterance: (usize, usize),
    pub cue_up: String,
    pub cue_down: String,
    /// Chance that an utterance carries one cue word (split evenly between up and down).
    pub cue_probability: f64,
    pub cue_lateral: CueLateral,
    /// Characters per lateral scanned by the cue rule.
    pub cue_window: usize,
    pub cue_delta: f64,
    pub mood_bright: String,
    pub mood_gloom: String,
    pub mood_probability: f64,
    pub mood_step: f64,
    pub carry_decay: f64,
    /// Per-book constant style offsets are drawn from `{-book_bias, +book_bias}`.
    pub book_bias: f64,
    /// Amplitude of the style tilt rendered into mel frames.
    pub style_tilt: f64,
    pub pitch_noise: f64,
    pub energy_noise: f64,
    /// Chance that a phoneme gets one extra frame.
    pub duration_jitter: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            speakers: 4,
            books_per_speaker: 4,
            utterances_per_book: 32,
            mel_bins: 20,
            frame_rate: 80.0,
            vocabulary: default_vocabulary(),
            words_per_utterance: (3, 4),
            cue_up: "UP".into(),
            cue_down: "DOWN".into(),
            cue_probability: 0.6,
            cue_lateral: CueLateral::Preceding,
            cue_window: 64,
            cue_delta: 1.5,
            mood_bright: "bright".into(),
            mood_gloom: "gloom".into(),
            mood_probability: 0.5,
            mood_step: 0.6,
            carry_decay: 0.8,
            book_bias: 0.2,
            style_tilt: 1.0,
            pitch_noise: 0.05,
            energy_noise: 0.05,
            duration_jitter: 0.15,
        }
    }
}

fn default_vocabulary() -> Vec<String> {
    [
        "ka", "mori", "sela", "tupa", "neko", "ha", "rin", "sota", "miro", "be", "lago", "fen", "kuto", "ari",
        "den", "pili", "somu", "ya", "taki", "wena", "gor", "lumi", "shi", "bado", "rasu", "iko", "nami", "teo",
        "kaze", "ume", "hoka", "zen", "oru", "piko", "seki", "mau",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

const VOICED: &str = "aeiouybdgjlmnrvwz";

/// Letters are the phoneme inventory.
pub fn phoneme_inventory() -> Vec<PhonemeInfo> {
    ('a'..='z')
        .map(|c| PhonemeInfo { symbol: c.to_string(), voiced: VOICED.contains(c) })
        .collect()
}

fn is_vowel(c: char) -> bool {
    "aeiou".contains(c)
}

/// Base frame count of a phoneme.
pub fn base_duration(symbol: &str) -> usize {
    match symbol.chars().next() {
        Some(c) if is_vowel(c) => 2,
        _ => 1,
    }
}

/// Fixed pitch offset (generator units) contributed by a phoneme.
pub fn phoneme_pitch_offset(symbol: &str) -> f64 {
    match symbol {
        "a" => 0.2,
        "e" => 0.1,
        "i" => 0.3,
        "o" => -0.1,
        "u" => -0.2,
        _ => 0.0,
    }
}

/// Base energy of a phoneme.
pub fn phoneme_energy(symbol: &str) -> f64 {
    let c = symbol.chars().next().unwrap_or('a');
    if is_vowel(c) {
        1.0
    } else if VOICED.contains(c) {
        0.6
    } else {
        0.3
    }
}

/// Smooth spectral envelope of a phoneme.
fn envelope(symbol: &str, bin: usize) -> f64 {
    let code = symbol.bytes().next().unwrap_or(b'a') as f64 - 96.0;
    0.8 * ((bin as f64 + 1.0) * code * 0.37).sin() * (-(bin as f64) / 40.0).exp()
}

const PITCH_LO: f64 = 50.0;
const PITCH_HI: f64 = 400.0;

/// Renders one mel frame from its phoneme, pitch (Hz, 0 = unvoiced), energy and style.
pub fn render_frame(symbol: &str, pitch_hz: f64, energy: f64, style: f64, tilt: f64, mel_bins: usize) -> Vec<f32> {
    let top = (mel_bins.max(2) - 1) as f64;
    let center = (pitch_hz.max(PITCH_LO) / PITCH_LO).ln() / (PITCH_HI / PITCH_LO).ln() * top;
    (0..mel_bins)
        .map(|b| {
            let bf = b as f64;
            let mut v = envelope(symbol, b) + energy + tilt * style * (2.0 * bf / top - 1.0);
            if pitch_hz > 0.0 {
                v += 1.5 * (-(bf - center).powi(2) / (2.0 * 1.2 * 1.2)).exp();
            }
            v as f32
        })
        .collect()
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.speakers == 0 {
            return Err(invalid("generator needs at least one speaker"));
        }
        if self.books_per_speaker == 0 || self.utterances_per_book == 0 {
            return Err(invalid("generator needs at least one book and one utterance per book"));
        }
        if self.vocabulary.is_empty() {
            return Err(invalid("generator vocabulary is empty"));
        }
        if self.mel_bins < 2 {
            return Err(invalid("mel_bins must be at least 2"));
        }
        let (lo, hi) = self.words_per_utterance;
        if lo == 0 || lo > hi {
            return Err(invalid("words_per_utterance must satisfy 1 <= min <= max"));
        }
        for w in self.vocabulary.iter().chain([&self.cue_up, &self.cue_down, &self.mood_bright, &self.mood_gloom]) {
            if w.is_empty() || !w.chars().all(|c| c.is_ascii_alphabetic()) {
                return Err(invalid(format!("word `{w}` must be non-empty ASCII letters")));
            }
        }
        for p in [self.cue_probability, self.mood_probability, self.duration_jitter] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid("probabilities must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn voice(&self, speaker: usize) -> SyntheticVoice {
        let base_hz = 100.0 + 40.0 * speaker as f64;
        SyntheticVoice { base_hz, scale_hz: 0.15 * base_hz }
    }

    pub fn speaker_id(speaker: usize) -> String {
        format!("spk{speaker}")
    }

    pub fn book_id(speaker: usize, book: usize) -> String {
        format!("spk{speaker}-book{book}")
    }

    /// Signed cue count over the cue lateral(s) of a target.
    pub fn cue_sign(&self, texts: &[String], target: usize) -> Result<i64> {
        if self.cue_lateral == CueLateral::None {
            return Ok(0);
        }
        let w = extract_context_window(texts, target, self.cue_window)?;
        let count = |s: &str| -> i64 {
            toy_tokenize(s)
                .iter()
                .map(|t| {
                    if *t == self.cue_up {
                        1
                    } else if *t == self.cue_down {
                        -1
                    } else {
                        0
                    }
                })
                .sum()
        };
        let total = match self.cue_lateral {
            CueLateral::Preceding => count(&w.preceding),
            CueLateral::Succeeding => count(&w.succeeding),
            CueLateral::Both => count(&w.preceding) + count(&w.succeeding),
            CueLateral::None => 0,
        };
        Ok(total.signum())
    }

    /// +1 / -1 / 0 for the mood word carried in an utterance's own text.
    pub fn mood_of(&self, text: &str) -> i64 {
        let toks = toy_tokenize(text);
        if toks.iter().any(|t| *t == self.mood_bright) {
            1
        } else if toks.iter().any(|t| *t == self.mood_gloom) {
            -1
        } else {
            0
        }
    }
}

fn book_seed(seed: u64, speaker: usize, book: usize) -> u64 {
    seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul((speaker * 1009 + book + 1) as u64))
}

fn make_text(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> String {
    let (lo, hi) = spec.words_per_utterance;
    let n = rng.random_range(lo..=hi);
    let mut words: Vec<String> = (0..n)
        .map(|_| spec.vocabulary.choose(rng).expect("non-empty vocabulary").clone())
        .collect();
    if rng.random_bool(spec.cue_probability) {
        let cue = if rng.random_bool(0.5) { &spec.cue_up } else { &spec.cue_down };
        let at = rng.random_range(0..=words.len());
        words.insert(at, cue.clone());
    }
    if rng.random_bool(spec.mood_probability) {
        let mood = if rng.random_bool(0.5) { &spec.mood_bright } else { &spec.mood_gloom };
        let at = rng.random_range(0..=words.len());
        words.insert(at, mood.clone());
    }
    format!("{}.", words.join(" "))
}

fn text_phonemes(text: &str) -> Vec<String> {
    text.chars()
        .filter(|c| c.is_ascii_alphabetic())
        .map(|c| c.to_ascii_lowercase().to_string())
        .collect()
}

fn generate_book(spec: &GeneratorSpec, seed: u64, speaker: usize, book: usize) -> Result<Book> {
    let mut rng = ChaCha8Rng::seed_from_u64(book_seed(seed, speaker, book));
    let voice = spec.voice(speaker);
    let book_id = GeneratorSpec::book_id(speaker, book);
    let speaker_id = GeneratorSpec::speaker_id(speaker);
    let texts: Vec<String> = (0..spec.utterances_per_book).map(|_| make_text(spec, &mut rng)).collect();
    let bias = if rng.random_bool(0.5) { spec.book_bias } else { -spec.book_bias };
    let pitch_noise = Normal::new(0.0, spec.pitch_noise.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    let energy_noise = Normal::new(0.0, spec.energy_noise.max(0.0)).map_err(|e| invalid(e.to_string()))?;

    let mut carry = 0.0;
    let mut utterances = Vec::with_capacity(texts.len());
    for (index, text) in texts.iter().enumerate() {
        carry = spec.carry_decay * carry + spec.mood_step * spec.mood_of(text) as f64;
        let style = bias + carry;
        let level = style + spec.cue_delta * spec.cue_sign(&texts, index)? as f64;

        let phonemes = text_phonemes(text);
        let mut durations = Vec::with_capacity(phonemes.len());
        let mut pitch = Vec::new();
        let mut energy = Vec::new();
        let mut rows: Vec<f32> = Vec::new();
        for ph in &phonemes {
            let dur = base_duration(ph) + usize::from(rng.random_bool(spec.duration_jitter));
            durations.push(dur);
            let voiced = VOICED.contains(ph.as_str());
            let z = level + phoneme_pitch_offset(ph) + pitch_noise.sample(&mut rng);
            let hz = if voiced { (voice.base_hz + voice.scale_hz * z).max(PITCH_LO) } else { 0.0 };
            let e = phoneme_energy(ph) + energy_noise.sample(&mut rng);
            for _ in 0..dur {
                pitch.push(hz as f32);
                energy.push(e as f32);
                rows.extend(render_frame(ph, hz, e, style, spec.style_tilt, spec.mel_bins));
            }
        }
        let frames = pitch.len();
        let mel = Array2::from_shape_vec((frames, spec.mel_bins), rows).expect("frame rows match mel_bins");
        utterances.push(Utterance {
            book_id: book_id.clone(),
            speaker_id: speaker_id.clone(),
            index,
            text: text.clone(),
            phonemes,
            durations,
            pitch,
            energy,
            mel,
        });
    }
    Ok(Book { id: book_id, utterances })
}

/// Builds the whole corpus; a pure function of `(seed, spec)`.
pub fn generate_synthetic_corpus(seed: u64, spec: &GeneratorSpec) -> Result<CorpusManifest> {
    spec.validate()?;
    let mut books = Vec::with_capacity(spec.speakers * spec.books_per_speaker);
    for speaker in 0..spec.speakers {
        for book in 0..spec.books_per_speaker {
            books.push(generate_book(spec, seed, speaker, book)?);
        }
    }
    let manifest = CorpusManifest {
        features: FeatureConfig {
            mel_bins: spec.mel_bins,
            frame_rate: spec.frame_rate,
            phonemes: phoneme_inventory(),
        },
        speakers: (0..spec.speakers).map(GeneratorSpec::speaker_id).collect(),
        books,
    };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{normalize_pitch, speaker_stats_table};

    fn small() -> GeneratorSpec {
        GeneratorSpec { speakers: 2, books_per_speaker: 2, utterances_per_book: 10, ..Default::default() }
    }

    #[test]
    fn counts_and_contiguous_indices() {
        let m = generate_synthetic_corpus(7, &small()).unwrap();
        assert_eq!(m.num_utterances(), 40);
        assert_eq!(m.books.len(), 4);
        for b in &m.books {
            let idx: Vec<usize> = b.utterances.iter().map(|u| u.index).collect();
            assert_eq!(idx, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_synthetic_corpus(7, &small()).unwrap();
        let b = generate_synthetic_corpus(7, &small()).unwrap();
        let c = generate_synthetic_corpus(8, &small()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn durations_sum_to_frames() {
        let m = generate_synthetic_corpus(1, &small()).unwrap();
        for u in m.utterances() {
            assert_eq!(u.durations.iter().sum::<usize>(), u.frames());
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_synthetic_corpus(0, &GeneratorSpec { speakers: 0, ..small() }).is_err());
        assert!(generate_synthetic_corpus(0, &GeneratorSpec { vocabulary: vec![], ..small() }).is_err());
    }

    #[test]
    fn normalized_pitch_has_unit_moments_per_speaker() {
        let m = generate_synthetic_corpus(3, &small()).unwrap();
        let table = speaker_stats_table(&m).unwrap();
        for (spk, st) in &table {
            let z: Vec<f64> = m
                .utterances()
                .filter(|u| &u.speaker_id == spk)
                .flat_map(|u| u.pitch.iter().filter(|&&p| p > 0.0))
                .map(|&p| normalize_pitch(p as f64, st).unwrap())
                .collect();
            let mean = z.iter().sum::<f64>() / z.len() as f64;
            let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
            assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6, "{spk}: {mean} {std}");
        }
    }
}
