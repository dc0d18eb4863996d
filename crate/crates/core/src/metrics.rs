//! Objective prosody metrics over DTW alignments: MCD, F0-RMSE, GPE, and speaker
//! classification accuracy.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamSet};
use crate::corpus::CorpusManifest;
use crate::error::{invalid, Error, Result};
use crate::nn::{seeded_rng, Linear, ParamBuilder};
use crate::optim::{Adam, AdamConfig};

/// Monotone alignment between a reference and a test sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentPath {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Minimal-cost alignment under steps (1,0), (0,1), (1,1). Backtrace ties prefer
/// the diagonal, then (1,0), then (0,1).
pub fn dtw_align(ref_len: usize, test_len: usize, cost: impl Fn(usize, usize) -> f64) -> Result<AlignmentPath> {
    if ref_len == 0 || test_len == 0 {
        return Err(invalid("DTW needs two non-empty sequences"));
    }
    let c = Array2::from_shape_fn((ref_len, test_len), |(i, j)| cost(i, j));
    let mut d = Array2::from_elem((ref_len, test_len), f64::INFINITY);
    for i in 0..ref_len {
        for j in 0..test_len {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let mut b = f64::INFINITY;
                if i > 0 && j > 0 {
                    b = b.min(d[[i - 1, j - 1]]);
                }
                if i > 0 {
                    b = b.min(d[[i - 1, j]]);
                }
                if j > 0 {
                    b = b.min(d[[i, j - 1]]);
                }
                b
            };
            d[[i, j]] = best + c[[i, j]];
        }
    }
    let (mut i, mut j) = (ref_len - 1, test_len - 1);
    let mut pairs = vec![(i, j)];
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { d[[i - 1, j - 1]] } else { f64::INFINITY };
        let up = if i > 0 { d[[i - 1, j]] } else { f64::INFINITY };
        let left = if j > 0 { d[[i, j - 1]] } else { f64::INFINITY };
        if i > 0 && j > 0 && diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if i > 0 && up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok(AlignmentPath { pairs, cost: d[[ref_len - 1, test_len - 1]] })
}

/// Highest retained cepstral index; coefficient 0 is excluded from MCD.
pub const CEPSTRAL_ORDER: usize = 12;

/// `10·√2 / ln 10`
pub fn mcd_constant() -> f64 {
    10.0 * 2f64.sqrt() / 10f64.ln()
}

/// Orthonormal DCT-II over mel bins, keeping coefficients `0..=CEPSTRAL_ORDER`.
pub fn mel_to_cepstrum(mel: &Array2<f32>) -> Array2<f64> {
    let (frames, bins) = mel.dim();
    let keep = (CEPSTRAL_ORDER + 1).min(bins);
    let n = bins as f64;
    let basis = Array2::from_shape_fn((bins, keep), |(b, k)| {
        let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        s * (std::f64::consts::PI * k as f64 * (2.0 * b as f64 + 1.0) / (2.0 * n)).cos()
    });
    let m = mel.mapv(|v| v as f64);
    if frames == 0 {
        return Array2::zeros((0, keep));
    }
    m.dot(&basis)
}

/// Mel-cepstral distortion in dB over the DTW path, using coefficients `1..`.
pub fn mcd(ref_cep: &Array2<f64>, test_cep: &Array2<f64>) -> Result<f64> {
    if ref_cep.ncols() != test_cep.ncols() {
        return Err(invalid(format!("{} vs {} cepstral coefficients", ref_cep.ncols(), test_cep.ncols())));
    }
    let dist = |i: usize, j: usize| {
        ref_cep.row(i).iter().zip(test_cep.row(j)).skip(1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    let path = dtw_align(ref_cep.nrows(), test_cep.nrows(), dist)?;
    let mean = path.pairs.iter().map(|&(i, j)| dist(i, j)).sum::<f64>() / path.pairs.len() as f64;
    Ok(mcd_constant() * mean)
}

/// Linear-interpolation percentile of unsorted values, `q` in `[0, 1]`.
fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// DTW over F0 contours: |Δ log F0| for voiced pairs, 0 for unvoiced pairs, and the
/// 95th percentile of voiced costs for voicing mismatches.
pub fn f0_alignment(ref_f0: &[f32], test_f0: &[f32]) -> Result<AlignmentPath> {
    if ref_f0.iter().chain(test_f0).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(invalid("F0 values must be finite and non-negative"));
    }
    let lr: Vec<Option<f64>> = ref_f0.iter().map(|&v| (v > 0.0).then(|| (v as f64).ln())).collect();
    let lt: Vec<Option<f64>> = test_f0.iter().map(|&v| (v > 0.0).then(|| (v as f64).ln())).collect();
    let mut voiced_costs: Vec<f64> = lr
        .iter()
        .flatten()
        .flat_map(|a| lt.iter().flatten().map(move |b| (a - b).abs()))
        .collect();
    let penalty = if voiced_costs.is_empty() { 1.0 } else { percentile(&mut voiced_costs, 0.95) };
    dtw_align(lr.len(), lt.len(), |i, j| match (lr[i], lt[j]) {
        (Some(a), Some(b)) => (a - b).abs(),
        (None, None) => 0.0,
        _ => penalty,
    })
}

fn jointly_voiced(ref_f0: &[f32], test_f0: &[f32]) -> Result<Vec<(f64, f64)>> {
    let path = f0_alignment(ref_f0, test_f0)?;
    let pairs: Vec<(f64, f64)> = path
        .pairs
        .iter()
        .map(|&(i, j)| (ref_f0[i] as f64, test_f0[j] as f64))
        .filter(|&(a, b)| a > 0.0 && b > 0.0)
        .collect();
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("no jointly voiced aligned frames".into()));
    }
    Ok(pairs)
}

/// Unit of the F0 error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum F0Scale {
    #[default]
    Hz,
    LogHz,
}

/// Root mean square F0 error in Hz over jointly voiced aligned pairs.
pub fn f0_rmse(ref_f0: &[f32], test_f0: &[f32]) -> Result<f64> {
    f0_rmse_scaled(ref_f0, test_f0, F0Scale::Hz)
}

pub fn f0_rmse_scaled(ref_f0: &[f32], test_f0: &[f32], scale: F0Scale) -> Result<f64> {
    let pairs = jointly_voiced(ref_f0, test_f0)?;
    let sq: f64 = pairs
        .iter()
        .map(|&(a, b)| match scale {
            F0Scale::Hz => (a - b).powi(2),
            F0Scale::LogHz => (a.ln() - b.ln()).powi(2),
        })
        .sum();
    Ok((sq / pairs.len() as f64).sqrt())
}

/// Percentage of jointly voiced aligned pairs with relative error above `threshold`.
pub fn gpe(ref_f0: &[f32], test_f0: &[f32], threshold: f64) -> Result<f64> {
    let pairs = jointly_voiced(ref_f0, test_f0)?;
    let gross = pairs.iter().filter(|&&(a, b)| (b - a).abs() / a > threshold).count();
    Ok(100.0 * gross as f64 / pairs.len() as f64)
}

pub const GPE_THRESHOLD: f64 = 0.2;

/// Time-averaged mel vector.
pub fn mean_mel(mel: &Array2<f32>) -> Vec<f64> {
    mel.mapv(|v| v as f64).mean_axis(Axis(0)).map(|a| a.to_vec()).unwrap_or_default()
}

/// One-hidden-layer classifier over standardized time-averaged mel features.
#[derive(Clone, Debug)]
pub struct SpeakerClassifier {
    params: ParamSet<f64>,
    hidden: Linear,
    out: Linear,
    mean: Array1<f64>,
    std: Array1<f64>,
    pub n_classes: usize,
}

impl SpeakerClassifier {
    pub const HIDDEN: usize = 32;

    /// Full-batch Adam on cross-entropy for a fixed number of epochs.
    pub fn train(features: &[Vec<f64>], labels: &[usize], n_classes: usize, seed: u64, epochs: usize) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(invalid("classifier needs one label per feature vector"));
        }
        if n_classes == 0 || labels.iter().any(|&l| l >= n_classes) {
            return Err(invalid("label outside the class range"));
        }
        let dim = features[0].len();
        let x = Array2::from_shape_fn((features.len(), dim), |(i, j)| features[i][j]);
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-8 { s } else { 1.0 });
        let xs = (&x - &mean) / &std;

        let mut params = ParamSet::new();
        let mut rng = seeded_rng(seed);
        let (hidden, out) = {
            let mut pb = ParamBuilder::new(&mut params, &mut rng);
            (Linear::new(&mut pb.sub("hidden"), dim, Self::HIDDEN, true), Linear::new(&mut pb.sub("out"), Self::HIDDEN, n_classes, true))
        };
        let onehot = Array2::from_shape_fn((labels.len(), n_classes), |(i, c)| if labels[i] == c { 1.0 } else { 0.0 });
        let mut opt = Adam::new(&params, AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 });
        for _ in 0..epochs {
            let grads = {
                let mut g = Graph::new(&params);
                let xin = g.constant(xs.clone());
                let h = hidden.forward(&mut g, xin);
                let h = g.tanh(h);
                let logits = out.forward(&mut g, h);
                let lp = g.log_softmax_rows(logits);
                let y = g.constant(onehot.clone());
                let picked = g.mul(lp, y);
                let s = g.sum_all(picked);
                let loss = g.scale(s, -1.0 / labels.len() as f64);
                g.backward(loss).into_param_grads()
            };
            opt.update(&mut params, &grads, 0.02)?;
        }
        Ok(Self { params, hidden, out, mean, std, n_classes })
    }

    pub fn predict(&self, feature: &[f64]) -> Result<usize> {
        if feature.len() != self.mean.len() {
            return Err(invalid(format!("feature width {} != {}", feature.len(), self.mean.len())));
        }
        let x = (Array1::from(feature.to_vec()) - &self.mean) / &self.std;
        let mut g = Graph::new(&self.params);
        let xin = g.constant(x.insert_axis(Axis(0)));
        let h = self.hidden.forward(&mut g, xin);
        let h = g.tanh(h);
        let logits = self.out.forward(&mut g, h);
        let row = g.value(logits).row(0).to_vec();
        Ok(row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0))
    }

    /// Trains on the time-averaged mels of a manifest, labels from its speaker table.
    pub fn fit_manifest(manifest: &CorpusManifest, seed: u64) -> Result<Self> {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for u in manifest.utterances() {
            feats.push(mean_mel(&u.mel));
            labels.push(manifest.speaker_index(&u.speaker_id).ok_or_else(|| invalid("speaker missing from table"))?);
        }
        Self::train(&feats, &labels, manifest.speakers.len(), seed, 300)
    }
}

/// Top-1 accuracy in percent.
pub fn speaker_accuracy(samples: &[(&Array2<f32>, usize)], classifier: &SpeakerClassifier) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("no samples to classify"));
    }
    let mut correct = 0;
    for (mel, label) in samples {
        if *label >= classifier.n_classes {
            return Err(invalid(format!("unknown speaker label {label}")));
        }
        if classifier.predict(&mean_mel(mel))? == *label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / samples.len() as f64)
}

/// One synthesized utterance keyed by its position in the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizedUtterance {
    pub book_id: String,
    pub index: usize,
    pub mel: Array2<f32>,
    /// Hz per frame, 0 = unvoiced.
    pub f0: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsodyScores {
    pub mcd: f64,
    pub f0_rmse: f64,
    pub gpe: f64,
    pub speaker_acc: f64,
    pub utterances: usize,
    /// Utterances without jointly voiced frames, excluded from F0-RMSE and GPE.
    pub undefined_f0: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceScores {
    pub mcd: f64,
    pub f0: Option<(f64, f64)>,
    pub speaker_correct: bool,
}

/// Scores every synthesized utterance against its ground truth and averages them
/// without weighting.
pub fn evaluate_run(
    outputs: &[SynthesizedUtterance],
    truth: &CorpusManifest,
    classifier: &SpeakerClassifier,
) -> Result<(ProsodyScores, Vec<UtteranceScores>)> {
    if outputs.is_empty() {
        return Err(invalid("no synthesized utterances"));
    }
    let mut per = Vec::with_capacity(outputs.len());
    for o in outputs {
        let gt = truth
            .book(&o.book_id)
            .and_then(|b| b.utterances.get(o.index))
            .ok_or_else(|| invalid(format!("no ground truth for {}#{}", o.book_id, o.index)))?;
        let label = truth.speaker_index(&gt.speaker_id).ok_or_else(|| invalid("speaker missing from table"))?;
        let m = mcd(&mel_to_cepstrum(&gt.mel), &mel_to_cepstrum(&o.mel))?;
        let f0 = match (f0_rmse(&gt.pitch, &o.f0), gpe(&gt.pitch, &o.f0, GPE_THRESHOLD)) {
            (Ok(r), Ok(e)) => Some((r, e)),
            (Err(Error::UndefinedMetric(_)), _) | (_, Err(Error::UndefinedMetric(_))) => None,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let correct = classifier.predict(&mean_mel(&o.mel))? == label;
        per.push(UtteranceScores { mcd: m, f0, speaker_correct: correct });
    }
    Ok((aggregate(&per), per))
}

pub fn aggregate(per: &[UtteranceScores]) -> ProsodyScores {
    let n = per.len() as f64;
    let f0: Vec<(f64, f64)> = per.iter().filter_map(|p| p.f0).collect();
    let mean_of = |xs: &[f64]| if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    ProsodyScores {
        mcd: per.iter().map(|p| p.mcd).sum::<f64>() / n,
        f0_rmse: mean_of(&f0.iter().map(|p| p.0).collect::<Vec<_>>()),
        gpe: mean_of(&f0.iter().map(|p| p.1).collect::<Vec<_>>()),
        speaker_acc: 100.0 * per.iter().filter(|p| p.speaker_correct).count() as f64 / n,
        utterances: per.len(),
        undefined_f0: per.len() - f0.len(),
    }
}

pub const SCORE_COLUMNS: [&str; 4] = ["MCD", "F0-RMSE", "GPE", "ACC"];

/// Tab-separated table: one row per id in the given order.
pub fn write_scores_table(w: &mut dyn Write, rows: &[(String, Option<ProsodyScores>)]) -> Result<()> {
    writeln!(w, "id\t{}", SCORE_COLUMNS.join("\t"))?;
    for (id, s) in rows {
        match s {
            Some(s) => writeln!(w, "{id}\t{:.4}\t{:.4}\t{:.4}\t{:.4}", s.mcd, s.f0_rmse, s.gpe, s.speaker_acc)?,
            None => writeln!(w, "{id}\tFAILED\tFAILED\tFAILED\tFAILED")?,
        }
    }
    Ok(())
}

/// Parses a table written by [`write_scores_table`]; failed rows map to `None`.
pub fn read_scores_table(text: &str) -> Result<BTreeMap<String, Option<[f64; 4]>>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty scores table".into()))?;
    let expect = format!("id\t{}", SCORE_COLUMNS.join("\t"));
    if header != expect {
        return Err(Error::Format(format!("unexpected header `{header}`")));
    }
    let mut out = BTreeMap::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::Format(format!("bad row `{line}`")));
        }
        let vals: Option<Vec<f64>> = cols[1..].iter().map(|c| c.parse().ok()).collect();
        out.insert(cols[0].to_string(), vals.map(|v| [v[0], v[1], v[2], v[3]]));
    }
    Ok(out)
}
