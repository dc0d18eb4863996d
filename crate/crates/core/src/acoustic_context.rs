//! Global-style-token encoders over mel features: the acoustic context encoder
//! (previous utterance) and the auxiliary acoustic encoder (target utterance).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{cast_array, Float, Graph, ParamId, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{Conv1d, Gru, Linear, ParamBuilder, Segments};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GstConfig {
    /// Output channels of the strided convolutions over time.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    /// Reference vector width (GRU hidden size).
    pub reference_dim: usize,
    pub n_tokens: usize,
    pub token_dim: usize,
    pub heads: usize,
    /// Attention width, split evenly across heads.
    pub attention_dim: usize,
    pub out_dim: usize,
}

impl Default for GstConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![32, 32],
            kernel: 3,
            stride: 2,
            reference_dim: 64,
            n_tokens: 10,
            token_dim: 64,
            heads: 8,
            attention_dim: 64,
            out_dim: 256,
        }
    }
}

impl GstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.attention_dim % self.heads != 0 {
            return Err(invalid(format!(
                "attention width {} is not divisible by {} heads",
                self.attention_dim, self.heads
            )));
        }
        if self.n_tokens == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(invalid("token count, kernel and stride must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StyleTokenBank {
    pub tokens: ParamId,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub attention_dim: usize,
}

pub struct StyleAttention {
    /// `[B × out_dim]`
    pub output: Var,
    /// Per head, `[B × n_tokens]`.
    pub weights: Vec<Var>,
}

impl StyleTokenBank {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, cfg: &GstConfig) -> Self {
        Self {
            tokens: pb.normal("tokens", cfg.n_tokens, cfg.token_dim, 0.5),
            query: Linear::new(&mut pb.sub("query"), cfg.reference_dim, cfg.attention_dim, false),
            key: Linear::new(&mut pb.sub("key"), cfg.token_dim, cfg.attention_dim, false),
            value: Linear::new(&mut pb.sub("value"), cfg.token_dim, cfg.attention_dim, false),
            out: Linear::new(&mut pb.sub("out"), cfg.attention_dim, cfg.out_dim, true),
            heads: cfg.heads,
            attention_dim: cfg.attention_dim,
        }
    }

    /// Multi-head attention of each reference row over the token bank.
    pub fn attend<T: Float>(&self, g: &mut Graph<'_, T>, reference: Var) -> StyleAttention {
        let tokens = g.param(self.tokens);
        let q = self.query.forward(g, reference);
        let k = self.key.forward(g, tokens);
        let v = self.value.forward(g, tokens);
        let dh = self.attention_dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let logits = g.matmul_t(qh, kh);
            let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
            let w = g.softmax_rows(logits);
            outs.push(g.matmul(w, vh));
            weights.push(w);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        StyleAttention { output: self.out.forward(g, cat), weights }
    }
}

/// Strided convolutions over time (mel bins as channels) followed by a GRU.
#[derive(Clone, Debug)]
pub struct ReferenceEncoder {
    pub convs: Vec<Conv1d>,
    pub gru: Gru,
}

impl ReferenceEncoder {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, cfg: &GstConfig, mel_bins: usize) -> Self {
        let mut convs = Vec::with_capacity(cfg.conv_channels.len());
        let mut din = mel_bins;
        for (i, &c) in cfg.conv_channels.iter().enumerate() {
            convs.push(Conv1d::new(&mut pb.sub(&format!("conv{i}")), din, c, cfg.kernel, cfg.stride));
            din = c;
        }
        let gru = Gru::new(&mut pb.sub("gru"), din, cfg.reference_dim);
        Self { convs, gru }
    }

    /// `[segments × reference_dim]` from packed mel frames.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, mel: Var, segs: &Segments) -> Result<Var> {
        if segs.lens().contains(&0) {
            return Err(invalid("reference encoder needs at least one frame"));
        }
        let mut x = mel;
        let mut s = segs.clone();
        for conv in &self.convs {
            let (y, next) = conv.forward(g, x, &s);
            x = g.relu(y);
            s = next;
        }
        Ok(self.gru.final_states(g, x, &s))
    }
}

/// Reference encoder plus style-token attention.
#[derive(Clone, Debug)]
pub struct GstEncoder {
    pub config: GstConfig,
    pub reference: ReferenceEncoder,
    pub bank: StyleTokenBank,
}

impl GstEncoder {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, cfg: GstConfig, mel_bins: usize) -> Self {
        let reference = ReferenceEncoder::new(&mut pb.sub("reference"), &cfg, mel_bins);
        let bank = StyleTokenBank::new(&mut pb.sub("style"), &cfg);
        Self { config: cfg, reference, bank }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, mel: Var, segs: &Segments) -> Result<StyleAttention> {
        let r = self.reference.forward(g, mel, segs)?;
        Ok(self.bank.attend(g, r))
    }

    /// Encodes each mel; `None` entries give zero rows.
    pub fn encode_optional<T: Float>(&self, g: &mut Graph<'_, T>, mels: &[Option<&Array2<f32>>]) -> Result<Var> {
        let present: Vec<&Array2<f32>> = mels.iter().flatten().copied().collect();
        if present.is_empty() {
            return Ok(g.zeros(mels.len(), self.config.out_dim));
        }
        let (x, segs) = pack(g, &present)?;
        let out = self.forward(g, x, &segs)?.output;
        let mut next = 0;
        let index: Vec<Option<usize>> = mels
            .iter()
            .map(|m| {
                m.map(|_| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        Ok(g.gather_rows(out, &index))
    }
}

fn pack<T: Float>(g: &mut Graph<'_, T>, mels: &[&Array2<f32>]) -> Result<(Var, Segments)> {
    let bins = mels[0].ncols();
    if mels.iter().any(|m| m.ncols() != bins) {
        return Err(invalid("mel inputs disagree on the number of bins"));
    }
    if mels.iter().any(|m| m.nrows() == 0) {
        return Err(invalid("mel input has zero frames"));
    }
    if mels.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("non-finite mel input".into()));
    }
    let views: Vec<_> = mels.iter().map(|m| m.view()).collect();
    let stacked = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
    let segs = Segments::new(mels.iter().map(|m| m.nrows()).collect());
    Ok((g.constant(cast_array(&stacked)), segs))
}

/// Acoustic context vectors from the previous utterances' mels (zero when absent).
pub fn encode_acoustic_context<T: Float>(
    g: &mut Graph<'_, T>,
    ace: &GstEncoder,
    previous: &[Option<&Array2<f32>>],
) -> Result<Var> {
    ace.encode_optional(g, previous)
}

/// Auxiliary encoder vectors of the target mels.
pub fn encode_acoustic_target<T: Float>(g: &mut Graph<'_, T>, ae: &GstEncoder, targets: &[&Array2<f32>]) -> Result<Var> {
    if targets.is_empty() {
        return Err(invalid("no target mels"));
    }
    let (x, segs) = pack(g, targets)?;
    Ok(ae.forward(g, x, &segs)?.output)
}

/// Mean absolute difference over all entries.
pub fn ace_prediction_loss<T: Float>(g: &mut Graph<'_, T>, v_ace: Var, v_ae: Var) -> Result<Var> {
    if g.shape(v_ace) != g.shape(v_ae) {
        return Err(invalid(format!("shapes {:?} and {:?} differ", g.shape(v_ace), g.shape(v_ae))));
    }
    let d = g.sub(v_ace, v_ae);
    let a = g.abs(d);
    Ok(g.mean_all(a))
}
