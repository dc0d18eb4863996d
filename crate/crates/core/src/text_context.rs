//! Textual context encoder: word embeddings from a pluggable provider, a GRU
//! sentence embedding of the target, one attention module per lateral with the
//! sentence embedding as query, and an FC fusion to the model width.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{cast_array, Float, Graph, ParamId, Var};
use crate::corpus::ContextWindow;
use crate::error::{invalid, Error, Result};
use crate::nn::{Gru, Linear, ParamBuilder, Segments};

fn is_unspaced_script(c: char) -> bool {
    matches!(c as u32, 0x3040..=0x30FF | 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF)
}

/// Whitespace split with punctuation as separate tokens. Kana and CJK ideographs
/// are one token per character.
pub fn toy_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() && !is_unspaced_script(c) {
            cur.push(c);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Source of per-token word embeddings.
pub trait EmbeddingProvider: Send + Sync {
    fn identifier(&self) -> &str;
    fn dimension(&self) -> usize;

    fn trainable(&self) -> bool {
        false
    }

    /// Learning-rate multiplier applied to the provider's table when trainable.
    fn lr_scale(&self) -> f64 {
        0.0
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        toy_tokenize(text)
    }

    /// Embeds a token sequence jointly; one row per token.
    fn embed_sequence(&self, tokens: &[String]) -> Result<Array2<f32>>;

    /// Table rows for trainable providers (`None` entries embed to zero).
    fn token_rows(&self, _tokens: &[String]) -> Option<Vec<Option<usize>>> {
        None
    }

    /// Initial table for trainable providers.
    fn table(&self) -> Option<&Array2<f32>> {
        None
    }
}

/// One row per token of the provider's tokenization.
pub fn embed_tokens(text: &str, provider: &dyn EmbeddingProvider) -> Result<Array2<f32>> {
    let tokens = provider.tokenize(text);
    let m = provider.embed_sequence(&tokens)?;
    if m.dim() != (tokens.len(), provider.dimension()) {
        return Err(Error::Provider {
            id: provider.identifier().to_string(),
            msg: format!("returned {:?} for {} tokens", m.dim(), tokens.len()),
        });
    }
    Ok(m)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes.into_iter().fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Unit vector assigned to a token: component `j` is the FNV-1a hash of the token
/// bytes followed by the little-endian `u32` `j`, mapped to `[-0.5, 0.5)`, then the
/// vector is L2-normalized.
pub fn hash_unit_vector(token: &str, dim: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..dim as u32)
        .map(|j| {
            let h = fnv1a(token.bytes().chain(j.to_le_bytes()));
            (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return raw;
    }
    raw.into_iter().map(|v| v / norm).collect()
}

/// Frozen, context-insensitive provider: every token maps to its hash vector.
#[derive(Clone, Debug)]
pub struct HashEmbeddingProvider {
    dim: usize,
}

impl HashEmbeddingProvider {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl EmbeddingProvider for HashEmbeddingProvider {
    fn identifier(&self) -> &str {
        "toy-hash"
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_sequence(&self, tokens: &[String]) -> Result<Array2<f32>> {
        let mut m = Array2::zeros((tokens.len(), self.dim));
        for (i, t) in tokens.iter().enumerate() {
            for (j, v) in hash_unit_vector(t, self.dim).into_iter().enumerate() {
                m[[i, j]] = v as f32;
            }
        }
        Ok(m)
    }
}

/// Frozen provider whose rows mix in the mean hash vector of the whole sequence,
/// so a token's embedding depends on its neighbours.
#[derive(Clone, Debug)]
pub struct ContextualHashProvider {
    dim: usize,
    mix: f64,
}

impl ContextualHashProvider {
    pub fn new(dim: usize, mix: f64) -> Self {
        Self { dim, mix }
    }
}

impl EmbeddingProvider for ContextualHashProvider {
    fn identifier(&self) -> &str {
        "toy-contextual"
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_sequence(&self, tokens: &[String]) -> Result<Array2<f32>> {
        let vecs: Vec<Vec<f64>> = tokens.iter().map(|t| hash_unit_vector(t, self.dim)).collect();
        let mut mean = vec![0.0; self.dim];
        for v in &vecs {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / vecs.len() as f64;
            }
        }
        let mut m = Array2::zeros((tokens.len(), self.dim));
        for (i, v) in vecs.iter().enumerate() {
            for j in 0..self.dim {
                m[[i, j]] = (v[j] + self.mix * mean[j]) as f32;
            }
        }
        Ok(m)
    }
}

/// Parameter group of a fine-tuned provider table.
pub const EMBEDDING_GROUP: &str = "embedding";

const EMBEDDING_MAGIC: &[u8; 8] = b"CTXEMB\0\0";
const EMBEDDING_VERSION: u32 = 1;

/// Precomputed per-token vectors loaded from an embedding file. Unknown tokens embed to zero.
#[derive(Clone, Debug)]
pub struct FileEmbeddingProvider {
    id: String,
    vocab: Vec<String>,
    index: std::collections::HashMap<String, usize>,
    table: Array2<f32>,
    trainable: bool,
    lr_scale: f64,
}

impl FileEmbeddingProvider {
    pub fn new(id: impl Into<String>, vocab: Vec<String>, table: Array2<f32>) -> Result<Self> {
        if vocab.len() != table.nrows() {
            return Err(invalid(format!("{} tokens but {} vectors", vocab.len(), table.nrows())));
        }
        let index = vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { id: id.into(), vocab, index, table, trainable: false, lr_scale: 0.0 })
    }

    /// Marks the table as fine-tunable with the given learning-rate multiplier.
    pub fn fine_tuned(mut self, lr_scale: f64) -> Self {
        self.trainable = true;
        self.lr_scale = lr_scale;
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        File::open(path)?.read_to_end(&mut buf)?;
        let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
        if buf.len() < 20 || &buf[..8] != EMBEDDING_MAGIC {
            return Err(bad("not an embedding file"));
        }
        let mut pos = 8;
        let u32_at = |pos: &mut usize| -> Result<u32> {
            let b = buf.get(*pos..*pos + 4).ok_or_else(|| bad("truncated"))?;
            *pos += 4;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        if u32_at(&mut pos)? != EMBEDDING_VERSION {
            return Err(bad("unsupported version"));
        }
        let dim = u32_at(&mut pos)? as usize;
        let n = u32_at(&mut pos)? as usize;
        let mut vocab = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u32_at(&mut pos)? as usize;
            let bytes = buf.get(pos..pos + len).ok_or_else(|| bad("truncated token table"))?;
            vocab.push(String::from_utf8(bytes.to_vec()).map_err(|_| bad("token is not UTF-8"))?);
            pos += len;
        }
        let body = buf.get(pos..pos + 4 * n * dim).ok_or_else(|| bad("truncated vectors"))?;
        let floats: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let table = Array2::from_shape_vec((n, dim), floats).map_err(|e| bad(&e.to_string()))?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "file".into());
        Self::new(id, vocab, table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_embedding_file(path, &self.vocab, &self.table)
    }
}

pub fn write_embedding_file(path: &Path, vocab: &[String], table: &Array2<f32>) -> Result<()> {
    if vocab.len() != table.nrows() {
        return Err(invalid("vocabulary and table sizes differ"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    w.write_all(&(table.ncols() as u32).to_le_bytes())?;
    w.write_all(&(vocab.len() as u32).to_le_bytes())?;
    for t in vocab {
        w.write_all(&(t.len() as u32).to_le_bytes())?;
        w.write_all(t.as_bytes())?;
    }
    for v in table.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

impl EmbeddingProvider for FileEmbeddingProvider {
    fn identifier(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.table.ncols()
    }

    fn trainable(&self) -> bool {
        self.trainable
    }

    fn lr_scale(&self) -> f64 {
        self.lr_scale
    }

    fn embed_sequence(&self, tokens: &[String]) -> Result<Array2<f32>> {
        let mut m = Array2::zeros((tokens.len(), self.dimension()));
        for (i, t) in tokens.iter().enumerate() {
            if let Some(&r) = self.index.get(t) {
                m.row_mut(i).assign(&self.table.row(r));
            }
        }
        Ok(m)
    }

    fn token_rows(&self, tokens: &[String]) -> Option<Vec<Option<usize>>> {
        Some(tokens.iter().map(|t| self.index.get(t).copied()).collect())
    }

    fn table(&self) -> Option<&Array2<f32>> {
        Some(&self.table)
    }
}

/// Serializable description of an embedding provider.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProviderSpec {
    ToyHash { dim: usize },
    ToyContextual { dim: usize, mix: f64 },
    /// Precomputed table; `lr_scale` makes it fine-tunable.
    File { path: std::path::PathBuf, lr_scale: Option<f64> },
}

impl ProviderSpec {
    pub fn build(&self) -> Result<Box<dyn EmbeddingProvider>> {
        Ok(match self {
            ProviderSpec::ToyHash { dim } => Box::new(HashEmbeddingProvider::new(*dim)),
            ProviderSpec::ToyContextual { dim, mix } => Box::new(ContextualHashProvider::new(*dim, *mix)),
            ProviderSpec::File { path, lr_scale } => {
                let p = FileEmbeddingProvider::load(path)?;
                match lr_scale {
                    Some(s) => Box::new(p.fine_tuned(*s)),
                    None => Box::new(p),
                }
            }
        })
    }
}

/// Which textual laterals feed the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LateralMode {
    None,
    Pre,
    Suc,
    Bi,
    /// Neighbouring sentences only condition the word embeddings of the target.
    Implicit,
}

impl LateralMode {
    pub fn uses_preceding(self) -> bool {
        matches!(self, LateralMode::Pre | LateralMode::Bi)
    }

    pub fn uses_succeeding(self) -> bool {
        matches!(self, LateralMode::Suc | LateralMode::Bi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TceConfig {
    pub mode: LateralMode,
    /// Characters per lateral.
    pub k: usize,
    pub gru_hidden: usize,
    pub attention_dim: usize,
    pub implicit_n_sentences: usize,
}

impl Default for TceConfig {
    fn default() -> Self {
        Self { mode: LateralMode::Bi, k: 64, gru_hidden: 256, attention_dim: 256, implicit_n_sentences: 1 }
    }
}

/// Single-head scaled dot-product attention with learned projections.
#[derive(Clone, Debug)]
pub struct ContextAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub dim: usize,
}

pub struct AttentionOutput {
    /// `[1 × attention_dim]`
    pub output: Var,
    /// `[1 × tokens]`, absent for an empty context.
    pub weights: Option<Var>,
}

impl ContextAttention {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, d_query: usize, d_emb: usize, dim: usize) -> Self {
        Self {
            query: Linear::new(&mut pb.sub("query"), d_query, dim, true),
            key: Linear::new(&mut pb.sub("key"), d_emb, dim, true),
            value: Linear::new(&mut pb.sub("value"), d_emb, dim, true),
            dim,
        }
    }

    /// Attends one query row over a `[tokens × d_emb]` context; zero tokens give a zero vector.
    pub fn attend<T: Float>(&self, g: &mut Graph<'_, T>, query: Var, context: Var) -> AttentionOutput {
        if g.shape(context).0 == 0 {
            return AttentionOutput { output: g.zeros(1, self.dim), weights: None };
        }
        let q = self.query.forward(g, query);
        let k = self.key.forward(g, context);
        let v = self.value.forward(g, context);
        self.attend_projected(g, q, k, v)
    }

    fn attend_projected<T: Float>(&self, g: &mut Graph<'_, T>, q: Var, k: Var, v: Var) -> AttentionOutput {
        let logits = g.matmul_t(q, k);
        let logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        let w = g.softmax_rows(logits);
        let output = g.matmul(w, v);
        AttentionOutput { output, weights: Some(w) }
    }
}

/// Inputs of the textual context encoder for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct TextContextInput {
    pub target_text: String,
    /// Character window (explicit modes) or sentence window (implicit mode).
    pub window: ContextWindow,
}

#[derive(Clone, Debug)]
pub struct TextContextEncoder {
    pub config: TceConfig,
    pub d_emb: usize,
    pub d_model: usize,
    pub gru: Gru,
    pub preceding: ContextAttention,
    pub succeeding: ContextAttention,
    pub fc: Linear,
    /// Fine-tunable provider table, when the provider is trainable.
    pub table: Option<ParamId>,
}

struct EmbeddedItem<T> {
    target: Array2<T>,
    target_rows: Option<Vec<Option<usize>>>,
    pre: Array2<T>,
    pre_rows: Option<Vec<Option<usize>>>,
    suc: Array2<T>,
    suc_rows: Option<Vec<Option<usize>>>,
}

impl TextContextEncoder {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        config: TceConfig,
        provider: &dyn EmbeddingProvider,
        d_model: usize,
    ) -> Self {
        let d_emb = provider.dimension();
        let h = config.gru_hidden;
        let a = config.attention_dim;
        let gru = Gru::new(&mut pb.sub("gru"), d_emb, h);
        let preceding = ContextAttention::new(&mut pb.sub("pre_attention"), h, d_emb, a);
        let succeeding = ContextAttention::new(&mut pb.sub("suc_attention"), h, d_emb, a);
        let fc = Linear::new(&mut pb.sub("fc"), 2 * a + h, d_model, true);
        let table = match (provider.trainable(), provider.table()) {
            (true, Some(t)) => {
                let mut sub = pb.sub("embedding").with_group(EMBEDDING_GROUP);
                Some(sub.add("table", t.mapv(|v| v as f64)))
            }
            _ => None,
        };
        Self { config, d_emb, d_model, gru, preceding, succeeding, fc, table }
    }

    fn embed_item<T: Float>(&self, item: &TextContextInput, provider: &dyn EmbeddingProvider) -> Result<EmbeddedItem<T>> {
        let mode = self.config.mode;
        let trainable = self.table.is_some();
        let target_tokens = provider.tokenize(&item.target_text);
        if target_tokens.is_empty() {
            return Err(invalid("target sentence has no tokens"));
        }
        let empty = || Array2::<T>::zeros((0, self.d_emb));
        let embed = |tokens: &[String]| -> Result<(Array2<T>, Option<Vec<Option<usize>>>)> {
            let m = provider.embed_sequence(tokens)?;
            if m.dim() != (tokens.len(), self.d_emb) {
                return Err(Error::Provider {
                    id: provider.identifier().into(),
                    msg: format!("returned {:?} for {} tokens", m.dim(), tokens.len()),
                });
            }
            let rows = if trainable { provider.token_rows(tokens) } else { None };
            Ok((cast_array(&m), rows))
        };
        if mode == LateralMode::Implicit {
            let pre = provider.tokenize(&item.window.preceding);
            let suc = provider.tokenize(&item.window.succeeding);
            let all: Vec<String> = pre.iter().chain(&target_tokens).chain(&suc).cloned().collect();
            let (m, rows) = embed(&all)?;
            let span = pre.len()..pre.len() + target_tokens.len();
            let target = m.slice(ndarray::s![span.clone(), ..]).to_owned();
            let target_rows = rows.map(|r| r[span].to_vec());
            return Ok(EmbeddedItem { target, target_rows, pre: empty(), pre_rows: None, suc: empty(), suc_rows: None });
        }
        let (target, target_rows) = embed(&target_tokens)?;
        let (pre, pre_rows) = if mode.uses_preceding() {
            embed(&provider.tokenize(&item.window.preceding))?
        } else {
            (empty(), None)
        };
        let (suc, suc_rows) = if mode.uses_succeeding() {
            embed(&provider.tokenize(&item.window.succeeding))?
        } else {
            (empty(), None)
        };
        Ok(EmbeddedItem { target, target_rows, pre, pre_rows, suc, suc_rows })
    }

    fn embedding_var<T: Float>(&self, g: &mut Graph<'_, T>, dense: Array2<T>, rows: Option<Vec<Option<usize>>>) -> Var {
        match (self.table, rows) {
            (Some(table), Some(rows)) => {
                let t = g.param(table);
                g.gather_rows(t, &rows)
            }
            _ => g.constant(dense),
        }
    }

    fn lateral<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        att: &ContextAttention,
        sentence: Var,
        contexts: Vec<Var>,
    ) -> Var {
        let mut rows = Vec::with_capacity(contexts.len());
        for (i, ctx) in contexts.into_iter().enumerate() {
            let q = g.slice_rows(sentence, i, 1);
            rows.push(att.attend(g, q, ctx).output);
        }
        g.concat_rows(&rows)
    }

    /// Textual context vectors `[items × d_model]`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        items: &[TextContextInput],
        provider: &dyn EmbeddingProvider,
    ) -> Result<Var> {
        if provider.dimension() != self.d_emb {
            return Err(invalid(format!(
                "provider `{}` has dimension {}, encoder expects {}",
                provider.identifier(),
                provider.dimension(),
                self.d_emb
            )));
        }
        if items.is_empty() {
            return Err(invalid("no items to encode"));
        }
        let embedded: Vec<EmbeddedItem<T>> =
            items.iter().map(|it| self.embed_item(it, provider)).collect::<Result<_>>()?;
        let mut target_parts = Vec::with_capacity(items.len());
        let mut lens = Vec::with_capacity(items.len());
        let mut pres = Vec::with_capacity(items.len());
        let mut sucs = Vec::with_capacity(items.len());
        for e in embedded {
            lens.push(e.target.nrows());
            target_parts.push(self.embedding_var(g, e.target, e.target_rows));
            pres.push(self.embedding_var(g, e.pre, e.pre_rows));
            sucs.push(self.embedding_var(g, e.suc, e.suc_rows));
        }
        let targets = g.concat_rows(&target_parts);
        let sentence = self.gru.final_states(g, targets, &Segments::new(lens));
        let n = items.len();
        let a = self.config.attention_dim;
        let pre = if self.config.mode.uses_preceding() {
            self.lateral(g, &self.preceding, sentence, pres)
        } else {
            g.zeros(n, a)
        };
        let suc = if self.config.mode.uses_succeeding() {
            self.lateral(g, &self.succeeding, sentence, sucs)
        } else {
            g.zeros(n, a)
        };
        Ok(fuse_textual_context(g, &self.fc, pre, suc, sentence))
    }
}

/// GRU final state over a `[tokens × d_emb]` matrix.
pub fn sentence_embedding<T: Float>(g: &mut Graph<'_, T>, gru: &Gru, word_embeddings: Var) -> Result<Var> {
    let tokens = g.shape(word_embeddings).0;
    if tokens == 0 {
        return Err(invalid("sentence embedding of zero tokens"));
    }
    Ok(gru.final_states(g, word_embeddings, &Segments::new(vec![tokens])))
}

/// Concatenates `[pre | suc | sentence]` and applies the FC layer.
pub fn fuse_textual_context<T: Float>(g: &mut Graph<'_, T>, fc: &Linear, pre: Var, suc: Var, sentence: Var) -> Var {
    let x = g.concat_cols(&[pre, suc, sentence]);
    fc.forward(g, x)
}

/// Checked variant of [`fuse_textual_context`] for single vectors.
pub fn try_fuse_textual_context<T: Float>(
    g: &mut Graph<'_, T>,
    fc: &Linear,
    pre: Var,
    suc: Var,
    sentence: Var,
) -> Result<Var> {
    let width = g.shape(pre).1 + g.shape(suc).1 + g.shape(sentence).1;
    let expected = g.params().value(fc.w).nrows();
    let rows = [g.shape(pre).0, g.shape(suc).0, g.shape(sentence).0];
    if width != expected || rows.iter().any(|&r| r != rows[0]) {
        return Err(invalid(format!("fusion input width {width}, FC expects {expected}")));
    }
    Ok(fuse_textual_context(g, fc, pre, suc, sentence))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamSet;
    use crate::nn::seeded_rng;
    use ndarray::array;
    use proptest::prelude::*;

    fn tiny(mode: LateralMode, provider: &dyn EmbeddingProvider) -> (ParamSet<f64>, TextContextEncoder) {
        let mut ps = ParamSet::new();
        let mut rng = seeded_rng(5);
        let cfg = TceConfig { mode, k: 16, gru_hidden: 4, attention_dim: 3, implicit_n_sentences: 1 };
        let enc = TextContextEncoder::new(&mut ParamBuilder::new(&mut ps, &mut rng), cfg, provider, 5);
        (ps, enc)
    }

    fn run(ps: &ParamSet<f64>, enc: &TextContextEncoder, items: &[TextContextInput], p: &dyn EmbeddingProvider) -> Array2<f64> {
        let mut g = Graph::new(ps);
        let v = enc.forward(&mut g, items, p).unwrap();
        g.value(v).clone()
    }

    fn item(target: &str, pre: &str, suc: &str) -> TextContextInput {
        TextContextInput {
            target_text: target.into(),
            window: ContextWindow { preceding: pre.into(), succeeding: suc.into(), k: 16 },
        }
    }

    fn fnv_reference(bytes: &[u8]) -> u64 {
        let mut h: u64 = 14695981039346656037;
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(1099511628211);
        }
        h
    }

    #[test]
    fn tokenizer_splits_words_and_punctuation() {
        assert_eq!(toy_tokenize("la mori UP.bo ka."), vec!["la", "mori", "UP", ".", "bo", "ka", "."]);
        assert_eq!(toy_tokenize("今日は"), vec!["今", "日", "は"]);
        assert_eq!(toy_tokenize("UP"), vec!["UP"]);
        assert!(toy_tokenize("").is_empty());
    }

    #[test]
    fn embed_tokens_examples() {
        let p = HashEmbeddingProvider::new(8);
        assert_eq!(embed_tokens("", &p).unwrap().dim(), (0, 8));
        assert_eq!(embed_tokens("a b UP", &p).unwrap(), embed_tokens("a b UP", &p).unwrap());

        let up = embed_tokens("UP", &p).unwrap();
        // Component j: FNV-1a over "UP" ++ le32(j), top 53 bits scaled to [0,1), minus 0.5.
        let mut raw = Vec::new();
        for j in 0u32..8 {
            let mut bytes = b"UP".to_vec();
            bytes.extend_from_slice(&j.to_le_bytes());
            let h = fnv_reference(&bytes);
            raw.push((h >> 11) as f64 * 2f64.powi(-53) - 0.5);
        }
        let norm: f64 = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..8 {
            let d = (up[[0, j]] as f64 - raw[j] / norm).abs();
            assert!(d < 1e-6, "component {j}: {d}");
        }
    }

    #[test]
    fn sentence_embedding_zero_parameters_is_zero() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = seeded_rng(0);
        let gru = Gru::new(&mut ParamBuilder::new(&mut ps, &mut rng), 3, 256);
        for (_, p) in ps.iter_mut() {
            p.value.fill(0.0);
        }
        let mut g = Graph::new(&ps);
        let x = g.constant(array![[0.4, -1.0, 2.0]]);
        let h = sentence_embedding(&mut g, &gru, x).unwrap();
        assert_eq!(g.shape(h), (1, 256));
        assert!(g.value(h).iter().all(|&v| v == 0.0));

        let x = g.constant(Array2::from_elem((7, 3), 0.3));
        let h = sentence_embedding(&mut g, &gru, x).unwrap();
        assert_eq!(g.shape(h), (1, 256));

        let empty = g.constant(Array2::zeros((0, 3)));
        assert!(sentence_embedding(&mut g, &gru, empty).is_err());
    }

    #[test]
    fn sentence_embedding_matches_hand_recurrence() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = seeded_rng(0);
        let gru = Gru::new(&mut ParamBuilder::new(&mut ps, &mut rng), 2, 2);
        // Columns: [reset | update | new], two hidden units each.
        *ps.value_mut(gru.w_ih) = array![[1.0, 0.0, 0.5, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, -0.5, 0.0, 1.0]];
        *ps.value_mut(gru.w_hh) = array![[0.0, 0.0, 0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 0.0, 0.0, 1.0]];
        *ps.value_mut(gru.b_ih) = array![[0.0, 0.0, 0.1, 0.1, 0.0, 0.0]];
        *ps.value_mut(gru.b_hh) = array![[0.0, 0.0, 0.0, 0.0, 0.2, -0.2]];
        let xs = [[1.0, -1.0], [0.5, 2.0]];

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = [0.0f64, 0.0];
        for x in xs {
            let r = [sig(x[0]), sig(x[1])];
            let z = [sig(0.5 * x[0] + 0.1), sig(-0.5 * x[1] + 0.1)];
            let n = [(x[0] + r[0] * (h[0] + 0.2)).tanh(), (x[1] + r[1] * (h[1] - 0.2)).tanh()];
            h = [(1.0 - z[0]) * n[0] + z[0] * h[0], (1.0 - z[1]) * n[1] + z[1] * h[1]];
        }

        let mut g = Graph::new(&ps);
        let x = g.constant(array![[1.0, -1.0], [0.5, 2.0]]);
        let out = sentence_embedding(&mut g, &gru, x).unwrap();
        for j in 0..2 {
            assert!((g.value(out)[[0, j]] - h[j]).abs() < 1e-9);
        }
    }

    fn attention_with(wq: Array2<f64>, wk: Array2<f64>, wv: Array2<f64>) -> (ParamSet<f64>, ContextAttention) {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = seeded_rng(0);
        let (dq, dim) = wq.dim();
        let demb = wk.nrows();
        let att = ContextAttention::new(&mut ParamBuilder::new(&mut ps, &mut rng), dq, demb, dim);
        *ps.value_mut(att.query.w) = wq;
        *ps.value_mut(att.key.w) = wk;
        *ps.value_mut(att.value.w) = wv;
        (ps, att)
    }

    #[test]
    fn attention_single_token_returns_its_value() {
        let (ps, att) = attention_with(array![[1.0, 0.0], [0.0, 1.0]], array![[0.3, 0.1]], array![[2.0, -1.0]]);
        let mut g = Graph::new(&ps);
        let q = g.constant(array![[0.5, 0.7]]);
        let c = g.constant(array![[1.5]]);
        let out = att.attend(&mut g, q, c);
        assert_eq!(g.value(out.output), &array![[3.0, -1.5]]);
    }

    #[test]
    fn attention_identical_tokens_are_uniform() {
        let (ps, att) = attention_with(array![[1.0, 0.2], [0.4, 1.0]], array![[0.3, 0.1]], array![[2.0, -1.0]]);
        let mut g = Graph::new(&ps);
        let q = g.constant(array![[0.5, 0.7]]);
        let c = g.constant(array![[1.5], [1.5], [1.5], [1.5]]);
        let out = att.attend(&mut g, q, c);
        for &w in g.value(out.weights.unwrap()) {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_hand_softmax() {
        // d_att = 1: logit = q * k_t / sqrt(1) with q = 1 and keys (0, ln 3).
        let (ps, att) = attention_with(array![[1.0]], array![[1.0]], array![[1.0]]);
        let mut g = Graph::new(&ps);
        let q = g.constant(array![[1.0]]);
        let c = g.constant(array![[0.0], [3f64.ln()]]);
        let out = att.attend(&mut g, q, c);
        let w = g.value(out.weights.unwrap());
        assert!((w[[0, 0]] - 0.25).abs() < 1e-12 && (w[[0, 1]] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn attention_empty_context_is_zero() {
        let (ps, att) = attention_with(array![[1.0]], array![[1.0]], array![[1.0]]);
        let mut g = Graph::new(&ps);
        let q = g.constant(array![[1.0]]);
        let c = g.constant(Array2::zeros((0, 1)));
        let out = att.attend(&mut g, q, c);
        assert!(out.weights.is_none());
        assert_eq!(g.value(out.output), &array![[0.0]]);
    }

    #[test]
    fn attention_ignores_token_order() {
        let (ps, att) = attention_with(
            array![[1.0, 0.2], [0.4, 1.0]],
            array![[0.3, 0.1], [0.2, -0.4]],
            array![[2.0, -1.0], [0.5, 0.5]],
        );
        let ctx = array![[1.0, 0.0], [0.2, 0.9], [-0.5, 0.3]];
        let perm = array![[-0.5, 0.3], [1.0, 0.0], [0.2, 0.9]];
        let mut g = Graph::new(&ps);
        let q = g.constant(array![[0.5, 0.7]]);
        let a = g.constant(ctx);
        let b = g.constant(perm);
        let oa = att.attend(&mut g, q, a).output;
        let ob = att.attend(&mut g, q, b).output;
        for (x, y) in g.value(oa).iter().zip(g.value(ob)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_examples() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = seeded_rng(0);
        let fc = Linear::new(&mut ParamBuilder::new(&mut ps, &mut rng), 6, 6, true);
        *ps.value_mut(fc.w) = Array2::eye(6);
        let mut g = Graph::new(&ps);
        let z = g.zeros(1, 2);
        let out = try_fuse_textual_context(&mut g, &fc, z, z, z).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));

        let e1 = g.constant(array![[1.0, 0.0]]);
        let out = try_fuse_textual_context(&mut g, &fc, e1, z, z).unwrap();
        assert_eq!(g.value(out), &array![[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]]);
        let out = try_fuse_textual_context(&mut g, &fc, z, e1, z).unwrap();
        assert_eq!(g.value(out), &array![[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]]);

        let wide = g.zeros(1, 3);
        assert!(try_fuse_textual_context(&mut g, &fc, wide, z, z).is_err());
    }

    #[test]
    fn output_width_independent_of_mode() {
        let p = HashEmbeddingProvider::new(4);
        for mode in [LateralMode::None, LateralMode::Pre, LateralMode::Suc, LateralMode::Bi, LateralMode::Implicit] {
            let (ps, enc) = tiny(mode, &p);
            let out = run(&ps, &enc, &[item("ka mori", "UP sela", "tupa")], &p);
            assert_eq!(out.dim(), (1, 5));
        }
    }

    #[test]
    fn mode_none_is_fusion_of_sentence_embedding_only() {
        let p = HashEmbeddingProvider::new(4);
        let (ps, enc) = tiny(LateralMode::None, &p);
        let out = run(&ps, &enc, &[item("ka mori", "UP sela", "tupa")], &p);

        let mut g = Graph::new(&ps);
        let emb = g.constant(cast_array(&embed_tokens("ka mori", &p).unwrap()));
        let sent = sentence_embedding(&mut g, &enc.gru, emb).unwrap();
        let z = g.zeros(1, 3);
        let fused = fuse_textual_context(&mut g, &enc.fc, z, z, sent);
        assert_eq!(g.value(fused), &out);
    }

    #[test]
    fn empty_preceding_window_matches_mode_none() {
        let p = HashEmbeddingProvider::new(4);
        let (ps, mut enc) = tiny(LateralMode::Pre, &p);
        let pre = run(&ps, &enc, &[item("ka mori", "", "tupa")], &p);
        enc.config.mode = LateralMode::None;
        let none = run(&ps, &enc, &[item("ka mori", "", "tupa")], &p);
        assert_eq!(pre, none);
    }

    #[test]
    fn bi_differs_from_pre_only_through_succeeding_path() {
        let p = HashEmbeddingProvider::new(4);
        let (mut ps, mut enc) = tiny(LateralMode::Bi, &p);
        let it = [item("ka mori", "UP sela", "DOWN tupa")];
        let bi = run(&ps, &enc, &it, &p);
        enc.config.mode = LateralMode::Pre;
        let pre = run(&ps, &enc, &it, &p);
        assert!(bi.iter().zip(&pre).any(|(a, b)| (a - b).abs() > 1e-9));

        ps.value_mut(enc.succeeding.value.w).fill(0.0);
        ps.value_mut(enc.succeeding.value.b.unwrap()).fill(0.0);
        enc.config.mode = LateralMode::Bi;
        let bi_zeroed = run(&ps, &enc, &it, &p);
        for (a, b) in bi_zeroed.iter().zip(&pre) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn disabled_laterals_ignore_window_text() {
        let p = HashEmbeddingProvider::new(4);
        let (ps, enc) = tiny(LateralMode::Pre, &p);
        let a = run(&ps, &enc, &[item("ka", "UP", "x y")], &p);
        let b = run(&ps, &enc, &[item("ka", "UP", "completely different")], &p);
        assert_eq!(a, b);
    }

    #[test]
    fn implicit_mode_context_dependence_follows_provider() {
        let hash = HashEmbeddingProvider::new(4);
        let (ps, enc) = tiny(LateralMode::Implicit, &hash);
        let a = run(&ps, &enc, &[item("ka mori", "sela", "tupa")], &hash);
        let b = run(&ps, &enc, &[item("ka mori", "UP DOWN", "neko")], &hash);
        assert_eq!(a, b);

        let ctx = ContextualHashProvider::new(4, 0.5);
        let a = run(&ps, &enc, &[item("ka mori", "sela", "tupa")], &ctx);
        let b = run(&ps, &enc, &[item("ka mori", "UP DOWN", "neko")], &ctx);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn batching_does_not_mix_items() {
        let p = HashEmbeddingProvider::new(4);
        let (ps, enc) = tiny(LateralMode::Bi, &p);
        let items = [item("ka mori", "UP sela", "tupa"), item("neko", "", "DOWN ha rin"), item("be", "x", "")];
        let all = run(&ps, &enc, &items, &p);
        for (i, it) in items.iter().enumerate() {
            let one = run(&ps, &enc, std::slice::from_ref(it), &p);
            for j in 0..5 {
                assert!((one[[0, j]] - all[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_target_is_rejected() {
        let p = HashEmbeddingProvider::new(4);
        let (ps, enc) = tiny(LateralMode::Bi, &p);
        let mut g = Graph::new(&ps);
        assert!(enc.forward(&mut g, &[item("", "a", "b")], &p).is_err());
    }

    #[test]
    fn file_provider_round_trip_and_trainable_table() {
        let vocab = vec!["ka".to_string(), "UP".to_string()];
        let table = array![[1.0f32, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        write_embedding_file(&path, &vocab, &table).unwrap();
        let p = FileEmbeddingProvider::load(&path).unwrap();
        let m = embed_tokens("ka UP zz", &p).unwrap();
        assert_eq!(m, array![[1.0f32, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]);

        // A fine-tuned table starts equal to the frozen lookup.
        let frozen = p.clone();
        let tuned = p.fine_tuned(1e-4);
        let (ps_f, enc_f) = tiny(LateralMode::Bi, &frozen);
        let (ps_t, enc_t) = tiny(LateralMode::Bi, &tuned);
        assert!(enc_f.table.is_none());
        let tid = enc_t.table.unwrap();
        assert_eq!(ps_t.get(tid).group, EMBEDDING_GROUP);
        let it = [item("ka UP", "UP ka", "zz")];
        let a = run(&ps_f, &enc_f, &it, &frozen);
        let b = run(&ps_t, &enc_t, &it, &tuned);
        // Parameter registration order differs by one table, so only shapes agree.
        assert_eq!(a.dim(), b.dim());

        let mut g = Graph::new(&ps_t);
        let v = enc_t.forward(&mut g, &it, &tuned).unwrap();
        let s = g.sum_all(v);
        let grads = g.backward(s);
        assert!(grads.param(tid).is_some());
    }

    proptest! {
        #[test]
        fn attention_weights_are_distributions(
            ctx in proptest::collection::vec(-3.0f64..3.0, 2..16),
            q in proptest::collection::vec(-3.0f64..3.0, 2),
        ) {
            let (ps, att) = attention_with(
                array![[1.0, 0.5], [-0.3, 2.0]],
                array![[0.7, -1.1], [0.4, 0.9]],
                array![[1.0, 0.0], [0.0, 1.0]],
            );
            let rows = ctx.len() / 2;
            let mut g = Graph::new(&ps);
            let qv = g.constant(Array2::from_shape_vec((1, 2), q).unwrap());
            let c = g.constant(Array2::from_shape_vec((rows, 2), ctx[..rows * 2].to_vec()).unwrap());
            let out = att.attend(&mut g, qv, c);
            let w = g.value(out.weights.unwrap());
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.sum() - 1.0).abs() < 1e-6);
        }
    }
}
