//! Expression encoder: word embeddings → bidirectional LSTM → optional
//! self-attention blocks → attentive pooling.

use ndarray::{Array2, Array3, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datahub::{EmbeddingTable, TokenSequence};
use crate::graph::{ParamId, ParamStore, Var};
use crate::nn::{Fwd, LayerNorm, Linear, LstmDirection};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextVariant {
    /// Randomly initialized embeddings.
    Lstm,
    LstmGlove,
    /// GloVe + LSTM + `sa_layers` self-attention blocks.
    LstmGloveSa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub variant: TextVariant,
    pub sa_layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub freeze_embeddings: bool,
    pub max_len: usize,
    /// Path to a GloVe text file; random embeddings when absent.
    pub glove_path: Option<String>,
    /// Name of a registered external token encoder (replaces embeddings + LSTM).
    pub external_encoder: Option<String>,
    pub pool_hidden: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            variant: TextVariant::LstmGloveSa,
            sa_layers: 1,
            hidden_dim: 512,
            heads: 8,
            ffn_mult: 4,
            dropout: 0.1,
            freeze_embeddings: true,
            max_len: 15,
            glove_path: None,
            external_encoder: None,
            pool_hidden: 512,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        let has_sa = self.variant == TextVariant::LstmGloveSa;
        if has_sa != (self.sa_layers > 0) {
            return Err("sa_layers must be > 0 exactly when variant is lstm_glove_sa".into());
        }
        if self.sa_layers > 3 {
            return Err("sa_layers must be at most 3".into());
        }
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(2) {
            return Err("hidden_dim must be a positive even number".into());
        }
        if has_sa && (self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads)) {
            return Err("hidden_dim must be divisible by heads".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must lie in [0, 1)".into());
        }
        if self.max_len == 0 {
            return Err("max_len must be positive".into());
        }
        if self.ffn_mult == 0 || self.pool_hidden == 0 {
            return Err("ffn_mult and pool_hidden must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("token sequence {index} has no valid tokens")]
    EmptySequence { index: usize },
    #[error("token sequences in a batch must share one max length")]
    RaggedBatch,
}

/// Token features produced outside this crate: ids `B×L` and valid lengths in,
/// `B×L×D` features out. Used for BERT-style encoders.
pub trait ExternalTokenEncoder: Send + Sync {
    fn output_dim(&self) -> usize;
    fn encode(&self, ids: &Array2<usize>, valid_len: &[usize]) -> Array3<f32>;
}

#[derive(Debug, Clone)]
struct SaBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Output of the encoder for a batch.
pub struct TextFeatures<'g, T: Real> {
    /// `B×L×d`
    pub per_token: Var<'g, T>,
    /// `B×d`
    pub pooled: Var<'g, T>,
    /// `B×L`, 1 at valid positions.
    pub mask: Array2<T>,
    /// `B×L` pooling weights.
    pub pool_weights: Var<'g, T>,
}

#[derive(Debug, Clone)]
pub struct AttentivePool {
    hidden: Linear,
    score: Linear,
}

impl AttentivePool {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self { hidden: Linear::new(ps, &format!("{name}.hidden"), dim, hidden, rng), score: Linear::new(ps, &format!("{name}.score"), hidden, 1, rng) }
    }

    /// Returns `(pooled B×d, weights B×L)`.
    pub fn forward<'g, T: Real>(&self, f: &Fwd<'g, T>, per_token: Var<'g, T>, mask: &Array2<T>) -> (Var<'g, T>, Var<'g, T>) {
        let shape = per_token.shape();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let scores = self.score.forward(f, self.hidden.forward(f, per_token).relu()).reshape(&[b, l]);
        let weights = scores.softmax(Some(&mask.clone().into_dyn()));
        let pooled = weights.reshape(&[b, 1, l]).bmm(per_token, false, false).reshape(&[b, d]);
        (pooled, weights)
    }
}

pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    embed: Option<ParamId>,
    fwd: Option<LstmDirection>,
    bwd: Option<LstmDirection>,
    external: Option<(Box<dyn ExternalTokenEncoder>, Linear)>,
    blocks: Vec<SaBlock>,
    pool: AttentivePool,
}

impl std::fmt::Debug for TextEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TextEncoder").field("cfg", &self.cfg).field("blocks", &self.blocks.len()).finish()
    }
}

pub fn batch_mask<T: Real>(tokens: &[TokenSequence]) -> Array2<T> {
    let l = tokens.first().map_or(0, |t| t.max_len());
    Array2::from_shape_fn((tokens.len(), l), |(i, j)| if j < tokens[i].valid_len { T::one() } else { T::zero() })
}

impl TextEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, cfg: &TextEncoderConfig, table: &EmbeddingTable, rng: &mut R) -> Self {
        let embed_value = table.matrix.mapv(|v| T::lit(v as f64)).into_dyn();
        let embed = ps.add("text.embed", embed_value, !cfg.freeze_embeddings);
        let h = cfg.hidden_dim / 2;
        let fwd = LstmDirection::new(ps, "text.lstm.fwd", table.dim(), h, rng);
        let bwd = LstmDirection::new(ps, "text.lstm.bwd", table.dim(), h, rng);
        let mut enc = Self {
            cfg: cfg.clone(),
            embed: Some(embed),
            fwd: Some(fwd),
            bwd: Some(bwd),
            external: None,
            blocks: Vec::new(),
            pool: AttentivePool::new(ps, "text.pool", cfg.hidden_dim, cfg.pool_hidden, rng),
        };
        enc.blocks = (0..cfg.sa_layers).map(|i| Self::block(ps, cfg, i, rng)).collect();
        enc
    }

    /// Encoder whose token features come from an external model, projected to `hidden_dim`.
    pub fn with_external<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        cfg: &TextEncoderConfig,
        external: Box<dyn ExternalTokenEncoder>,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(ps, "text.external_proj", external.output_dim(), cfg.hidden_dim, rng);
        let blocks = (0..cfg.sa_layers).map(|i| Self::block(ps, cfg, i, rng)).collect();
        Self {
            cfg: cfg.clone(),
            embed: None,
            fwd: None,
            bwd: None,
            external: Some((external, proj)),
            blocks,
            pool: AttentivePool::new(ps, "text.pool", cfg.hidden_dim, cfg.pool_hidden, rng),
        }
    }

    fn block<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, cfg: &TextEncoderConfig, i: usize, rng: &mut R) -> SaBlock {
        let d = cfg.hidden_dim;
        let n = format!("text.sa{i}");
        SaBlock {
            ln1: LayerNorm::new(ps, &format!("{n}.ln1"), d),
            q: Linear::new(ps, &format!("{n}.q"), d, d, rng),
            k: Linear::new(ps, &format!("{n}.k"), d, d, rng),
            v: Linear::new(ps, &format!("{n}.v"), d, d, rng),
            // residual branches start closed
            out: Linear::zeroed(ps, &format!("{n}.out"), d, d),
            ln2: LayerNorm::new(ps, &format!("{n}.ln2"), d),
            ff1: Linear::new(ps, &format!("{n}.ff1"), d, d * cfg.ffn_mult, rng),
            ff2: Linear::zeroed(ps, &format!("{n}.ff2"), d * cfg.ffn_mult, d),
        }
    }

    fn self_attention<'g, T: Real>(&self, f: &Fwd<'g, T>, blk: &SaBlock, x: Var<'g, T>, key_mask: &ArrayD<T>) -> Var<'g, T> {
        let shape = x.shape();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let heads = self.cfg.heads;
        let dh = d / heads;
        let split = |t: Var<'g, T>| t.reshape(&[b, l, heads, dh]).permute(&[0, 2, 1, 3]);
        let q = split(blk.q.forward(f, x));
        let k = split(blk.k.forward(f, x));
        let v = split(blk.v.forward(f, x));
        let scores = q.bmm(k, false, true).scale(T::lit(1.0 / (dh as f64).sqrt()));
        let attn = scores.softmax(Some(key_mask));
        let attn = f.dropout(attn, self.cfg.dropout);
        let ctx = attn.bmm(v, false, false).permute(&[0, 2, 1, 3]).reshape(&[b, l, d]);
        blk.out.forward(f, ctx)
    }

    fn recurrent<'g, T: Real>(&self, f: &Fwd<'g, T>, ids: &Array2<usize>, mask: &Array2<T>, valid: &[usize]) -> Var<'g, T> {
        if let Some((ext, proj)) = &self.external {
            let feats = ext.encode(ids, valid).mapv(|v| T::lit(v as f64)).into_dyn();
            let x = proj.forward(f, f.g.constant(feats));
            let m = f.g.constant(mask.clone().insert_axis(ndarray::Axis(2)).into_dyn());
            return x * m;
        }
        let table = f.p(self.embed.expect("embedding table"));
        let x = table.gather_rows(&ids.clone().into_dyn());
        let fw = self.fwd.as_ref().unwrap().forward(f, x, mask, false);
        let bw = self.bwd.as_ref().unwrap().forward(f, x, mask, true);
        f.g.concat(&[fw, bw], 2)
    }

    pub fn encode<'g, T: Real>(&self, f: &Fwd<'g, T>, tokens: &[TokenSequence]) -> Result<TextFeatures<'g, T>, TextError> {
        let l = tokens.first().map_or(0, |t| t.max_len());
        for (i, t) in tokens.iter().enumerate() {
            if t.max_len() != l {
                return Err(TextError::RaggedBatch);
            }
            if t.valid_len == 0 {
                return Err(TextError::EmptySequence { index: i });
            }
        }
        let b = tokens.len();
        let ids = Array2::from_shape_fn((b, l), |(i, j)| tokens[i].indices[j]);
        let valid: Vec<usize> = tokens.iter().map(|t| t.valid_len).collect();
        let mask = batch_mask::<T>(tokens);
        let mut x = self.recurrent(f, &ids, &mask, &valid);
        let key_mask = mask.clone().into_shape_with_order((b, 1, 1, l)).unwrap().into_dyn();
        for blk in &self.blocks {
            let a = self.self_attention(f, blk, blk.ln1.forward(f, x), &key_mask);
            x = x + f.dropout(a, self.cfg.dropout);
            let h = blk.ff2.forward(f, blk.ff1.forward(f, blk.ln2.forward(f, x)).relu());
            x = x + f.dropout(h, self.cfg.dropout);
        }
        let (pooled, pool_weights) = self.pool.forward(f, x, &mask);
        Ok(TextFeatures { per_token: x, pooled, mask, pool_weights })
    }
}
