//! Language-conditioned multi-scale deformable attention pixel decoder.
//!
//! Every token of every level samples `points` locations per level and head
//! around its reference point. The sampled values and the projected query
//! features form one joint set that the token attends over.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{input_err, Result};
use crate::graph::{DeformLayout, Graph, Var};
use crate::nn::{residual_norm, FeedForward, LayerNorm, Linear};
use crate::param::{Bound, Init, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Fixed sine/cosine encoding of normalized token centers, `[h·w, width]`.
/// The first half encodes `y`, the second half `x`.
pub fn position_encoding(h: usize, w: usize, width: usize) -> Tensor<f32> {
    let quarter = width / 4;
    let mut out = Vec::with_capacity(h * w * width);
    for y in 0..h {
        for x in 0..w {
            let coords = [(y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64];
            for c in coords {
                let a = c * core::f64::consts::TAU;
                let freq = |i: usize| 10000f64.powf(i as f64 / quarter as f64);
                for i in 0..quarter {
                    out.push((a / freq(i)).sin() as f32);
                }
                for i in 0..quarter {
                    out.push((a / freq(i)).cos() as f32);
                }
            }
        }
    }
    Tensor::new(&[h * w, width], out).expect("width divisible by 4")
}

/// Geometry shared by every layer of one forward pass.
#[derive(Debug, Clone)]
pub struct TokenLayout {
    pub deform: DeformLayout,
    /// Normalized `(x, y)` center of every token, levels concatenated coarse
    /// to fine.
    pub refs: Vec<[f64; 2]>,
    /// First token row of each level.
    pub starts: Vec<usize>,
}

impl TokenLayout {
    pub fn new(cfg: &ModelConfig, sizes: &[(usize, usize)]) -> Self {
        let mut refs = Vec::new();
        let mut starts = Vec::with_capacity(sizes.len());
        for &(h, w) in sizes {
            starts.push(refs.len());
            for y in 0..h {
                for x in 0..w {
                    refs.push([(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64]);
                }
            }
        }
        Self {
            deform: DeformLayout {
                heads: cfg.heads,
                points: cfg.points,
                head_dim: cfg.head_dim(),
                levels: sizes.to_vec(),
            },
            refs,
            starts,
        }
    }

    pub fn tokens(&self) -> usize {
        self.refs.len()
    }

    pub fn level_len(&self, l: usize) -> usize {
        let (h, w) = self.deform.levels[l];
        h * w
    }
}

/// Intermediate results of one attention step, exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub offsets: Var,
    /// `[T·heads·L·K, head_dim]`
    pub sampled: Var,
    /// `[T·heads, L·K + C]`, rows sum to one.
    pub weights: Var,
    /// Weighted sum before the output projection, `[T, width]`.
    pub attended: Var,
}

/// Softmax over the joint visual/language set and the weighted sum.
/// `visual` is `[T·heads, L·K]`, `language` is `[T·heads, C]`.
pub fn joint_attention<T: Real>(
    g: &mut Graph<T>,
    visual: Var,
    language: Var,
    sampled: Var,
    lang_values: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let lk = g.value(visual).cols();
    let c = g.value(language).cols();
    let logits = g.concat_cols(&[visual, language])?;
    let weights = g.softmax(logits);
    let wv = g.slice_cols(weights, 0, lk)?;
    let wl = g.slice_cols(weights, lk, c)?;
    let a = g.sampled_mix(wv, sampled, heads)?;
    let b = g.head_mix(wl, lang_values, heads)?;
    Ok((weights, g.add(a, b)?))
}

#[derive(Debug, Clone)]
pub struct MmdaLayer {
    pub offsets: Linear,
    pub values: Linear,
    pub lang_values: Linear,
    pub logits: Linear,
    pub out: Linear,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl MmdaLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.width;
        let samples = cfg.levels * cfg.points;
        Ok(Self {
            offsets: Linear::with_init(store, &format!("{name}.offsets"), 2 * d, cfg.heads * samples * 2, Init::Zeros, rng)?,
            values: Linear::new(store, &format!("{name}.values"), d, d, rng)?,
            lang_values: Linear::new(store, &format!("{name}.lang_values"), d, d, rng)?,
            logits: Linear::with_init(store, &format!("{name}.logits"), 2 * d, cfg.heads * samples + d, Init::Zeros, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, 4 * d, d, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, rng)?,
        })
    }

    /// The attention step alone: `x` is `[T, width]`, `lang` is `[C, width]`,
    /// `pooled` is `[width]`.
    pub fn attend<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        lang: Var,
        pooled: Var,
        layout: &TokenLayout,
    ) -> Result<Attention> {
        let dl = &layout.deform;
        let tokens = layout.tokens();
        let heads = dl.heads;
        let width = dl.width();
        let lk = dl.samples();
        if g.value(lang).rows() == 0 {
            return Err(input_err!("at least one query is required"));
        }
        let pooled_rows = g.repeat_row(pooled, tokens)?;
        let joint = g.concat_cols(&[x, pooled_rows])?;
        let offsets = self.offsets.forward(g, p, joint)?;

        let values = self.values.forward(g, p, x)?;
        let mut maps = Vec::with_capacity(dl.levels.len());
        for l in 0..dl.levels.len() {
            maps.push(g.slice_rows(values, layout.starts[l], layout.level_len(l))?);
        }
        let sampled = g.deform_sample(&maps, offsets, &layout.refs, dl)?;
        let lang_values = self.lang_values.forward(g, p, lang)?;

        let raw = self.logits.forward(g, p, joint)?;
        let visual = g.slice_cols(raw, 0, heads * lk)?;
        let visual = g.reshape(visual, &[tokens * heads, lk])?;
        let lang_query = g.slice_cols(raw, heads * lk, width)?;
        let scale = 1.0 / (dl.head_dim as f64).sqrt();
        let language = g.head_scores(lang_query, lang_values, heads, scale)?;

        let (weights, attended) = joint_attention(g, visual, language, sampled, lang_values, heads)?;
        Ok(Attention { offsets, sampled, weights, attended })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        lang: Var,
        pooled: Var,
        layout: &TokenLayout,
    ) -> Result<(Var, Attention)> {
        let att = self.attend(g, p, x, lang, pooled, layout)?;
        let y = self.out.forward(g, p, att.attended)?;
        let x = residual_norm(g, p, &self.norm1, x, y)?;
        let y = self.ffn.forward(g, p, x)?;
        Ok((residual_norm(g, p, &self.norm2, x, y)?, att))
    }
}

#[derive(Debug, Clone)]
pub struct PixelDecoder {
    pub input_proj: Vec<Linear>,
    pub level_embed: ParamId,
    pub layers: Vec<MmdaLayer>,
}

/// Decoded feature maps, coarse to fine, each `[h·w, width]`.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub levels: Vec<Var>,
    pub sizes: Vec<(usize, usize)>,
    /// Attention records of every layer.
    pub attention: Vec<Attention>,
    pub layout: TokenLayout,
}

impl Decoded {
    /// The finest map, which the mask head reads.
    pub fn mask_features(&self) -> Var {
        *self.levels.last().expect("at least two levels")
    }
}

impl PixelDecoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let levels = cfg.levels;
        let input_proj = (0..levels)
            .map(|l| {
                let cin = cfg.encoder_widths[levels - 1 - l];
                Linear::new(store, &format!("pixel.proj{l}"), cin, cfg.width, rng)
            })
            .collect::<Result<_>>()?;
        let level_embed = store.init("pixel.level_embed", &[levels, cfg.width], Init::Uniform(0.1), rng)?;
        let layers = (0..cfg.pixel_layers)
            .map(|i| MmdaLayer::new(store, &format!("pixel.layer{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { input_proj, level_embed, layers })
    }

    /// Project each encoder level to the common width and add positional and
    /// level embeddings. Returns all tokens stacked, coarse to fine.
    pub fn project<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        cfg: &ModelConfig,
        levels: &[Var],
        sizes: &[(usize, usize)],
    ) -> Result<Var> {
        let mut parts = Vec::with_capacity(levels.len());
        for (l, (&v, &(h, w))) in levels.iter().zip(sizes).enumerate() {
            let y = self.input_proj[l].forward(g, p, v)?;
            let pos = g.constant(position_encoding(h, w, cfg.width).cast());
            let y = g.add(y, pos)?;
            let emb = g.gather_rows(p.var(self.level_embed), &[l])?;
            let emb = g.reshape(emb, &[cfg.width])?;
            parts.push(g.add_row(y, emb)?);
        }
        g.concat_rows(&parts)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        cfg: &ModelConfig,
        levels: &[Var],
        sizes: &[(usize, usize)],
        lang: Var,
        pooled: Var,
    ) -> Result<Decoded> {
        let layout = TokenLayout::new(cfg, sizes);
        let mut x = self.project(g, p, cfg, levels, sizes)?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, att) = layer.forward(g, p, x, lang, pooled, &layout)?;
            x = y;
            attention.push(att);
        }
        let mut out = Vec::with_capacity(levels.len());
        for l in 0..levels.len() {
            out.push(g.slice_rows(x, layout.starts[l], layout.level_len(l))?);
        }
        Ok(Decoded { levels: out, sizes: sizes.to_vec(), attention, layout })
    }
}
