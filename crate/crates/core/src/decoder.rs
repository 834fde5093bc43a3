//! Masked-attention instance decoder.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::kernels::sigmoid_f64;
use crate::mmda::Decoded;
use crate::nn::{residual_norm, FeedForward, LayerNorm, Linear};
use crate::param::{Bound, Init, ParamId, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct Attend {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attend {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, rng)?,
        })
    }

    /// Multi-head attention of `queries` over `keys`/`values`. `blocked` is
    /// `[Nq, Nk]`; a fully blocked row attends everywhere.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        queries: Var,
        keys: Var,
        values: Var,
        heads: usize,
        blocked: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.q.forward(g, p, queries)?;
        let k = self.k.forward(g, p, keys)?;
        let v = self.v.forward(g, p, values)?;
        let dh = g.value(q).cols() / heads;
        let scores = g.head_scores(q, k, heads, 1.0 / (dh as f64).sqrt())?;
        let probs = match blocked {
            Some(m) => g.masked_softmax(scores, m, heads)?,
            None => g.softmax(scores),
        };
        let mixed = g.head_mix(probs, v, heads)?;
        self.out.forward(g, p, mixed)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub cross: Attend,
    pub cross_norm: LayerNorm,
    pub own: Attend,
    pub own_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct InstanceDecoder {
    pub queries: ParamId,
    pub query_pos: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub out_norm: LayerNorm,
    pub head: FeedForward,
}

/// Where the per-layer attention masks come from.
#[derive(Debug, Clone, Default)]
pub enum MaskSource {
    /// From the previous layer's mask prediction.
    #[default]
    Predicted,
    /// Given explicitly, one `[N, tokens_l]` blocked map per layer. Used to
    /// hold the discrete masking decisions still while probing gradients.
    Fixed(Vec<Vec<bool>>),
}

#[derive(Debug, Clone)]
pub struct Instances {
    /// Instance embeddings `[N, width]` after the final layer.
    pub embeddings: Var,
    /// Mask logits `[N, h·w]` on the finest map: one before the first layer
    /// and one after each layer. The last entry belongs to `embeddings`.
    pub layer_masks: Vec<Var>,
    /// The blocked maps each layer used (empty for an unmasked layer).
    pub blocked: Vec<Vec<bool>>,
}

/// Blocked map for a coarse level: a position is open when any finest-map
/// pixel it covers has sigmoid(logit) > 0.5.
pub fn downsample_mask<T: Real>(
    logits: &[T],
    n: usize,
    fine: (usize, usize),
    coarse: (usize, usize),
) -> Vec<bool> {
    let (fh, fw) = fine;
    let (ch, cw) = coarse;
    let (sy, sx) = (fh / ch, fw / cw);
    let mut blocked = Vec::with_capacity(n * ch * cw);
    for i in 0..n {
        let m = &logits[i * fh * fw..(i + 1) * fh * fw];
        for y in 0..ch {
            for x in 0..cw {
                let mut open = false;
                'cell: for dy in 0..sy {
                    for dx in 0..sx {
                        if sigmoid_f64(m[(y * sy + dy) * fw + x * sx + dx].widen()) > 0.5 {
                            open = true;
                            break 'cell;
                        }
                    }
                }
                blocked.push(!open);
            }
        }
    }
    blocked
}

impl InstanceDecoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.width;
        let queries = store.init("decoder.queries", &[cfg.queries, d], Init::Xavier, rng)?;
        let query_pos = store.init("decoder.query_pos", &[cfg.queries, d], Init::Xavier, rng)?;
        let layers = (0..cfg.decoder_layers())
            .map(|i| {
                let n = format!("decoder.layer{i}");
                Ok(DecoderLayer {
                    cross: Attend::new(store, &format!("{n}.cross"), d, rng)?,
                    cross_norm: LayerNorm::new(store, &format!("{n}.cross_norm"), d, rng)?,
                    own: Attend::new(store, &format!("{n}.self"), d, rng)?,
                    own_norm: LayerNorm::new(store, &format!("{n}.self_norm"), d, rng)?,
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), d, 4 * d, d, rng)?,
                    ffn_norm: LayerNorm::new(store, &format!("{n}.ffn_norm"), d, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            queries,
            query_pos,
            layers,
            out_norm: LayerNorm::new(store, "decoder.out_norm", d, rng)?,
            head: FeedForward::new(store, "decoder.head", d, d, d, rng)?,
        })
    }

    /// Instance embeddings and their mask logits on the finest map.
    pub fn readout<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, mask_features: Var) -> Result<(Var, Var)> {
        let h = self.out_norm.forward(g, p, x)?;
        let o = self.head.forward(g, p, h)?;
        let m = g.matmul_nt(o, mask_features)?;
        Ok((o, m))
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        cfg: &ModelConfig,
        dec: &Decoded,
        source: &MaskSource,
    ) -> Result<Instances> {
        let coarse = cfg.levels - 1;
        let fine = *dec.sizes.last().expect("levels");
        let feats = dec.mask_features();
        let n = cfg.queries;
        let mut x = p.var(self.queries);
        let pos = p.var(self.query_pos);
        let (mut o, m) = self.readout(g, p, x, feats)?;
        let mut layer_masks = alloc::vec![m];
        let mut blocked_all = Vec::with_capacity(self.layers.len());
        if let MaskSource::Fixed(f) = source {
            if f.len() != self.layers.len() {
                return Err(dim_err!("{} fixed masks for {} layers", f.len(), self.layers.len()));
            }
        }
        for (t, layer) in self.layers.iter().enumerate() {
            let level = t % coarse;
            let blocked = match source {
                MaskSource::Fixed(f) => f[t].clone(),
                MaskSource::Predicted if t == 0 => Vec::new(),
                MaskSource::Predicted => {
                    let prev = g.value(*layer_masks.last().unwrap()).data();
                    downsample_mask(prev, n, fine, dec.sizes[level])
                }
            };
            let mem = dec.levels[level];
            let qin = g.add(x, pos)?;
            let mask = (!blocked.is_empty()).then_some(blocked.as_slice());
            let y = layer.cross.forward(g, p, qin, mem, mem, cfg.heads, mask)?;
            x = residual_norm(g, p, &layer.cross_norm, x, y)?;
            let qin = g.add(x, pos)?;
            let y = layer.own.forward(g, p, qin, qin, x, cfg.heads, None)?;
            x = residual_norm(g, p, &layer.own_norm, x, y)?;
            let y = layer.ffn.forward(g, p, x)?;
            x = residual_norm(g, p, &layer.ffn_norm, x, y)?;
            let (oo, m) = self.readout(g, p, x, feats)?;
            o = oo;
            layer_masks.push(m);
            blocked_all.push(blocked);
        }
        Ok(Instances { embeddings: o, layer_masks, blocked: blocked_all })
    }
}
