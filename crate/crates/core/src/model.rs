//! The assembled network and its inference path.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::decoder::{InstanceDecoder, Instances, MaskSource};
use crate::encoders::{pool_queries, ImageEncoder, Pyramid, TextEncoder};
use crate::error::{input_err, Result};
use crate::graph::{Graph, Var};
use crate::heads::{binarize, classify, panoptic_merge, semantic_map, similarity, BoxHead, Label, Panoptic};
use crate::mmda::{Decoded, PixelDecoder};
use crate::param::{Bound, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Uovn {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub pixel: PixelDecoder,
    pub decoder: InstanceDecoder,
    pub boxes: BoxHead,
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub pyramid: Pyramid,
    /// Deepest encoder stage averaged over space.
    pub global: Var,
    /// Query features `[C, width]`.
    pub lang: Var,
    /// Their mean `[width]`.
    pub pooled: Var,
    pub decoded: Decoded,
    pub instances: Instances,
    /// `[N, 4]` as `(cx, cy, w, h)`.
    pub boxes: Var,
    /// `[N, C]`
    pub sim: Var,
    pub mask_size: (usize, usize),
}

impl Outputs {
    /// Final mask logits `[N, h·w]`.
    pub fn mask_logits(&self) -> Var {
        *self.instances.layer_masks.last().expect("at least one mask prediction")
    }
}

/// Post-processed predictions for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mask_size: (usize, usize),
    /// `[N][h·w]`
    pub mask_logits: Vec<Vec<f32>>,
    pub masks: Vec<Vec<bool>>,
    pub boxes: Vec<[f32; 4]>,
    /// `[N][C]`
    pub sim: Vec<Vec<f32>>,
    pub labels: Vec<Label>,
    /// Class map, `class + 1` or 0.
    pub semantic: Vec<usize>,
    pub panoptic: Panoptic,
}

impl Uovn {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let image = ImageEncoder::new(&mut store, &cfg, &mut rng)?;
        let text = TextEncoder::new(&mut store, &cfg, &mut rng)?;
        let pixel = PixelDecoder::new(&mut store, &cfg, &mut rng)?;
        let decoder = InstanceDecoder::new(&mut store, &cfg, &mut rng)?;
        let boxes = BoxHead::new(&mut store, cfg.width, &mut rng)?;
        Ok(Self { cfg, store, image, text, pixel, decoder, boxes })
    }

    /// Query features for `queries`, encoded `query_chunk` rows at a time.
    pub fn encode_queries<T: Real>(&self, g: &mut Graph<T>, p: &Bound, queries: &[String]) -> Result<Var> {
        if queries.is_empty() {
            return Err(input_err!("at least one query is required"));
        }
        let parts = queries
            .chunks(self.cfg.query_chunk)
            .map(|c| self.text.forward(g, p, c))
            .collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_rows(&parts)
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: &Tensor<f32>,
        queries: &[String],
        masks: &MaskSource,
    ) -> Result<Outputs> {
        let lang = self.encode_queries(g, p, queries)?;
        self.forward_with(g, p, image, lang, masks)
    }

    /// Forward pass given already encoded query features.
    pub fn forward_with<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: &Tensor<f32>,
        lang: Var,
        masks: &MaskSource,
    ) -> Result<Outputs> {
        let cfg = &self.cfg;
        let img = g.constant(image.cast());
        let pyramid = self.image.forward(g, p, cfg, img)?;
        let global = pyramid.global(g);
        let pooled = pool_queries(g, lang);
        let decoded = self.pixel.forward(g, p, cfg, &pyramid.levels, &pyramid.sizes, lang, pooled)?;
        let instances = self.decoder.forward(g, p, cfg, &decoded, masks)?;
        let boxes = self.boxes.forward(g, p, instances.embeddings)?;
        let sim = similarity(g, instances.embeddings, lang)?;
        let mask_size = *decoded.sizes.last().expect("levels");
        Ok(Outputs { pyramid, global, lang, pooled, decoded, instances, boxes, sim, mask_size })
    }

    /// Inference with the similarity computed `query_chunk` queries at a time.
    /// The visual pathway runs once over all queries.
    pub fn predict(&self, image: &Tensor<f32>, queries: &[String], thing: &[bool]) -> Result<Prediction> {
        self.predict_inner(image, queries, thing, true)
    }

    /// Same as [`predict`](Self::predict) with one similarity product.
    pub fn predict_unchunked(&self, image: &Tensor<f32>, queries: &[String], thing: &[bool]) -> Result<Prediction> {
        self.predict_inner(image, queries, thing, false)
    }

    fn predict_inner(&self, image: &Tensor<f32>, queries: &[String], thing: &[bool], chunked: bool) -> Result<Prediction> {
        if thing.len() != queries.len() {
            return Err(input_err!("{} thing flags for {} queries", thing.len(), queries.len()));
        }
        let mut g = Graph::<f32>::new();
        let p = self.store.bind_frozen(&mut g);
        let lang = if chunked {
            self.encode_queries(&mut g, &p, queries)?
        } else {
            self.text.forward(&mut g, &p, queries)?
        };
        let out = self.forward_with(&mut g, &p, image, lang, &MaskSource::Predicted)?;
        let n = self.cfg.queries;
        let c = queries.len();
        let sim: Vec<Vec<f32>> = if chunked && c > self.cfg.query_chunk {
            let mut rows = alloc::vec![Vec::with_capacity(c); n];
            let mut start = 0;
            while start < c {
                let len = self.cfg.query_chunk.min(c - start);
                let part = g.slice_rows(lang, start, len)?;
                let s = similarity(&mut g, out.instances.embeddings, part)?;
                for (r, row) in rows.iter_mut().enumerate() {
                    row.extend_from_slice(g.value(s).row(r));
                }
                start += len;
            }
            rows
        } else {
            (0..n).map(|r| g.value(out.sim).row(r).to_vec()).collect()
        };
        let flat: Vec<f32> = sim.iter().flatten().copied().collect();
        let labels = classify(&Tensor::new(&[n, c], flat)?, self.cfg.object_threshold);
        let logits = g.value(out.mask_logits());
        let pixels = out.mask_size.0 * out.mask_size.1;
        let mask_logits: Vec<Vec<f32>> = (0..n).map(|r| logits.row(r).to_vec()).collect();
        let masks: Vec<Vec<bool>> = mask_logits.iter().map(|m| binarize(m)).collect();
        let bv = g.value(out.boxes);
        let boxes = (0..n).map(|r| {
            let b = bv.row(r);
            [b[0], b[1], b[2], b[3]]
        });
        let semantic = semantic_map(&masks, &labels, pixels);
        let panoptic = panoptic_merge(&masks, &labels, thing, pixels);
        Ok(Prediction {
            mask_size: out.mask_size,
            mask_logits,
            boxes: boxes.collect(),
            masks,
            sim,
            labels,
            semantic,
            panoptic,
        })
    }
}
