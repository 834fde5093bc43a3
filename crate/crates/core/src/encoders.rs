//! Stand-in image and text encoders.
//!
//! The image side is a strided convolution stack; the text side is a frozen
//! hashed token table followed by one trainable linear map.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{input_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::param::{Bound, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const VOCAB_ROWS: usize = 4096;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    stages: Vec<Linear>,
}

/// Encoder features, coarse to fine.
#[derive(Debug, Clone)]
pub struct Pyramid {
    /// Each level flattened to `[h·w, channels]`.
    pub levels: Vec<Var>,
    pub sizes: Vec<(usize, usize)>,
}

impl Pyramid {
    /// The deepest encoder stage (stride 32 by default) averaged over space.
    pub fn global(&self, g: &mut Graph<impl Real>) -> Var {
        g.mean_rows(self.levels[0])
    }
}

impl ImageEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut stages = Vec::with_capacity(cfg.levels);
        let mut cin = IMAGE_CHANNELS * 16;
        for (i, &w) in cfg.encoder_widths.iter().enumerate() {
            stages.push(Linear::new(store, &format!("encoder.stage{i}"), cin, w, rng)?);
            cin = 9 * w;
        }
        Ok(Self { stages })
    }

    /// `image` is `[H, W, 3]` with values in `[0, 1]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, image: Var) -> Result<Pyramid> {
        let shape = g.shape(image).to_vec();
        let m = cfg.size_multiple();
        if shape.len() != 3 || shape[2] != IMAGE_CHANNELS {
            return Err(input_err!("image must be [H, W, 3], got {shape:?}"));
        }
        if shape[0] == 0 || shape[1] == 0 || shape[0] % m != 0 || shape[1] % m != 0 {
            return Err(input_err!("image sides {}x{} must be positive multiples of {m}", shape[0], shape[1]));
        }
        let (mut h, mut w) = (shape[0], shape[1]);
        let mut x = image;
        let mut fine_to_coarse = Vec::with_capacity(self.stages.len());
        let mut sizes = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let cols = if i == 0 { g.im2col(x, 4, 4, 0)? } else { g.im2col(x, 3, 2, 1)? };
            (h, w) = if i == 0 { (h / 4, w / 4) } else { (h / 2, w / 2) };
            let y = stage.forward(g, p, cols)?;
            let y = g.gelu(y);
            fine_to_coarse.push(y);
            sizes.push((h, w));
            x = g.reshape(y, &[h, w, stage.dout])?;
        }
        fine_to_coarse.reverse();
        sizes.reverse();
        Ok(Pyramid { levels: fine_to_coarse, sizes })
    }
}

/// Lowercase, split on anything that is not alphanumeric, keep at most
/// `max_tokens` tokens.
pub fn tokenize(text: &str, max_tokens: usize) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .take(max_tokens)
        .map(|t| t.to_lowercase())
        .collect()
}

/// The inference-time prompt.
pub fn apply_prompt(query: &str) -> Result<String> {
    if query.trim().is_empty() {
        return Err(input_err!("empty query"));
    }
    Ok(format!("A photo of a {query}"))
}

fn token_row(token: &str, seed: u64) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h % VOCAB_ROWS as u64) as usize
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    table: Tensor<f32>,
    seed: u64,
    max_tokens: usize,
    pub proj: Linear,
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut trng = ChaCha8Rng::seed_from_u64(cfg.vocab_seed);
        let data = (0..VOCAB_ROWS * cfg.text_dim).map(|_| trng.random_range(-1.0f32..1.0)).collect();
        Ok(Self {
            table: Tensor::new(&[VOCAB_ROWS, cfg.text_dim], data)?,
            seed: cfg.vocab_seed,
            max_tokens: cfg.max_tokens,
            proj: Linear::new(store, "text.proj", cfg.text_dim, cfg.width, rng)?,
        })
    }

    pub fn table(&self) -> &Tensor<f32> {
        &self.table
    }

    /// Mean frozen embedding of each query's tokens, `[C, text_dim]`.
    pub fn frozen_embeddings(&self, queries: &[String]) -> Result<Tensor<f32>> {
        if queries.is_empty() {
            return Err(input_err!("at least one query is required"));
        }
        let d = self.table.cols();
        let mut out = Vec::with_capacity(queries.len() * d);
        for q in queries {
            let toks = tokenize(q, self.max_tokens);
            if toks.is_empty() {
                return Err(input_err!("query {q:?} has no tokens"));
            }
            let mut acc = alloc::vec![0f64; d];
            for t in &toks {
                let row = self.table.row(token_row(t, self.seed));
                acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
            }
            out.extend(acc.iter().map(|a| (a / toks.len() as f64) as f32));
        }
        Tensor::new(&[queries.len(), d], out)
    }

    /// Query features `[C, width]`, rows of unit length.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, queries: &[String]) -> Result<Var> {
        let e = g.constant(self.frozen_embeddings(queries)?.cast());
        let y = self.proj.forward(g, p, e)?;
        Ok(g.normalize_rows(y))
    }
}

/// Average of the query feature rows.
pub fn pool_queries<T: Real>(g: &mut Graph<T>, features: Var) -> Var {
    g.mean_rows(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::dot;

    fn setup() -> (ModelConfig, ParamStore, ImageEncoder, TextEncoder) {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let ie = ImageEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        let te = TextEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        (cfg, store, ie, te)
    }

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| String::from(*s)).collect()
    }

    #[test]
    fn pyramid_sizes_for_64() {
        let (cfg, store, ie, _) = setup();
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g);
        let img = g.constant(Tensor::filled(&[64, 64, 3], 0.3));
        let pyr = ie.forward(&mut g, &p, &cfg, img).unwrap();
        assert_eq!(pyr.sizes, alloc::vec![(2, 2), (4, 4), (8, 8), (16, 16)]);
        for (l, &v) in pyr.levels.iter().enumerate() {
            let (h, w) = pyr.sizes[l];
            assert_eq!(g.shape(v), &[h * w, cfg.encoder_widths[cfg.levels - 1 - l]]);
        }
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let (cfg, store, ie, _) = setup();
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g);
        let img = g.constant(Tensor::zeros(&[32, 64, 3]));
        let pyr = ie.forward(&mut g, &p, &cfg, img).unwrap();
        for v in pyr.levels {
            assert!(g.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn indivisible_size_rejected() {
        let (cfg, store, ie, _) = setup();
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g);
        let img = g.constant(Tensor::zeros(&[48, 64, 3]));
        assert!(ie.forward(&mut g, &p, &cfg, img).is_err());
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("The Large red-Circle!", 16), strs(&["the", "large", "red", "circle"]));
        assert_eq!(tokenize("a b c", 2).len(), 2);
        assert!(tokenize(" ,; ", 16).is_empty());
    }

    #[test]
    fn prompt_template() {
        assert_eq!(apply_prompt("cat").unwrap(), "A photo of a cat");
        assert!(apply_prompt("").is_err());
    }

    #[test]
    fn shared_token_raises_frozen_similarity() {
        let (_, _, _, te) = setup();
        let e = te.frozen_embeddings(&strs(&["red circle", "red square", "blue square"])).unwrap();
        let cos = |a: &[f32], b: &[f32]| dot(a, b) / (dot(a, a) * dot(b, b)).sqrt();
        assert!(cos(e.row(0), e.row(1)) > cos(e.row(0), e.row(2)));
    }

    #[test]
    fn query_rows_are_unit_and_pooled_is_mean() {
        let (_, store, _, te) = setup();
        let mut g = Graph::<f64>::new();
        let p = store.bind(&mut g);
        let f = te.forward(&mut g, &p, &strs(&["red circle", "sky", "red circle"])).unwrap();
        let fv = g.value(f).clone();
        for r in 0..3 {
            assert!((dot(fv.row(r), fv.row(r)) - 1.0).abs() < 1e-12);
        }
        assert_eq!(fv.row(0), fv.row(2));
        let pooled = pool_queries(&mut g, f);
        for j in 0..fv.cols() {
            let m = (fv.row(0)[j] + fv.row(1)[j] + fv.row(2)[j]) / 3.0;
            assert!((g.value(pooled).data()[j] - m).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_query_rejected() {
        let (_, store, _, te) = setup();
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g);
        assert!(te.forward(&mut g, &p, &strs(&["ok", "--"])).is_err());
        assert!(te.forward(&mut g, &p, &[]).is_err());
    }
}
