//! Batch objective, SGD with momentum and the deterministic data order.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::data::AnnotatedSample;
use crate::decoder::MaskSource;
use crate::error::{input_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    build_targets, loss_adapt_global, loss_adapt_local, mean_terms, sample_terms, total_loss, Breakdown, Targets, Terms,
};
use crate::model::{Outputs, Uovn};
use crate::param::{Bound, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling.
    pub clip: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9, clip: 1.0, steps: 300, seed: 0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(input_err!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(input_err!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.clip > 0.0) {
            return Err(input_err!("clip must be positive, got {}", self.clip));
        }
        Ok(())
    }
}

/// Discrete decisions of one forward pass: the decoder's blocked maps and
/// the matching targets, per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    pub masks: Vec<Vec<Vec<bool>>>,
    pub targets: Vec<Targets>,
    /// Query features and their mean per sample, the fixed text side of the
    /// adaptation terms.
    pub text: Vec<(Tensor<f64>, Tensor<f64>)>,
}

pub struct Objective {
    pub loss: Var,
    pub terms: Terms,
    pub breakdown: Breakdown,
    pub frozen: Frozen,
    pub outputs: Vec<Outputs>,
}


/// Total loss of a batch. Adaptation terms join when the batch holds two
/// samples from different domains and `w.adapt > 0`. With `frozen`, the
/// decoder masks and matching targets are taken from it instead of being
/// recomputed.
pub fn objective<T: Real>(
    model: &Uovn,
    g: &mut Graph<T>,
    p: &Bound,
    batch: &[&AnnotatedSample],
    w: &LossWeights,
    frozen: Option<&Frozen>,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(input_err!("empty batch"));
    }
    let mut outputs = Vec::with_capacity(batch.len());
    let mut fz = Frozen { masks: Vec::new(), targets: Vec::new(), text: Vec::new() };
    let (mut seg, mut det, mut cls) = (Vec::new(), Vec::new(), Vec::new());
    for (i, s) in batch.iter().enumerate() {
        let source = match frozen {
            Some(f) => MaskSource::Fixed(f.masks[i].clone()),
            None => MaskSource::Predicted,
        };
        let out = model.forward(g, p, &s.image, &s.query_texts(), &source)?;
        let targets = match frozen {
            Some(f) => f.targets[i].clone(),
            None => build_targets(g, &out, s, w)?,
        };
        let (sg, dt, cl) = sample_terms(g, &out, s, &targets, model.cfg.aux_loss)?;
        seg.push(sg);
        det.push(dt);
        cls.push(Some(cl));
        fz.masks.push(out.instances.blocked.clone());
        fz.targets.push(targets);
        fz.text.push(match frozen {
            Some(f) => f.text[i].clone(),
            None => (g.value(out.lang).cast(), g.value(out.pooled).cast()),
        });
        outputs.push(out);
    }
    let mut terms = Terms {
        seg: mean_terms(g, &seg)?,
        det: mean_terms(g, &det)?,
        cls: mean_terms(g, &cls)?,
        ..Terms::default()
    };
    let paired = batch.len() == 2 && batch[0].domain != batch[1].domain;
    if paired && w.adapt > 0.0 {
        let (a, b) = (&outputs[0], &outputs[1]);
        // the text side is a fixed target
        let f1 = g.constant(fz.text[0].1.cast());
        let f2 = g.constant(fz.text[1].1.cast());
        terms.adapt_global = Some(loss_adapt_global(g, a.global, b.global, f1, f2)?);
        let (l1, l2): (Tensor<T>, Tensor<T>) = (fz.text[0].0.cast(), fz.text[1].0.cast());
        terms.adapt_local = Some(loss_adapt_local(
            g,
            a.instances.embeddings,
            &fz.targets[0].aggregation,
            &l1,
            b.instances.embeddings,
            &fz.targets[1].aggregation,
            &l2,
        )?);
    }
    let (loss, mut breakdown) = total_loss(g, &terms, w)?;
    if paired && w.adapt == 0.0 {
        breakdown.adapt_global = Some(0.0);
        breakdown.adapt_local = Some(0.0);
    }
    Ok(Objective { loss, terms, breakdown, frozen: fz, outputs })
}

/// `|a_v - a_l|` for a pair: cosine of the pooled deepest visual features
/// against cosine of the pooled query features.
pub fn adaptation_gap(model: &Uovn, a: &AnnotatedSample, b: &AnnotatedSample) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let p = model.store.bind_frozen(&mut g);
    let mut vis = Vec::new();
    let mut txt = Vec::new();
    for s in [a, b] {
        let lang = model.encode_queries(&mut g, &p, &s.query_texts())?;
        let pooled = crate::encoders::pool_queries(&mut g, lang);
        let img = g.constant(s.image.cast());
        let pyr = model.image.forward(&mut g, &p, &model.cfg, img)?;
        vis.push(pyr.global(&mut g));
        txt.push(pooled);
    }
    let av = g.cosine(vis[0], vis[1])?;
    let al = g.cosine(txt[0], txt[1])?;
    Ok((g.value(av).item() - g.value(al).item()).abs())
}

/// Heavy-ball SGD state.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub velocity: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new(store: &ParamStore) -> Self {
        Self { velocity: store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect() }
    }

    /// Clip the global norm of `grads` to `cfg.clip`, then
    /// `v = momentum·v + g; θ -= lr·v`. Returns the norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f32>>], cfg: &OptimConfig) -> Result<f64> {
        if grads.len() != store.len() || self.velocity.len() != store.len() {
            return Err(input_err!("optimizer state does not match the parameter store"));
        }
        let sq: f64 = grads.iter().flatten().flat_map(|g| g.iter()).map(|&v| (v as f64) * (v as f64)).sum();
        let norm = num_traits::Float::sqrt(sq);
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let scale = if norm > cfg.clip { cfg.clip / norm } else { 1.0 };
        for ((param, vel), grad) in store.params_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            if !param.trainable {
                continue;
            }
            let Some(grad) = grad else { continue };
            for ((x, v), &gr) in param.value.data_mut().iter_mut().zip(vel.data_mut()).zip(grad) {
                let nv = cfg.momentum * *v as f64 + scale * gr as f64;
                *v = nv as f32;
                *x = (*x as f64 - cfg.lr * nv) as f32;
            }
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: Breakdown,
    pub grad_norm: f64,
}

/// One optimizer step on `batch`.
pub fn train_step(
    model: &mut Uovn,
    sgd: &mut Sgd,
    batch: &[&AnnotatedSample],
    w: &LossWeights,
    cfg: &OptimConfig,
    step: usize,
) -> Result<StepLog> {
    let mut g = Graph::<f32>::new();
    let p = model.store.bind(&mut g);
    let obj = objective(model, &mut g, &p, batch, w, None)?;
    if !obj.breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {step}: {:?}", obj.breakdown)));
    }
    let mut grads = g.backward(obj.loss)?;
    let per_param: Vec<Option<Vec<f32>>> = p.vars().iter().map(|&v| grads.take(v)).collect();
    let grad_norm = sgd.step(&mut model.store, &per_param, cfg)?;
    Ok(StepLog { step, loss: obj.breakdown, grad_norm })
}

/// Sample indices for `step`: one per domain for two domains drawn from
/// `(seed, step)`, or a single sample when the data has one domain. Each
/// domain is walked through a fresh permutation per pass, so the order
/// depends only on `(seed, step)` and training can resume anywhere.
pub fn batch_indices(samples: &[AnnotatedSample], seed: u64, step: usize) -> Result<Vec<usize>> {
    let mut by_domain: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_domain.entry(s.domain).or_default().push(i);
    }
    let domains: Vec<u32> = by_domain.keys().copied().collect();
    let chosen: Vec<u32> = match domains.len() {
        0 => return Err(input_err!("no training samples")),
        1 | 2 => domains.clone(),
        n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(step as u64);
            let a = rng.random_range(0..n);
            let b = (a + rng.random_range(1..n)) % n;
            alloc::vec![domains[a], domains[b]]
        }
    };
    Ok(chosen
        .iter()
        .map(|d| {
            let members = &by_domain[d];
            let pass = step / members.len();
            let mut order = members.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((*d as u64) << 32));
            rng.set_stream(pass as u64);
            order.shuffle(&mut rng);
            order[step % members.len()]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::synth::{generate_dataset, generate_sample, DomainSpec};

    fn small() -> ModelConfig {
        ModelConfig { queries: 6, ..ModelConfig::tiny() }
    }

    fn spec32(mut d: DomainSpec) -> DomainSpec {
        d.image_size = 32;
        d
    }

    #[test]
    fn data_order_is_a_function_of_seed_and_step() {
        let ds = generate_dataset(&[spec32(DomainSpec::d1()), spec32(DomainSpec::d3())], 5, 0).unwrap();
        let a: Vec<_> = (0..20).map(|s| batch_indices(&ds.samples, 9, s).unwrap()).collect();
        let b: Vec<_> = (0..20).rev().map(|s| batch_indices(&ds.samples, 9, s).unwrap()).collect();
        assert_eq!(a, b.into_iter().rev().collect::<Vec<_>>());
        // each pass visits every sample of a domain once
        let mut first: Vec<usize> = a[..5].iter().map(|b| b[0]).collect();
        first.sort();
        assert_eq!(first, (0..5).collect::<Vec<_>>());
        for b in &a {
            assert_ne!(ds.samples[b[0]].domain, ds.samples[b[1]].domain);
        }
    }

    #[test]
    fn three_domains_pair_distinct() {
        let ds = generate_dataset(&[DomainSpec::d1(), DomainSpec::d2(), DomainSpec::d3()].map(spec32), 2, 0).unwrap();
        for s in 0..30 {
            let b = batch_indices(&ds.samples, 1, s).unwrap();
            assert_eq!(b.len(), 2);
            assert_ne!(ds.samples[b[0]].domain, ds.samples[b[1]].domain);
        }
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], alloc::vec![1.0, -1.0]).unwrap(), true).unwrap();
        let mut sgd = Sgd::new(&store);
        let cfg = OptimConfig { lr: 0.1, momentum: 0.5, clip: 10.0, ..OptimConfig::default() };
        sgd.step(&mut store, &[Some(alloc::vec![1.0, 2.0])], &cfg).unwrap();
        sgd.step(&mut store, &[Some(alloc::vec![1.0, 2.0])], &cfg).unwrap();
        // v1 = g, v2 = 1.5 g; total 2.5 g · 0.1
        let w = store.params()[0].value.data();
        assert!((w[0] - 0.75).abs() < 1e-6 && (w[1] + 1.5).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_update() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], alloc::vec![0.0, 0.0]).unwrap(), true).unwrap();
        let mut sgd = Sgd::new(&store);
        let cfg = OptimConfig { lr: 1.0, momentum: 0.0, clip: 1.0, ..OptimConfig::default() };
        let n = sgd.step(&mut store, &[Some(alloc::vec![30.0, 40.0])], &cfg).unwrap();
        assert_eq!(n, 50.0);
        let w = store.params()[0].value.data();
        assert!((w[0] + 0.6).abs() < 1e-6 && (w[1] + 0.8).abs() < 1e-6);
        assert!(sgd.step(&mut store, &[Some(alloc::vec![f32::NAN, 0.0])], &cfg).is_err());
    }

    #[test]
    fn paired_objective_has_every_term() {
        let model = Uovn::new(small(), 3).unwrap();
        let a = generate_sample(&spec32(DomainSpec::d1()), 0).unwrap();
        let b = generate_sample(&spec32(DomainSpec::d3()), 0).unwrap();
        let mut g = Graph::<f64>::new();
        let p = model.store.bind(&mut g);
        let obj = objective(&model, &mut g, &p, &[&a, &b], &LossWeights::default(), None).unwrap();
        let br = obj.breakdown;
        assert!(br.seg.is_some() && br.det.is_some() && br.cls.is_some());
        assert!(br.adapt_global.unwrap() >= 0.0 && br.adapt_local.unwrap() >= -1e-12);
        let w = LossWeights::default();
        let want = w.seg * br.seg.unwrap()
            + w.det * br.det.unwrap()
            + w.cls * br.cls.unwrap()
            + w.adapt * (br.adapt_global.unwrap() + br.adapt_local.unwrap());
        assert!((br.total - want).abs() < 1e-9);

        // frozen decisions reproduce the value
        let mut g2 = Graph::<f64>::new();
        let p2 = model.store.bind(&mut g2);
        let again = objective(&model, &mut g2, &p2, &[&a, &b], &w, Some(&obj.frozen)).unwrap();
        assert_eq!(again.breakdown, br);

        let off = LossWeights { adapt: 0.0, ..w };
        let mut g3 = Graph::<f64>::new();
        let p3 = model.store.bind(&mut g3);
        let gated = objective(&model, &mut g3, &p3, &[&a, &b], &off, None).unwrap();
        assert_eq!((gated.breakdown.adapt_global, gated.breakdown.adapt_local), (Some(0.0), Some(0.0)));
    }

    #[test]
    fn single_domain_batch_skips_adaptation() {
        let model = Uovn::new(small(), 3).unwrap();
        let b = generate_sample(&spec32(DomainSpec::d3()), 4).unwrap();
        let mut g = Graph::<f32>::new();
        let p = model.store.bind(&mut g);
        let obj = objective(&model, &mut g, &p, &[&b], &LossWeights::default(), None).unwrap();
        assert!(obj.breakdown.seg.is_none());
        assert!(obj.breakdown.adapt_global.is_none());
    }

    #[test]
    fn steps_reduce_loss_on_one_pair() {
        let mut model = Uovn::new(small(), 5).unwrap();
        let a = generate_sample(&spec32(DomainSpec::d1()), 1).unwrap();
        let b = generate_sample(&spec32(DomainSpec::d3()), 1).unwrap();
        let mut sgd = Sgd::new(&model.store);
        let w = LossWeights::default();
        let cfg = OptimConfig::default();
        let first = train_step(&mut model, &mut sgd, &[&a, &b], &w, &cfg, 0).unwrap();
        let mut last = first;
        for s in 1..15 {
            last = train_step(&mut model, &mut sgd, &[&a, &b], &w, &cfg, s).unwrap();
        }
        assert!(last.loss.total < first.loss.total, "{} -> {}", first.loss.total, last.loss.total);
    }

    #[test]
    fn gap_is_zero_for_identical_pair() {
        let model = Uovn::new(small(), 5).unwrap();
        let a = generate_sample(&spec32(DomainSpec::d1()), 1).unwrap();
        assert!(adaptation_gap(&model, &a, &a).unwrap() < 1e-12);
    }
}
