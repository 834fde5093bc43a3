//! Gradient check of every training loss through the whole network.

use alloc::string::ToString;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LossWeights, ModelConfig};
use crate::error::{input_err, Result};
use crate::gradcheck::{check, CheckOptions, GradReport};
use crate::graph::{Graph, Var};
use crate::losses::Terms;
use crate::model::Uovn;
use crate::param::Bound;
use crate::synth::{generate_sample, DomainSpec};
use crate::tensor::Tensor;
use crate::train::objective;

/// Loss components covered by [`loss_suite`].
pub const LOSS_COMPONENTS: [&str; 6] = ["loss_seg", "loss_det", "loss_cls", "loss_adapt_global", "loss_adapt_local", "loss_total"];

fn pick(terms: &Terms, total: Var, name: &str) -> Option<Var> {
    match name {
        "loss_seg" => terms.seg,
        "loss_det" => terms.det,
        "loss_cls" => terms.cls,
        "loss_adapt_global" => terms.adapt_global,
        "loss_adapt_local" => terms.adapt_local,
        _ => Some(total),
    }
}

/// Central-difference check of each loss with respect to the model
/// parameters on a small paired batch (a masks domain and a boxes-only
/// domain). Parameters are jittered away from their initial values so that
/// zero-initialized heads do not sit on sampling-lattice kinks. Discrete
/// decisions are taken at the base point and held fixed. `max_coords`
/// coordinates are probed per parameter tensor.
pub fn loss_suite(seed: u64, corrupt: Option<&str>, max_coords: usize) -> Result<Vec<GradReport>> {
    let cfg = ModelConfig { queries: 4, max_tokens: 8, ..ModelConfig::tiny() };
    let model = Uovn::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c6f_7373);
    let values: Vec<Tensor<f64>> = model
        .store
        .params()
        .iter()
        .map(|p| {
            let data = p.value.data().iter().map(|&v| v as f64 + rng.random_range(-0.1..0.1)).collect();
            Tensor::new(p.value.shape(), data)
        })
        .collect::<Result<_>>()?;
    let mut d1 = DomainSpec::d1();
    let mut d3 = DomainSpec::d3();
    d1.image_size = 32;
    d3.image_size = 32;
    let a = generate_sample(&d1, seed)?;
    let b = generate_sample(&d3, seed)?;
    let batch = [&a, &b];
    let w = LossWeights::default();

    let frozen = {
        let mut g = Graph::<f64>::new();
        let p = model.store.bind_values(&mut g, &values)?;
        objective(&model, &mut g, &p, &batch, &w, None)?.frozen
    };

    let opts = CheckOptions { seed, max_coords: Some(max_coords), ..CheckOptions::default() };
    let mut out = Vec::with_capacity(LOSS_COMPONENTS.len());
    for name in LOSS_COMPONENTS {
        let bad = corrupt == Some(name);
        let r = check(
            name,
            &values,
            |g, vars| {
                let p = Bound::from_vars(vars.to_vec());
                let obj = objective(&model, g, &p, &batch, &w, Some(&frozen))?;
                let v = pick(&obj.terms, obj.loss, name).ok_or_else(|| input_err!("{name} absent"))?;
                Ok(if bad { g.grad_scale(v, 1.5) } else { v })
            },
            &opts,
        )?;
        out.push(GradReport { name: name.to_string(), ..r });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_passes() {
        for r in loss_suite(1, None, 2).unwrap() {
            assert!(r.max_rel_err < 1e-4, "{r:?}");
            assert!(r.coords > 0);
        }
    }

    #[test]
    fn corrupted_loss_is_caught() {
        let r = loss_suite(2, Some("loss_det"), 1).unwrap();
        for rep in r {
            assert_eq!(rep.max_rel_err >= 1e-4, rep.name == "loss_det", "{rep:?}");
        }
    }
}
