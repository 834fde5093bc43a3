//! Checkpoints: a directory holding `params.uovt` (parameters and optimizer
//! velocity) and `meta.json` (step, config hash and the config itself).

use std::path::Path;

use serde::{Deserialize, Serialize};
use uovn_core::model::Uovn;
use uovn_core::train::Sgd;

use crate::config::RunConfig;
use crate::dataset::parse_json;
use crate::error::{read, write, Error, Result};
use crate::uovt::{Container, Data};

const PARAMS: &str = "params.uovt";
const META: &str = "meta.json";
const VELOCITY: &str = "velocity/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    /// Optimizer steps taken.
    pub step: usize,
    pub config_hash: String,
    pub config: RunConfig,
}

pub fn save(dir: &Path, model: &Uovn, sgd: &Sgd, step: usize, config: &RunConfig) -> Result<()> {
    let mut c = Container::default();
    for p in model.store.params() {
        c.push(&p.name, Data::F32(p.value.clone()));
    }
    for (p, v) in model.store.params().iter().zip(&sgd.velocity) {
        c.push(&format!("{VELOCITY}{}", p.name), Data::F32(v.clone()));
    }
    c.save(&dir.join(PARAMS))?;
    let meta = Meta { step, config_hash: config.hash(), config: config.clone() };
    write(&dir.join(META), serde_json::to_string_pretty(&meta).expect("meta serializes").as_bytes())
}

pub fn load_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join(META);
    let text = String::from_utf8(read(&path)?).map_err(|_| Error::format(&path, "not utf-8"))?;
    let meta: Meta = parse_json(&path, &text)?;
    if meta.config.hash() != meta.config_hash {
        return Err(Error::format(&path, "config hash does not match the stored config"));
    }
    Ok(meta)
}

/// Restore a model and its optimizer state.
pub fn load(dir: &Path) -> Result<(Uovn, Sgd, Meta)> {
    let meta = load_meta(dir)?;
    let path = dir.join(PARAMS);
    let c = Container::load(&path)?;
    let mut model = Uovn::new(meta.config.model.clone(), meta.config.init_seed)?;
    let mut sgd = Sgd::new(&model.store);
    for (p, v) in model.store.params_mut().iter_mut().zip(&mut sgd.velocity) {
        for (name, dst) in [(p.name.clone(), &mut p.value), (format!("{VELOCITY}{}", p.name), v)] {
            let t = c.tensor(&name).ok_or_else(|| Error::format(&path, format!("missing record {name}")))?;
            if t.shape() != dst.shape() {
                return Err(Error::format(
                    &path,
                    format!("record {name} has shape {:?}, expected {:?}", t.shape(), dst.shape()),
                ));
            }
            *dst = t.clone();
        }
    }
    Ok((model, sgd, meta))
}

/// Load only the model of a checkpoint.
pub fn load_model(dir: &Path) -> Result<(Uovn, Meta)> {
    let (model, _, meta) = load(dir)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::tiny_overfit();
        let mut model = Uovn::new(cfg.model.clone(), cfg.init_seed).unwrap();
        model.store.params_mut()[0].value.data_mut()[0] = 42.0;
        let mut sgd = Sgd::new(&model.store);
        sgd.velocity[1].data_mut()[0] = -3.0;
        save(dir.path(), &model, &sgd, 7, &cfg).unwrap();
        let (m2, s2, meta) = load(dir.path()).unwrap();
        assert_eq!(meta.step, 7);
        assert_eq!(meta.config, cfg);
        assert_eq!(m2.store, model.store);
        assert_eq!(s2, sgd);
    }

    #[test]
    fn tampered_meta_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::tiny_overfit();
        let model = Uovn::new(cfg.model.clone(), 0).unwrap();
        save(dir.path(), &model, &Sgd::new(&model.store), 1, &cfg).unwrap();
        let path = dir.path().join(META);
        let text = std::fs::read_to_string(&path).unwrap().replace("\"lr\": 0.05", "\"lr\": 0.07");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Format { .. })));
    }
}
