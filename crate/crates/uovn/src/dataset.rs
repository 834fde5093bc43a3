//! On-disk datasets: a `dataset.json` manifest with the annotations and one
//! UOVT container per sample holding the image and its masks.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use uovn_core::data::{AnnotatedSample, ClassInfo, Dataset, Query, Region};

use crate::error::{read, write, Error, Result};
use crate::uovt::{Container, Data};

pub const MANIFEST: &str = "dataset.json";
const FORMAT: &str = "uovn-dataset";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    classes: Vec<ClassInfo>,
    samples: Vec<SampleEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    /// UOVT container, relative to the manifest.
    file: String,
    domain: u32,
    /// `[height, width]` of every mask.
    mask_size: [usize; 2],
    has_masks: bool,
    has_boxes: bool,
    queries: Vec<Query>,
    regions: Vec<RegionEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionEntry {
    class: usize,
    thing: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f32; 4]>,
    /// Record name inside the sample container.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
}

/// Parse JSON, reporting the failing key path and position.
pub fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        Error::format(path, format!("at key `{key}`: {}", e.into_inner()))
    })
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    let mut samples = Vec::with_capacity(ds.samples.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let file = format!("sample_{i:05}.uovt");
        let mut c = Container::default();
        c.push("image", Data::F32(s.image.clone()));
        let mut regions = Vec::with_capacity(s.regions.len());
        for (k, r) in s.regions.iter().enumerate() {
            let mask = r.mask.as_ref().map(|m| {
                let name = format!("mask{k}");
                c.push(&name, Data::mask(m));
                name
            });
            regions.push(RegionEntry { class: r.class, thing: r.thing, bbox: r.bbox, mask });
        }
        c.save(&dir.join(&file))?;
        samples.push(SampleEntry {
            file,
            domain: s.domain,
            mask_size: [s.mask_size.0, s.mask_size.1],
            has_masks: s.has_masks,
            has_boxes: s.has_boxes,
            queries: s.queries.clone(),
            regions,
        });
    }
    let m = Manifest { format: FORMAT.into(), version: 1, classes: ds.classes.clone(), samples };
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    write(&dir.join(MANIFEST), text.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = String::from_utf8(read(&path)?).map_err(|_| Error::format(&path, "not utf-8"))?;
    let m: Manifest = parse_json(&path, &text)?;
    if m.format != FORMAT || m.version != 1 {
        return Err(Error::format(&path, format!("expected {FORMAT} version 1, found {} version {}", m.format, m.version)));
    }
    let mut samples = Vec::with_capacity(m.samples.len());
    for (i, e) in m.samples.into_iter().enumerate() {
        let cpath = dir.join(&e.file);
        let c = Container::load(&cpath)?;
        let image = c.tensor("image").ok_or_else(|| Error::format(&cpath, "no f32 `image` record"))?.clone();
        let mut regions = Vec::with_capacity(e.regions.len());
        for (k, r) in e.regions.into_iter().enumerate() {
            let mask = match &r.mask {
                Some(name) => Some(c.mask(name).ok_or_else(|| {
                    Error::format(&cpath, format!("sample {i} region {k}: mask record `{name}` missing"))
                })?),
                None => None,
            };
            regions.push(Region { class: r.class, thing: r.thing, bbox: r.bbox, mask });
        }
        let s = AnnotatedSample {
            image,
            domain: e.domain,
            queries: e.queries,
            regions,
            mask_size: (e.mask_size[0], e.mask_size[1]),
            has_masks: e.has_masks,
            has_boxes: e.has_boxes,
        };
        s.validate().map_err(|err| Error::format(&path, format!("sample {i}: {err}")))?;
        samples.push(s);
    }
    let ds = Dataset { classes: m.classes, samples };
    ds.validate().map_err(|err| Error::format(&path, err.to_string()))?;
    Ok(ds)
}
