//! Annotated samples: image, queries and the regions they refer to.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::heads::{Panoptic, Segment};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    pub thing: bool,
}

/// One annotated object or stuff area.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    /// Index into the dataset's class list.
    pub class: usize,
    pub thing: bool,
    /// `(cx, cy, w, h)`, normalized.
    pub bbox: Option<[f32; 4]>,
    /// Binary mask at the finest feature resolution.
    pub mask: Option<Vec<bool>>,
}

/// A language query and the regions it describes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub regions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub domain: u32,
    pub queries: Vec<Query>,
    pub regions: Vec<Region>,
    /// `(h, w)` of every mask.
    pub mask_size: (usize, usize),
    pub has_masks: bool,
    pub has_boxes: bool,
}

impl AnnotatedSample {
    pub fn query_texts(&self) -> Vec<String> {
        self.queries.iter().map(|q| q.text.clone()).collect()
    }

    pub fn mask_pixels(&self) -> usize {
        self.mask_size.0 * self.mask_size.1
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(input_err!("image shape {s:?}"));
        }
        if self.queries.is_empty() {
            return Err(input_err!("sample has no queries"));
        }
        if !self.has_masks && !self.has_boxes {
            return Err(input_err!("sample has neither masks nor boxes"));
        }
        for q in &self.queries {
            if q.regions.is_empty() {
                return Err(input_err!("query {:?} links to no region", q.text));
            }
            if let Some(&r) = q.regions.iter().find(|&&r| r >= self.regions.len()) {
                return Err(input_err!("query {:?} links to missing region {r}", q.text));
            }
        }
        for (i, r) in self.regions.iter().enumerate() {
            if self.has_masks {
                match &r.mask {
                    Some(m) if m.len() == self.mask_pixels() => {}
                    _ => return Err(input_err!("region {i} lacks a {:?} mask", self.mask_size)),
                }
            }
            if self.has_boxes {
                match r.bbox {
                    Some(b) if b.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) => {}
                    _ => return Err(input_err!("region {i} lacks a valid box")),
                }
            }
        }
        Ok(())
    }

    /// Ground-truth panoptic map; requires masks.
    pub fn panoptic(&self) -> Option<Panoptic> {
        if !self.has_masks {
            return None;
        }
        let mut pan = Panoptic { ids: alloc::vec![0; self.mask_pixels()], segments: Vec::new() };
        for r in &self.regions {
            let m = r.mask.as_ref()?;
            let id = pan.segments.len() as u32 + 1;
            let mut area = 0;
            for (p, &on) in m.iter().enumerate() {
                if on && pan.ids[p] == 0 {
                    pan.ids[p] = id;
                    area += 1;
                }
            }
            pan.segments.push(Segment { id, class: r.class, thing: r.thing, score: 1.0, area });
        }
        Some(pan)
    }

    /// Ground-truth class map (`class + 1`, 0 unlabeled); requires masks.
    pub fn semantic(&self) -> Option<Vec<usize>> {
        let pan = self.panoptic()?;
        Some(pan.ids.iter().map(|&i| if i == 0 { 0 } else { pan.segments[i as usize - 1].class + 1 }).collect())
    }
}

/// Class vocabulary plus samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<ClassInfo>,
    pub samples: Vec<AnnotatedSample>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            s.validate().map_err(|e| input_err!("sample {i}: {e}"))?;
            if let Some(r) = s.regions.iter().find(|r| r.class >= self.classes.len()) {
                return Err(input_err!("sample {i}: class {} out of range", r.class));
            }
        }
        Ok(())
    }

    pub fn thing_flags(&self) -> Vec<bool> {
        self.classes.iter().map(|c| c.thing).collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}
