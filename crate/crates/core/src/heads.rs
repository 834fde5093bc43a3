//! Box head and the post-processing that turns raw outputs into labels,
//! binary masks, semantic maps and panoptic segments.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::sigmoid_f64;
use crate::nn::FeedForward;
use crate::param::{Bound, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Segments smaller than this many pixels are dropped when painting.
pub const MIN_SEGMENT_AREA: usize = 16;
/// Fraction of a mask that must still be unclaimed when it is painted.
pub const MIN_UNCLAIMED_FRACTION: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct BoxHead {
    pub mlp: FeedForward,
}

impl BoxHead {
    pub fn new<R: Rng>(store: &mut ParamStore, width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self { mlp: FeedForward::new(store, "boxes", width, width, 4, rng)? })
    }

    /// Boxes `[N, 4]` as `(cx, cy, w, h)` in `(0, 1)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, o: Var) -> Result<Var> {
        let y = self.mlp.forward(g, p, o)?;
        Ok(g.sigmoid(y))
    }
}

/// Query-instance similarity `O Fᵀ`.
pub fn similarity<T: Real>(g: &mut Graph<T>, o: Var, f: Var) -> Result<Var> {
    g.matmul_nt(o, f)
}

/// `sigmoid(logit) > 0.5`, strictly.
pub fn binarize<T: Real>(logits: &[T]) -> Vec<bool> {
    logits.iter().map(|&v| sigmoid_f64(v.widen()) > 0.5).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Label {
    /// Best-scoring query.
    pub class: usize,
    pub score: f64,
    /// False when the score does not exceed the object threshold.
    pub is_object: bool,
}

/// Best query per instance from the rows of `sim`; ties go to the lowest index.
pub fn classify(sim: &Tensor<f32>, threshold: f64) -> Vec<Label> {
    (0..sim.rows())
        .map(|n| {
            // Argmax on the logits: sigmoid saturates and would tie large scores.
            let mut best = 0;
            let mut top = f32::NEG_INFINITY;
            for (c, &v) in sim.row(n).iter().enumerate() {
                if v > top {
                    best = c;
                    top = v;
                }
            }
            let score = sigmoid_f64(top as f64);
            Label { class: best, score, is_object: score > threshold }
        })
        .collect()
}

/// Union of the binary masks of every object instance labelled `c`, one plane
/// per class.
pub fn semantic_planes(masks: &[Vec<bool>], labels: &[Label], classes: usize, pixels: usize) -> Vec<Vec<bool>> {
    let mut planes = alloc::vec![alloc::vec![false; pixels]; classes];
    for (m, l) in masks.iter().zip(labels) {
        if !l.is_object {
            continue;
        }
        for (p, &on) in planes[l.class].iter_mut().zip(m) {
            *p |= on;
        }
    }
    planes
}

/// Per-pixel class map: `0` is unclaimed, otherwise `class + 1` of the
/// highest-scoring object instance covering the pixel.
pub fn semantic_map(masks: &[Vec<bool>], labels: &[Label], pixels: usize) -> Vec<usize> {
    let mut best = alloc::vec![f64::NEG_INFINITY; pixels];
    let mut out = alloc::vec![0; pixels];
    for (m, l) in masks.iter().zip(labels) {
        if !l.is_object {
            continue;
        }
        for (i, &on) in m.iter().enumerate() {
            if on && l.score > best[i] {
                best[i] = l.score;
                out[i] = l.class + 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u32,
    pub class: usize,
    pub thing: bool,
    pub score: f64,
    pub area: usize,
}

/// A segment-id map (0 is void) and the table describing each id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Panoptic {
    pub ids: Vec<u32>,
    pub segments: Vec<Segment>,
}

impl Panoptic {
    pub fn void_area(&self) -> usize {
        self.ids.iter().filter(|&&i| i == 0).count()
    }

    /// Segment areas plus void cover the map exactly and every id in the map
    /// has a table entry.
    pub fn is_partition(&self) -> bool {
        let mut counted = alloc::vec![0usize; self.segments.len()];
        for &i in &self.ids {
            if i == 0 {
                continue;
            }
            match self.segments.iter().position(|s| s.id == i) {
                Some(k) => counted[k] += 1,
                None => return false,
            }
        }
        let total: usize = self.segments.iter().map(|s| s.area).sum();
        counted.iter().zip(&self.segments).all(|(&c, s)| c == s.area) && total + self.void_area() == self.ids.len()
    }
}

/// Greedy paint by descending score. Same-class stuff instances share one
/// segment.
pub fn panoptic_merge(masks: &[Vec<bool>], labels: &[Label], thing: &[bool], pixels: usize) -> Panoptic {
    let mut order: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_object).collect();
    order.sort_by(|&a, &b| labels[b].score.total_cmp(&labels[a].score).then(a.cmp(&b)));
    let mut pan = Panoptic { ids: alloc::vec![0; pixels], segments: Vec::new() };
    for i in order {
        let l = labels[i];
        let m = &masks[i];
        let area = m.iter().filter(|&&v| v).count();
        let free: Vec<usize> = (0..pixels).filter(|&p| m[p] && pan.ids[p] == 0).collect();
        if area == 0 || (free.len() as f64) < MIN_UNCLAIMED_FRACTION * area as f64 || free.len() < MIN_SEGMENT_AREA {
            continue;
        }
        let is_thing = thing.get(l.class).copied().unwrap_or(true);
        let existing = if is_thing { None } else { pan.segments.iter().position(|s| !s.thing && s.class == l.class) };
        let k = match existing {
            Some(k) => k,
            None => {
                let id = pan.segments.len() as u32 + 1;
                pan.segments.push(Segment { id, class: l.class, thing: is_thing, score: l.score, area: 0 });
                pan.segments.len() - 1
            }
        };
        let id = pan.segments[k].id;
        pan.segments[k].area += free.len();
        for p in free {
            pan.ids[p] = id;
        }
    }
    pan
}
