//! Deterministic "referring shapes" data: colored circles, squares and
//! triangles over a two-band stuff background, with template queries.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedSample, ClassInfo, Dataset, Query, Region};
use crate::encoders::apply_prompt;
use crate::error::{input_err, Result};
use crate::tensor::Tensor;

/// Feature stride of the finest decoder level; masks are stored at this
/// resolution.
pub const MASK_STRIDE: usize = 4;
/// Smallest region kept, in mask pixels.
pub const MIN_REGION_PIXELS: usize = 16;
const MAX_SHAPES: usize = 4;
const PLACEMENT_TRIES: usize = 60;

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const STUFF: [&str; 6] = ["sky", "grass", "water", "sand", "wall", "floor"];

/// Class list shared by every stock domain: shapes first, then stuff.
pub fn classes() -> Vec<ClassInfo> {
    SHAPES
        .iter()
        .map(|&n| ClassInfo { name: n.into(), thing: true })
        .chain(STUFF.iter().map(|&n| ClassInfo { name: n.into(), thing: false }))
        .collect()
}

fn class_index(name: &str) -> Result<usize> {
    classes().iter().position(|c| c.name == name).ok_or_else(|| input_err!("unknown class {name:?}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotation {
    MasksAndBoxes,
    BoxesOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: u32,
    pub palette: Vec<NamedColor>,
    /// Upper and lower background bands.
    pub background: [NamedColor; 2],
    pub annotation: Annotation,
    /// Half-width of the uniform pixel noise.
    pub noise: f32,
    pub image_size: usize,
}

fn color(name: &str, rgb: [f32; 3]) -> NamedColor {
    NamedColor { name: name.into(), rgb }
}

impl DomainSpec {
    /// Warm palette, masks and boxes.
    pub fn d1() -> Self {
        Self {
            id: 1,
            palette: alloc::vec![
                color("red", [0.9, 0.1, 0.1]),
                color("orange", [0.95, 0.55, 0.1]),
                color("yellow", [0.95, 0.9, 0.15]),
            ],
            background: [color("sky", [0.55, 0.75, 0.95]), color("grass", [0.2, 0.55, 0.2])],
            annotation: Annotation::MasksAndBoxes,
            noise: 0.0,
            image_size: 64,
        }
    }

    /// Cool palette with pixel noise, masks and boxes.
    pub fn d2() -> Self {
        Self {
            id: 2,
            palette: alloc::vec![
                color("blue", [0.1, 0.2, 0.9]),
                color("cyan", [0.1, 0.85, 0.85]),
                color("purple", [0.55, 0.15, 0.75]),
            ],
            background: [color("water", [0.15, 0.35, 0.5]), color("sand", [0.85, 0.75, 0.5])],
            annotation: Annotation::MasksAndBoxes,
            noise: 0.1,
            image_size: 64,
        }
    }

    /// Mixed palette, boxes only.
    pub fn d3() -> Self {
        Self {
            id: 3,
            palette: alloc::vec![
                color("red", [0.9, 0.1, 0.1]),
                color("green", [0.1, 0.8, 0.2]),
                color("blue", [0.1, 0.2, 0.9]),
            ],
            background: [color("wall", [0.7, 0.7, 0.7]), color("floor", [0.35, 0.3, 0.25])],
            annotation: Annotation::BoxesOnly,
            noise: 0.03,
            image_size: 64,
        }
    }

    pub fn stock() -> Vec<Self> {
        alloc::vec![Self::d1(), Self::d2(), Self::d3()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.palette.is_empty() {
            return Err(input_err!("domain {}: empty palette", self.id));
        }
        if self.image_size < 32 || self.image_size % 32 != 0 {
            return Err(input_err!("domain {}: image size {} must be a positive multiple of 32", self.id, self.image_size));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(input_err!("domain {}: noise {} outside [0, 0.5]", self.id, self.noise));
        }
        for b in &self.background {
            class_index(&b.name)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    kind: Kind,
    color: usize,
    /// Image-pixel bounding box `[x0, y0, x1, y1]`.
    bounds: [f64; 4],
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let [x0, y0, x1, y1] = self.bounds;
        if x < x0 || x > x1 || y < y0 || y > y1 {
            return false;
        }
        match self.kind {
            Kind::Square => true,
            Kind::Circle => {
                let (cx, cy, r) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0, (x1 - x0) / 2.0);
                (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r
            }
            Kind::Triangle => {
                // apex at the top middle, base along the bottom edge
                let t = (y - y0) / (y1 - y0);
                let half = t * (x1 - x0) / 2.0;
                let cx = (x0 + x1) / 2.0;
                (x - cx).abs() <= half
            }
        }
    }

    fn name(&self) -> &'static str {
        match self.kind {
            Kind::Circle => SHAPES[0],
            Kind::Square => SHAPES[1],
            Kind::Triangle => SHAPES[2],
        }
    }

    fn overlaps(&self, other: &Shape, margin: f64) -> bool {
        let a = self.bounds;
        let b = other.bounds;
        a[0] - margin < b[2] && b[0] - margin < a[2] && a[1] - margin < b[3] && b[1] - margin < a[3]
    }
}

fn draw_shape<R: Rng>(rng: &mut R, size: f64, palette: usize) -> Shape {
    let kind = match rng.random_range(0..3) {
        0 => Kind::Circle,
        1 => Kind::Square,
        _ => Kind::Triangle,
    };
    let (w, h) = match kind {
        Kind::Circle => {
            let d = rng.random_range(0.32..0.48) * size;
            (d, d)
        }
        Kind::Square => {
            let s = rng.random_range(0.28..0.42) * size;
            (s, s)
        }
        Kind::Triangle => {
            let b = rng.random_range(0.36..0.5) * size;
            (b, 0.9 * b)
        }
    };
    let x0 = rng.random_range(1.0..size - w - 1.0);
    let y0 = rng.random_range(1.0..size - h - 1.0);
    Shape { kind, color: rng.random_range(0..palette), bounds: [x0, y0, x0 + w, y0 + h] }
}

/// 4-connected and non-empty.
pub fn is_connected(mask: &[bool], width: usize) -> bool {
    let Some(start) = mask.iter().position(|&m| m) else {
        return false;
    };
    let height = mask.len() / width;
    let mut seen = alloc::vec![false; mask.len()];
    let mut stack = alloc::vec![start];
    seen[start] = true;
    let mut count = 0;
    while let Some(p) = stack.pop() {
        count += 1;
        let (y, x) = (p / width, p % width);
        let mut push = |q: usize| {
            if mask[q] && !seen[q] {
                seen[q] = true;
                stack.push(q);
            }
        };
        if x > 0 {
            push(p - 1);
        }
        if x + 1 < width {
            push(p + 1);
        }
        if y > 0 {
            push(p - width);
        }
        if y + 1 < height {
            push(p + width);
        }
    }
    count == mask.iter().filter(|&&m| m).count()
}

/// Normalized `(cx, cy, w, h)` of the mask's pixel extent.
pub fn tight_box(mask: &[bool], width: usize) -> Option<[f32; 4]> {
    let height = mask.len() / width;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (p / width, p % width);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    if x0 == usize::MAX {
        return None;
    }
    let (w, h) = (width as f32, height as f32);
    Some([
        (x0 + x1) as f32 / (2.0 * w),
        (y0 + y1) as f32 / (2.0 * h),
        (x1 - x0) as f32 / w,
        (y1 - y0) as f32 / h,
    ])
}

struct Layout {
    shapes: Vec<Shape>,
    /// First mask row of the lower band.
    horizon: usize,
}

fn place<R: Rng>(rng: &mut R, spec: &DomainSpec) -> Layout {
    let size = spec.image_size as f64;
    let grid = spec.image_size / MASK_STRIDE;
    let horizon = rng.random_range(grid * 3 / 8..=grid * 5 / 8);
    let count = rng.random_range(1..=MAX_SHAPES);
    let mut shapes: Vec<Shape> = Vec::new();
    for _ in 0..count {
        for _ in 0..PLACEMENT_TRIES {
            let s = draw_shape(rng, size, spec.palette.len());
            if shapes.iter().all(|o| !s.overlaps(o, MASK_STRIDE as f64)) {
                shapes.push(s);
                break;
            }
        }
    }
    Layout { shapes, horizon }
}

fn mask_of(shape: &Shape, grid: usize) -> Vec<bool> {
    // a cell takes the value of the rendered pixel just above-left of its center
    let stride = MASK_STRIDE as f64;
    let at = stride / 2.0 - 0.5;
    (0..grid * grid)
        .map(|p| {
            let (y, x) = ((p / grid) as f64, (p % grid) as f64);
            shape.contains(x * stride + at, y * stride + at)
        })
        .collect()
}

fn add_query(queries: &mut Vec<Query>, text: String, region: usize) {
    match queries.iter_mut().find(|q| q.text == text) {
        Some(q) => {
            if !q.regions.contains(&region) {
                q.regions.push(region);
            }
        }
        None => queries.push(Query { text, regions: alloc::vec![region] }),
    }
}

/// One sample; identical for identical `(spec, seed)`.
pub fn generate_sample(spec: &DomainSpec, seed: u64) -> Result<AnnotatedSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (spec.id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let size = spec.image_size;
    let grid = size / MASK_STRIDE;
    let (layout, masks, stuff) = loop {
        let layout = place(&mut rng, spec);
        let masks: Vec<Vec<bool>> = layout.shapes.iter().map(|s| mask_of(s, grid)).collect();
        let covered = |p: usize| masks.iter().any(|m| m[p]);
        let stuff: Vec<Vec<bool>> = (0..2)
            .map(|band| {
                (0..grid * grid).map(|p| ((p / grid >= layout.horizon) as usize == band) && !covered(p)).collect()
            })
            .collect();
        let ok = masks
            .iter()
            .chain(&stuff)
            .all(|m| m.iter().filter(|&&v| v).count() >= MIN_REGION_PIXELS && is_connected(m, grid));
        if ok && !layout.shapes.is_empty() {
            break (layout, masks, stuff);
        }
    };

    let mut pixels = Vec::with_capacity(size * size * 3);
    let split = (layout.horizon * MASK_STRIDE) as f64;
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let rgb = match layout.shapes.iter().find(|s| s.contains(fx, fy)) {
                Some(s) => spec.palette[s.color].rgb,
                None => spec.background[(fy >= split) as usize].rgb,
            };
            for c in rgb {
                let n = if spec.noise > 0.0 { rng.random_range(-spec.noise..=spec.noise) } else { 0.0 };
                pixels.push((c + n).clamp(0.0, 1.0));
            }
        }
    }

    let with_masks = spec.annotation == Annotation::MasksAndBoxes;
    let mut regions = Vec::new();
    let mut queries = Vec::new();
    let areas: Vec<usize> = masks.iter().map(|m| m.iter().filter(|&&v| v).count()).collect();
    let largest = (0..areas.len()).max_by_key(|&i| (areas[i], core::cmp::Reverse(i))).unwrap_or(0);
    let unique_largest = areas.iter().filter(|&&a| a == areas[largest]).count() == 1;
    for (i, (s, m)) in layout.shapes.iter().zip(&masks).enumerate() {
        let cname = &spec.palette[s.color].name;
        regions.push(Region {
            class: class_index(s.name())?,
            thing: true,
            bbox: tight_box(m, grid),
            mask: with_masks.then(|| m.clone()),
        });
        add_query(&mut queries, alloc::format!("{cname} {}", s.name()), i);
        if i == largest && unique_largest && layout.shapes.len() > 1 {
            add_query(&mut queries, alloc::format!("the large {cname} {}", s.name()), i);
        }
        add_query(&mut queries, alloc::format!("{cname} object"), i);
        add_query(&mut queries, apply_prompt(s.name())?, i);
    }
    for (band, m) in stuff.iter().enumerate() {
        let name = &spec.background[band].name;
        let r = regions.len();
        regions.push(Region {
            class: class_index(name)?,
            thing: false,
            bbox: tight_box(m, grid),
            mask: with_masks.then(|| m.clone()),
        });
        add_query(&mut queries, apply_prompt(name)?, r);
    }

    let sample = AnnotatedSample {
        image: Tensor::new(&[size, size, 3], pixels)?,
        domain: spec.id,
        queries,
        regions,
        mask_size: (grid, grid),
        has_masks: with_masks,
        has_boxes: true,
    };
    sample.validate()?;
    Ok(sample)
}

/// One sample from each of two distinct domains, seeds drawn from `rng`.
pub fn make_pair_batch<R: Rng>(a: &DomainSpec, b: &DomainSpec, rng: &mut R) -> Result<(AnnotatedSample, AnnotatedSample)> {
    if a.id == b.id {
        return Err(input_err!("pair batch needs two different domains, got {} twice", a.id));
    }
    let (sa, sb) = (rng.random::<u64>(), rng.random::<u64>());
    Ok((generate_sample(a, sa)?, generate_sample(b, sb)?))
}

/// `per_domain` samples from each domain, seeds derived from `seed`.
pub fn generate_dataset(domains: &[DomainSpec], per_domain: usize, seed: u64) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(domains.len() * per_domain);
    for d in domains {
        for i in 0..per_domain {
            samples.push(generate_sample(d, seed.wrapping_add(i as u64))?);
        }
    }
    Ok(Dataset { classes: classes(), samples })
}

/// Names of the colors and classes a sample mentions; used to describe
/// samples in tests and reports.
pub fn vocabulary(sample: &AnnotatedSample) -> Vec<String> {
    let mut words: Vec<String> = sample
        .queries
        .iter()
        .flat_map(|q| q.text.split_whitespace().map(|w| w.to_lowercase()).collect::<Vec<_>>())
        .collect();
    words.sort();
    words.dedup();
    words.iter().map(|w| w.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        for spec in DomainSpec::stock() {
            let a = generate_sample(&spec, 7).unwrap();
            let b = generate_sample(&spec, 7).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, generate_sample(&spec, 8).unwrap());
        }
    }

    #[test]
    fn boxes_tightly_bound_masks() {
        let spec = DomainSpec::d1();
        for seed in 0..40 {
            let s = generate_sample(&spec, seed).unwrap();
            let w = s.mask_size.1;
            for r in &s.regions {
                let m = r.mask.as_ref().unwrap();
                assert_eq!(r.bbox, tight_box(m, w));
                let b = r.bbox.unwrap();
                let (x0, x1) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0);
                assert!(x0 >= 0.0 && x1 <= 1.0 + 1e-6);
                assert!(m.iter().filter(|&&v| v).count() >= MIN_REGION_PIXELS);
                assert!(is_connected(m, w));
            }
        }
    }

    #[test]
    fn masks_match_rendered_pixels() {
        let spec = DomainSpec::d1();
        let s = generate_sample(&spec, 3).unwrap();
        let size = spec.image_size;
        let g = size / MASK_STRIDE;
        let things: Vec<&Vec<bool>> = s.regions.iter().filter(|r| r.thing).map(|r| r.mask.as_ref().unwrap()).collect();
        for p in 0..g * g {
            let on = things.iter().any(|m| m[p]);
            let (y, x) = ((p / g) * MASK_STRIDE + MASK_STRIDE / 2 - 1, (p % g) * MASK_STRIDE + MASK_STRIDE / 2 - 1);
            let px = &s.image.data()[(y * size + x) * 3..][..3];
            let bg = spec.background.iter().any(|b| b.rgb == [px[0], px[1], px[2]]);
            assert_eq!(on, !bg);
        }
    }

    #[test]
    fn boxes_only_domain_has_no_masks() {
        let s = generate_sample(&DomainSpec::d3(), 1).unwrap();
        assert!(!s.has_masks);
        assert!(s.regions.iter().all(|r| r.mask.is_none() && r.bbox.is_some()));
    }

    #[test]
    fn duplicate_shapes_share_a_query() {
        let spec = DomainSpec::d1();
        let hit = (0..500).find_map(|seed| {
            let s = generate_sample(&spec, seed).unwrap();
            s.queries.iter().any(|q| q.text == "red circle" && q.regions.len() == 2).then_some(s)
        });
        let s = hit.expect("some seed draws two red circles");
        let q = s.queries.iter().find(|q| q.text == "red circle").unwrap();
        for &r in &q.regions {
            assert_eq!(s.regions[r].class, 0);
        }
    }

    #[test]
    fn every_region_is_queried() {
        for spec in DomainSpec::stock() {
            for seed in 0..20 {
                let s = generate_sample(&spec, seed).unwrap();
                for r in 0..s.regions.len() {
                    assert!(s.queries.iter().any(|q| q.regions.contains(&r)));
                }
            }
        }
    }

    #[test]
    fn pair_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = make_pair_batch(&DomainSpec::d1(), &DomainSpec::d3(), &mut rng).unwrap();
        assert_eq!((a.domain, b.domain), (1, 3));
        assert!(a.has_masks && !b.has_masks);
        assert!(make_pair_batch(&DomainSpec::d1(), &DomainSpec::d1(), &mut rng).is_err());
        let mut again = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(make_pair_batch(&DomainSpec::d1(), &DomainSpec::d3(), &mut again).unwrap().0, a);
    }

    #[test]
    fn thousand_pairs_count_both_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 4];
        let (d1, d2) = (DomainSpec::d1(), DomainSpec::d2());
        for _ in 0..1000 {
            let (a, b) = make_pair_batch(&d1, &d2, &mut rng).unwrap();
            counts[a.domain as usize] += 1;
            counts[b.domain as usize] += 1;
        }
        assert_eq!(counts, [0, 1000, 1000, 0]);
    }

    #[test]
    fn stock_domains_are_distinct_and_valid() {
        let d = DomainSpec::stock();
        for i in 0..d.len() {
            d[i].validate().unwrap();
            for j in i + 1..d.len() {
                assert_ne!(d[i], d[j]);
            }
        }
    }

    #[test]
    fn dataset_validates() {
        let ds = generate_dataset(&DomainSpec::stock(), 3, 11).unwrap();
        assert_eq!(ds.samples.len(), 9);
        ds.validate().unwrap();
    }

    #[test]
    fn connectivity() {
        assert!(is_connected(&[true, true, false, false], 2));
        assert!(!is_connected(&[true, false, false, true], 2));
        assert!(!is_connected(&[false; 4], 2));
    }
}
