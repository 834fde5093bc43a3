//! Training objective: matching, task losses and the cross-domain
//! adaptation terms.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::data::AnnotatedSample;
use crate::error::{input_err, Result};
use crate::graph::{Graph, Var};
use crate::heads::binarize;
use crate::kernels::{bce_logits, cxcywh_to_corners, giou_corners, sigmoid_f64, smooth_l1};
use crate::matching::{hungarian, Assignment};
use crate::metrics::{box_iou, mask_iou};
use crate::model::Outputs;
use crate::real::Real;
use crate::tensor::Tensor;

/// Smooth-L1 transition point.
pub const SMOOTH_L1_BETA: f64 = 1.0;
/// Dice smoothing term.
pub const DICE_EPS: f64 = 1.0;

/// Dice loss `1 - 2Σpg / (Σp + Σg + ε)` for probabilities `p`.
pub fn dice(p: &[f64], g: &[bool]) -> f64 {
    let (mut pg, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&pi, &gi) in p.iter().zip(g) {
        let gi = gi as u8 as f64;
        pg += pi * gi;
        sp += pi;
        sg += gi;
    }
    1.0 - 2.0 * pg / (sp + sg + DICE_EPS)
}

/// Mean BCE plus Dice of one mask prediction against one mask.
pub fn mask_cost(logits: &[f64], gt: &[bool]) -> f64 {
    let bce: f64 = logits.iter().zip(gt).map(|(&x, &t)| bce_logits(x, t as u8 as f64).0).sum::<f64>() / logits.len() as f64;
    let p: Vec<f64> = logits.iter().map(|&x| sigmoid_f64(x)).collect();
    bce + dice(&p, gt)
}

/// Smooth-L1 summed over coordinates plus `1 - GIoU`.
pub fn box_cost(pred: [f64; 4], gt: [f64; 4]) -> f64 {
    let l1: f64 = (0..4).map(|i| smooth_l1(pred[i] - gt[i], SMOOTH_L1_BETA).0).sum();
    l1 + 1.0 - giou_corners(cxcywh_to_corners(pred).0, cxcywh_to_corners(gt).0)
}

fn row<T: Real>(t: &Tensor<T>, r: usize) -> Vec<f64> {
    t.row(r).iter().map(|v| v.widen()).collect()
}

fn box4(v: &[f64]) -> [f64; 4] {
    [v[0], v[1], v[2], v[3]]
}

/// Queries that mention each region.
fn region_queries(sample: &AnnotatedSample) -> Vec<Vec<usize>> {
    let mut out = alloc::vec![Vec::new(); sample.regions.len()];
    for (c, q) in sample.queries.iter().enumerate() {
        for &r in &q.regions {
            out[r].push(c);
        }
    }
    out
}

/// `[N, R]` cost of assigning prediction `n` to region `r`. Missing
/// modalities contribute nothing.
pub fn matching_cost<T: Real>(
    mask_logits: &Tensor<T>,
    boxes: &Tensor<T>,
    sim: &Tensor<T>,
    sample: &AnnotatedSample,
    w: &LossWeights,
) -> Vec<f64> {
    let n = boxes.rows();
    let r = sample.regions.len();
    let links = region_queries(sample);
    let mut cost = alloc::vec![0f64; n * r];
    for i in 0..n {
        let logits = row(mask_logits, i);
        let b = box4(&row(boxes, i));
        let s = row(sim, i);
        for (j, region) in sample.regions.iter().enumerate() {
            let mut c = 0.0;
            if sample.has_masks {
                if let Some(m) = &region.mask {
                    c += w.seg * mask_cost(&logits, m);
                }
            }
            if sample.has_boxes {
                if let Some(gb) = region.bbox {
                    c += w.det * box_cost(b, gb.map(|v| v as f64));
                }
            }
            if !links[j].is_empty() {
                let mean: f64 = links[j].iter().map(|&q| sigmoid_f64(s[q])).sum::<f64>() / links[j].len() as f64;
                c -= w.cls * mean;
            }
            cost[i * r + j] = c;
        }
    }
    cost
}

/// `s[n, c] = 1` iff prediction `n` overlaps a region of query `c` with
/// IoU > 0.5 (mask IoU when the sample has masks, box IoU otherwise).
pub fn gt_similarity<T: Real>(mask_logits: &Tensor<T>, boxes: &Tensor<T>, sample: &AnnotatedSample) -> Vec<f32> {
    let n = boxes.rows();
    let c = sample.queries.len();
    let mut out = alloc::vec![0f32; n * c];
    for i in 0..n {
        let mask = binarize(mask_logits.row(i));
        let b = boxes.row(i);
        let pb = [b[0], b[1], b[2], b[3]].map(|v| v.widen() as f32);
        for (q, query) in sample.queries.iter().enumerate() {
            let hit = query.regions.iter().any(|&r| {
                let region = &sample.regions[r];
                let iou = match (&region.mask, region.bbox) {
                    (Some(m), _) if sample.has_masks => mask_iou(&mask, m),
                    (_, Some(gb)) => box_iou(pb, gb),
                    _ => 0.0,
                };
                iou > 0.5
            });
            out[i * c + q] = hit as u8 as f32;
        }
    }
    out
}

/// `[C, N]` averaging weights: query `c` takes the mean of the instances with
/// sigmoid(S[n, c]) > 0.5, or its single best instance when none qualifies.
pub fn aggregation_weights<T: Real>(sim: &Tensor<T>) -> Vec<f64> {
    let (n, c) = (sim.rows(), sim.cols());
    let mut w = alloc::vec![0f64; c * n];
    for q in 0..c {
        let col: Vec<f64> = (0..n).map(|i| sim.data()[i * c + q].widen()).collect();
        let picked: Vec<usize> = (0..n).filter(|&i| sigmoid_f64(col[i]) > 0.5).collect();
        if picked.is_empty() {
            let mut best = 0;
            for i in 1..n {
                if col[i] > col[best] {
                    best = i;
                }
            }
            w[q * n + best] = 1.0;
        } else {
            for &i in &picked {
                w[q * n + i] = 1.0 / picked.len() as f64;
            }
        }
    }
    w
}

/// Discrete choices derived from one forward pass, held fixed while the loss
/// is differentiated.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub assignment: Assignment,
    /// `[N, C]`
    pub sim_target: Vec<f32>,
    /// `[C, N]`
    pub aggregation: Vec<f64>,
}

pub fn build_targets<T: Real>(
    g: &Graph<T>,
    out: &Outputs,
    sample: &AnnotatedSample,
    w: &LossWeights,
) -> Result<Targets> {
    let logits = g.value(out.mask_logits());
    let boxes = g.value(out.boxes);
    let sim = g.value(out.sim);
    let cost = matching_cost(logits, boxes, sim, sample, w);
    let assignment = hungarian(&cost, boxes.rows(), sample.regions.len())?;
    Ok(Targets {
        assignment,
        sim_target: gt_similarity(logits, boxes, sample),
        aggregation: aggregation_weights(sim),
    })
}

fn constant<T: Real>(g: &mut Graph<T>, shape: &[usize], data: Vec<f64>) -> Result<Var> {
    Ok(g.constant(Tensor::new(shape, data.into_iter().map(T::cast).collect())?))
}

/// Mean over assigned pairs of mask BCE (pixel mean) plus Dice.
pub fn loss_seg<T: Real>(g: &mut Graph<T>, mask_logits: Var, sample: &AnnotatedSample, a: &Assignment) -> Result<Option<Var>> {
    if !sample.has_masks || a.pairs.is_empty() {
        return Ok(None);
    }
    let preds: Vec<usize> = a.pairs.iter().map(|&(p, _)| p).collect();
    let hw = g.value(mask_logits).cols();
    let mut gt = Vec::with_capacity(preds.len() * hw);
    let mut gt_area = Vec::with_capacity(preds.len());
    for &(_, r) in &a.pairs {
        let m = sample.regions[r].mask.as_ref().ok_or_else(|| input_err!("region {r} has no mask"))?;
        gt.extend(m.iter().map(|&v| T::cast(v as u8 as f64)));
        gt_area.push(m.iter().filter(|&&v| v).count() as f64 + DICE_EPS);
    }
    let k = preds.len();
    let x = g.gather_rows(mask_logits, &preds)?;
    let bce = g.bce_with_logits(x, &gt)?;
    let bce = g.mean(bce);
    let p = g.sigmoid(x);
    let gmask = g.constant(Tensor::new(&[k, hw], gt)?);
    let pg = g.mul(p, gmask)?;
    let inter = g.sum_last(pg);
    let sp = g.sum_last(p);
    let area = constant(g, &[k], gt_area)?;
    let den = g.add(sp, area)?;
    let ratio = g.div(inter, den)?;
    let ratio = g.mean(ratio);
    let dice = g.affine(ratio, -2.0, 1.0);
    Ok(Some(g.add(bce, dice)?))
}

/// Mean over assigned pairs of summed smooth-L1 plus `1 - GIoU`.
pub fn loss_det<T: Real>(g: &mut Graph<T>, boxes: Var, sample: &AnnotatedSample, a: &Assignment) -> Result<Option<Var>> {
    if !sample.has_boxes || a.pairs.is_empty() {
        return Ok(None);
    }
    let preds: Vec<usize> = a.pairs.iter().map(|&(p, _)| p).collect();
    let mut gt = Vec::with_capacity(4 * preds.len());
    for &(_, r) in &a.pairs {
        let b = sample.regions[r].bbox.ok_or_else(|| input_err!("region {r} has no box"))?;
        gt.extend(b.iter().map(|&v| T::cast(v as f64)));
    }
    let k = preds.len() as f64;
    let x = g.gather_rows(boxes, &preds)?;
    let l1 = g.smooth_l1(x, &gt, SMOOTH_L1_BETA)?;
    let l1 = g.sum(l1);
    let l1 = g.scale(l1, 1.0 / k);
    let gi = g.giou(x, &gt)?;
    let gi = g.mean(gi);
    let gi = g.affine(gi, -1.0, 1.0);
    Ok(Some(g.add(l1, gi)?))
}

/// Mean elementwise BCE between `sigmoid(S)` and the binary target.
pub fn loss_cls<T: Real>(g: &mut Graph<T>, sim: Var, target: &[f32]) -> Result<Var> {
    let t: Vec<T> = target.iter().map(|&v| T::cast(v as f64)).collect();
    let l = g.bce_with_logits(sim, &t)?;
    Ok(g.mean(l))
}

/// `|cos(v1, v2) - cos(f1, f2)|`.
pub fn loss_adapt_global<T: Real>(g: &mut Graph<T>, v1: Var, v2: Var, f1: Var, f2: Var) -> Result<Var> {
    let av = g.cosine(v1, v2)?;
    let al = g.cosine(f1, f2)?;
    let d = g.sub(av, al)?;
    Ok(g.abs(d))
}

/// Mean over rows of `KL(softmax(A_L) || softmax(A_V))` with
/// `A_L = F1 F2ᵀ` held constant and `A_V = Õ1 Õ2ᵀ`, `Õ = aggregation · O`.
#[allow(clippy::too_many_arguments)]
pub fn loss_adapt_local<T: Real>(
    g: &mut Graph<T>,
    o1: Var,
    agg1: &[f64],
    f1: &Tensor<T>,
    o2: Var,
    agg2: &[f64],
    f2: &Tensor<T>,
) -> Result<Var> {
    let (c1, c2) = (f1.rows(), f2.rows());
    let n1 = g.value(o1).rows();
    let n2 = g.value(o2).rows();
    let s1 = constant(g, &[c1, n1], agg1.to_vec())?;
    let s2 = constant(g, &[c2, n2], agg2.to_vec())?;
    let a1 = g.matmul(s1, o1)?;
    let a2 = g.matmul(s2, o2)?;
    let av = g.matmul_nt(a1, a2)?;
    let log_q = g.log_softmax(av);

    let al = crate::kernels::gemm_nt(f1.data(), f2.data(), c1, f1.cols(), c2);
    let mut target = Vec::with_capacity(c1 * c2);
    let mut entropy_term = 0.0;
    for r in al.chunks(c2) {
        let row: Vec<f64> = r.iter().map(|v| v.widen()).collect();
        let lse = crate::kernels::log_sum_exp(&row);
        for &v in &row {
            let lp = v - lse;
            let p = num_traits::Float::exp(lp);
            target.push(p);
            if p > 0.0 {
                entropy_term += p * lp;
            }
        }
    }
    let pt = constant(g, &[c1, c2], target)?;
    let cross = g.mul(log_q, pt)?;
    let cross = g.sum(cross);
    Ok(g.affine(cross, -1.0 / c1 as f64, entropy_term / c1 as f64))
}

/// Named loss values of one step; absent terms are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub seg: Option<f64>,
    pub det: Option<f64>,
    pub cls: Option<f64>,
    pub adapt_global: Option<f64>,
    pub adapt_local: Option<f64>,
    pub total: f64,
}

/// Loss term handles for one step.
#[derive(Debug, Clone, Copy, Default)]
pub struct Terms {
    pub seg: Option<Var>,
    pub det: Option<Var>,
    pub cls: Option<Var>,
    pub adapt_global: Option<Var>,
    pub adapt_local: Option<Var>,
}

/// `λ1 seg + λ2 det + λ3 cls + λ4 (global + local)` on the tape.
pub fn total_loss<T: Real>(g: &mut Graph<T>, t: &Terms, w: &LossWeights) -> Result<(Var, Breakdown)> {
    let mut parts = Vec::new();
    for (v, wt) in [(t.seg, w.seg), (t.det, w.det), (t.cls, w.cls), (t.adapt_global, w.adapt), (t.adapt_local, w.adapt)] {
        if let Some(v) = v {
            parts.push(g.scale(v, wt));
        }
    }
    let total = match parts.len() {
        0 => g.constant(Tensor::scalar(T::zero())),
        _ => {
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = g.add(acc, p)?;
            }
            acc
        }
    };
    let val = |v: Option<Var>| v.map(|v| g.value(v).item().widen());
    let b = Breakdown {
        seg: val(t.seg),
        det: val(t.det),
        cls: val(t.cls),
        adapt_global: val(t.adapt_global),
        adapt_local: val(t.adapt_local),
        total: g.value(total).item().widen(),
    };
    Ok((total, b))
}

/// Per-sample supervised terms: segmentation (final prediction plus the
/// intermediate ones when `aux` is set), detection and classification.
pub fn sample_terms<T: Real>(
    g: &mut Graph<T>,
    out: &Outputs,
    sample: &AnnotatedSample,
    targets: &Targets,
    aux: bool,
) -> Result<(Option<Var>, Option<Var>, Var)> {
    let a = &targets.assignment;
    let masks = &out.instances.layer_masks;
    let mut seg = loss_seg(g, out.mask_logits(), sample, a)?;
    if aux {
        if let Some(mut acc) = seg {
            for &m in &masks[..masks.len() - 1] {
                let extra = loss_seg(g, m, sample, a)?.expect("masks present");
                acc = g.add(acc, extra)?;
            }
            seg = Some(acc);
        }
    }
    let det = loss_det(g, out.boxes, sample, a)?;
    let cls = loss_cls(g, out.sim, &targets.sim_target)?;
    Ok((seg, det, cls))
}

/// Average a set of per-sample terms; `None` when no sample has the term.
pub fn mean_terms<T: Real>(g: &mut Graph<T>, terms: &[Option<Var>]) -> Result<Option<Var>> {
    let present: Vec<Var> = terms.iter().flatten().copied().collect();
    if present.is_empty() {
        return Ok(None);
    }
    let mut acc = present[0];
    for &v in &present[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(Some(g.scale(acc, 1.0 / present.len() as f64)))
}
