//! Acceptance criteria 1 to 9, one PASS/FAIL line each.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uovn::config::{DomainChoice, Generated, RunConfig};
use uovn::run;
use uovn_core::config::{LossWeights, ModelConfig};
use uovn_core::data::{AnnotatedSample, Dataset, Query, Region};
use uovn_core::encoders::pool_queries;
use uovn_core::eval::Task;
use uovn_core::heads::{binarize, Panoptic, Segment};
use uovn_core::kernels::giou_corners;
use uovn_core::losses::{gt_similarity, loss_adapt_global, loss_adapt_local, total_loss, Terms};
use uovn_core::matching::hungarian;
use uovn_core::metrics::{average_precision, panoptic_quality, Detection, IouAccumulator, Target};
use uovn_core::mmda::{PixelDecoder, TokenLayout};
use uovn_core::model::Uovn;
use uovn_core::synth::{generate_sample, DomainSpec};
use uovn_core::train::{adaptation_gap, batch_indices, objective};
use uovn_core::{Graph, ParamStore, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let reports = run::gradcheck(0, None).expect("gradient check runs");
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    let failing: Vec<&str> = reports.iter().filter(|r| !r.passed(run::GRAD_TOL)).map(|r| r.name.as_str()).collect();
    outcome(
        failing.is_empty() && secs < 120.0,
        format!(
            "{} components, worst {} at {:.2e} (< 1e-4), failing {:?}, {:.1} s (< 120 s)",
            reports.len(),
            worst.name,
            worst.max_rel_err,
            failing,
            secs
        ),
    )
}

fn brute_force(cost: &[f64], n: usize, m: usize) -> f64 {
    fn go(cost: &[f64], n: usize, m: usize, t: usize, acc: f64, used: &mut [bool], best: &mut f64) {
        if t == m {
            *best = best.min(acc);
            return;
        }
        for p in 0..n {
            if !used[p] {
                used[p] = true;
                go(cost, n, m, t + 1, acc + cost[p * m + t], used, best);
                used[p] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, n, m, 0, 0.0, &mut vec![false; n], &mut best);
    best
}

fn hungarian_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let m = rng.random_range(1..=6);
        let n = m + rng.random_range(0..=2);
        let cost: Vec<f64> = (0..n * m).map(|_| rng.random_range(0.0..1.0)).collect();
        let a = hungarian(&cost, n, m).expect("solvable");
        if a.total != brute_force(&cost, n, m) {
            mismatches += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(mismatches == 0 && secs < 10.0, format!("1000 matrices, {mismatches} mismatches, {secs:.2} s (< 10 s)"))
}

fn segment(id: u32, area: usize) -> Segment {
    Segment { id, class: 0, thing: true, score: 1.0, area }
}

fn strip(overlap: usize) -> f64 {
    let mut g = vec![0u32; 40];
    let mut p = vec![0u32; 40];
    g[..10].iter_mut().for_each(|v| *v = 1);
    p[10 - overlap..20 - overlap].iter_mut().for_each(|v| *v = 1);
    let gt = Panoptic { ids: g, segments: vec![segment(1, 10)] };
    let pred = Panoptic { ids: p, segments: vec![segment(1, 10)] };
    panoptic_quality(&pred, &gt).unwrap().pq
}

fn metric_oracles() -> Outcome {
    let d = [Detection { image: 0, class: 0, score: 0.7, index: 0 }];
    let g = [Target { image: 0, class: 0, index: 0 }];
    let ap = average_precision(&d, &g, |_, _| 0.6).unwrap();
    let pq_a = strip(8);
    let pq_b = strip(6);
    let mut acc = IouAccumulator::default();
    acc.add(&[1, 1, 0, 0], &[1, 1, 1, 1]);
    let miou = acc.miou().unwrap();
    let ok = (ap.ap50 - 1.0).abs() < 1e-9
        && (ap.map - 0.3).abs() < 1e-9
        && (pq_a - 2.0 / 3.0).abs() < 1e-9
        && pq_b.abs() < 1e-9
        && (miou - 0.5).abs() < 1e-9;
    outcome(ok, format!("AP50 {} mAP {:.12} PQ(8/12) {:.12} PQ(6/14) {} mIoU {}", ap.ap50, ap.map, pq_a, pq_b, miou))
}

/// 2x2 mask grid with one region covering the left column.
fn boundary_sample() -> AnnotatedSample {
    AnnotatedSample {
        image: Tensor::zeros(&[32, 32, 3]),
        domain: 0,
        queries: vec![Query { text: "left".into(), regions: vec![0] }],
        regions: vec![Region { class: 0, thing: true, bbox: Some([0.25, 0.5, 0.5, 1.0]), mask: Some(vec![true, false, true, false]) }],
        mask_size: (2, 2),
        has_masks: true,
        has_boxes: true,
    }
}

fn equation_fixtures() -> Outcome {
    let mut notes = Vec::new();
    let binary = binarize(&[0.0f64, 1e-3, -1e-3]) == vec![false, true, false];
    notes.push(format!("binary(0)={}", binarize(&[0.0f64])[0]));

    let s = boundary_sample();
    let boxes = Tensor::<f64>::new(&[2, 4], vec![0.5; 8]).unwrap();
    // Row 0 covers the region plus one more pixel (IoU 2/3); row 1 covers the
    // region plus both others (IoU exactly 0.5).
    let logits = Tensor::<f64>::new(&[2, 4], vec![3.0, 3.0, 3.0, -3.0, 3.0, 3.0, 3.0, 3.0]).unwrap();
    let sgt = gt_similarity(&logits, &boxes, &s);
    let strict = sgt == vec![1.0, 0.0];
    notes.push(format!("S_gt(2/3, 1/2)={sgt:?}"));

    let giou = giou_corners([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]);
    let giou_ok = (giou + 5.0 / 63.0).abs() < 1e-12;
    notes.push(format!("GIoU={giou:.6}"));

    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::new(&[4], vec![0.3, -1.0, 2.0, 0.1]).unwrap());
    let f = g.constant(Tensor::new(&[4], vec![1.0, 0.5, -0.2, 0.7]).unwrap());
    let lg = loss_adapt_global(&mut g, v, v, f, f).unwrap();
    let lg = g.value(lg).item();
    notes.push(format!("L_adp-g(same)={lg:e}"));

    let f1 = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let f2 = Tensor::new(&[2, 4], (0..8).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
    let o1 = g.constant(f1.clone());
    let o2 = g.constant(f2.clone());
    let eye = |c: usize| (0..c * c).map(|i| (i / c == i % c) as u8 as f64).collect::<Vec<_>>();
    let ll = loss_adapt_local(&mut g, o1, &eye(3), &f1, o2, &eye(2), &f2).unwrap();
    let ll_equal = g.value(ll).item();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ll_min = f64::INFINITY;
    for _ in 0..200 {
        let o1 = g.constant(Tensor::new(&[2, 4], (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap());
        let o2 = g.constant(Tensor::new(&[3, 4], (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap());
        let a1: Vec<f64> = (0..3).flat_map(|c| [(c % 2) as f64, ((c + 1) % 2) as f64]).collect();
        let a2: Vec<f64> = (0..2).flat_map(|c| (0..3).map(move |j| (j == c) as u8 as f64)).collect();
        let ll = loss_adapt_local(&mut g, o1, &a1, &f1, o2, &a2, &f2).unwrap();
        ll_min = ll_min.min(g.value(ll).item());
    }
    notes.push(format!("L_adp-l(equal)={ll_equal:e} min(random)={ll_min:.4}"));

    let one = |g: &mut Graph<f64>, v: f64| Some(g.input(Tensor::scalar(v)));
    let terms = Terms {
        seg: one(&mut g, 1.0),
        det: one(&mut g, 1.0),
        cls: one(&mut g, 1.0),
        adapt_global: one(&mut g, 0.5),
        adapt_local: one(&mut g, 0.5),
    };
    let (_, b) = total_loss(&mut g, &terms, &LossWeights::default()).unwrap();
    notes.push(format!("total={}", b.total));

    let ok = binary && strict && giou_ok && lg.abs() < 1e-12 && ll_equal.abs() < 1e-12 && ll_min >= 0.0 && b.total == 6.0;
    outcome(ok, notes.join(", "))
}

fn mmda_degeneracy() -> Outcome {
    let cfg = ModelConfig { width: 16, heads: 4, points: 2, levels: 3, encoder_widths: vec![6, 5, 4], ..ModelConfig::tiny() };
    let mut store = ParamStore::new();
    let pd = PixelDecoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let sizes = vec![(2, 2), (4, 4), (8, 8)];
    let queries = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::<f64>::new();
    let p = store.bind(&mut g);
    let levels: Vec<_> = sizes
        .iter()
        .enumerate()
        .map(|(l, &(h, w))| {
            let c = cfg.encoder_widths[cfg.levels - 1 - l];
            g.constant(Tensor::new(&[h * w, c], (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        })
        .collect();
    let lang = g.constant(Tensor::new(&[queries, 16], (0..queries * 16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
    let pooled = pool_queries(&mut g, lang);
    let layout = TokenLayout::new(&cfg, &sizes);
    let mut x = pd.project(&mut g, &p, &cfg, &levels, &sizes).unwrap();
    let (heads, hd, k) = (cfg.heads, cfg.head_dim(), cfg.points);
    let lk = cfg.levels * k;
    let mut gather_err = 0f64;
    let mut sum_err = 0f64;
    for layer in &pd.layers {
        let values = layer.values.forward(&mut g, &p, x).unwrap();
        let (next, att) = layer.forward(&mut g, &p, x, lang, pooled, &layout).unwrap();
        for l in 0..cfg.levels {
            for t in layout.starts[l]..layout.starts[l] + layout.level_len(l) {
                for h in 0..heads {
                    let want = &g.value(values).row(t)[h * hd..(h + 1) * hd];
                    for j in 0..k {
                        let got = g.value(att.sampled).row((t * heads + h) * lk + l * k + j);
                        for (a, b) in got.iter().zip(want) {
                            gather_err = gather_err.max((a - b).abs() / b.abs().max(1.0));
                        }
                    }
                }
            }
        }
        let w = g.value(att.weights);
        for r in 0..w.rows() {
            sum_err = sum_err.max((w.row(r).iter().sum::<f64>() - 1.0).abs());
        }
        x = next;
    }
    outcome(
        gather_err <= 1e-12 && sum_err < 1e-6,
        format!(
            "{} layers at initialization, max relative |sample - gather| {gather_err:.1e} (<= 1e-12), max |sum w - 1| {sum_err:.1e} (< 1e-6) over L*K + C = {}",
            pd.layers.len(),
            lk + queries
        ),
    )
}

fn generated(domain: &str, samples: usize) -> Generated {
    Generated { domain: DomainChoice::Stock(domain.into()), samples, seed: 0 }
}

/// Training loss of `model` on the batch drawn at `step`.
fn batch_loss(model: &Uovn, ds: &Dataset, cfg: &RunConfig, step: usize) -> f64 {
    let idx = batch_indices(&ds.samples, cfg.optim.seed, step).unwrap();
    let batch: Vec<_> = idx.iter().map(|&i| &ds.samples[i]).collect();
    let mut g = Graph::<f32>::new();
    let p = model.store.bind_frozen(&mut g);
    objective(model, &mut g, &p, &batch, &cfg.loss, None).unwrap().breakdown.total
}

fn overfit(dir: &Path) -> (Outcome, Outcome) {
    let cfg = RunConfig::tiny_overfit();
    let ds = run::load_data(&cfg, Path::new(".")).unwrap();
    let t = Instant::now();
    let init = Uovn::new(cfg.model.clone(), cfg.init_seed).unwrap();
    let mut logs = Vec::new();
    let model = run::train(&cfg, &ds, dir, None, |l| logs.push(*l)).expect("training runs");
    let secs = t.elapsed().as_secs_f64();
    // Same batch before and after, so the ratio is not batch noise.
    let before: f64 = (0..8).map(|s| batch_loss(&init, &ds, &cfg, s)).sum();
    let after: f64 = (0..8).map(|s| batch_loss(&model, &ds, &cfg, s)).sum();
    let reduction = 1.0 - after / before;
    let all = run::evaluate(&model, &ds, &[Task::Det, Task::Pan]).unwrap();
    let d1 = Dataset { classes: ds.classes.clone(), samples: ds.samples.iter().filter(|s| s.domain == 1).cloned().collect() };
    let pan = run::evaluate(&model, &d1, &[Task::Pan]).unwrap();
    let ap50 = all.det.as_ref().map_or(0.0, |d| d.ap50);
    let pq = pan.pan.as_ref().map_or(0.0, |p| p.pq);
    let first = logs.first().map_or(f64::NAN, |l| l.loss.total);
    let last = logs.last().map_or(f64::NAN, |l| l.loss.total);
    let six = outcome(
        reduction >= 0.9 && ap50 >= 0.9 && pq >= 0.6 && secs < 600.0,
        format!(
            "loss reduction {:.1}% (>= 90%; logged step 0 {first:.3}, step {} {last:.3}), det AP50 {ap50:.3} (>= 0.9), D1 PQ {pq:.3} (>= 0.6), {secs:.0} s (< 600 s)",
            100.0 * reduction,
            logs.len().saturating_sub(1)
        ),
    );
    let violations = all.partition_violations + pan.partition_violations;
    let nine = outcome(violations == 0, format!("{} evaluated images, {violations} partition violations", all.images + pan.images));
    (six, nine)
}

fn adaptation(dir: &Path) -> Outcome {
    let mut cfg = RunConfig::tiny_overfit();
    cfg.data.generate = vec![generated("d1", 8), generated("d2", 8)];
    let ds = run::load_data(&cfg, Path::new(".")).unwrap();
    let held: Vec<_> = (0..16u64)
        .map(|i| (generate_sample(&DomainSpec::d1(), 1000 + i).unwrap(), generate_sample(&DomainSpec::d2(), 2000 + i).unwrap()))
        .collect();
    let mut gaps = Vec::new();
    for adapt in [0.0, 1.0] {
        let mut c = cfg.clone();
        c.loss.adapt = adapt;
        let model = run::train(&c, &ds, &dir.join(format!("adapt{adapt}")), None, |_| {}).expect("training runs");
        gaps.push(held.iter().map(|(a, b)| adaptation_gap(&model, a, b).unwrap()).sum::<f64>() / held.len() as f64);
    }
    let reduction = 1.0 - gaps[1] / gaps[0];
    outcome(
        reduction >= 0.3,
        format!("held-out gap {:.4} with λ4 = 0, {:.4} with λ4 = 1: {:.1}% reduction (>= 30%)", gaps[0], gaps[1], 100.0 * reduction),
    )
}

fn chunking() -> Outcome {
    let model = Uovn::new(ModelConfig::tiny(), 6).unwrap();
    let s = generate_sample(&DomainSpec::d1(), 0).unwrap();
    let queries: Vec<String> = (0..300).map(|i| format!("A photo of a {} {}", ["red", "blue", "green"][i % 3], i)).collect();
    let thing: Vec<bool> = (0..300).map(|i| i % 4 != 0).collect();
    let a = model.predict(&s.image, &queries, &thing).unwrap();
    let b = model.predict_unchunked(&s.image, &queries, &thing).unwrap();
    let same = [a.sim == b.sim, a.labels == b.labels, a.masks == b.masks, a.boxes == b.boxes];
    outcome(same.iter().all(|&v| v), format!("C = 300 (chunks 256 + 44): S, labels, masks, boxes identical = {same:?}"))
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let (six, nine) = overfit(&dir.path().join("overfit"));
    let results = [
        ("gradient integrity", gradient_integrity()),
        ("hungarian oracle", hungarian_oracle()),
        ("metric oracles", metric_oracles()),
        ("equation fixtures", equation_fixtures()),
        ("mmda degeneracy", mmda_degeneracy()),
        ("overfit run", six),
        ("adaptation efficacy", adaptation(dir.path())),
        ("chunking invariance", chunking()),
        ("panoptic partition", nine),
    ];
    for (i, (name, o)) in results.iter().enumerate() {
        println!("criterion {} {}: {} ({})", i + 1, name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let passed = results.iter().filter(|r| r.1.pass).count();
    println!("acceptance: {passed}/{} criteria pass in {:.0} s", results.len(), start.elapsed().as_secs_f64());
}
