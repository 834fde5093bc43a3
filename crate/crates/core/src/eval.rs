//! Dataset evaluation with class names as queries.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedSample, Dataset};
use crate::encoders::apply_prompt;
use crate::error::{input_err, Result};
use crate::heads::Panoptic;
use crate::metrics::{average_precision, box_iou, mask_iou, ApReport, Detection, IouAccumulator, PqAccumulator, Target};
use crate::model::{Prediction, Uovn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Det,
    Ins,
    Sem,
    Pan,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Det, Task::Ins, Task::Sem, Task::Pan];

    pub fn name(self) -> &'static str {
        match self {
            Task::Det => "det",
            Task::Ins => "ins",
            Task::Sem => "sem",
            Task::Pan => "pan",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| input_err!("unknown task {s:?}"))
    }

    fn supported_by(self, s: &AnnotatedSample) -> bool {
        match self {
            Task::Det => s.has_boxes,
            _ => s.has_masks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    pub thing: bool,
    pub det_ap: Option<f64>,
    pub det_ap50: Option<f64>,
    pub ins_ap: Option<f64>,
    pub ins_ap50: Option<f64>,
    pub iou: Option<f64>,
    pub pq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub det: Option<ApReport>,
    pub ins: Option<ApReport>,
    pub miou: Option<f64>,
    pub pan: Option<PanReport>,
    pub per_class: Vec<ClassRow>,
    /// Tasks requested but not evaluated, with the reason.
    pub skipped: Vec<(Task, String)>,
    /// Images whose panoptic output was not a partition of the pixels.
    pub partition_violations: usize,
}

/// Prompted class-name queries in class order.
pub fn class_queries(ds: &Dataset) -> Result<Vec<String>> {
    ds.classes.iter().map(|c| apply_prompt(&c.name)).collect()
}

/// Score every image with the model's predictions.
pub fn evaluate(model: &Uovn, ds: &Dataset, tasks: &[Task]) -> Result<EvalReport> {
    let queries = class_queries(ds)?;
    let thing = ds.thing_flags();
    let preds = ds
        .samples
        .iter()
        .map(|s| model.predict(&s.image, &queries, &thing))
        .collect::<Result<Vec<_>>>()?;
    score(ds, &preds, tasks)
}

fn instance_lists(ds: &Dataset, preds: &[Prediction], task: Task) -> (Vec<Detection>, Vec<Target>) {
    let thing = ds.thing_flags();
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (i, (s, p)) in ds.samples.iter().zip(preds).enumerate() {
        if !task.supported_by(s) {
            continue;
        }
        for (k, r) in s.regions.iter().enumerate().filter(|(_, r)| r.thing) {
            gts.push(Target { image: i, class: r.class, index: k });
        }
        for (n, l) in p.labels.iter().enumerate() {
            if thing.get(l.class).copied().unwrap_or(false) {
                dets.push(Detection { image: i, class: l.class, score: l.score, index: n });
            }
        }
    }
    (dets, gts)
}

/// Metrics for given predictions, one per sample of `ds`.
pub fn score(ds: &Dataset, preds: &[Prediction], tasks: &[Task]) -> Result<EvalReport> {
    if preds.len() != ds.samples.len() {
        return Err(input_err!("{} predictions for {} samples", preds.len(), ds.samples.len()));
    }
    let mut report = EvalReport {
        images: ds.samples.len(),
        det: None,
        ins: None,
        miou: None,
        pan: None,
        per_class: ds
            .classes
            .iter()
            .map(|c| ClassRow {
                class: c.name.clone(),
                thing: c.thing,
                det_ap: None,
                det_ap50: None,
                ins_ap: None,
                ins_ap50: None,
                iou: None,
                pq: None,
            })
            .collect(),
        skipped: Vec::new(),
        partition_violations: preds.iter().filter(|p| !p.panoptic.is_partition()).count(),
    };
    let mut tasks = tasks.to_vec();
    tasks.sort();
    tasks.dedup();
    for task in tasks {
        if !ds.samples.iter().any(|s| task.supported_by(s)) {
            let need = if task == Task::Det { "boxes" } else { "masks" };
            report.skipped.push((task, alloc::format!("no sample carries {need}")));
            continue;
        }
        match task {
            Task::Det | Task::Ins => {
                let (dets, gts) = instance_lists(ds, preds, task);
                let ap = if task == Task::Det {
                    average_precision(&dets, &gts, |d, t| {
                        let gt = ds.samples[t.image].regions[t.index].bbox.expect("boxes");
                        box_iou(preds[d.image].boxes[d.index], gt)
                    })
                } else {
                    average_precision(&dets, &gts, |d, t| {
                        let gt = ds.samples[t.image].regions[t.index].mask.as_ref().expect("masks");
                        mask_iou(&preds[d.image].masks[d.index], gt)
                    })
                };
                let Some(ap) = ap else {
                    report.skipped.push((task, "no thing instances annotated".into()));
                    continue;
                };
                for &(c, all, at50) in &ap.per_class {
                    let row = &mut report.per_class[c];
                    if task == Task::Det {
                        (row.det_ap, row.det_ap50) = (Some(all), Some(at50));
                    } else {
                        (row.ins_ap, row.ins_ap50) = (Some(all), Some(at50));
                    }
                }
                if task == Task::Det {
                    report.det = Some(ap);
                } else {
                    report.ins = Some(ap);
                }
            }
            Task::Sem => {
                let mut acc = IouAccumulator::default();
                for (s, p) in ds.samples.iter().zip(preds).filter(|(s, _)| s.has_masks) {
                    acc.add(&p.semantic, &s.semantic().expect("masks"));
                }
                for (c, iou) in acc.per_class() {
                    if let Some(row) = c.checked_sub(1).and_then(|c| report.per_class.get_mut(c)) {
                        row.iou = Some(iou);
                    }
                }
                report.miou = acc.miou();
            }
            Task::Pan => {
                let mut acc = PqAccumulator::default();
                for (s, p) in ds.samples.iter().zip(preds).filter(|(s, _)| s.has_masks) {
                    acc.add(&p.panoptic, &s.panoptic().expect("masks"));
                }
                for (&c, counts) in &acc.classes {
                    if let Some(row) = report.per_class.get_mut(c) {
                        row.pq = Some(counts.pq());
                    }
                }
                report.pan = acc.summary().map(|s| PanReport { pq: s.pq, sq: s.sq, rq: s.rq });
            }
        }
    }
    Ok(report)
}

/// A prediction that reproduces the ground truth of `s`, for checking the
/// evaluation path end to end.
pub fn oracle_prediction(s: &AnnotatedSample, classes: usize) -> Prediction {
    use crate::heads::{Label, Segment};
    let pixels = s.mask_pixels();
    let masks: Vec<Vec<bool>> =
        s.regions.iter().map(|r| r.mask.clone().unwrap_or_else(|| alloc::vec![false; pixels])).collect();
    let labels: Vec<Label> = s.regions.iter().map(|r| Label { class: r.class, score: 1.0, is_object: true }).collect();
    let panoptic = s.panoptic().unwrap_or_else(|| Panoptic {
        ids: alloc::vec![0; pixels],
        segments: Vec::<Segment>::new(),
    });
    Prediction {
        mask_size: s.mask_size,
        mask_logits: masks.iter().map(|m| m.iter().map(|&v| if v { 10.0 } else { -10.0 }).collect()).collect(),
        boxes: s.regions.iter().map(|r| r.bbox.unwrap_or([0.5; 4])).collect(),
        sim: labels
            .iter()
            .map(|l| (0..classes).map(|c| if c == l.class { 10.0 } else { -10.0 }).collect())
            .collect(),
        semantic: s.semantic().unwrap_or_else(|| alloc::vec![0; pixels]),
        masks,
        labels,
        panoptic,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, DomainSpec};

    #[test]
    fn ground_truth_scores_perfectly() {
        let ds = generate_dataset(&[DomainSpec::d1(), DomainSpec::d2()], 4, 3).unwrap();
        let preds: Vec<_> = ds.samples.iter().map(|s| oracle_prediction(s, ds.classes.len())).collect();
        let r = score(&ds, &preds, &Task::ALL).unwrap();
        let det = r.det.unwrap();
        let ins = r.ins.unwrap();
        assert_eq!((det.map, det.ap50, ins.map, ins.ap50), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.miou, Some(1.0));
        assert_eq!(r.pan.unwrap().pq, 1.0);
        assert_eq!(r.partition_violations, 0);
        assert!(r.skipped.is_empty());
        assert_eq!(r.per_class.len(), ds.classes.len());
        assert!(r.per_class.iter().any(|c| c.pq == Some(1.0)));
    }

    #[test]
    fn boxes_only_data_skips_mask_tasks() {
        let ds = generate_dataset(&[DomainSpec::d3()], 2, 0).unwrap();
        let preds: Vec<_> = ds.samples.iter().map(|s| oracle_prediction(s, ds.classes.len())).collect();
        let r = score(&ds, &preds, &[Task::Ins, Task::Det]).unwrap();
        assert!(r.ins.is_none());
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.skipped[0].0, Task::Ins);
        assert_eq!(r.det.unwrap().ap50, 1.0);
    }

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(Task::parse(t.name()).unwrap(), t);
        }
        assert!(Task::parse("depth").is_err());
    }

    #[test]
    fn model_evaluation_runs_and_partitions() {
        let cfg = crate::config::ModelConfig { queries: 6, ..crate::config::ModelConfig::tiny() };
        let model = Uovn::new(cfg, 1).unwrap();
        let mut d1 = DomainSpec::d1();
        d1.image_size = 32;
        let ds = generate_dataset(&[d1], 2, 0).unwrap();
        let r = evaluate(&model, &ds, &Task::ALL).unwrap();
        assert_eq!(r.partition_violations, 0);
        assert!(r.det.is_some() && r.pan.is_some());
    }
}
