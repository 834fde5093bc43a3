//! The commands behind the binary, as library functions.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uovn_core::data::Dataset;
use uovn_core::encoders::apply_prompt;
use uovn_core::eval::{class_queries, score, EvalReport, Task};
use uovn_core::gradcheck::{kernel_suite, GradReport};
use uovn_core::losscheck::loss_suite;
use uovn_core::model::{Prediction, Uovn};
use uovn_core::synth::generate_dataset;
use uovn_core::train::{batch_indices, train_step, Sgd, StepLog};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::read_dataset;
use crate::error::{write, Error, Result};
use crate::netpbm::{write_mask, write_pgm};

pub const LOSS_LOG: &str = "loss.jsonl";
/// Relative-error ceiling of the gradient check.
pub const GRAD_TOL: f64 = 1e-4;
/// Coordinates probed per parameter tensor by the loss gradient check.
pub const LOSS_CHECK_COORDS: usize = 2;

/// Threads for evaluation: `UOVN_THREADS` if set, else the machine's
/// available parallelism.
pub fn thread_count() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("UOVN_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n,
        _ => avail,
    }
}

/// Every dataset and generated split of the config, merged. Dataset paths
/// are resolved against `base`.
pub fn load_data(cfg: &RunConfig, base: &Path) -> Result<Dataset> {
    let mut parts = Vec::new();
    for p in &cfg.data.datasets {
        parts.push(read_dataset(&base.join(p))?);
    }
    for g in &cfg.data.generate {
        parts.push(generate_dataset(&[g.domain.resolve()?], g.samples, g.seed)?);
    }
    let mut parts = parts.into_iter();
    let mut ds = parts.next().ok_or_else(|| Error::Config("no data".into()))?;
    for p in parts {
        if p.classes != ds.classes {
            return Err(Error::Config("data sources disagree on the class list".into()));
        }
        ds.samples.extend(p.samples);
    }
    Ok(ds)
}

fn checkpoint_dir(out: &Path, step: usize) -> PathBuf {
    out.join(format!("ckpt-{step:06}"))
}

/// One line of `loss.jsonl`. Terms absent from a step are null.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    #[serde(rename = "L_seg")]
    pub seg: Option<f64>,
    #[serde(rename = "L_det")]
    pub det: Option<f64>,
    #[serde(rename = "L_cls")]
    pub cls: Option<f64>,
    #[serde(rename = "L_adp_g")]
    pub adapt_global: Option<f64>,
    #[serde(rename = "L_adp_l")]
    pub adapt_local: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

impl From<&StepLog> for LogLine {
    fn from(l: &StepLog) -> Self {
        Self {
            step: l.step,
            seg: l.loss.seg,
            det: l.loss.det,
            cls: l.loss.cls,
            adapt_global: l.loss.adapt_global,
            adapt_local: l.loss.adapt_local,
            total: l.loss.total,
            grad_norm: l.grad_norm,
        }
    }
}

/// Keep the log lines of steps before `step`.
fn truncate_log(path: &Path, step: usize) -> Result<()> {
    let Ok(f) = File::open(path) else { return Ok(()) };
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let entry: LogLine =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("bad log line: {e}")))?;
        if entry.step >= step {
            break;
        }
        kept.push_str(&line);
        kept.push('\n');
    }
    write(path, kept.as_bytes())
}

/// Train per `cfg`, writing `loss.jsonl` and a checkpoint every
/// `checkpoint_every` steps and at the end into `out`. With `resume`, the
/// model, optimizer and step come from that checkpoint, whose config must
/// equal `cfg`. Returns the trained model.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    out: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Uovn> {
    cfg.validate()?;
    data.validate()?;
    if let Some(most) = data.samples.iter().map(|s| s.regions.len()).max().filter(|&m| m > cfg.model.queries) {
        return Err(Error::Config(format!("{} instance queries cannot cover a sample with {most} regions", cfg.model.queries)));
    }
    let (mut model, mut sgd, start) = match resume {
        Some(dir) => {
            let (m, s, meta) = checkpoint::load(dir)?;
            if meta.config_hash != cfg.hash() {
                return Err(Error::Config(format!("{} was trained with a different config", dir.display())));
            }
            (m, s, meta.step)
        }
        None => {
            let m = Uovn::new(cfg.model.clone(), cfg.init_seed)?;
            let s = Sgd::new(&m.store);
            (m, s, 0)
        }
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOSS_LOG);
    truncate_log(&log_path, start)?;
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    for step in start..cfg.optim.steps {
        let idx = batch_indices(&data.samples, cfg.optim.seed, step)?;
        let batch: Vec<_> = idx.iter().map(|&i| &data.samples[i]).collect();
        let entry = match train_step(&mut model, &mut sgd, &batch, &cfg.loss, &cfg.optim, step) {
            Ok(e) => e,
            Err(uovn_core::Error::NonFinite(msg)) => return Err(Error::Numerical(msg)),
            Err(e) => return Err(e.into()),
        };
        let line = serde_json::to_string(&LogLine::from(&entry)).expect("log entry serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        on_step(&entry);
        let done = step + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.optim.steps {
            checkpoint::save(&checkpoint_dir(out, done), &model, &sgd, done, cfg)?;
        }
    }
    Ok(model)
}

/// Predictions for every sample, spread over [`thread_count`] threads.
pub fn predict_all(model: &Uovn, ds: &Dataset, queries: &[String]) -> Result<Vec<Prediction>> {
    let thing = ds.thing_flags();
    let threads = thread_count().clamp(1, ds.samples.len().max(1));
    let per = ds.samples.len().div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<Prediction>>> = std::thread::scope(|sc| {
        let handles: Vec<_> = ds
            .samples
            .chunks(per)
            .map(|chunk| {
                let thing = &thing;
                sc.spawn(move || {
                    chunk
                        .iter()
                        .map(|s| model.predict(&s.image, queries, thing).map_err(Error::from))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut preds = Vec::with_capacity(ds.samples.len());
    for p in parts {
        preds.extend(p?);
    }
    Ok(preds)
}

/// Evaluate `model` on `ds` with prompted class names as queries.
pub fn evaluate(model: &Uovn, ds: &Dataset, tasks: &[Task]) -> Result<EvalReport> {
    ds.validate()?;
    let queries = class_queries(ds)?;
    let preds = predict_all(model, ds, &queries)?;
    Ok(score(ds, &preds, tasks)?)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.4}", v))
}

/// Aligned text rendering of a report.
pub fn report_table(r: &EvalReport) -> String {
    let mut s = format!("images: {}\n", r.images);
    if let Some(d) = &r.det {
        s += &format!("det  mAP {:.4}  AP50 {:.4}\n", d.map, d.ap50);
    }
    if let Some(d) = &r.ins {
        s += &format!("ins  mAP {:.4}  AP50 {:.4}\n", d.map, d.ap50);
    }
    if let Some(m) = r.miou {
        s += &format!("sem  mIoU {m:.4}\n");
    }
    if let Some(p) = &r.pan {
        s += &format!("pan  PQ {:.4}  SQ {:.4}  RQ {:.4}\n", p.pq, p.sq, p.rq);
    }
    for (t, why) in &r.skipped {
        s += &format!("skipped {}: {why}\n", t.name());
    }
    s += &format!("partition violations: {}\n\n", r.partition_violations);
    let width = r.per_class.iter().map(|c| c.class.len()).max().unwrap_or(5).max(5);
    s += &format!(
        "{:<width$}  {:<5}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}\n",
        "class", "kind", "det AP", "det AP50", "ins AP", "ins AP50", "IoU", "PQ"
    );
    for c in &r.per_class {
        s += &format!(
            "{:<width$}  {:<5}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}\n",
            c.class,
            if c.thing { "thing" } else { "stuff" },
            fmt_opt(c.det_ap),
            fmt_opt(c.det_ap50),
            fmt_opt(c.ins_ap),
            fmt_opt(c.ins_ap50),
            fmt_opt(c.iou),
            fmt_opt(c.pq)
        );
    }
    s
}

/// Split a semicolon-separated query list, dropping blank entries.
pub fn parse_queries(s: &str) -> Result<Vec<String>> {
    let q: Vec<String> = s.split(';').map(str::trim).filter(|q| !q.is_empty()).map(String::from).collect();
    if q.is_empty() {
        return Err(Error::Config("query list is empty".into()));
    }
    Ok(q)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferInstance {
    pub index: usize,
    pub query: String,
    pub score: f64,
    /// `(cx, cy, w, h)`, normalized.
    pub bbox: [f32; 4],
    pub mask: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferOutput {
    pub queries: Vec<String>,
    pub mask_size: [usize; 2],
    pub instances: Vec<InferInstance>,
    pub panoptic: String,
    pub segments: Vec<uovn_core::heads::Segment>,
}

/// Run the model on one image and write `predictions.json`, one PGM per
/// detected instance and `panoptic.pgm` into `out`. Queries named in
/// `stuff` merge per query in the panoptic map; all others are things.
pub fn infer(model: &Uovn, image: &uovn_core::Tensor<f32>, queries: &[String], stuff: &[String], out: &Path) -> Result<InferOutput> {
    let prompted = queries.iter().map(|q| apply_prompt(q)).collect::<uovn_core::Result<Vec<_>>>()?;
    let thing: Vec<bool> = queries.iter().map(|q| !stuff.contains(q)).collect();
    let pred = model.predict(image, &prompted, &thing)?;
    let (h, w) = pred.mask_size;
    let mut instances = Vec::new();
    for (n, l) in pred.labels.iter().enumerate().filter(|(_, l)| l.is_object) {
        let name = format!("mask_{n:03}.pgm");
        write_mask(&out.join(&name), w, h, &pred.masks[n])?;
        instances.push(InferInstance {
            index: n,
            query: queries[l.class].clone(),
            score: l.score,
            bbox: pred.boxes[n],
            mask: name,
        });
    }
    let ids: Vec<u16> = pred
        .panoptic
        .ids
        .iter()
        .map(|&i| u16::try_from(i).map_err(|_| Error::Numerical("more than 65535 segments".into())))
        .collect::<Result<_>>()?;
    write_pgm(&out.join("panoptic.pgm"), w, h, &ids)?;
    let result = InferOutput {
        queries: queries.to_vec(),
        mask_size: [h, w],
        instances,
        panoptic: "panoptic.pgm".into(),
        segments: pred.panoptic.segments.clone(),
    };
    write(&out.join("predictions.json"), serde_json::to_string_pretty(&result).expect("serializes").as_bytes())?;
    Ok(result)
}

/// Kernel and loss gradient checks. `corrupt` names a component whose
/// gradient is deliberately scaled, to exercise the failure path.
pub fn gradcheck(seed: u64, corrupt: Option<&str>) -> Result<Vec<GradReport>> {
    let mut r = kernel_suite(seed, corrupt)?;
    r.extend(loss_suite(seed, corrupt, LOSS_CHECK_COORDS)?);
    Ok(r)
}
