use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uovn::checkpoint;
use uovn::config::{DomainChoice, RunConfig};
use uovn::dataset::{read_dataset, write_dataset};
use uovn::error::{write, Error, Result};
use uovn::netpbm::read_image;
use uovn::run::{self, GRAD_TOL};
use uovn_core::eval::Task;
use uovn_core::synth::generate_dataset;

#[derive(Parser)]
#[command(name = "uovn", version, about = "Open-vocabulary segmentation and detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of det,ins,sem,pan; defaults to the config's list.
        #[arg(long)]
        tasks: Option<String>,
        /// Where to write the JSON report; printed to stdout otherwise.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run one image with free-form queries.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// PPM/PGM image, or a UOVT container with an `image` record.
        #[arg(long)]
        image: PathBuf,
        /// Semicolon-separated queries.
        #[arg(long)]
        queries: String,
        /// Semicolon-separated queries to treat as stuff in the panoptic map.
        #[arg(long, default_value = "")]
        stuff: String,
        #[arg(long, default_value = "infer_out")]
        out: PathBuf,
    },
    /// Check analytic gradients of every kernel and loss against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic dataset.
    GenData {
        /// Stock domain names (d1, d2, d3), comma separated.
        #[arg(long, default_value = "d1,d2,d3")]
        domains: String,
        #[arg(long, default_value_t = 8)]
        per_domain: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_image(path: &Path) -> Result<uovn_core::Tensor<f32>> {
    if path.extension().is_some_and(|e| e == "uovt") {
        let c = uovn::uovt::Container::load(path)?;
        return c.tensor("image").cloned().ok_or_else(|| Error::format(path, "no `image` record"));
    }
    read_image(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, out, resume } => {
            let cfg = RunConfig::load(&config)?;
            let base = config.parent().unwrap_or(Path::new("."));
            let data = run::load_data(&cfg, base)?;
            write(&out.join("config.json"), cfg.to_json().as_bytes())?;
            run::train(&cfg, &data, &out, resume.as_deref(), |l| {
                if l.step % 10 == 0 {
                    eprintln!("step {:>5}  loss {:.4}  |g| {:.3}", l.step, l.loss.total, l.grad_norm);
                }
            })?;
            println!("{}", out.display());
        }
        Cmd::Eval { ckpt, data, tasks, json } => {
            let (model, meta) = checkpoint::load_model(&ckpt)?;
            let tasks = match tasks {
                Some(t) => t
                    .split(',')
                    .map(|s| Task::parse(s.trim()).map_err(|e| Error::Config(e.to_string())))
                    .collect::<Result<Vec<_>>>()?,
                None => meta.config.eval_tasks.clone(),
            };
            let ds = read_dataset(&data)?;
            let report = run::evaluate(&model, &ds, &tasks)?;
            for (t, why) in &report.skipped {
                eprintln!("warning: task {} skipped: {why}", t.name());
            }
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            match json {
                Some(p) => write(&p, text.as_bytes())?,
                None => println!("{text}"),
            }
            print!("{}", run::report_table(&report));
            if report.partition_violations > 0 {
                return Err(Error::Numerical(format!(
                    "{} images violate the panoptic partition",
                    report.partition_violations
                )));
            }
        }
        Cmd::Infer { ckpt, image, queries, stuff, out } => {
            let queries = run::parse_queries(&queries)?;
            let stuff: Vec<String> = if stuff.trim().is_empty() { Vec::new() } else { run::parse_queries(&stuff)? };
            let (model, _) = checkpoint::load_model(&ckpt)?;
            let img = load_image(&image)?;
            let r = run::infer(&model, &img, &queries, &stuff, &out)?;
            for i in &r.instances {
                println!("{:>3}  {:<24}  {:.3}  {:?}", i.index, i.query, i.score, i.bbox);
            }
        }
        Cmd::Gradcheck { seed } => {
            let reports = run::gradcheck(seed, None)?;
            let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0);
            let mut failed = 0;
            for r in &reports {
                let ok = r.passed(GRAD_TOL);
                failed += usize::from(!ok);
                println!(
                    "{:<width$}  {:.3e}  {:>6} coords  {}",
                    r.name,
                    r.max_rel_err,
                    r.coords,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            if failed > 0 {
                return Err(Error::Numerical(format!("{failed} components exceed {GRAD_TOL:e}")));
            }
        }
        Cmd::GenData { domains, per_domain, seed, out } => {
            let specs = domains
                .split(',')
                .map(|d| DomainChoice::Stock(d.trim().to_string()).resolve())
                .collect::<Result<Vec<_>>>()?;
            let ds = generate_dataset(&specs, per_domain, seed)?;
            write_dataset(&out, &ds)?;
            println!("{} samples -> {}", ds.samples.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
