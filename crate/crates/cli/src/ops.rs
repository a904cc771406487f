use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use tierkv_core::conformance;
use tierkv_core::engine::Request;
use tierkv_core::report::{read_combined_csv, render_breakdown, render_policy_table, write_combined_csv, ReportError};
use tierkv_core::sim::{self, SimConfig, SimOutput};
use tierkv_core::workload::{gen_corpus, gen_requests, measure_repetition, Corpus, Workload};

use crate::{GenArgs, ReportArgs, RunArgs, ScenarioArgs, SweepArgs};

fn load_config(path: Option<&Path>) -> Result<SimConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            SimConfig::from_json(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => SimConfig::default(),
    };
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn generate(cfg: &SimConfig) -> Result<(Corpus, Workload)> {
    let corpus = gen_corpus(&cfg.workload).context("generating corpus")?;
    let workload = gen_requests(&corpus, &cfg.workload);
    Ok((corpus, workload))
}

fn load_workload(dir: &Path) -> Result<(Corpus, Workload)> {
    let corpus = Corpus::read_jsonl(open(&dir.join("corpus.jsonl"))?).context("reading corpus.jsonl")?;
    let workload = Workload::read_jsonl(open(&dir.join("workload.jsonl"))?).context("reading workload.jsonl")?;
    Ok((corpus, workload))
}

fn requests(cfg: &SimConfig, dir: Option<&Path>) -> Result<Vec<Request>> {
    let (corpus, workload) = match dir {
        Some(d) => load_workload(d)?,
        None => generate(cfg)?,
    };
    Ok(workload.to_requests(&corpus, &cfg.cache)?)
}

pub fn gen_workload(a: GenArgs) -> Result<()> {
    let mut cfg = load_config(a.config.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.workload.seed = s;
    }
    if let Some(n) = a.n_requests {
        cfg.workload.n_requests = n;
    }
    if let Some(r) = a.repetition {
        cfg.workload.target_repetition_ratio = r;
    }
    let (corpus, workload) = generate(&cfg)?;
    fs::create_dir_all(&a.out)?;
    corpus.write_jsonl(create(&a.out.join("corpus.jsonl"))?)?;
    workload.write_jsonl(create(&a.out.join("workload.jsonl"))?)?;
    if !workload.is_empty() {
        let rep = measure_repetition(&workload, &corpus, &cfg.cache)?;
        let mean = workload.mean_input_tokens(&corpus)?;
        println!(
            "{} requests, {} docs, repetition {:.4}, mean input {:.0} tokens",
            workload.len(),
            corpus.docs.len(),
            rep,
            mean
        );
    }
    Ok(())
}

fn write_run(out: &SimOutput, dir: &Path, full: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = create(&dir.join("report.json"))?;
    out.report.write_json(&mut w)?;
    writeln!(w)?;
    w.flush()?;
    out.report.write_requests_csv(create(&dir.join("requests.csv"))?)?;
    if full {
        let mut w = create(&dir.join("steps.jsonl"))?;
        out.write_steps_jsonl(&mut w)?;
        w.flush()?;
        out.write_prefetch_log_csv(create(&dir.join("prefetch_log.csv"))?)?;
    }
    Ok(())
}

pub fn run(a: RunArgs) -> Result<()> {
    let mut cfg = load_config(a.config.config.as_deref())?;
    if let Some(r) = a.rate {
        cfg.request_rate = r;
    }
    if let Some(p) = a.policy {
        cfg.policy = p;
    }
    if let Some(w) = a.window {
        cfg.engine.prefetch.window = w;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.workload.seed = s;
    }
    cfg.validate()?;
    let reqs = requests(&cfg, a.workload.as_deref())?;
    let out = sim::run(&cfg, &reqs)?;
    write_run(&out, &a.out, true)?;
    let r = &out.report;
    println!(
        "{} rate {} window {}: mean TTFT {:.3} s, p99 {:.3} s, DRAM hit {:.3}, SSD hit {:.3}",
        r.policy, r.request_rate, r.window, r.ttft.mean, r.ttft.p99, r.dram_hit_ratio, r.ssd_hit_ratio
    );
    Ok(())
}

fn or_default<T>(v: Vec<T>, d: T) -> Vec<T> {
    if v.is_empty() {
        vec![d]
    } else {
        v
    }
}

#[derive(Debug, Clone)]
struct Cell {
    cfg: SimConfig,
    dir: PathBuf,
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let base = load_config(a.config.config.as_deref())?;
    let policies = or_default(a.policy, base.policy);
    let rates = or_default(a.rate, base.request_rate);
    let windows = or_default(a.window, base.engine.prefetch.window);
    let seeds = or_default(a.seed, base.seed);

    let mut cells = Vec::new();
    for &seed in &seeds {
        for &policy in &policies {
            for &rate in &rates {
                for &window in &windows {
                    let mut cfg = base.clone();
                    cfg.seed = seed;
                    cfg.workload.seed = seed;
                    cfg.policy = policy;
                    cfg.request_rate = rate;
                    cfg.engine.prefetch.window = window;
                    cfg.validate()?;
                    let dir = a.out.join(format!("{policy}-rate{rate}-win{window}-seed{seed}"));
                    cells.push(Cell { cfg, dir });
                }
            }
        }
    }

    let mut traces = Vec::new();
    for &seed in &seeds {
        let mut cfg = base.clone();
        cfg.workload.seed = seed;
        traces.push((seed, requests(&cfg, a.workload.as_deref())?));
    }

    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.jobs).build()?;
    let rows = pool.install(|| {
        cells
            .par_iter()
            .map(|c| -> Result<_> {
                let reqs = &traces.iter().find(|(s, _)| *s == c.cfg.seed).expect("trace per seed").1;
                let out = sim::run(&c.cfg, reqs)?;
                write_run(&out, &c.dir, false)?;
                Ok(out.report.sweep_row())
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let combined = a.out.join("combined.csv");
    write_combined_csv(&rows, create(&combined)?)?;
    println!("{} cells -> {}", rows.len(), combined.display());
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let rows = read_combined_csv(open(&a.csv)?)?;
    let table = match render_policy_table(&rows) {
        Err(ReportError::NoRuns) => bail!("no runs found in {}", a.csv.display()),
        other => other?,
    };
    println!("Mean / P95 / P99 TTFT\n\n{table}");
    match render_breakdown(&rows) {
        Ok(b) => println!("\nBreakdown (reduction vs base)\n\n{b}"),
        Err(ReportError::NoRuns) => {}
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

pub fn scenario(a: ScenarioArgs) -> Result<()> {
    let dir = a.dir.unwrap_or_else(conformance::default_dir);
    let names = if a.names.is_empty() {
        conformance::registered(&dir)?
    } else {
        a.names
    };
    let mut failed = 0;
    for n in &names {
        let v = conformance::scenario(&dir, n)?;
        print!("{}", v.render());
        failed += usize::from(!v.passed());
    }
    if failed > 0 {
        bail!("{failed} of {} scenarios failed", names.len());
    }
    Ok(())
}
