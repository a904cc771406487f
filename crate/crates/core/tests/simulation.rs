use std::sync::OnceLock;

use tierkv_core::chunks::CacheConfig;
use tierkv_core::engine::{Policy, Request};
use tierkv_core::sim::{run, Capacity, SimConfig};
use tierkv_core::workload::{gen_corpus, gen_requests, Corpus, Workload};

fn desk() -> &'static (Corpus, Workload, Vec<Request>) {
    static DESK: OnceLock<(Corpus, Workload, Vec<Request>)> = OnceLock::new();
    DESK.get_or_init(|| {
        let spec = SimConfig::default().workload;
        let corpus = gen_corpus(&spec).unwrap();
        let w = gen_requests(&corpus, &spec);
        let reqs = w.to_requests(&corpus, &CacheConfig::default()).unwrap();
        (corpus, w, reqs)
    })
}

#[test]
fn every_policy_reports_sane_aggregates() {
    let reqs = &desk().2;
    for policy in Policy::ALL {
        let cfg = SimConfig {
            policy,
            ..Default::default()
        };
        let r = run(&cfg, reqs).unwrap().report;
        assert_eq!(r.n_requests, reqs.len());
        for s in [&r.ttft, &r.e2el] {
            assert!(s.p50 <= s.p75 && s.p75 <= s.p90 && s.p90 <= s.p95 && s.p95 <= s.p99);
        }
        assert!((0.0..=1.0).contains(&r.dram_hit_ratio));
        assert!((0.0..=1.0).contains(&r.ssd_hit_ratio));
        assert!(r.dram_hit_ratio + r.ssd_hit_ratio <= 1.0);
        assert!((0.0..=1.0).contains(&r.prefetch.success_ratio));
        if !policy.uses_ssd() {
            assert_eq!(r.ssd_hit_ratio, 0.0);
        }
        if policy == Policy::Recompute {
            assert!(r
                .requests
                .iter()
                .all(|x| x.bytes_cpu_to_gpu + x.bytes_ssd_to_gpu + x.bytes_gpu_to_cpu == 0));
        }
    }
}

#[test]
fn dram_holding_the_working_set_beats_recompute() {
    let reqs = &desk().2;
    let mean = |policy| {
        let cfg = SimConfig {
            policy,
            request_rate: 0.5,
            dram_capacity: Capacity::WorkingSetFraction {
                working_set_fraction: 1.0,
            },
            ..Default::default()
        };
        run(&cfg, reqs).unwrap().report.ttft.mean
    };
    assert!(mean(Policy::CCache) <= mean(Policy::Recompute));
}

#[test]
fn light_load_queueing_stays_under_one_step() {
    let cfg = SimConfig {
        request_rate: 0.1,
        ..Default::default()
    };
    let out = run(&cfg, &desk().2).unwrap();
    let mut steps: Vec<f64> = out.steps.iter().map(|s| s.ssd_wait_s + s.makespan_s).collect();
    steps.sort_by(f64::total_cmp);
    let p99_step = steps[(steps.len() * 99).div_ceil(100) - 1];
    assert!(
        out.report.queue.p99 < p99_step,
        "p99 queue {} vs p99 step {p99_step}",
        out.report.queue.p99
    );
}

#[test]
fn trace_files_reproduce_the_in_memory_run() {
    let (corpus, w, reqs) = desk();
    let (mut cbuf, mut wbuf) = (Vec::new(), Vec::new());
    corpus.write_jsonl(&mut cbuf).unwrap();
    w.write_jsonl(&mut wbuf).unwrap();
    let corpus2 = Corpus::read_jsonl(&cbuf[..]).unwrap();
    let w2 = Workload::read_jsonl(&wbuf[..]).unwrap();
    let reqs2 = w2.to_requests(&corpus2, &CacheConfig::default()).unwrap();
    assert_eq!(&reqs2, reqs);
    let cfg = SimConfig::default();
    assert_eq!(run(&cfg, reqs).unwrap(), run(&cfg, &reqs2).unwrap());
}

#[test]
fn step_trace_lines_carry_plan_sizes() {
    let cfg = SimConfig::default();
    let out = run(&cfg, &desk().2[..50]).unwrap();
    let mut buf = Vec::new();
    out.write_steps_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), out.steps.len());
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for field in [
        "step",
        "admitted",
        "cpu_to_gpu_bytes",
        "ssd_to_gpu_bytes",
        "gpu_to_cpu_bytes",
        "makespan_s",
        "mode",
    ] {
        assert!(first.get(field).is_some(), "missing {field}");
    }
    assert_eq!(first["mode"], "FULL_OVERLAP");
}
