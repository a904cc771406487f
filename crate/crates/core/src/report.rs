//! Percentiles, latency summaries, the combined sweep CSV and its text tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Policy;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no samples")]
    EmptySamples,
    #[error("percentile {0} outside (0, 100]")]
    BadPercentile(f64),
    #[error("no runs found")]
    NoRuns,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Nearest-rank percentile: the sorted sample at 1-based rank `ceil(p/100·n)`.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64, ReportError> {
    if samples.is_empty() {
        return Err(ReportError::EmptySamples);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(ReportError::BadPercentile(p));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, p))
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let x = p * n as f64 / 100.0;
    // snap values a rounding error away from an integer rank
    let rank = if (x - x.round()).abs() <= 1e-9 * x.max(1.0) {
        x.round()
    } else {
        x.ceil()
    } as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean: f64,
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
}

impl LatencySummary {
    pub fn from_samples(samples: &[f64]) -> Result<Self, ReportError> {
        if samples.is_empty() {
            return Err(ReportError::EmptySamples);
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let p = |q| percentile_sorted(&sorted, q);
        Ok(Self {
            mean: samples.iter().sum::<f64>() / samples.len() as f64,
            p50: p(50.0),
            p75: p(75.0),
            p90: p(90.0),
            p95: p(95.0),
            p99: p(99.0),
        })
    }
}

/// One cell of a sweep, as written to the combined CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: Policy,
    pub rate: f64,
    pub window: usize,
    pub seed: u64,
    pub mean_ttft_s: f64,
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
    pub mean_e2el_s: f64,
    pub p99_e2el_s: f64,
    pub dram_hit: f64,
    pub ssd_hit: f64,
    pub prefetch_success: f64,
}

pub fn write_combined_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<(), ReportError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_combined_csv<R: Read>(r: R) -> Result<Vec<SweepRow>, ReportError> {
    let mut rd = csv::Reader::from_reader(r);
    let rows = rd.deserialize().collect::<Result<Vec<SweepRow>, _>>()?;
    Ok(rows)
}

/// `(base − variant) / base`.
pub fn reduction(base: f64, variant: f64) -> f64 {
    (base - variant) / base
}

fn rate_label(rate: f64) -> String {
    format!("{rate}")
}

/// Policy rows by rate columns; each cell shows mean / P95 / P99 TTFT in seconds.
/// Rows sharing a policy and rate are averaged over windows and seeds.
pub fn render_policy_table(rows: &[SweepRow]) -> Result<String, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::NoRuns);
    }
    let rates: BTreeSet<u64> = rows.iter().map(|r| r.rate.to_bits()).collect();
    let mut rates: Vec<f64> = rates.into_iter().map(f64::from_bits).collect();
    rates.sort_by(f64::total_cmp);
    let policies: BTreeSet<Policy> = rows.iter().map(|r| r.policy).collect();

    let mut cells: BTreeMap<(Policy, u64), (f64, f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let c = cells.entry((r.policy, r.rate.to_bits())).or_default();
        c.0 += r.mean_ttft_s;
        c.1 += r.p95;
        c.2 += r.p99;
        c.3 += 1;
    }

    let mut header = vec!["policy".to_string()];
    header.extend(
        rates
            .iter()
            .map(|r| format!("rate {} (mean/p95/p99 s)", rate_label(*r))),
    );
    let mut table = vec![header];
    for p in &policies {
        let mut line = vec![p.to_string()];
        for rate in &rates {
            line.push(match cells.get(&(*p, rate.to_bits())) {
                Some(&(m, p95, p99, n)) => {
                    let k = n as f64;
                    format!("{:.3} / {:.3} / {:.3}", m / k, p95 / k, p99 / k)
                }
                None => "-".to_string(),
            });
        }
        table.push(line);
    }
    Ok(align(&table))
}

/// Breakdown rows (base, +overlap, +prefetch) with mean TTFT and the
/// reduction of each variant against base at the same rate.
pub fn render_breakdown(rows: &[SweepRow]) -> Result<String, ReportError> {
    let entries = breakdown(rows);
    if entries.is_empty() {
        return Err(ReportError::NoRuns);
    }
    let mut table = vec![vec![
        "rate".to_string(),
        "variant".to_string(),
        "mean ttft (s)".to_string(),
        "reduction".to_string(),
    ]];
    for e in entries {
        table.push(vec![
            rate_label(e.rate),
            e.label.to_string(),
            format!("{:.3}", e.mean_ttft_s),
            match e.reduction {
                Some(x) => format!("{:.2}%", 100.0 * x),
                None => "-".to_string(),
            },
        ]);
    }
    Ok(align(&table))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BreakdownEntry {
    pub rate: f64,
    pub label: &'static str,
    pub mean_ttft_s: f64,
    /// Against base at the same rate, when base was run.
    pub reduction: Option<f64>,
}

/// Mean TTFT of each breakdown policy per rate, averaged over windows and seeds.
pub fn breakdown(rows: &[SweepRow]) -> Vec<BreakdownEntry> {
    let mut acc: BTreeMap<(u64, Policy), (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.policy.breakdown_label().is_some()) {
        let e = acc.entry((r.rate.to_bits(), r.policy)).or_default();
        e.0 += r.mean_ttft_s;
        e.1 += 1;
    }
    let mut by_rate: BTreeMap<u64, Vec<(Policy, f64)>> = BTreeMap::new();
    for ((rate, p), (sum, n)) in acc {
        by_rate.entry(rate).or_default().push((p, sum / n as f64));
    }
    let mut rates: Vec<u64> = by_rate.keys().copied().collect();
    rates.sort_by(|a, b| f64::from_bits(*a).total_cmp(&f64::from_bits(*b)));
    let order = [Policy::SCCache, Policy::PcrNoPrefetch, Policy::Pcr];
    let mut out = Vec::new();
    for rate in rates {
        let cells = &by_rate[&rate];
        let base = cells.iter().find(|(p, _)| *p == Policy::SCCache).map(|c| c.1);
        for p in order {
            if let Some(&(_, mean)) = cells.iter().find(|(q, _)| *q == p) {
                out.push(BreakdownEntry {
                    rate: f64::from_bits(rate),
                    label: p.breakdown_label().unwrap_or(""),
                    mean_ttft_s: mean,
                    reduction: match (p, base) {
                        (Policy::SCCache, _) | (_, None) => None,
                        (_, Some(b)) => Some(reduction(b, mean)),
                    },
                });
            }
        }
    }
    out
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Oracle: sort, then walk ranks until the first covering p percent.
    fn oracle(samples: &[f64], p: f64) -> f64 {
        let mut s = samples.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len();
        for (i, v) in s.iter().enumerate() {
            // smallest rank k with k/n ≥ p/100
            if (i + 1) as f64 * 100.0 >= p * n as f64 - 1e-9 * n as f64 {
                return *v;
            }
        }
        s[n - 1]
    }

    #[test]
    fn nearest_rank_cases() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0).unwrap(), 2.0);
        assert_eq!(percentile(&[4.0, 3.0, 2.0, 1.0], 75.0).unwrap(), 3.0);
        assert_eq!(percentile(&[4.0, 3.0, 2.0, 1.0], 100.0).unwrap(), 4.0);
        for p in [0.1, 50.0, 99.0, 100.0] {
            assert_eq!(percentile(&[7.0], p).unwrap(), 7.0);
        }
        assert!(matches!(percentile(&[], 50.0), Err(ReportError::EmptySamples)));
        assert!(matches!(percentile(&[1.0], 0.0), Err(ReportError::BadPercentile(_))));
        assert!(matches!(percentile(&[1.0], 101.0), Err(ReportError::BadPercentile(_))));
    }

    #[test]
    fn thousand_random_samples_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..100.0)).collect();
        for p in [1.0, 10.0, 25.0, 50.0, 75.0, 90.0, 95.0, 99.0, 99.9, 100.0] {
            assert_eq!(percentile(&samples, p).unwrap(), oracle(&samples, p));
        }
    }

    fn row(policy: Policy, rate: f64, mean: f64) -> SweepRow {
        SweepRow {
            policy,
            rate,
            window: 4,
            seed: 1,
            mean_ttft_s: mean,
            p50: mean,
            p75: mean,
            p90: mean,
            p95: mean,
            p99: mean,
            mean_e2el_s: mean,
            p99_e2el_s: mean,
            dram_hit: 0.1,
            ssd_hit: 0.2,
            prefetch_success: 0.5,
        }
    }

    #[test]
    fn breakdown_reductions() {
        let rows = vec![
            row(Policy::SCCache, 0.5, 2.0),
            row(Policy::PcrNoPrefetch, 0.5, 1.5),
            row(Policy::Pcr, 0.5, 1.0),
            row(Policy::SCCache, 1.0, 4.0),
            row(Policy::Pcr, 1.0, 1.0),
        ];
        let b = breakdown(&rows);
        assert_eq!(b.len(), 5);
        assert_eq!(b[1].reduction, Some(0.25));
        assert_eq!(b[2].reduction, Some(0.5));
        assert_eq!(b[4].reduction, Some(0.75));
        let text = render_breakdown(&rows).unwrap();
        assert!(text.contains("+prefetch"));
        assert!(text.contains("75.00%"));
    }

    #[test]
    fn csv_round_trip_and_tables() {
        let rows = vec![row(Policy::Pcr, 0.5, 1.25), row(Policy::SCCache, 1.0, 2.5)];
        let mut buf = Vec::new();
        write_combined_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "policy,rate,window,seed,mean_ttft_s,p50,p75,p90,p95,p99,mean_e2el_s,p99_e2el_s,dram_hit,ssd_hit,prefetch_success\n"
        ));
        assert!(text.contains("\nPCR,0.5,"));
        assert_eq!(read_combined_csv(&buf[..]).unwrap(), rows);
        let table = render_policy_table(&rows).unwrap();
        assert!(table.contains("1.250 / 1.250 / 1.250"));
        assert!(table.lines().nth(2).unwrap().starts_with("SCCACHE "));
        assert!(table.lines().nth(3).unwrap().starts_with("PCR "));
    }

    #[test]
    fn empty_input_has_no_runs() {
        assert!(matches!(render_policy_table(&[]), Err(ReportError::NoRuns)));
        assert!(matches!(render_breakdown(&[]), Err(ReportError::NoRuns)));
        let header_only = b"policy,rate,window,seed,mean_ttft_s,p50,p75,p90,p95,p99,mean_e2el_s,p99_e2el_s,dram_hit,ssd_hit,prefetch_success\n";
        assert!(read_combined_csv(&header_only[..]).unwrap().is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn percentile_matches_oracle(samples in prop::collection::vec(-1e6f64..1e6, 1..300), p in 0.01f64..=100.0) {
            prop_assert_eq!(percentile(&samples, p).unwrap(), oracle(&samples, p));
        }

        #[test]
        fn percentiles_are_monotone(samples in prop::collection::vec(0.0f64..1e3, 1..300), a in 0.01f64..=100.0, b in 0.01f64..=100.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(percentile(&samples, lo).unwrap() <= percentile(&samples, hi).unwrap());
            let s = LatencySummary::from_samples(&samples).unwrap();
            prop_assert!(s.p50 <= s.p75 && s.p75 <= s.p90 && s.p90 <= s.p95 && s.p95 <= s.p99);
        }
    }
}
