//! Synthetic retrieval-augmented workload: a corpus of random-token documents,
//! requests that pair Zipf-popular documents with a short query, and the
//! trace-level repetition ratio.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunks::{key_chain, CacheConfig, TokenSeq};
use crate::engine::Request;
use crate::tree::{PrefixTree, Tier};

pub const FORMAT_VERSION: u32 = 1;

const STREAM_LENGTHS: u64 = 1;
const STREAM_PICKS: u64 = 2;
const STREAM_QUERIES: u64 = 3;
const STREAM_RESAMPLE: u64 = 4;
/// Document token streams start here, offset by doc id.
const STREAM_DOCS: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("repetition target {target:.3} unreachable: closest is {closest:.3} with {n_docs} documents")]
    Unachievable { target: f64, closest: f64, n_docs: u64 },
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub n_requests: usize,
    pub docs_per_request: usize,
    pub target_mean_input_tokens: usize,
    pub target_repetition_ratio: f64,
    /// Acceptable distance between measured and target repetition.
    pub repetition_tolerance: f64,
    pub zipf_s: f64,
    /// Half-width of the uniform document-length spread, as a fraction.
    pub doc_len_spread: f64,
    pub query_min_tokens: usize,
    pub query_max_tokens: usize,
    pub vocab_size: u32,
    /// Extra requests copied, with replacement, from the first
    /// `n_requests - resample_count` ones.
    pub resample_count: usize,
    pub chunk_size: usize,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            n_requests: 2000,
            docs_per_request: 2,
            target_mean_input_tokens: 6800,
            target_repetition_ratio: 0.40,
            repetition_tolerance: 0.03,
            zipf_s: 1.0,
            doc_len_spread: 0.2,
            query_min_tokens: 150,
            query_max_tokens: 250,
            vocab_size: 32_000,
            resample_count: 0,
            chunk_size: 256,
            seed: 42,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidSpec(m.to_string()));
        if !(0.0..1.0).contains(&self.target_repetition_ratio) {
            return bad("target_repetition_ratio must be in [0, 1)");
        }
        if self.docs_per_request == 0 {
            return bad("docs_per_request must be positive");
        }
        if self.query_min_tokens > self.query_max_tokens {
            return bad("query_min_tokens exceeds query_max_tokens");
        }
        let query_mean = (self.query_min_tokens + self.query_max_tokens) / 2;
        if self.target_mean_input_tokens <= query_mean {
            return bad("target_mean_input_tokens must exceed the mean query length");
        }
        if self.zipf_s.is_nan() || self.zipf_s <= 0.0 || !(0.0..1.0).contains(&self.doc_len_spread) {
            return bad("zipf_s must be positive and doc_len_spread in [0, 1)");
        }
        if self.resample_count > self.n_requests {
            return bad("resample_count exceeds n_requests");
        }
        if self.chunk_size == 0 || self.vocab_size == 0 {
            return bad("chunk_size and vocab_size must be positive");
        }
        Ok(())
    }

    fn query_mean(&self) -> f64 {
        (self.query_min_tokens + self.query_max_tokens) as f64 / 2.0
    }

    fn base_requests(&self) -> usize {
        self.n_requests - self.resample_count
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// How documents are drawn for each request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DocSampling {
    /// Every request draws documents nobody else uses.
    Fresh,
    Zipf {
        n_docs: u64,
    },
}

/// Documents of the corpus that the trace actually references.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub docs: BTreeMap<u64, TokenSeq>,
    pub sampling: DocSampling,
    /// Multiplier applied to raw lengths so the mean request length hits its target.
    pub length_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadRecord {
    pub req_id: u64,
    pub doc_ids: Vec<u64>,
    pub query_tokens: TokenSeq,
    /// Index of the sampled request this one copies.
    pub base_index: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Workload {
    pub records: Vec<WorkloadRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
struct DocRecord {
    doc_id: u64,
    tokens: TokenSeq,
}

/// Document id picks per request, resampled copies included.
fn sample_doc_ids(spec: &WorkloadSpec, sampling: DocSampling) -> (Vec<Vec<u64>>, Vec<u64>) {
    let k = spec.docs_per_request;
    let base = spec.base_requests();
    let mut picks: Vec<Vec<u64>> = Vec::with_capacity(spec.n_requests);
    match sampling {
        DocSampling::Fresh => {
            for i in 0..base {
                picks.push((0..k as u64).map(|j| i as u64 * k as u64 + j).collect());
            }
        }
        DocSampling::Zipf { n_docs } => {
            let zipf = Zipf::new(n_docs as f64, spec.zipf_s).expect("n_docs ≥ 1 and s > 0");
            let mut rng = stream(spec.seed, STREAM_PICKS);
            let distinct = n_docs >= k as u64;
            for _ in 0..base {
                let mut ids = Vec::with_capacity(k);
                while ids.len() < k {
                    let id = zipf.sample(&mut rng) as u64 - 1;
                    if !distinct || !ids.contains(&id) {
                        ids.push(id);
                    }
                }
                picks.push(ids);
            }
        }
    }
    let mut base_index: Vec<u64> = (0..base as u64).collect();
    if spec.resample_count > 0 && base > 0 {
        let mut rng = stream(spec.seed, STREAM_RESAMPLE);
        for _ in 0..spec.resample_count {
            let i = rng.random_range(0..base);
            picks.push(picks[i].clone());
            base_index.push(i as u64);
        }
    }
    (picks, base_index)
}

fn raw_doc_len(spec: &WorkloadSpec, doc_id: u64) -> f64 {
    let m = (spec.target_mean_input_tokens as f64 - spec.query_mean()) / spec.docs_per_request as f64;
    let mut rng = stream(spec.seed ^ STREAM_LENGTHS, doc_id);
    m * (1.0 + rng.random_range(-spec.doc_len_spread..=spec.doc_len_spread))
}

fn doc_len(spec: &WorkloadSpec, doc_id: u64, scale: f64) -> usize {
    ((raw_doc_len(spec, doc_id) * scale).round() as usize).max(1)
}

/// Scale that brings the trace's mean document tokens per request to target.
fn length_scale(spec: &WorkloadSpec, picks: &[Vec<u64>]) -> f64 {
    if picks.is_empty() {
        return 1.0;
    }
    let mut cache: HashMap<u64, f64> = HashMap::new();
    let total: f64 = picks
        .iter()
        .flatten()
        .map(|&d| *cache.entry(d).or_insert_with(|| raw_doc_len(spec, d)))
        .sum();
    let mean = total / picks.len() as f64;
    (spec.target_mean_input_tokens as f64 - spec.query_mean()) / mean
}

/// Repetition of a doc-id trace without materialising tokens. Chunks lying
/// entirely inside the leading documents repeat exactly when that leading
/// document sequence was seen before.
fn modeled_repetition(spec: &WorkloadSpec, picks: &[Vec<u64>], scale: f64) -> f64 {
    let c = spec.chunk_size;
    let mut seen: HashSet<&[u64]> = HashSet::new();
    let mut lens: HashMap<u64, usize> = HashMap::new();
    let (mut repeated, mut total) = (0usize, 0usize);
    for ids in picks {
        let mut boundary = 0usize;
        let mut prev_full = 0usize;
        let mut request_total = 0usize;
        let mut request_repeat = 0usize;
        let mut matching = true;
        for j in 0..ids.len() {
            boundary += *lens.entry(ids[j]).or_insert_with(|| doc_len(spec, ids[j], scale));
            let full = boundary / c;
            let span = full - prev_full;
            // chunks in (prev_full, full] depend on documents 0..=j only
            let prefix = &ids[..=j];
            if matching && seen.contains(prefix) {
                request_repeat += span * c;
            } else {
                matching = false;
            }
            request_total += span * c;
            prev_full = full;
        }
        for j in 0..ids.len() {
            seen.insert(&ids[..=j]);
        }
        repeated += request_repeat;
        total += request_total;
    }
    if total == 0 {
        0.0
    } else {
        repeated as f64 / total as f64
    }
}

fn evaluate(spec: &WorkloadSpec, sampling: DocSampling) -> (f64, f64) {
    let (picks, _) = sample_doc_ids(spec, sampling);
    let scale = length_scale(spec, &picks);
    (modeled_repetition(spec, &picks, scale), scale)
}

/// Find a corpus size whose Zipf trace lands on the repetition target.
fn search_corpus_size(spec: &WorkloadSpec) -> Result<(u64, f64), WorkloadError> {
    let target = spec.target_repetition_ratio;
    let ratio = |n: u64| evaluate(spec, DocSampling::Zipf { n_docs: n }).0;
    // repetition falls as the corpus grows; bisect for the crossing
    let (mut lo, mut hi) = (1u64, 1u64 << 24);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ratio(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut best = (lo, ratio(lo));
    for n in lo.saturating_sub(8).max(1)..=lo + 8 {
        let r = ratio(n);
        if (r - target).abs() < (best.1 - target).abs() {
            best = (n, r);
        }
    }
    if (best.1 - target).abs() > spec.repetition_tolerance {
        return Err(WorkloadError::Unachievable {
            target,
            closest: best.1,
            n_docs: best.0,
        });
    }
    Ok(best)
}

fn materialize(spec: &WorkloadSpec, sampling: DocSampling, picks: &[Vec<u64>], scale: f64) -> Corpus {
    let ids: BTreeSet<u64> = picks.iter().flatten().copied().collect();
    let docs = ids
        .into_iter()
        .map(|id| {
            let len = doc_len(spec, id, scale);
            let mut rng = stream(spec.seed, STREAM_DOCS + id);
            let tokens = (0..len).map(|_| rng.random_range(0..spec.vocab_size)).collect();
            (id, TokenSeq(tokens))
        })
        .collect();
    Corpus {
        docs,
        sampling,
        length_scale: scale,
    }
}

/// Build the corpus for `spec`, sizing it so the trace hits the repetition target.
pub fn gen_corpus(spec: &WorkloadSpec) -> Result<Corpus, WorkloadError> {
    spec.validate()?;
    // an empty trace has no repetition to size for
    let sampling = if spec.target_repetition_ratio == 0.0 || spec.n_requests == 0 {
        DocSampling::Fresh
    } else {
        DocSampling::Zipf {
            n_docs: search_corpus_size(spec)?.0,
        }
    };
    Ok(corpus_for(spec, sampling))
}

/// Corpus for an explicit sampling scheme, bypassing the size search.
pub fn corpus_for(spec: &WorkloadSpec, sampling: DocSampling) -> Corpus {
    let (picks, _) = sample_doc_ids(spec, sampling);
    let scale = length_scale(spec, &picks);
    materialize(spec, sampling, &picks, scale)
}

/// Emit the request trace drawn from `corpus`.
pub fn gen_requests(corpus: &Corpus, spec: &WorkloadSpec) -> Workload {
    let (picks, base_index) = sample_doc_ids(spec, corpus.sampling);
    let mut qrng = stream(spec.seed, STREAM_QUERIES);
    let mut queries: Vec<TokenSeq> = Vec::with_capacity(spec.base_requests());
    let records = picks
        .into_iter()
        .zip(base_index)
        .enumerate()
        .map(|(i, (doc_ids, base))| {
            let query_tokens = if (base as usize) < queries.len() && i >= spec.base_requests() {
                queries[base as usize].clone()
            } else {
                let n = qrng.random_range(spec.query_min_tokens..=spec.query_max_tokens);
                let q = TokenSeq((0..n).map(|_| qrng.random_range(0..spec.vocab_size)).collect());
                queries.push(q.clone());
                q
            };
            WorkloadRecord {
                req_id: i as u64,
                doc_ids,
                query_tokens,
                base_index: base,
            }
        })
        .collect();
    Workload { records }
}

impl Corpus {
    fn doc_tokens(&self, rec: &WorkloadRecord) -> Result<Vec<u32>, WorkloadError> {
        let mut tokens = Vec::new();
        for id in &rec.doc_ids {
            let doc = self
                .docs
                .get(id)
                .ok_or_else(|| WorkloadError::Format(format!("request {} references missing doc {id}", rec.req_id)))?;
            tokens.extend_from_slice(doc.as_slice());
        }
        Ok(tokens)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), WorkloadError> {
        serde_json::to_writer(
            &mut w,
            &Header {
                format_version: FORMAT_VERSION,
            },
        )?;
        writeln!(w)?;
        for (&doc_id, tokens) in &self.docs {
            serde_json::to_writer(
                &mut w,
                &DocRecord {
                    doc_id,
                    tokens: tokens.clone(),
                },
            )?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, WorkloadError> {
        let mut docs = BTreeMap::new();
        for line in read_body(r)? {
            let d: DocRecord = serde_json::from_str(&line)?;
            if docs.insert(d.doc_id, d.tokens).is_some() {
                return Err(WorkloadError::Format(format!("duplicate doc_id {}", d.doc_id)));
            }
        }
        let n_docs = docs.keys().next_back().map_or(0, |m| m + 1);
        Ok(Self {
            docs,
            sampling: DocSampling::Zipf { n_docs },
            length_scale: 1.0,
        })
    }
}

fn read_body<R: BufRead>(r: R) -> Result<Vec<String>, WorkloadError> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| WorkloadError::Format("missing header line".into()))??;
    let h: Header = serde_json::from_str(&header).map_err(|e| WorkloadError::Format(format!("bad header: {e}")))?;
    if h.format_version != FORMAT_VERSION {
        return Err(WorkloadError::Format(format!(
            "unsupported format_version {}",
            h.format_version
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(line);
        }
    }
    Ok(out)
}

impl Workload {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), WorkloadError> {
        serde_json::to_writer(
            &mut w,
            &Header {
                format_version: FORMAT_VERSION,
            },
        )?;
        writeln!(w)?;
        for rec in &self.records {
            serde_json::to_writer(&mut w, rec)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, WorkloadError> {
        let records = read_body(r)?
            .iter()
            .map(|l| serde_json::from_str(l))
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    /// Engine requests with their cacheable chains; arrival times are left at zero.
    pub fn to_requests(&self, corpus: &Corpus, cfg: &CacheConfig) -> Result<Vec<Request>, WorkloadError> {
        self.records
            .iter()
            .map(|rec| {
                let docs = corpus.doc_tokens(rec)?;
                let chain = key_chain(&docs, cfg);
                Ok(Request::new(rec.req_id, chain, docs.len() + rec.query_tokens.len()))
            })
            .collect()
    }

    pub fn mean_input_tokens(&self, corpus: &Corpus) -> Result<f64, WorkloadError> {
        if self.records.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0usize;
        for rec in &self.records {
            total += corpus.doc_tokens(rec)?.len() + rec.query_tokens.len();
        }
        Ok(total as f64 / self.records.len() as f64)
    }
}

/// Share of cacheable tokens whose exact prefix chain appeared in an earlier
/// request, replayed through an unbounded prefix tree.
pub fn measure_repetition(workload: &Workload, corpus: &Corpus, cfg: &CacheConfig) -> Result<f64, WorkloadError> {
    let mut tree = PrefixTree::new(cfg.chunk_size, u64::MAX, 0);
    let (mut repeated, mut total) = (0usize, 0usize);
    for rec in &workload.records {
        let chain = key_chain(&corpus.doc_tokens(rec)?, cfg);
        let keys: Vec<_> = chain.iter().map(|l| l.key).collect();
        let m = tree.match_prefix(&keys);
        repeated += m.matched_tokens;
        total += chain.len() * cfg.chunk_size;
        for link in &chain[m.matched.len()..] {
            tree.insert_chunk(link.key, link.parent, 1, Tier::Dram)
                .expect("unbounded tree accepts every chunk");
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        repeated as f64 / total as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::BufReader;

    fn small_spec() -> WorkloadSpec {
        WorkloadSpec {
            n_requests: 300,
            target_mean_input_tokens: 2200,
            ..Default::default()
        }
    }

    /// Independent oracle: set of every full-chunk token prefix seen so far.
    fn brute_force_repetition(w: &Workload, corpus: &Corpus, chunk: usize) -> f64 {
        let mut seen: HashSet<Vec<u32>> = HashSet::new();
        let (mut rep, mut total) = (0usize, 0usize);
        for rec in &w.records {
            let toks = corpus.doc_tokens(rec).unwrap();
            let full = toks.len() / chunk;
            for k in 1..=full {
                if seen.contains(&toks[..k * chunk]) {
                    rep += chunk;
                }
                total += chunk;
            }
            for k in 1..=full {
                seen.insert(toks[..k * chunk].to_vec());
            }
        }
        rep as f64 / total as f64
    }

    #[test]
    fn replay_matches_prefix_set_oracle() {
        let spec = WorkloadSpec {
            n_requests: 50,
            ..small_spec()
        };
        let corpus = corpus_for(&spec, DocSampling::Zipf { n_docs: 12 });
        let w = gen_requests(&corpus, &spec);
        let cfg = CacheConfig::default();
        let measured = measure_repetition(&w, &corpus, &cfg).unwrap();
        assert_eq!(measured, brute_force_repetition(&w, &corpus, 256));
        assert!(measured > 0.0);
    }

    #[test]
    fn doc_id_model_equals_replay() {
        let spec = small_spec();
        for n_docs in [3, 40, 500] {
            let sampling = DocSampling::Zipf { n_docs };
            let (modeled, _) = evaluate(&spec, sampling);
            let corpus = corpus_for(&spec, sampling);
            let w = gen_requests(&corpus, &spec);
            let measured = measure_repetition(&w, &corpus, &CacheConfig::default()).unwrap();
            assert!((modeled - measured).abs() < 1e-12, "{n_docs}: {modeled} vs {measured}");
        }
    }

    #[test]
    fn zero_target_draws_fresh_documents() {
        let spec = WorkloadSpec {
            target_repetition_ratio: 0.0,
            ..small_spec()
        };
        let corpus = gen_corpus(&spec).unwrap();
        let w = gen_requests(&corpus, &spec);
        assert_eq!(measure_repetition(&w, &corpus, &CacheConfig::default()).unwrap(), 0.0);
        let mut ids: Vec<_> = w.records.iter().flat_map(|r| r.doc_ids.clone()).collect();
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn single_document_corpus_repeats_almost_everything() {
        let spec = WorkloadSpec {
            n_requests: 100,
            ..small_spec()
        };
        let corpus = corpus_for(&spec, DocSampling::Zipf { n_docs: 1 });
        let w = gen_requests(&corpus, &spec);
        let r = measure_repetition(&w, &corpus, &CacheConfig::default()).unwrap();
        assert!((r - 0.99).abs() < 1e-12, "{r}");
    }

    #[test]
    fn identical_requests_repeat_all_but_the_first() {
        let spec = small_spec();
        let corpus = corpus_for(&spec, DocSampling::Zipf { n_docs: 5 });
        let rec = WorkloadRecord {
            req_id: 0,
            doc_ids: vec![1, 2],
            query_tokens: TokenSeq::default(),
            base_index: 0,
        };
        let cfg = CacheConfig::default();
        for n in [2usize, 10, 40] {
            let w = Workload {
                records: vec![rec.clone(); n],
            };
            let r = measure_repetition(&w, &corpus, &cfg).unwrap();
            assert!((r - (n - 1) as f64 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn second_position_document_contributes_nothing_behind_a_new_first() {
        let spec = small_spec();
        let corpus = corpus_for(&spec, DocSampling::Zipf { n_docs: 10 });
        let rec = |a, b| WorkloadRecord {
            req_id: 0,
            doc_ids: vec![a, b],
            query_tokens: TokenSeq::default(),
            base_index: 0,
        };
        let w = Workload {
            records: vec![rec(1, 2), rec(3, 2)],
        };
        let cfg = CacheConfig::default();
        assert_eq!(measure_repetition(&w, &corpus, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn mean_length_hits_target() {
        let spec = small_spec();
        let corpus = gen_corpus(&spec).unwrap();
        let w = gen_requests(&corpus, &spec);
        let mean = w.mean_input_tokens(&corpus).unwrap();
        let target = spec.target_mean_input_tokens as f64;
        assert!((mean - target).abs() / target <= 0.05, "{mean}");
        for rec in &w.records {
            assert!((150..=250).contains(&rec.query_tokens.len()));
            assert_eq!(rec.doc_ids.len(), 2);
            assert_ne!(rec.doc_ids[0], rec.doc_ids[1]);
        }
    }

    #[test]
    fn files_round_trip_and_are_byte_stable() {
        let spec = small_spec();
        let write = || {
            let corpus = gen_corpus(&spec).unwrap();
            let w = gen_requests(&corpus, &spec);
            let (mut cb, mut wb) = (Vec::new(), Vec::new());
            corpus.write_jsonl(&mut cb).unwrap();
            w.write_jsonl(&mut wb).unwrap();
            (corpus, w, cb, wb)
        };
        let (corpus, w, cb, wb) = write();
        let (_, _, cb2, wb2) = write();
        assert_eq!(cb, cb2);
        assert_eq!(wb, wb2);
        assert!(wb.starts_with(b"{\"format_version\":1}\n"));
        let back = Workload::read_jsonl(BufReader::new(&wb[..])).unwrap();
        assert_eq!(back, w);
        let cback = Corpus::read_jsonl(BufReader::new(&cb[..])).unwrap();
        assert_eq!(cback.docs, corpus.docs);
    }

    #[test]
    fn empty_workload_is_header_only() {
        let spec = WorkloadSpec {
            n_requests: 0,
            ..small_spec()
        };
        let corpus = gen_corpus(&spec).unwrap();
        assert!(corpus.docs.is_empty());
        let w = gen_requests(&corpus, &spec);
        let mut buf = Vec::new();
        w.write_jsonl(&mut buf).unwrap();
        assert_eq!(buf, b"{\"format_version\":1}\n");
    }

    #[test]
    fn without_resampling_every_base_index_appears_once() {
        let spec = small_spec();
        let corpus = corpus_for(&spec, DocSampling::Zipf { n_docs: 100 });
        let w = gen_requests(&corpus, &spec);
        let idx: BTreeSet<_> = w.records.iter().map(|r| r.base_index).collect();
        assert_eq!(idx.len(), spec.n_requests);
        assert_eq!(idx.iter().copied().max(), Some(spec.n_requests as u64 - 1));
    }

    #[test]
    fn resampled_requests_copy_their_base() {
        let spec = WorkloadSpec {
            resample_count: 100,
            ..small_spec()
        };
        let corpus = corpus_for(&spec, DocSampling::Zipf { n_docs: 100 });
        let w = gen_requests(&corpus, &spec);
        assert_eq!(w.len(), spec.n_requests);
        for rec in &w.records[200..] {
            let base = &w.records[rec.base_index as usize];
            assert!(rec.base_index < 200);
            assert_eq!(rec.doc_ids, base.doc_ids);
            assert_eq!(rec.query_tokens, base.query_tokens);
        }
    }

    #[test]
    fn unreachable_target_reports_closest() {
        let spec = WorkloadSpec {
            n_requests: 20,
            target_repetition_ratio: 0.99,
            repetition_tolerance: 0.001,
            ..small_spec()
        };
        match gen_corpus(&spec) {
            Err(WorkloadError::Unachievable { closest, .. }) => assert!(closest < 0.99),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_header_rejected() {
        let e = Workload::read_jsonl(BufReader::new(&b"{\"format_version\":2}\n"[..]));
        assert!(matches!(e, Err(WorkloadError::Format(_))));
        assert!(Workload::read_jsonl(BufReader::new(&b""[..])).is_err());
    }
}
