//! Run files, relevance judgments, MRR@10 and the latency harness.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use log::warn;

use crate::error::{Error, Result};

pub const MRR_DEPTH: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub qid: String,
    pub doc_id: String,
    pub rank: usize,
    pub score: f64,
}

/// TREC-style ranked output: `qid Q0 docid rank score tag`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunFile {
    pub rows: Vec<RunRow>,
}

impl RunFile {
    /// Appends a ranking for `qid`. Rows are sorted by score descending,
    /// ties by doc id ascending, and ranked from 1.
    pub fn push_ranking(&mut self, qid: &str, mut ranking: Vec<(String, f64)>) {
        ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        self.push_ordered(qid, ranking);
    }

    /// Appends a ranking already in final order.
    pub fn push_ordered(&mut self, qid: &str, ranking: Vec<(String, f64)>) {
        for (i, (doc_id, score)) in ranking.into_iter().enumerate() {
            self.rows.push(RunRow {
                qid: qid.to_owned(),
                doc_id,
                rank: i + 1,
                score,
            });
        }
    }

    pub fn to_trec(&self, tag: &str) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(out, "{} Q0 {} {} {} {}", r.qid, r.doc_id, r.rank, r.score, tag);
        }
        out
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let loc = || format!("{source}:{}", n + 1);
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(Error::parse(loc(), "expected `qid Q0 docid rank score tag`"));
            }
            let rank = fields[3]
                .parse()
                .map_err(|_| Error::parse(loc(), "rank is not an integer"))?;
            let score = fields[4]
                .parse()
                .map_err(|_| Error::parse(loc(), "score is not a number"))?;
            if !seen.insert((fields[0].to_owned(), fields[2].to_owned())) {
                return Err(Error::parse(loc(), "duplicate (qid, docid)"));
            }
            rows.push(RunRow {
                qid: fields[0].to_owned(),
                doc_id: fields[2].to_owned(),
                rank,
                score,
            });
        }
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path, tag: &str) -> Result<()> {
        fs::write(path, self.to_trec(tag)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Rows grouped per query, ordered by rank.
    pub fn by_query(&self) -> HashMap<&str, Vec<&RunRow>> {
        let mut out: HashMap<&str, Vec<&RunRow>> = HashMap::new();
        for r in &self.rows {
            out.entry(r.qid.as_str()).or_default().push(r);
        }
        for rows in out.values_mut() {
            rows.sort_by_key(|r| r.rank);
        }
        out
    }
}

/// Relevance judgments: qid -> docid -> label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels {
    pub judgments: BTreeMap<String, BTreeMap<String, i32>>,
}

impl Qrels {
    pub fn insert(&mut self, qid: &str, doc_id: &str, relevance: i32) {
        self.judgments
            .entry(qid.to_owned())
            .or_default()
            .insert(doc_id.to_owned(), relevance);
    }

    pub fn is_relevant(&self, qid: &str, doc_id: &str) -> bool {
        self.judgments
            .get(qid)
            .and_then(|j| j.get(doc_id))
            .is_some_and(|&r| r > 0)
    }

    pub fn has_relevant(&self, qid: &str) -> bool {
        self.judgments
            .get(qid)
            .is_some_and(|j| j.values().any(|&r| r > 0))
    }

    /// `qid<TAB>0<TAB>docid<TAB>relevance`; whitespace-separated also accepted.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut qrels = Self::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::parse(
                    format!("{source}:{}", n + 1),
                    "expected `qid 0 docid relevance`",
                ));
            }
            let rel = fields[3].parse().map_err(|_| {
                Error::parse(format!("{source}:{}", n + 1), "relevance is not an integer")
            })?;
            qrels.insert(fields[0], fields[2], rel);
        }
        Ok(qrels)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (qid, docs) in &self.judgments {
            for (doc, rel) in docs {
                let _ = writeln!(out, "{qid}\t0\t{doc}\t{rel}");
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Reciprocal rank of the first relevant document within the top 10.
pub fn reciprocal_rank<'a, I>(ranked_doc_ids: I, qid: &str, qrels: &Qrels) -> f64
where
    I: IntoIterator<Item = &'a str>,
{
    ranked_doc_ids
        .into_iter()
        .take(MRR_DEPTH)
        .position(|d| qrels.is_relevant(qid, d))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// Mean over judged queries; queries absent from the run score 0. With
/// `include_unjudged`, queries whose judgments are all non-relevant also
/// count (as 0).
pub fn mrr_at_10(run: &RunFile, qrels: &Qrels, include_unjudged: bool) -> Result<f64> {
    let grouped = run.by_query();
    let mut total = 0.0;
    let mut count = 0usize;
    for qid in qrels.judgments.keys() {
        if !include_unjudged && !qrels.has_relevant(qid) {
            continue;
        }
        count += 1;
        if let Some(rows) = grouped.get(qid.as_str()) {
            total += reciprocal_rank(rows.iter().map(|r| r.doc_id.as_str()), qid, qrels);
        }
    }
    if count == 0 {
        return Err(Error::NoJudgedQueries);
    }
    Ok(total / count as f64)
}

/// `qid<TAB>text` lines.
pub fn parse_queries(text: &str, source: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (qid, q) = line.split_once('\t').ok_or_else(|| {
            Error::parse(format!("{source}:{}", n + 1), "expected `qid<TAB>text`")
        })?;
        out.push((qid.to_owned(), q.to_owned()));
    }
    Ok(out)
}

pub fn load_queries(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_queries(&text, &path.display().to_string())
}

/// Time spent in each stage of one query.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub first_stage: Duration,
    pub fetch: Duration,
    pub scoring: Duration,
}

/// Something that answers one query at a time, reporting its stage split.
pub trait QueryRunner {
    fn run_query(&self, query: &str) -> Result<StageTimings>;
}

impl<F> QueryRunner for F
where
    F: Fn(&str) -> Result<StageTimings>,
{
    fn run_query(&self, query: &str) -> Result<StageTimings> {
        self(query)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub warmup_queries: usize,
    pub timed_queries: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub first_stage_ms: f64,
    pub fetch_ms: f64,
    pub scoring_ms: f64,
}

impl LatencyReport {
    pub fn render(&self) -> String {
        format!(
            "warmup_queries\t{}\ntimed_queries\t{}\nmean_ms\t{:.4}\nmedian_ms\t{:.4}\np95_ms\t{:.4}\nfirst_stage_ms\t{:.4}\nfetch_ms\t{:.4}\nscoring_ms\t{:.4}\n",
            self.warmup_queries,
            self.timed_queries,
            self.mean_ms,
            self.median_ms,
            self.p95_ms,
            self.first_stage_ms,
            self.fetch_ms,
            self.scoring_ms
        )
    }
}

pub const WARMUP_QUERIES: usize = 1000;
pub const TIMED_QUERIES: usize = 1000;

/// Warms up on the first `warmup` queries, then times the next `timed`
/// queries one at a time. With fewer than `warmup + timed` queries both
/// phases shrink proportionally.
pub fn latency_bench<R: QueryRunner + ?Sized>(
    runner: &R,
    queries: &[String],
    warmup: usize,
    timed: usize,
) -> Result<LatencyReport> {
    let wanted = warmup + timed;
    if queries.is_empty() || wanted == 0 {
        return Err(Error::InvalidConfig("latency bench needs queries".into()));
    }
    let (warmup, timed) = if queries.len() < wanted {
        let w = warmup * queries.len() / wanted;
        let t = (queries.len() - w).max(1);
        warn!(
            "only {} queries available; scaling to {w} warmup and {t} timed",
            queries.len()
        );
        (w, t)
    } else {
        (warmup, timed)
    };
    for q in &queries[..warmup] {
        runner.run_query(q)?;
    }
    let mut totals = Vec::with_capacity(timed);
    let mut stages = StageTimings::default();
    for q in &queries[warmup..warmup + timed] {
        let start = Instant::now();
        let t = runner.run_query(q)?;
        totals.push(start.elapsed().as_secs_f64() * 1e3);
        stages.first_stage += t.first_stage;
        stages.fetch += t.fetch;
        stages.scoring += t.scoring;
    }
    let n = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / n;
    totals.sort_by(f64::total_cmp);
    let per = |d: Duration| d.as_secs_f64() * 1e3 / n;
    Ok(LatencyReport {
        warmup_queries: warmup,
        timed_queries: timed,
        mean_ms: mean,
        median_ms: percentile(&totals, 0.5),
        p95_ms: percentile(&totals, 0.95),
        first_stage_ms: per(stages.first_stage),
        fetch_ms: per(stages.fetch),
        scoring_ms: per(stages.scoring),
    })
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread::sleep;

    fn qrels(pairs: &[(&str, &str, i32)]) -> Qrels {
        let mut q = Qrels::default();
        for &(qid, d, r) in pairs {
            q.insert(qid, d, r);
        }
        q
    }

    fn run_with_relevant_at(rank: usize) -> RunFile {
        let mut run = RunFile::default();
        let ranking = (1..=12)
            .map(|i| (if i == rank { "rel".to_string() } else { format!("n{i:02}") }, 100.0 - i as f64))
            .collect();
        run.push_ordered("q", ranking);
        run
    }

    #[test]
    fn mrr_cutoff_cases() {
        let judged = qrels(&[("q", "rel", 1)]);
        assert_eq!(mrr_at_10(&run_with_relevant_at(1), &judged, false).unwrap(), 1.0);
        assert!((mrr_at_10(&run_with_relevant_at(3), &judged, false).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mrr_at_10(&run_with_relevant_at(10), &judged, false).unwrap(), 0.1);
        assert_eq!(mrr_at_10(&run_with_relevant_at(11), &judged, false).unwrap(), 0.0);
    }

    #[test]
    fn missing_and_unjudged_queries() {
        let judged = qrels(&[("q", "rel", 1), ("absent", "x", 1), ("neg", "y", 0)]);
        let run = run_with_relevant_at(1);
        assert_eq!(mrr_at_10(&run, &judged, false).unwrap(), 0.5);
        assert!((mrr_at_10(&run, &judged, true).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            mrr_at_10(&run, &qrels(&[("neg", "y", 0)]), false),
            Err(Error::NoJudgedQueries)
        ));
    }

    #[test]
    fn mrr_invariant_to_query_order_and_score_scale() {
        let judged = qrels(&[("a", "d2", 1), ("b", "d1", 1)]);
        let mut run = RunFile::default();
        run.push_ranking("a", vec![("d1".into(), 3.0), ("d2".into(), 2.0)]);
        run.push_ranking("b", vec![("d1".into(), 1.0), ("d3".into(), 0.5)]);
        let base = mrr_at_10(&run, &judged, false).unwrap();
        let mut flipped = RunFile::default();
        flipped.push_ranking("b", vec![("d1".into(), 10.0), ("d3".into(), 5.0)]);
        flipped.push_ranking("a", vec![("d1".into(), 30.0), ("d2".into(), 20.0)]);
        assert_eq!(base, mrr_at_10(&flipped, &judged, false).unwrap());
        assert_eq!(base, 0.75);
    }

    #[test]
    fn ranking_ties_by_doc_id() {
        let mut run = RunFile::default();
        run.push_ranking("q", vec![("b".into(), 1.0), ("a".into(), 1.0), ("c".into(), 2.0)]);
        let ids: Vec<&str> = run.rows.iter().map(|r| r.doc_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        assert_eq!(run.rows[2].rank, 3);
    }

    #[test]
    fn trec_round_trip() {
        let mut run = RunFile::default();
        run.push_ranking("q1", vec![("d1".into(), 0.123456789), ("d2".into(), -4.5e-7)]);
        run.push_ranking("q2", vec![("d9".into(), 12.0)]);
        let back = RunFile::parse(&run.to_trec("epic"), "mem").unwrap();
        assert_eq!(back, run);
        assert!(RunFile::parse("q Q0 d 1 x tag", "mem").is_err());
        assert!(RunFile::parse("q Q0 d 1 1.0 t\nq Q0 d 2 0.5 t", "mem").is_err());
    }

    #[test]
    fn qrels_and_queries_parse() {
        let q = Qrels::parse("q1\t0\td1\t1\nq1\t0\td2\t0\n", "mem").unwrap();
        assert!(q.is_relevant("q1", "d1"));
        assert!(!q.is_relevant("q1", "d2"));
        assert_eq!(Qrels::parse(&q.to_tsv(), "mem").unwrap(), q);
        assert!(Qrels::parse("q1 d1 1", "mem").is_err());
        let qs = parse_queries("1\thow far does aaa tow\n2\tx\n", "mem").unwrap();
        assert_eq!(qs[0], ("1".into(), "how far does aaa tow".into()));
        assert!(parse_queries("no tab here", "mem").is_err());
    }

    #[test]
    fn harness_matches_stubbed_stages() {
        let stage = Duration::from_millis(1);
        let runner = |_: &str| -> Result<StageTimings> {
            let mut t = StageTimings::default();
            for slot in [&mut t.first_stage, &mut t.fetch, &mut t.scoring] {
                let s = Instant::now();
                sleep(stage);
                *slot = s.elapsed();
            }
            Ok(t)
        };
        let queries: Vec<String> = (0..40).map(|i| format!("q{i}")).collect();
        let report = latency_bench(&runner, &queries, 20, 20).unwrap();
        assert_eq!(report.timed_queries, 20);
        // Sleep never undershoots; allow generous scheduler overshoot.
        assert!(report.mean_ms >= 3.0, "{report:?}");
        assert!(report.mean_ms < 3.0 * 4.0, "{report:?}");
        let parts = report.first_stage_ms + report.fetch_ms + report.scoring_ms;
        assert!(parts <= report.mean_ms + 1e-9);
        assert!(report.median_ms <= report.p95_ms);
    }

    #[test]
    fn harness_scales_short_query_lists() {
        let runner = |_: &str| -> Result<StageTimings> { Ok(StageTimings::default()) };
        let queries: Vec<String> = (0..50).map(|i| i.to_string()).collect();
        let report = latency_bench(&runner, &queries, 1000, 1000).unwrap();
        assert_eq!(report.warmup_queries, 25);
        assert_eq!(report.timed_queries, 25);
    }

    #[test]
    fn percentile_nearest_rank() {
        let xs: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&xs, 0.5), 10.0);
        assert_eq!(percentile(&xs, 0.95), 19.0);
        assert_eq!(percentile(&[4.0], 0.95), 4.0);
    }
}
