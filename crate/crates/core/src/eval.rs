//! Retrieval evaluation: ranking, average precision, CMC and the two
//! re-identification protocols.
//!
//! * `cross_camera`: for each query, gallery items with the same identity
//!   *and* the same camera are removed before ranking. The remaining
//!   same-identity items are the true matches. Queries left without any true
//!   match are excluded from the averages and counted.
//! * `repeated_gallery`: each trial keeps one random gallery exemplar per
//!   identity; metrics are averaged over trials.
//!
//! The report text format is line oriented:
//!
//! ```text
//! reid-eval-report version=1
//! protocol: cross_camera
//! metric: euclidean
//! trials: 1
//! cutoffs: 1,2,5
//! seed: 7
//! queries: 96
//! gallery: 288
//! excluded: 0
//! mAP: 0.97
//! cmc@1: 0.98
//! ...
//! trial_mAP: 0.97
//! config.<key>: <value>
//! per_query:
//! index,identity,camera,ap
//! 0,32,0,1.0
//! ```
//!
//! An excluded query has `-` as its AP. Floats use the shortest
//! representation that parses back to the same value.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::IndexedRandom;

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::geometry::{squared_distance, Matrix, MetricKind};
use crate::rng;

pub const DEFAULT_TRIALS: usize = 10;
pub const DEFAULT_CUTOFFS: [usize; 3] = [1, 2, 5];
pub const DEFAULT_RETRIEVE_K: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProtocolKind {
    CrossCamera,
    RepeatedGallery,
}

impl ProtocolKind {
    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::CrossCamera => "cross_camera",
            ProtocolKind::RepeatedGallery => "repeated_gallery",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cross_camera" => Some(ProtocolKind::CrossCamera),
            "repeated_gallery" => Some(ProtocolKind::RepeatedGallery),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    /// Only used by `repeated_gallery`.
    pub trials: usize,
    pub cutoffs: Vec<usize>,
}

impl ProtocolSpec {
    pub fn cross_camera() -> Self {
        Self { kind: ProtocolKind::CrossCamera, trials: 1, cutoffs: DEFAULT_CUTOFFS.to_vec() }
    }

    pub fn repeated_gallery(trials: usize) -> Self {
        Self { kind: ProtocolKind::RepeatedGallery, trials, cutoffs: DEFAULT_CUTOFFS.to_vec() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be >= 1".into()));
        }
        if self.cutoffs.is_empty() || self.cutoffs[0] == 0 || self.cutoffs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "cutoffs {:?} must be positive and strictly increasing",
                self.cutoffs
            )));
        }
        Ok(())
    }

    fn effective_trials(&self) -> usize {
        match self.kind {
            ProtocolKind::CrossCamera => 1,
            ProtocolKind::RepeatedGallery => self.trials,
        }
    }
}

/// Gallery indices with their distances, nearest first; ties keep gallery order.
pub fn ranked_distances(query: &[f64], gallery: &Matrix, metric: MetricKind) -> Result<Vec<(usize, f64)>> {
    if gallery.rows() == 0 {
        return Err(Error::InvalidArgument("empty gallery".into()));
    }
    if query.len() != gallery.cols() {
        return Err(Error::Shape(format!("query dimension {} vs gallery {}", query.len(), gallery.cols())));
    }
    if query.iter().any(|v| !v.is_finite()) || !gallery.is_finite() {
        return Err(Error::NonFinite("ranking input".into()));
    }
    let mut ranked: Vec<(usize, f64)> = gallery
        .iter_rows()
        .enumerate()
        .map(|(i, g)| (i, metric.from_squared(squared_distance(query, g))))
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

pub fn rank_gallery(query: &[f64], gallery: &Matrix, metric: MetricKind) -> Result<Vec<usize>> {
    Ok(ranked_distances(query, gallery, metric)?.into_iter().map(|(i, _)| i).collect())
}

/// Sum of precision@k over the ranks holding a true match, divided by `n_gt`.
pub fn average_precision(ranked_relevance: &[bool], n_gt: usize) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::InvalidArgument("average precision needs n_gt >= 1".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits > n_gt {
        return Err(Error::InvalidArgument(format!("{hits} relevant entries exceed n_gt = {n_gt}")));
    }
    Ok(sum / n_gt as f64)
}

/// For each cutoff, whether a true match appears within the first `k` ranks.
pub fn cmc_topk(ranked_relevance: &[bool], cutoffs: &[usize]) -> Vec<bool> {
    let first = ranked_relevance.iter().position(|&r| r);
    cutoffs.iter().map(|&k| first.is_some_and(|f| f < k)).collect()
}

/// Fraction of queries with a hit at each cutoff.
pub fn cmc_rates(per_query: &[Vec<bool>], cutoffs: &[usize]) -> Vec<f64> {
    let n = per_query.len().max(1) as f64;
    (0..cutoffs.len())
        .map(|c| per_query.iter().filter(|hits| hits[c]).count() as f64 / n)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub index: usize,
    pub identity: u32,
    pub camera: u32,
    /// `None` when the query had no true match and was excluded.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: ProtocolKind,
    pub metric: MetricKind,
    pub trials: usize,
    pub cutoffs: Vec<usize>,
    pub seed: u64,
    pub query_count: usize,
    pub gallery_count: usize,
    pub excluded: usize,
    pub map: f64,
    pub cmc: Vec<f64>,
    pub trial_maps: Vec<f64>,
    pub echo: Vec<(String, String)>,
    pub per_query: Vec<QueryResult>,
}

/// Gallery rows kept in one repeated-gallery trial: one exemplar per
/// identity, identities in ascending order.
pub fn repeated_gallery_draw(gallery: &EmbeddingSet, seed: u64, trial: usize) -> Vec<usize> {
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &id) in gallery.identities.iter().enumerate() {
        by_id.entry(id).or_default().push(i);
    }
    let mut r = rng::stream(seed, trial as u64);
    by_id.values().map(|rows| *rows.choose(&mut r).expect("non-empty")).collect()
}

/// Gallery rows a query is ranked against. Under `cross_camera` the rows of
/// the query's identity seen by the query's camera are removed.
pub fn query_candidates(
    kind: ProtocolKind,
    identity: u32,
    camera: u32,
    gallery: &EmbeddingSet,
    rows: &[usize],
) -> Vec<usize> {
    let drop = kind == ProtocolKind::CrossCamera;
    rows.iter()
        .copied()
        .filter(|&g| !(drop && gallery.identities[g] == identity && gallery.cameras[g] == camera))
        .collect()
}

struct TrialResult {
    aps: Vec<Option<f64>>,
    hits: Vec<Vec<bool>>,
}

fn score_queries(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    rows: &[usize],
    cutoffs: &[usize],
    metric: MetricKind,
    kind: ProtocolKind,
) -> Result<TrialResult> {
    let mut aps = Vec::with_capacity(query.len());
    let mut hits = Vec::new();
    for q in 0..query.len() {
        let (qid, qcam) = (query.identities[q], query.cameras[q]);
        let candidates = query_candidates(kind, qid, qcam, gallery, rows);
        let relevant: Vec<bool> = candidates.iter().map(|&g| gallery.identities[g] == qid).collect();
        let n_gt = relevant.iter().filter(|&&r| r).count();
        if n_gt == 0 {
            aps.push(None);
            continue;
        }
        let sub = gallery.embeddings.select_rows(&candidates);
        let order = rank_gallery(query.embeddings.row(q), &sub, metric)?;
        let ranked: Vec<bool> = order.iter().map(|&i| relevant[i]).collect();
        aps.push(Some(average_precision(&ranked, n_gt)?));
        hits.push(cmc_topk(&ranked, cutoffs));
    }
    Ok(TrialResult { aps, hits })
}

/// Scores `query` against `gallery` under `protocol`.
pub fn evaluate(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    protocol: &ProtocolSpec,
    metric: MetricKind,
    seed: u64,
) -> Result<EvalReport> {
    protocol.validate()?;
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Protocol("query and gallery sets must be non-empty".into()));
    }
    if query.dim() != gallery.dim() {
        return Err(Error::Shape(format!("query dimension {} vs gallery {}", query.dim(), gallery.dim())));
    }

    let trials = protocol.effective_trials();
    let mut results = Vec::with_capacity(trials);
    match protocol.kind {
        ProtocolKind::CrossCamera => {
            let cams: BTreeSet<u32> = query.cameras.iter().chain(&gallery.cameras).copied().collect();
            if cams.len() < 2 {
                return Err(Error::Protocol("cross_camera needs data from at least two cameras".into()));
            }
            let rows: Vec<usize> = (0..gallery.len()).collect();
            results.push(score_queries(query, gallery, &rows, &protocol.cutoffs, metric, protocol.kind)?);
        }
        ProtocolKind::RepeatedGallery => {
            for t in 0..trials {
                let rows = repeated_gallery_draw(gallery, seed, t);
                results.push(score_queries(query, gallery, &rows, &protocol.cutoffs, metric, protocol.kind)?);
            }
        }
    }

    // every trial scores the same queries: exclusion depends only on identities
    let scored: Vec<bool> = results[0].aps.iter().map(Option::is_some).collect();
    let n_scored = scored.iter().filter(|&&s| s).count();
    if n_scored == 0 {
        return Err(Error::Protocol("no query has a valid match in the gallery".into()));
    }

    let mut trial_maps = Vec::with_capacity(trials);
    let mut cmc = vec![0.0; protocol.cutoffs.len()];
    for r in &results {
        let sum: f64 = r.aps.iter().flatten().sum();
        trial_maps.push(sum / n_scored as f64);
        for (c, rate) in cmc.iter_mut().zip(cmc_rates(&r.hits, &protocol.cutoffs)) {
            *c += rate / trials as f64;
        }
    }
    let map = trial_maps.iter().sum::<f64>() / trials as f64;

    let per_query = (0..query.len())
        .map(|q| QueryResult {
            index: q,
            identity: query.identities[q],
            camera: query.cameras[q],
            ap: scored[q].then(|| results.iter().map(|r| r.aps[q].unwrap_or(0.0)).sum::<f64>() / trials as f64),
        })
        .collect();

    Ok(EvalReport {
        protocol: protocol.kind,
        metric,
        trials,
        cutoffs: protocol.cutoffs.clone(),
        seed,
        query_count: query.len(),
        gallery_count: gallery.len(),
        excluded: query.len() - n_scored,
        map,
        cmc,
        trial_maps,
        echo: Vec::new(),
        per_query,
    })
}

fn join<T: std::fmt::Debug>(xs: &[T]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::from("reid-eval-report version=1\n");
        let _ = writeln!(out, "protocol: {}", self.protocol.name());
        let _ = writeln!(out, "metric: {}", self.metric.name());
        let _ = writeln!(out, "trials: {}", self.trials);
        let _ = writeln!(out, "cutoffs: {}", join(&self.cutoffs));
        let _ = writeln!(out, "seed: {}", self.seed);
        let _ = writeln!(out, "queries: {}", self.query_count);
        let _ = writeln!(out, "gallery: {}", self.gallery_count);
        let _ = writeln!(out, "excluded: {}", self.excluded);
        let _ = writeln!(out, "mAP: {:?}", self.map);
        for (k, v) in self.cutoffs.iter().zip(&self.cmc) {
            let _ = writeln!(out, "cmc@{k}: {v:?}");
        }
        let _ = writeln!(out, "trial_mAP: {}", join(&self.trial_maps));
        for (k, v) in &self.echo {
            let _ = writeln!(out, "config.{k}: {v}");
        }
        out.push_str("per_query:\nindex,identity,camera,ap\n");
        for q in &self.per_query {
            let ap = q.ap.map_or_else(|| "-".to_string(), |a| format!("{a:?}"));
            let _ = writeln!(out, "{},{},{},{}", q.index, q.identity, q.camera, ap);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        let bad = |n: usize, m: String| Error::Parse { line: n + 1, msg: m };
        match lines.next() {
            Some((_, "reid-eval-report version=1")) => {}
            _ => return Err(bad(0, "missing report header".into())),
        }
        let mut fields: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut echo = Vec::new();
        let mut cmc_lines = Vec::new();
        for (n, line) in lines.by_ref() {
            if line == "per_query:" {
                break;
            }
            let (k, v) = line.split_once(": ").ok_or_else(|| bad(n, format!("expected 'key: value', got {line:?}")))?;
            if let Some(name) = k.strip_prefix("config.") {
                echo.push((name.to_string(), v.to_string()));
            } else if let Some(cut) = k.strip_prefix("cmc@") {
                let cut: usize = cut.parse().map_err(|_| bad(n, format!("bad cutoff {cut:?}")))?;
                let v: f64 = v.parse().map_err(|_| bad(n, format!("bad cmc value {v:?}")))?;
                cmc_lines.push((cut, v));
            } else {
                fields.insert(k.to_string(), (n, v.to_string()));
            }
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(0, format!("missing field {k}")));
        fn num<T: std::str::FromStr>(entry: &(usize, String), k: &str) -> Result<T> {
            entry.1.parse().map_err(|_| Error::Parse { line: entry.0 + 1, msg: format!("bad {k} {:?}", entry.1) })
        }
        fn list<T: std::str::FromStr>(entry: &(usize, String), k: &str) -> Result<Vec<T>> {
            if entry.1.is_empty() {
                return Ok(Vec::new());
            }
            entry
                .1
                .split(',')
                .map(|s| s.parse().map_err(|_| Error::Parse { line: entry.0 + 1, msg: format!("bad {k} entry {s:?}") }))
                .collect()
        }

        let protocol_entry = get("protocol")?;
        let protocol = ProtocolKind::parse(&protocol_entry.1)
            .ok_or_else(|| bad(protocol_entry.0, format!("unknown protocol {:?}", protocol_entry.1)))?;
        let metric_entry = get("metric")?;
        let metric = MetricKind::parse(&metric_entry.1)
            .ok_or_else(|| bad(metric_entry.0, format!("unknown metric {:?}", metric_entry.1)))?;
        let cutoffs: Vec<usize> = list(get("cutoffs")?, "cutoffs")?;
        if cmc_lines.iter().map(|c| c.0).collect::<Vec<_>>() != cutoffs {
            return Err(bad(0, "cmc lines do not match cutoffs".into()));
        }

        match lines.next() {
            Some((_, "index,identity,camera,ap")) => {}
            other => return Err(bad(other.map_or(0, |o| o.0), "missing per-query table header".into())),
        }
        let mut per_query = Vec::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(bad(n, format!("expected 4 columns, got {}", cols.len())));
            }
            let p = |s: &str| s.parse::<u64>().map_err(|_| bad(n, format!("bad integer {s:?}")));
            let ap = match cols[3] {
                "-" => None,
                s => Some(s.parse::<f64>().map_err(|_| bad(n, format!("bad ap {s:?}")))?),
            };
            per_query.push(QueryResult {
                index: p(cols[0])? as usize,
                identity: p(cols[1])? as u32,
                camera: p(cols[2])? as u32,
                ap,
            });
        }

        Ok(EvalReport {
            protocol,
            metric,
            trials: num(get("trials")?, "trials")?,
            cutoffs,
            seed: num(get("seed")?, "seed")?,
            query_count: num(get("queries")?, "queries")?,
            gallery_count: num(get("gallery")?, "gallery")?,
            excluded: num(get("excluded")?, "excluded")?,
            map: num(get("mAP")?, "mAP")?,
            cmc: cmc_lines.into_iter().map(|c| c.1).collect(),
            trial_maps: list(get("trial_mAP")?, "trial_mAP")?,
            echo,
            per_query,
        })
    }
}
