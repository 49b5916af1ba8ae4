//! Page-load latency, direct versus through the gateway.
//!
//! A manifest lists the requests of one page load in dependency groups.
//! Groups run in ascending order; requests inside a group run concurrently
//! up to the manifest's concurrency. Each repetition loads the page once
//! directly and once through the portal, alternating which side goes
//! first. Per-request times and page totals are medians over repetitions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use http::{header, Request, StatusCode, Uri};
use http_body_util::{BodyExt, Empty};
use hyper_util::client::legacy::connect::HttpConnector;
use hyper_util::client::legacy::Client;
use hyper_util::rt::TokioExecutor;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;
use tokio::task::JoinSet;
use tracing::warn;

/// The shipped 31-request notebook page load.
pub const NOTEBOOK_MANIFEST: &str = include_str!("../manifests/notebook.json");

pub const DEFAULT_REPETITIONS: usize = 5;

const REQUEST_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid base url {0:?}")]
    InvalidBase(String),
    #[error("{url} unreachable: {detail}")]
    TargetUnreachable { url: String, detail: String },
    #[error("status mismatch on {path}: direct {direct}, portal {portal}")]
    StatusMismatch {
        path: String,
        direct: u16,
        portal: u16,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub expected_content_type: String,
    pub dependency_group: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestManifest {
    pub entries: Vec<ManifestEntry>,
    pub concurrency: usize,
}

impl RequestManifest {
    pub fn notebook() -> Self {
        Self::from_json(NOTEBOOK_MANIFEST).expect("shipped manifest is valid")
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::InvalidManifest(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        let m: RequestManifest =
            serde_json::from_str(text).map_err(|e| BenchError::InvalidManifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.entries.is_empty() {
            return Err(BenchError::InvalidManifest("no entries".into()));
        }
        if self.concurrency == 0 {
            return Err(BenchError::InvalidManifest("concurrency must be at least 1".into()));
        }
        if let Some(e) = self.entries.iter().find(|e| !e.path.starts_with('/')) {
            return Err(BenchError::InvalidManifest(format!("path {:?} must start with /", e.path)));
        }
        Ok(())
    }

    /// Entry indices by group, ascending.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut by_group: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            by_group.entry(e.dependency_group).or_default().push(i);
        }
        by_group.into_values().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTiming {
    pub path: String,
    pub direct_ms: f64,
    pub portal_ms: f64,
    pub delta_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub per_request: Vec<RequestTiming>,
    pub direct_total_ms: f64,
    pub portal_total_ms: f64,
    pub sum_of_deltas_ms: f64,
    pub wall_clock_overhead_ms: f64,
}

impl LatencyReport {
    pub fn median_delta_ms(&self) -> f64 {
        median(self.per_request.iter().map(|r| r.delta_ms).collect())
    }
}

/// One side of the comparison: where requests go and what they carry.
#[derive(Debug, Clone)]
pub struct Target {
    base_path: String,
    authority: String,
    query: Option<String>,
    bearer: Option<String>,
}

impl Target {
    /// `base` is an `http://` URL; its path prefixes every manifest path and
    /// its query string is appended to every request.
    pub fn new(base: &str, bearer: Option<String>) -> Result<Self, BenchError> {
        let uri: Uri = base.parse().map_err(|_| BenchError::InvalidBase(base.into()))?;
        if uri.scheme_str() != Some("http") {
            return Err(BenchError::InvalidBase(base.into()));
        }
        let authority = uri
            .authority()
            .ok_or_else(|| BenchError::InvalidBase(base.into()))?
            .to_string();
        Ok(Self {
            base_path: uri.path().trim_end_matches('/').to_string(),
            authority,
            query: uri.query().filter(|q| !q.is_empty()).map(str::to_string),
            bearer,
        })
    }

    pub fn url_for(&self, path: &str) -> String {
        let mut url = format!("http://{}{}{}", self.authority, self.base_path, path);
        if let Some(q) = &self.query {
            url.push(if path.contains('?') { '&' } else { '?' });
            url.push_str(q);
        }
        url
    }
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    status: StatusCode,
    ms: f64,
}

type HttpClient = Client<HttpConnector, Empty<Bytes>>;

/// Runs the comparison. `repetitions` timed page loads per side follow one
/// untimed warm-up load per side.
pub async fn run_benchmark(
    manifest: &RequestManifest,
    direct: &Target,
    portal: &Target,
    repetitions: usize,
) -> Result<LatencyReport, BenchError> {
    manifest.validate()?;
    let repetitions = repetitions.max(1);
    let mut connector = HttpConnector::new();
    connector.set_nodelay(true);
    let client: HttpClient = Client::builder(TokioExecutor::new()).build(connector);

    load_page(&client, manifest, direct).await?;
    load_page(&client, manifest, portal).await?;

    let n = manifest.entries.len();
    let mut direct_times = vec![Vec::with_capacity(repetitions); n];
    let mut portal_times = vec![Vec::with_capacity(repetitions); n];
    let mut direct_pages = Vec::with_capacity(repetitions);
    let mut portal_pages = Vec::with_capacity(repetitions);

    for rep in 0..repetitions {
        let (d, p) = if rep % 2 == 0 {
            let d = load_page(&client, manifest, direct).await?;
            let p = load_page(&client, manifest, portal).await?;
            (d, p)
        } else {
            let p = load_page(&client, manifest, portal).await?;
            let d = load_page(&client, manifest, direct).await?;
            (d, p)
        };
        for (i, entry) in manifest.entries.iter().enumerate() {
            if d.1[i].status != p.1[i].status {
                return Err(BenchError::StatusMismatch {
                    path: entry.path.clone(),
                    direct: d.1[i].status.as_u16(),
                    portal: p.1[i].status.as_u16(),
                });
            }
            direct_times[i].push(d.1[i].ms);
            portal_times[i].push(p.1[i].ms);
        }
        direct_pages.push(d.0);
        portal_pages.push(p.0);
    }

    let per_request: Vec<RequestTiming> = manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let direct_ms = median(direct_times[i].clone());
            let portal_ms = median(portal_times[i].clone());
            RequestTiming {
                path: e.path.clone(),
                direct_ms,
                portal_ms,
                delta_ms: portal_ms - direct_ms,
            }
        })
        .collect();
    Ok(assemble(per_request, median(direct_pages), median(portal_pages)))
}

/// Builds a report from per-request timings and page totals.
pub fn assemble(per_request: Vec<RequestTiming>, direct_total_ms: f64, portal_total_ms: f64) -> LatencyReport {
    let sum_of_deltas_ms = per_request.iter().map(|r| r.delta_ms).sum();
    LatencyReport {
        per_request,
        direct_total_ms,
        portal_total_ms,
        sum_of_deltas_ms,
        wall_clock_overhead_ms: portal_total_ms - direct_total_ms,
    }
}

/// One page load: wall time and per-entry samples in manifest order.
async fn load_page(
    client: &HttpClient,
    manifest: &RequestManifest,
    target: &Target,
) -> Result<(f64, Vec<Sample>), BenchError> {
    let mut samples = vec![None; manifest.entries.len()];
    let started = Instant::now();
    let limit = Arc::new(Semaphore::new(manifest.concurrency));
    for group in manifest.groups() {
        let mut set = JoinSet::new();
        for i in group {
            let entry = &manifest.entries[i];
            let url = target.url_for(&entry.path);
            let bearer = target.bearer.clone();
            let expected = entry.expected_content_type.clone();
            let client = client.clone();
            let limit = limit.clone();
            set.spawn(async move {
                let _permit = limit.acquire_owned().await.expect("semaphore open");
                (i, timed_get(&client, &url, bearer.as_deref(), &expected).await)
            });
        }
        while let Some(joined) = set.join_next().await {
            let (i, sample) = joined.expect("request task panicked");
            samples[i] = Some(sample?);
        }
    }
    let wall = started.elapsed().as_secs_f64() * 1000.0;
    Ok((wall, samples.into_iter().map(|s| s.expect("every entry ran")).collect()))
}

async fn timed_get(
    client: &HttpClient,
    url: &str,
    bearer: Option<&str>,
    expected_type: &str,
) -> Result<Sample, BenchError> {
    let unreachable = |detail: String| BenchError::TargetUnreachable {
        url: url.to_string(),
        detail,
    };
    let mut req = Request::get(url);
    if let Some(token) = bearer {
        req = req.header(header::AUTHORIZATION, format!("Bearer {token}"));
    }
    let req = req
        .body(Empty::new())
        .map_err(|e| unreachable(e.to_string()))?;

    let start = Instant::now();
    let exchange = async {
        let resp = client.request(req).await.map_err(|e| unreachable(e.to_string()))?;
        let status = resp.status();
        let content_type = resp
            .headers()
            .get(header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("")
            .to_string();
        resp.into_body()
            .collect()
            .await
            .map_err(|e| unreachable(e.to_string()))?;
        Ok::<_, BenchError>((status, content_type))
    };
    let (status, content_type) = tokio::time::timeout(REQUEST_TIMEOUT, exchange)
        .await
        .map_err(|_| unreachable("timed out".into()))??;
    let ms = start.elapsed().as_secs_f64() * 1000.0;

    let essence = content_type.split(';').next().unwrap_or("").trim();
    if status.is_success() && !essence.eq_ignore_ascii_case(expected_type) {
        warn!(%url, got = %content_type, expected = %expected_type, "unexpected content type");
    }
    Ok(Sample { status, ms })
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        (xs[mid - 1] + xs[mid]) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Format::Text),
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown format {other:?} (text, json, csv)")),
        }
    }
}

pub fn emit_report(report: &LatencyReport, format: Format, histogram: bool) -> String {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        Format::Csv => {
            let mut s = String::from("path,direct_ms,portal_ms,delta_ms\n");
            for r in &report.per_request {
                let _ = writeln!(s, "{},{:.3},{:.3},{:.3}", csv_field(&r.path), r.direct_ms, r.portal_ms, r.delta_ms);
            }
            s
        }
        Format::Text => {
            let mut s = text_table(report);
            if histogram {
                s.push('\n');
                s.push_str(&delta_histogram(report, 10));
            }
            s
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn text_table(report: &LatencyReport) -> String {
    let width = report
        .per_request
        .iter()
        .map(|r| r.path.len())
        .max()
        .unwrap_or(4)
        .max(4);
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$}  {:>10}  {:>10}  {:>10}", "path", "direct_ms", "portal_ms", "delta_ms");
    for r in &report.per_request {
        let _ = writeln!(
            s,
            "{:<width$}  {:>10.3}  {:>10.3}  {:>10.3}",
            r.path, r.direct_ms, r.portal_ms, r.delta_ms
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "direct_total_ms={:.3}", report.direct_total_ms);
    let _ = writeln!(s, "portal_total_ms={:.3}", report.portal_total_ms);
    let _ = writeln!(s, "sum_of_deltas_ms={:.3}", report.sum_of_deltas_ms);
    let _ = writeln!(s, "wall_clock_overhead_ms={:.3}", report.wall_clock_overhead_ms);
    s
}

/// Per-request deltas in equal-width buckets.
pub fn delta_histogram(report: &LatencyReport, buckets: usize) -> String {
    let deltas: Vec<f64> = report.per_request.iter().map(|r| r.delta_ms).collect();
    let mut s = String::from("delta_ms histogram\n");
    if deltas.is_empty() {
        return s;
    }
    let lo = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let buckets = buckets.max(1);
    let step = if hi > lo { (hi - lo) / buckets as f64 } else { 1.0 };
    let mut counts = vec![0usize; buckets];
    for d in &deltas {
        let b = (((d - lo) / step) as usize).min(buckets - 1);
        counts[b] += 1;
    }
    for (i, c) in counts.iter().enumerate() {
        let from = lo + step * i as f64;
        let _ = writeln!(s, "[{:>9.3}, {:>9.3})  {:<3} {}", from, from + step, c, "#".repeat(*c));
    }
    s
}
