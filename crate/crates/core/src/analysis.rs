//! Entity frequency distributions and long-tail statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::io::Write;
use std::path::Path as FsPath;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::SubsetAllocation;
use crate::corpus::ChunkStore;
use crate::extraction::EntityMap;
use crate::synthesis::SynthRecord;

pub const DEFAULT_BUCKETS: usize = 10;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("unknown ids in source: {}", .0.join(", "))]
    Integrity(Vec<String>),
    #[error("reports cover different entity universes ({left} vs {right} entities)")]
    Universe { left: usize, right: usize },
    #[error("bucket count must be positive")]
    Buckets,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionSource {
    /// Chunk membership in the original corpus.
    Raw,
    /// Path and CC pair membership in balanced subsets.
    Subsets,
    /// Fragment usage of accepted synthetic records.
    Synth,
}

impl fmt::Display for DistributionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistributionSource::Raw => "raw",
            DistributionSource::Subsets => "subsets",
            DistributionSource::Synth => "synth",
        })
    }
}

impl FromStr for DistributionSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Self::Raw),
            "subsets" => Ok(Self::Subsets),
            "synth" => Ok(Self::Synth),
            o => Err(format!("unknown source {o:?} (expected raw, subsets or synth)")),
        }
    }
}

/// Loaded data for one of the [`DistributionSource`] modes.
pub enum SourceData<'a> {
    Raw(&'a ChunkStore),
    Subsets {
        subsets: &'a [SubsetAllocation],
        include_cc: bool,
    },
    Synth(&'a [SynthRecord]),
}

impl SourceData<'_> {
    pub fn kind(&self) -> DistributionSource {
        match self {
            SourceData::Raw(_) => DistributionSource::Raw,
            SourceData::Subsets { .. } => DistributionSource::Subsets,
            SourceData::Synth(_) => DistributionSource::Synth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBucket {
    pub lower: f64,
    pub upper: f64,
    pub entities: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub source: DistributionSource,
    pub counts: BTreeMap<String, u64>,
    pub total: u64,
    pub histogram: Vec<HistogramBucket>,
    pub gini: f64,
    pub coefficient_of_variation: f64,
    pub coverage: f64,
    pub top_decile_share: f64,
}

/// Sorted-order gini: 2·Σ i·x₍ᵢ₎ / (n·Σx) − (n + 1)/n, 0 for an all-zero or
/// empty input.
pub fn gini(values: &[u64]) -> f64 {
    let n = values.len();
    let total: u64 = values.iter().sum();
    if n == 0 || total == 0 {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| (i as f64 + 1.0) * x as f64)
        .sum();
    let n = n as f64;
    2.0 * weighted / (n * total as f64) - (n + 1.0) / n
}

/// Population standard deviation over mean; 0 when the mean is 0.
pub fn coefficient_of_variation(values: &[u64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&x| x as f64).sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = values.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

pub fn top_decile_share(values: &[u64]) -> f64 {
    let total: u64 = values.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let top = values.len().div_ceil(10);
    sorted[..top].iter().sum::<u64>() as f64 / total as f64
}

/// Equal-width buckets over [0, max count].
pub fn histogram(values: &[u64], buckets: usize) -> Vec<HistogramBucket> {
    let max = values.iter().copied().max().unwrap_or(0) as f64;
    let width = if max == 0.0 { 1.0 } else { max / buckets as f64 };
    let mut out: Vec<HistogramBucket> = (0..buckets)
        .map(|b| HistogramBucket {
            lower: b as f64 * width,
            upper: (b + 1) as f64 * width,
            entities: 0,
        })
        .collect();
    for &v in values {
        let b = ((v as f64 / width).floor() as usize).min(buckets - 1);
        out[b].entities += 1;
    }
    out
}

/// Build a report from raw per-entity counts.
pub fn report_from_counts(
    source: DistributionSource,
    counts: BTreeMap<String, u64>,
    buckets: usize,
) -> Result<DistributionReport, AnalysisError> {
    if buckets == 0 {
        return Err(AnalysisError::Buckets);
    }
    let values: Vec<u64> = counts.values().copied().collect();
    let covered = values.iter().filter(|&&x| x >= 1).count();
    Ok(DistributionReport {
        source,
        total: values.iter().sum(),
        histogram: histogram(&values, buckets),
        gini: gini(&values),
        coefficient_of_variation: coefficient_of_variation(&values),
        coverage: if values.is_empty() {
            0.0
        } else {
            covered as f64 / values.len() as f64
        },
        top_decile_share: top_decile_share(&values),
        counts,
    })
}

pub fn entity_distribution(
    source: &SourceData<'_>,
    entities: &EntityMap,
    buckets: usize,
) -> Result<DistributionReport, AnalysisError> {
    let mut counts: BTreeMap<String, u64> = entities
        .records()
        .iter()
        .map(|r| (r.entity_id.clone(), 0))
        .collect();
    let mut unknown = BTreeSet::new();
    let mut bump = |id: &str, unknown: &mut BTreeSet<String>| match counts.get_mut(id) {
        Some(n) => *n += 1,
        None => {
            unknown.insert(id.to_string());
        }
    };
    match source {
        SourceData::Raw(store) => {
            for r in entities.records() {
                for c in &r.chunk_ids {
                    if store.get(c).is_none() {
                        unknown.insert(c.clone());
                    }
                    bump(&r.entity_id, &mut unknown);
                }
            }
        }
        SourceData::Subsets { subsets, include_cc } => {
            for s in subsets.iter() {
                for p in &s.cot_paths {
                    for e in p.entities() {
                        bump(e, &mut unknown);
                    }
                }
                if *include_cc {
                    for pair in &s.cc_pairs {
                        bump(&pair.left.entity_id, &mut unknown);
                        bump(&pair.right.entity_id, &mut unknown);
                    }
                }
            }
        }
        SourceData::Synth(records) => {
            for r in records.iter() {
                for e in &r.fragment_entities {
                    bump(e, &mut unknown);
                }
            }
        }
    }
    if !unknown.is_empty() {
        return Err(AnalysisError::Integrity(unknown.into_iter().collect()));
    }
    report_from_counts(source.kind(), counts, buckets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub gini: f64,
    pub coefficient_of_variation: f64,
    pub coverage: f64,
    pub top_decile_share: f64,
}

/// Deltas b − a. Both reports must cover the same entity ids.
pub fn compare_reports(a: &DistributionReport, b: &DistributionReport) -> Result<ComparisonSummary, AnalysisError> {
    if !a.counts.keys().eq(b.counts.keys()) {
        return Err(AnalysisError::Universe {
            left: a.counts.len(),
            right: b.counts.len(),
        });
    }
    Ok(ComparisonSummary {
        gini: b.gini - a.gini,
        coefficient_of_variation: b.coefficient_of_variation - a.coefficient_of_variation,
        coverage: b.coverage - a.coverage,
        top_decile_share: b.top_decile_share - a.top_decile_share,
    })
}

pub fn write_csv<W: Write>(report: &DistributionReport, sink: W) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["entity_id", "count"])?;
    for (e, n) in &report.counts {
        w.write_record([e.as_str(), &n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn render_svg_histogram(report: &DistributionReport) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    let n = report.histogram.len().max(1) as f64;
    let peak = report.histogram.iter().map(|b| b.entities).max().unwrap_or(0).max(1) as f64;
    let bar_w = (W - 2.0 * PAD) / n;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{PAD}" y="20">{} entity counts: gini {:.3}, CV {:.3}, coverage {:.3}</text>"#,
        report.source, report.gini, report.coefficient_of_variation, report.coverage
    );
    let base = H - PAD;
    let _ = writeln!(
        svg,
        r#"<line x1="{PAD}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        W - PAD
    );
    for (i, b) in report.histogram.iter().enumerate() {
        let h = (b.entities as f64 / peak) * (H - 2.0 * PAD);
        let x = PAD + i as f64 * bar_w;
        let _ = writeln!(
            svg,
            r##"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="#4a7ab5"><title>[{:.1}, {:.1}): {}</title></rect>"##,
            base - h,
            (bar_w - 2.0).max(1.0),
            b.lower,
            b.upper,
            b.entities
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{:.2}">{:.0}</text>"#,
            base + 14.0,
            b.lower
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_svg_histogram(report: &DistributionReport, path: &FsPath) -> Result<(), AnalysisError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, render_svg_histogram(report))?;
    Ok(())
}
