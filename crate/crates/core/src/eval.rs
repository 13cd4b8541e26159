//! Classification metrics, the top-K-at-minimum-confidence precision study,
//! per-region recall, and CSV/markdown report tables.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::raster::Label;

/// Probability at or above which a chip is predicted irrigated.
pub const DECISION_THRESHOLD: f64 = 0.5;
/// Region name of the aggregate row appended by [`recall_by_region`].
pub const OVERALL_REGION: &str = "overall";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("only {available} positive predictions, {requested} requested")]
    FewerThanK { requested: usize, available: usize },
    #[error("prediction `{0}` has no region tag")]
    MissingRegion(String),
    #[error("probability {probability} for `{id}` is not in [0, 1]")]
    InvalidProbability { id: String, probability: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    /// Probability of the irrigated class.
    pub probability: f64,
    pub region: Option<String>,
}

impl Prediction {
    pub fn new(id: impl Into<String>, probability: f64) -> Result<Self, EvalError> {
        let id = id.into();
        if !(0.0..=1.0).contains(&probability) {
            return Err(EvalError::InvalidProbability { id, probability });
        }
        Ok(Self { id, probability, region: None })
    }

    pub fn with_region(mut self, region: impl Into<String>) -> Self {
        self.region = Some(region.into());
        self
    }

    pub fn predicted(&self) -> Label {
        if self.probability >= DECISION_THRESHOLD {
            Label::Irrigated
        } else {
            Label::NotIrrigated
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }
}

/// Recall over the chips of one region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionRecall {
    pub region: String,
    pub n: usize,
    pub detected: usize,
    pub recall: f64,
}

/// Descriptive fields carried alongside the numbers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StudyMetadata {
    pub model_id: Option<String>,
    /// Records in the evaluated split.
    pub split_size: Option<usize>,
    pub effective_threshold: Option<f64>,
    /// Free-form description of how repeated runs were aggregated.
    pub aggregation: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    /// Set when nothing was predicted irrigated.
    pub no_positive_predictions: bool,
    pub regions: Vec<RegionRecall>,
    pub metadata: StudyMetadata,
}

/// F1 as the harmonic mean, zero when both inputs are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Precision, recall and F1 of irrigated-class predictions.
///
/// With no positive predictions precision is 1 when no positives exist and
/// 0 otherwise, and the report is flagged. With no positives in the labels
/// recall is vacuously 1.
pub fn confusion_metrics(predictions: &[Prediction], labels: &[Label]) -> Result<MetricsReport, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut c = ConfusionCounts::default();
    for (p, &truth) in predictions.iter().zip(labels) {
        match (p.predicted(), truth) {
            (Label::Irrigated, Label::Irrigated) => c.true_positive += 1,
            (Label::Irrigated, Label::NotIrrigated) => c.false_positive += 1,
            (Label::NotIrrigated, Label::NotIrrigated) => c.true_negative += 1,
            (Label::NotIrrigated, Label::Irrigated) => c.false_negative += 1,
        }
    }
    let predicted_pos = c.true_positive + c.false_positive;
    let actual_pos = c.true_positive + c.false_negative;
    let precision = match (predicted_pos, actual_pos) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        (p, _) => c.true_positive as f64 / p as f64,
    };
    let recall = if actual_pos == 0 { 1.0 } else { c.true_positive as f64 / actual_pos as f64 };
    Ok(MetricsReport {
        precision,
        recall,
        f1: f1_score(precision, recall),
        counts: c,
        no_positive_predictions: predicted_pos == 0,
        regions: Vec::new(),
        metadata: StudyMetadata::default(),
    })
}

/// Outcome of the top-K precision protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    /// Selected chip ids, highest probability first.
    pub ids: Vec<String>,
    pub probabilities: Vec<f64>,
    /// Probability of the k-th selected item.
    pub effective_threshold: f64,
    /// The requested minimum confidence had to be relaxed to fill k slots.
    pub below_requested: bool,
}

fn by_confidence(a: &Prediction, b: &Prediction) -> Ordering {
    b.probability.total_cmp(&a.probability).then_with(|| a.id.cmp(&b.id))
}

/// The `k` most confident irrigated predictions (ties by id ascending).
pub fn top_k_confident(predictions: &[Prediction], k: usize, min_confidence: f64) -> Result<TopK, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    let mut positives: Vec<&Prediction> = predictions.iter().filter(|p| p.predicted() == Label::Irrigated).collect();
    if positives.len() < k {
        return Err(EvalError::FewerThanK { requested: k, available: positives.len() });
    }
    positives.sort_by(|a, b| by_confidence(a, b));
    positives.truncate(k);
    let effective_threshold = positives[k - 1].probability;
    Ok(TopK {
        ids: positives.iter().map(|p| p.id.clone()).collect(),
        probabilities: positives.iter().map(|p| p.probability).collect(),
        effective_threshold,
        below_requested: effective_threshold < min_confidence,
    })
}

/// Recall per region over chips that are all truly irrigated, sorted by
/// region name, followed by an [`OVERALL_REGION`] row.
pub fn recall_by_region(predictions: &[Prediction]) -> Result<Vec<RegionRecall>, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut groups: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for p in predictions {
        let region = p.region.as_deref().ok_or_else(|| EvalError::MissingRegion(p.id.clone()))?;
        let slot = groups.entry(region).or_default();
        slot.0 += 1;
        slot.1 += usize::from(p.predicted() == Label::Irrigated);
    }
    let row = |region: &str, n: usize, detected: usize| RegionRecall {
        region: region.to_string(),
        n,
        detected,
        recall: detected as f64 / n as f64,
    };
    let mut rows: Vec<RegionRecall> = groups.iter().map(|(r, &(n, d))| row(r, n, d)).collect();
    let (n, d) = groups.values().fold((0, 0), |acc, &(n, d)| (acc.0 + n, acc.1 + d));
    rows.push(row(OVERALL_REGION, n, d));
    Ok(rows)
}

/// Which metric a comparison table reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudyMetric {
    Precision,
    Recall,
}

impl StudyMetric {
    pub fn name(self) -> &'static str {
        match self {
            StudyMetric::Precision => "precision",
            StudyMetric::Recall => "recall",
        }
    }

    fn title(self) -> &'static str {
        match self {
            StudyMetric::Precision => "Precision",
            StudyMetric::Recall => "Recall",
        }
    }

    /// The metric's value in a metrics report.
    pub fn of(self, report: &MetricsReport) -> f64 {
        match self {
            StudyMetric::Precision => report.precision,
            StudyMetric::Recall => report.recall,
        }
    }
}

/// One line of a comparison between the self-supervised and the supervised
/// model at one training size.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub region: Option<String>,
    pub training_size: usize,
    pub self_supervised: f64,
    pub supervised: f64,
}

/// Rows of one study. Tables with region tags gain a leading country column.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyTable {
    pub metric: StudyMetric,
    pub rows: Vec<StudyRow>,
    /// Shown under the markdown table.
    pub note: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format `{other}` (expected csv or markdown)")),
        }
    }
}

/// `x` rounded half-up to two decimals. Ties are detected with a small
/// tolerance so that binary representation error (0.125 stored as
/// 0.12499…) does not round them down.
pub fn format_2dp(x: f64) -> String {
    let scaled = x * 100.0;
    let floor = scaled.floor();
    let cents = if scaled - floor >= 0.5 - 1e-9 { floor + 1.0 } else { floor };
    let cents = cents as i64;
    let sign = if cents < 0 { "-" } else { "" };
    format!("{sign}{}.{:02}", cents.abs() / 100, cents.abs() % 100)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn md_cell(s: &str) -> String {
    s.replace('|', "\\|")
}

/// Renders a study table. Output is deterministic and uses LF line endings.
pub fn emit_report(table: &StudyTable, format: ReportFormat) -> Result<Vec<u8>, EvalError> {
    if table.rows.is_empty() {
        return Err(EvalError::Empty);
    }
    let regional = table.rows.iter().any(|r| r.region.is_some());
    let metric = table.metric;
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            if regional {
                out.push_str("country,");
            }
            let _ = writeln!(out, "training_size,{m}_self_supervised,{m}_supervised", m = metric.name());
            for r in &table.rows {
                if regional {
                    out.push_str(&csv_field(r.region.as_deref().unwrap_or("")));
                    out.push(',');
                }
                let _ =
                    writeln!(out, "{},{},{}", r.training_size, format_2dp(r.self_supervised), format_2dp(r.supervised));
            }
        }
        ReportFormat::Markdown => {
            let size_title = if regional { "Training data (num records)" } else { "Training data size (num records)" };
            let t = metric.title();
            if regional {
                out.push_str("| Country ");
            }
            let _ = writeln!(out, "| {size_title} | {t} (SimCLR-S2) | {t} (supervised) |");
            if regional {
                out.push_str("|---");
            }
            out.push_str("|---:|---:|---:|\n");
            for r in &table.rows {
                if regional {
                    let _ = write!(out, "| {} ", md_cell(r.region.as_deref().unwrap_or("")));
                }
                let _ = writeln!(
                    out,
                    "| {} | {} | {} |",
                    r.training_size,
                    format_2dp(r.self_supervised),
                    format_2dp(r.supervised)
                );
            }
            if let Some(note) = &table.note {
                let _ = write!(out, "\n{}\n", note.trim_end());
            }
        }
    }
    Ok(out.into_bytes())
}

/// A metrics report as a two-column `metric,value` CSV.
pub fn metrics_csv(report: &MetricsReport) -> String {
    let c = &report.counts;
    let mut out = String::from("metric,value\n");
    let _ = writeln!(out, "precision,{}", report.precision);
    let _ = writeln!(out, "recall,{}", report.recall);
    let _ = writeln!(out, "f1,{}", report.f1);
    let _ = writeln!(out, "true_positive,{}", c.true_positive);
    let _ = writeln!(out, "false_positive,{}", c.false_positive);
    let _ = writeln!(out, "true_negative,{}", c.true_negative);
    let _ = writeln!(out, "false_negative,{}", c.false_negative);
    let _ = writeln!(out, "no_positive_predictions,{}", report.no_positive_predictions);
    let m = &report.metadata;
    if let Some(id) = &m.model_id {
        let _ = writeln!(out, "model_id,{}", csv_field(id));
    }
    if let Some(n) = m.split_size {
        let _ = writeln!(out, "split_size,{n}");
    }
    if let Some(t) = m.effective_threshold {
        let _ = writeln!(out, "effective_threshold,{t}");
    }
    if let Some(a) = &m.aggregation {
        let _ = writeln!(out, "aggregation,{}", csv_field(a));
    }
    for r in &report.regions {
        let _ = writeln!(out, "recall[{}],{}", csv_field(&r.region), r.recall);
    }
    out
}

/// Predictions as `id,probability,predicted,region` CSV.
pub fn predictions_csv(predictions: &[Prediction]) -> String {
    let mut out = String::from("id,probability,predicted,region\n");
    for p in predictions {
        let predicted = u8::from(p.predicted() == Label::Irrigated);
        let region = p.region.as_deref().map(csv_field).unwrap_or_default();
        let _ = writeln!(out, "{},{},{predicted},{region}", csv_field(&p.id), p.probability);
    }
    out
}
