//! Post-hoc reports over a MOS table: modality-difference groups, score
//! correlations and score distributions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{Dimension, MosEntry, MosTable, SequenceId};
use crate::error::AnalysisError;
use crate::stats::{pearson, srocc};

pub const SLIGHT_DIFF: f64 = 0.1;
pub const LARGE_DIFF: f64 = 0.3;

/// Bucket of the per-sequence gap `AV_AQA − AV_VQA`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalityGroup {
    #[serde(rename = "A<<V")]
    AMuchLessV,
    #[serde(rename = "A<V")]
    ALessV,
    #[serde(rename = "A~V")]
    AApproxV,
    #[serde(rename = "A>V")]
    AGreaterV,
    #[serde(rename = "A>>V")]
    AMuchGreaterV,
}

impl ModalityGroup {
    pub const ALL: [ModalityGroup; 5] = [
        ModalityGroup::AMuchLessV,
        ModalityGroup::ALessV,
        ModalityGroup::AApproxV,
        ModalityGroup::AGreaterV,
        ModalityGroup::AMuchGreaterV,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ModalityGroup::AMuchLessV => "A<<V",
            ModalityGroup::ALessV => "A<V",
            ModalityGroup::AApproxV => "A~V",
            ModalityGroup::AGreaterV => "A>V",
            ModalityGroup::AMuchGreaterV => "A>>V",
        }
    }
}

/// Boundaries belong to the outer group: |diff| = 0.1 leaves `A~V`, and
/// |diff| = 0.3 is already "much".
pub fn classify_modality_group(diff: f64) -> ModalityGroup {
    // snap away float noise so that e.g. 0.3 computed as 0.29999999999999993 lands on the boundary
    let d = (diff * 1e9).round() / 1e9;
    if d <= -LARGE_DIFF {
        ModalityGroup::AMuchLessV
    } else if d <= -SLIGHT_DIFF {
        ModalityGroup::ALessV
    } else if d < SLIGHT_DIFF {
        ModalityGroup::AApproxV
    } else if d < LARGE_DIFF {
        ModalityGroup::AGreaterV
    } else {
        ModalityGroup::AMuchGreaterV
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalityRow {
    pub group: String,
    pub n: usize,
    /// Mean over sequences of the per-sequence mean audio attention.
    pub mean_audio_attention_pct: Option<f64>,
    pub mean_avqa_minus_av_vqa: Option<f64>,
    pub mean_avqa_minus_av_aqa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalityReport {
    pub rows: Vec<ModalityRow>,
    pub overall: ModalityRow,
}

fn check_finite(mos: &MosTable) -> Result<(), AnalysisError> {
    for (id, e) in mos.iter() {
        let vals = [e.mos_avqa, e.mos_av_vqa, e.mos_av_aqa, e.mean_audio_attention_pct];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(AnalysisError::MissingDimension(id.clone()));
        }
    }
    Ok(())
}

fn summarize(label: &str, entries: &[&MosEntry]) -> ModalityRow {
    let n = entries.len();
    let mean = |f: &dyn Fn(&MosEntry) -> f64| (n > 0).then(|| entries.iter().map(|e| f(e)).sum::<f64>() / n as f64);
    ModalityRow {
        group: label.to_owned(),
        n,
        mean_audio_attention_pct: mean(&|e| e.mean_audio_attention_pct),
        mean_avqa_minus_av_vqa: mean(&|e| e.mos_avqa - e.mos_av_vqa),
        mean_avqa_minus_av_aqa: mean(&|e| e.mos_avqa - e.mos_av_aqa),
    }
}

pub fn modality_report(mos: &MosTable) -> Result<ModalityReport, AnalysisError> {
    check_finite(mos)?;
    let mut buckets: BTreeMap<ModalityGroup, Vec<&MosEntry>> = BTreeMap::new();
    for (_, e) in mos.iter() {
        buckets
            .entry(classify_modality_group(e.mos_av_aqa - e.mos_av_vqa))
            .or_default()
            .push(e);
    }
    let rows = ModalityGroup::ALL
        .iter()
        .map(|g| summarize(g.label(), buckets.get(g).map(Vec::as_slice).unwrap_or(&[])))
        .collect();
    let all: Vec<&MosEntry> = mos.iter().map(|(_, e)| e).collect();
    Ok(ModalityReport {
        rows,
        overall: summarize("overall", &all),
    })
}

impl ModalityReport {
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        let mut out = String::from("group,n,subj_audio_pct,diff_avqa_minus_av_vqa,diff_avqa_minus_av_aqa\n");
        for r in self.rows.iter().chain(std::iter::once(&self.overall)) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.group,
                r.n,
                fmt(r.mean_audio_attention_pct),
                fmt(r.mean_avqa_minus_av_vqa),
                fmt(r.mean_avqa_minus_av_aqa)
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub dimensions: [Dimension; 3],
    /// `None` where a column is constant.
    pub srocc: [[Option<f64>; 3]; 3],
    pub pearson: [[Option<f64>; 3]; 3],
}

pub fn correlation_report(mos: &MosTable) -> Result<CorrelationReport, AnalysisError> {
    check_finite(mos)?;
    if mos.len() < 3 {
        return Err(AnalysisError::TooFew { needed: 3, got: mos.len() });
    }
    let cols = Dimension::ALL.map(|d| mos.column(d));
    let mut s = [[None; 3]; 3];
    let mut p = [[None; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            // lengths match and n >= 3, so these cannot error
            let rs = srocc(&cols[i], &cols[j]).expect("equal-length columns");
            let rp = pearson(&cols[i], &cols[j]).expect("equal-length columns");
            let (rs, rp) = if i == j { (rs.map(|_| 1.0), rp.map(|_| 1.0)) } else { (rs, rp) };
            s[i][j] = rs;
            s[j][i] = rs;
            p[i][j] = rp;
            p[j][i] = rp;
        }
    }
    Ok(CorrelationReport {
        dimensions: Dimension::ALL,
        srocc: s,
        pearson: p,
    })
}

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DimensionDistribution {
    pub dimension: String,
    /// 20 equal bins over [1, 5]; 5.0 falls in the last bin.
    pub histogram: Vec<usize>,
    pub mean: f64,
    /// Sample standard deviation; 0 when only one sequence.
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionReport {
    pub n_sequences: usize,
    pub single_sequence: bool,
    pub dimensions: Vec<DimensionDistribution>,
    /// Statistics across per-sequence mean attention values.
    pub attention_per_sequence_mean: f64,
    pub attention_per_sequence_sd: f64,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn score_histogram(values: &[f64]) -> Vec<usize> {
    let mut h = vec![0; HISTOGRAM_BINS];
    for v in values {
        let pos = ((v - 1.0) / 4.0 * HISTOGRAM_BINS as f64 + 1e-9).floor();
        h[(pos.max(0.0) as usize).min(HISTOGRAM_BINS - 1)] += 1;
    }
    h
}

pub fn distribution_report(mos: &MosTable) -> Result<DistributionReport, AnalysisError> {
    if mos.is_empty() {
        return Err(AnalysisError::Empty);
    }
    check_finite(mos)?;
    let dimensions = Dimension::ALL
        .iter()
        .map(|&d| {
            let col = mos.column(d);
            let (mean, sd) = mean_sd(&col);
            DimensionDistribution {
                dimension: d.name().to_owned(),
                histogram: score_histogram(&col),
                mean,
                sd,
            }
        })
        .collect();
    let attention: Vec<f64> = mos.iter().map(|(_, e)| e.mean_audio_attention_pct).collect();
    let (am, asd) = mean_sd(&attention);
    Ok(DistributionReport {
        n_sequences: mos.len(),
        single_sequence: mos.len() == 1,
        dimensions,
        attention_per_sequence_mean: am,
        attention_per_sequence_sd: asd,
    })
}

/// Mean audio attention per semantic category; exploratory only.
pub fn attention_by_category(
    mos: &MosTable,
    categories: &BTreeMap<SequenceId, String>,
) -> BTreeMap<String, (usize, f64)> {
    let mut acc: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for (id, e) in mos.iter() {
        if let Some(cat) = categories.get(id) {
            let slot = acc.entry(cat.clone()).or_default();
            slot.0 += 1;
            slot.1 += e.mean_audio_attention_pct;
        }
    }
    for v in acc.values_mut() {
        v.1 /= v.0 as f64;
    }
    acc
}

/// Point lists for external plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub sequence_ids: Vec<SequenceId>,
    pub avqa: Vec<f64>,
    pub av_vqa: Vec<f64>,
    pub av_aqa: Vec<f64>,
    pub audio_attention_pct: Vec<f64>,
}

pub fn plot_data(mos: &MosTable) -> PlotData {
    PlotData {
        sequence_ids: mos.entries.keys().cloned().collect(),
        avqa: mos.column(Dimension::Avqa),
        av_vqa: mos.column(Dimension::AvVqa),
        av_aqa: mos.column(Dimension::AvAqa),
        audio_attention_pct: mos.iter().map(|(_, e)| e.mean_audio_attention_pct).collect(),
    }
}
