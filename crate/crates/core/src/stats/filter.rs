//! MOS aggregation and ranking-consistency / dispersion filtering.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rank::{dispersion, srocc};
use crate::domain::{
    Dimension, FilterThresholds, MosEntry, MosTable, SequenceId, Submission, SubmissionId, Verdict, WorkerId,
};
use crate::error::StatsError;

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    tenths: [i64; 3],
    attention: i64,
    n: u32,
}

/// Running per-sequence sums over integer tenths; means are exact up to the
/// final division.
#[derive(Debug, Clone, Default)]
pub struct MosAccumulator {
    sums: BTreeMap<SequenceId, Sums>,
}

impl MosAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, sub: &Submission) {
        for r in &sub.records {
            let s = self.sums.entry(r.sequence_id.clone()).or_default();
            for (i, dim) in Dimension::ALL.into_iter().enumerate() {
                s.tenths[i] += i64::from(r.score(dim).tenths());
            }
            s.attention += i64::from(r.q4_audio_attention_pct.audio());
            s.n += 1;
        }
    }

    fn entry(s: &Sums) -> MosEntry {
        let n = f64::from(s.n);
        MosEntry {
            mos_avqa: s.tenths[0] as f64 / 10.0 / n,
            mos_av_vqa: s.tenths[1] as f64 / 10.0 / n,
            mos_av_aqa: s.tenths[2] as f64 / 10.0 / n,
            mean_audio_attention_pct: s.attention as f64 / n,
            n_ratings: s.n,
        }
    }

    pub fn finish(&self) -> MosTable {
        MosTable {
            entries: self
                .sums
                .iter()
                .filter(|(_, s)| s.n > 0)
                .map(|(id, s)| (id.clone(), Self::entry(s)))
                .collect(),
        }
    }

    /// MOS for one sequence with `sub`'s own ratings removed.
    fn without(&self, id: &SequenceId, sub: &Submission) -> Option<MosEntry> {
        let mut s = *self.sums.get(id)?;
        for r in sub.records.iter().filter(|r| &r.sequence_id == id) {
            for (i, dim) in Dimension::ALL.into_iter().enumerate() {
                s.tenths[i] -= i64::from(r.score(dim).tenths());
            }
            s.attention -= i64::from(r.q4_audio_attention_pct.audio());
            s.n -= 1;
        }
        (s.n > 0).then(|| Self::entry(&s))
    }
}

/// Per-sequence, per-dimension arithmetic means over every rating in `subs`.
///
/// Every rated sequence must be in `known`. Sequences without ratings are
/// absent from the table.
pub fn compute_mos<'a>(
    subs: impl IntoIterator<Item = &'a Submission>,
    known: &HashSet<SequenceId>,
) -> Result<MosTable, StatsError> {
    let mut acc = MosAccumulator::new();
    for sub in subs {
        if let Some(r) = sub.records.iter().find(|r| !known.contains(&r.sequence_id)) {
            return Err(StatsError::UnknownSequence(r.sequence_id.clone()));
        }
        acc.add(sub);
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Srocc,
    Std,
    SroccAndStd,
    InsufficientOverlap,
}

impl RejectReason {
    pub fn name(self) -> &'static str {
        match self {
            RejectReason::Srocc => "srocc",
            RejectReason::Std => "std",
            RejectReason::SroccAndStd => "srocc_and_std",
            RejectReason::InsufficientOverlap => "insufficient_overlap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub submission_id: SubmissionId,
    pub worker_id: WorkerId,
    /// Undefined correlations are already mapped to 0.
    pub per_dimension_srocc: [f64; 3],
    pub per_dimension_std: [f64; 3],
    pub avg_srocc: f64,
    pub avg_std: f64,
    pub accepted: bool,
    pub reject_reason: Option<RejectReason>,
}

impl FilterOutcome {
    pub fn verdict(&self) -> Verdict {
        match self.reject_reason {
            None => Verdict::Accepted,
            Some(RejectReason::Srocc | RejectReason::SroccAndStd) => Verdict::RejectedSrocc,
            Some(RejectReason::Std) => Verdict::RejectedStd,
            Some(RejectReason::InsufficientOverlap) => Verdict::RejectedInvalid,
        }
    }

    fn unusable(sub: &Submission) -> Self {
        FilterOutcome {
            submission_id: sub.submission_id.clone(),
            worker_id: sub.worker_id.clone(),
            per_dimension_srocc: [0.0; 3],
            per_dimension_std: [0.0; 3],
            avg_srocc: 0.0,
            avg_std: 0.0,
            accepted: false,
            reject_reason: Some(RejectReason::InsufficientOverlap),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct FilterOptions {
    pub thresholds: FilterThresholds,
    /// Exclude the scored submission from its own reference MOS.
    pub leave_one_out: bool,
}

impl From<FilterThresholds> for FilterOptions {
    fn from(thresholds: FilterThresholds) -> Self {
        FilterOptions {
            thresholds,
            leave_one_out: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum FilterMode<'a> {
    /// Consensus built from the submissions being filtered.
    SinglePass,
    /// Consensus supplied externally (e.g. pretest MOS during qualification).
    WithReference(&'a MosTable),
}

fn score_with(
    sub: &Submission,
    thresholds: FilterThresholds,
    reference: impl Fn(&SequenceId) -> Option<MosEntry>,
) -> Result<FilterOutcome, StatsError> {
    let merged: Vec<(&crate::domain::RatingRecord, MosEntry)> = sub
        .records
        .iter()
        .filter_map(|r| reference(&r.sequence_id).map(|m| (r, m)))
        .collect();
    if merged.len() < 2 {
        return Err(StatsError::InsufficientOverlap(merged.len()));
    }

    let mut per_srocc = [0.0; 3];
    let mut per_std = [0.0; 3];
    for (i, dim) in Dimension::ALL.into_iter().enumerate() {
        let ratings: Vec<f64> = merged.iter().map(|(r, _)| r.score(dim).value()).collect();
        let mos: Vec<f64> = merged.iter().map(|(_, m)| m.get(dim)).collect();
        per_srocc[i] = srocc(&ratings, &mos)?.unwrap_or(0.0);
        per_std[i] = dispersion(&ratings)?;
    }
    let avg_srocc = per_srocc.iter().sum::<f64>() / 3.0;
    let avg_std = per_std.iter().sum::<f64>() / 3.0;

    let srocc_ok = avg_srocc > thresholds.srocc_min;
    let std_ok = avg_std > thresholds.std_min;
    let reject_reason = match (srocc_ok, std_ok) {
        (true, true) => None,
        (false, true) => Some(RejectReason::Srocc),
        (true, false) => Some(RejectReason::Std),
        (false, false) => Some(RejectReason::SroccAndStd),
    };
    Ok(FilterOutcome {
        submission_id: sub.submission_id.clone(),
        worker_id: sub.worker_id.clone(),
        per_dimension_srocc: per_srocc,
        per_dimension_std: per_std,
        avg_srocc,
        avg_std,
        accepted: reject_reason.is_none(),
        reject_reason,
    })
}

/// Scores one submission against a consensus table.
///
/// Sequences missing from `reference` are dropped from the comparison; fewer
/// than two remaining is an error.
pub fn score_submission(
    sub: &Submission,
    reference: &MosTable,
    thresholds: FilterThresholds,
) -> Result<FilterOutcome, StatsError> {
    score_with(sub, thresholds, |id| reference.get(id).copied())
}

/// One pass of consensus filtering.
///
/// Returns an outcome per input submission, in input order, and the MOS table
/// recomputed from the accepted submissions only.
pub fn dynamic_filter(
    subs: &[Submission],
    options: FilterOptions,
    mode: FilterMode<'_>,
) -> (Vec<FilterOutcome>, MosTable) {
    if subs.is_empty() {
        return (Vec::new(), MosTable::default());
    }
    let thresholds = options.thresholds;

    let outcomes: Vec<FilterOutcome> = match mode {
        FilterMode::SinglePass => {
            let mut acc = MosAccumulator::new();
            subs.iter().for_each(|s| acc.add(s));
            let preliminary = acc.finish();
            subs.par_iter()
                .map(|sub| {
                    let scored = if options.leave_one_out {
                        score_with(sub, thresholds, |id| acc.without(id, sub))
                    } else {
                        score_submission(sub, &preliminary, thresholds)
                    };
                    scored.unwrap_or_else(|_| FilterOutcome::unusable(sub))
                })
                .collect()
        }
        FilterMode::WithReference(reference) => subs
            .par_iter()
            .map(|sub| score_submission(sub, reference, thresholds).unwrap_or_else(|_| FilterOutcome::unusable(sub)))
            .collect(),
    };

    let mut acc = MosAccumulator::new();
    for (sub, outcome) in subs.iter().zip(&outcomes) {
        if outcome.accepted {
            acc.add(sub);
        }
    }
    (outcomes, acc.finish())
}
