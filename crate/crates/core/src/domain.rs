//! Shared vocabulary: stimuli, ratings, submissions, subjects and stages.
//!
//! Scores are held as integer tenths and attention as integer percent so the
//! rating scales are exact; decimals only appear at (de)serialization.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::DomainError;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

id_type!(
    /// Opaque stimulus identifier.
    SequenceId
);
id_type!(GroupId);
id_type!(
    /// Crowd-platform worker id, supplied by the caller.
    WorkerId
);
id_type!(SubmissionId);

/// Non-empty subset of the three coarse audio categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AudioSemantics(u8);

impl AudioSemantics {
    pub const SPEECH: Self = Self(0b001);
    pub const MUSIC: Self = Self(0b010);
    pub const SOUND: Self = Self(0b100);
    pub const SPEECH_MUSIC: Self = Self(0b011);
    pub const SPEECH_SOUND: Self = Self(0b101);
    pub const MUSIC_SOUND: Self = Self(0b110);
    pub const ALL_THREE: Self = Self(0b111);

    /// The seven subsets in canonical order: singles, pairs, then the triple.
    pub const ALL: [Self; 7] = [
        Self::SPEECH,
        Self::MUSIC,
        Self::SOUND,
        Self::SPEECH_MUSIC,
        Self::SPEECH_SOUND,
        Self::MUSIC_SOUND,
        Self::ALL_THREE,
    ];

    pub fn from_bits(bits: u8) -> Option<Self> {
        (1..=7).contains(&bits).then_some(Self(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn is_single(self) -> bool {
        self.0.count_ones() == 1
    }

    /// Position in [`AudioSemantics::ALL`].
    pub fn canonical_index(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).expect("valid subset")
    }

    pub fn contains(self, other: Self) -> bool {
        self.0 & other.0 == other.0
    }
}

impl fmt::Display for AudioSemantics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::with_capacity(3);
        for (bit, name) in [(1u8, "speech"), (2, "music"), (4, "sound")] {
            if self.0 & bit != 0 {
                parts.push(name);
            }
        }
        f.write_str(&parts.join(";"))
    }
}

impl FromStr for AudioSemantics {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut bits = 0u8;
        for part in s.split([';', '+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            bits |= match part.to_ascii_lowercase().as_str() {
                "speech" => 1,
                "music" => 2,
                "sound" => 4,
                _ => return Err(DomainError::Parse(format!("unknown audio category `{part}`"))),
            };
        }
        Self::from_bits(bits)
            .ok_or_else(|| DomainError::Parse("audio_semantics must name at least one category".into()))
    }
}

impl Serialize for AudioSemantics {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AudioSemantics {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    #[default]
    Sampled,
    Manual,
}

/// One audio-visual stimulus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub id: SequenceId,
    /// `None` for candidates that have not been placed into a rating group.
    pub group_id: Option<GroupId>,
    pub duration_s: f64,
    pub width: u32,
    pub height: u32,
    pub audio_semantics: AudioSemantics,
    pub pseudo_audio_pq: f64,
    pub pseudo_audio_ce: f64,
    pub pseudo_video_q: f64,
    pub origin: Origin,
}

impl Sequence {
    pub fn validate(&self) -> Result<(), DomainError> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(DomainError::Invalid(format!(
                "sequence {} has non-positive duration {}",
                self.id, self.duration_s
            )));
        }
        if self.id.0.is_empty() {
            return Err(DomainError::Invalid("sequence id is empty".into()));
        }
        Ok(())
    }
}

/// The three rated quality dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dimension {
    #[serde(rename = "avqa")]
    Avqa,
    #[serde(rename = "av_vqa")]
    AvVqa,
    #[serde(rename = "av_aqa")]
    AvAqa,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Avqa, Dimension::AvVqa, Dimension::AvAqa];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Avqa => "avqa",
            Dimension::AvVqa => "av_vqa",
            Dimension::AvAqa => "av_aqa",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A quality score on the 1.0–5.0 scale, stored as integer tenths.
///
/// Values outside the scale are representable so that intake can record and
/// flag them; [`Score::in_scale`] is the validity check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Score(i16);

impl Score {
    pub const MIN: Score = Score(10);
    pub const MAX: Score = Score(50);

    pub const fn from_tenths(tenths: i16) -> Self {
        Score(tenths)
    }

    /// Quantizes a decimal to the nearest tenth.
    pub fn from_decimal(value: f64) -> Result<Self, DomainError> {
        if !value.is_finite() {
            return Err(DomainError::Parse(format!("score {value} is not finite")));
        }
        let tenths = (value * 10.0).round();
        if tenths.abs() > i16::MAX as f64 {
            return Err(DomainError::Parse(format!("score {value} out of representable range")));
        }
        Ok(Score(tenths as i16))
    }

    /// Clamps to the scale, then quantizes.
    pub fn clamped(value: f64) -> Self {
        let v = if value.is_nan() { 1.0 } else { value.clamp(1.0, 5.0) };
        Score((v * 10.0).round() as i16)
    }

    pub fn tenths(self) -> i16 {
        self.0
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 10.0
    }

    pub fn in_scale(self) -> bool {
        (Self::MIN.0..=Self::MAX.0).contains(&self.0)
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}", self.value())
    }
}

impl Serialize for Score {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Score::from_decimal(f64::deserialize(deserializer)?).map_err(serde::de::Error::custom)
    }
}

/// Share of attention given to audio, in whole percent. Video gets the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttentionPct(i16);

impl AttentionPct {
    pub fn new(audio_pct: i16) -> Self {
        AttentionPct(audio_pct)
    }

    pub fn from_decimal(value: f64) -> Result<Self, DomainError> {
        if !value.is_finite() || value.abs() > 10_000.0 {
            return Err(DomainError::Parse(format!("attention {value} is not a valid percentage")));
        }
        Ok(AttentionPct(value.round() as i16))
    }

    pub fn clamped(value: f64) -> Self {
        let v = if value.is_nan() { 50.0 } else { value.clamp(0.0, 100.0) };
        AttentionPct(v.round() as i16)
    }

    pub fn audio(self) -> i16 {
        self.0
    }

    pub fn video(self) -> i16 {
        100 - self.0
    }

    pub fn in_range(self) -> bool {
        (0..=100).contains(&self.0)
    }
}

impl Serialize for AttentionPct {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_i16(self.0)
    }
}

impl<'de> Deserialize<'de> for AttentionPct {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        AttentionPct::from_decimal(f64::deserialize(deserializer)?).map_err(serde::de::Error::custom)
    }
}

/// The four answers given for one sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub sequence_id: SequenceId,
    pub q1_avqa: Score,
    pub q2_av_vqa: Score,
    pub q3_av_aqa: Score,
    pub q4_audio_attention_pct: AttentionPct,
}

impl RatingRecord {
    pub fn score(&self, dim: Dimension) -> Score {
        match dim {
            Dimension::Avqa => self.q1_avqa,
            Dimension::AvVqa => self.q2_av_vqa,
            Dimension::AvAqa => self.q3_av_aqa,
        }
    }

    pub fn in_scale(&self) -> bool {
        self.q1_avqa.in_scale()
            && self.q2_av_vqa.in_scale()
            && self.q3_av_aqa.in_scale()
            && self.q4_audio_attention_pct.in_range()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretest,
    Qualification,
    Formal,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Pretest, Stage::Qualification, Stage::Formal];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretest => "pretest",
            Stage::Qualification => "qualification",
            Stage::Formal => "formal",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pretest" => Ok(Stage::Pretest),
            "qualification" => Ok(Stage::Qualification),
            "formal" => Ok(Stage::Formal),
            other => Err(DomainError::Parse(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    #[default]
    Pending,
    Accepted,
    RejectedSrocc,
    RejectedStd,
    RejectedInvalid,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Pending => "pending",
            Verdict::Accepted => "accepted",
            Verdict::RejectedSrocc => "rejected_srocc",
            Verdict::RejectedStd => "rejected_std",
            Verdict::RejectedInvalid => "rejected_invalid",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Play,
    Pause,
    Ended,
    SeekAttempt,
    FullscreenExit,
    SliderChange,
}

/// One timestamped client-side event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub t_ms: i64,
    pub sequence_id: SequenceId,
    pub kind: EventKind,
}

/// Total playback time of `sequence` in the log, in milliseconds.
///
/// A playback interval opens at `play` and closes at the next `pause` or
/// `ended` for the same sequence. An interval left open contributes nothing.
pub fn watch_time_ms(log: &[InteractionEvent], sequence: &SequenceId) -> i64 {
    let mut total = 0;
    let mut started: Option<i64> = None;
    for ev in log.iter().filter(|e| &e.sequence_id == sequence) {
        match ev.kind {
            EventKind::Play => {
                started.get_or_insert(ev.t_ms);
            }
            EventKind::Pause | EventKind::Ended => {
                if let Some(t0) = started.take() {
                    total += (ev.t_ms - t0).max(0);
                }
            }
            _ => {}
        }
    }
    total
}

/// One completed rating session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub submission_id: SubmissionId,
    pub worker_id: WorkerId,
    pub group_id: GroupId,
    pub stage: Stage,
    pub records: Vec<RatingRecord>,
    pub user_agent: String,
    pub interaction_log: Vec<InteractionEvent>,
    pub watch_complete: bool,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_checks: Option<serde_json::Value>,
}

impl Submission {
    pub fn key(&self) -> SubmissionKey {
        SubmissionKey {
            worker_id: self.worker_id.clone(),
            stage: self.stage,
            group_id: self.group_id.clone(),
        }
    }
}

/// A worker may hold at most one submission per (stage, group).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubmissionKey {
    pub worker_id: WorkerId,
    pub stage: Stage,
    pub group_id: GroupId,
}

/// Crowd-platform profile figures reported with each task request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub approval_rate: f64,
    pub approved_hits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub worker_id: WorkerId,
    pub approval_rate_pct: f64,
    pub approved_hits: u32,
    pub qualified: bool,
    pub history: BTreeSet<(Stage, GroupId)>,
}

impl Subject {
    pub fn new(worker_id: WorkerId, profile: WorkerProfile) -> Self {
        Subject {
            worker_id,
            approval_rate_pct: profile.approval_rate,
            approved_hits: profile.approved_hits,
            qualified: false,
            history: BTreeSet::new(),
        }
    }

    /// Returns `true` when this call changed the flag.
    pub fn grant_qualification(&mut self) -> bool {
        !std::mem::replace(&mut self.qualified, true)
    }

    pub fn has_completed(&self, stage: Stage, group: &GroupId) -> bool {
        self.history.contains(&(stage, group.clone()))
    }
}

/// Admission rule for a stage. Absent thresholds are not checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eligibility {
    /// Strictly exceeded, e.g. "above 97%".
    #[serde(default)]
    pub min_approval_rate_pct: Option<f64>,
    /// Strictly exceeded, e.g. "more than 500".
    #[serde(default)]
    pub min_approved_hits: Option<u32>,
    #[serde(default)]
    pub requires_qualified: bool,
}

impl Default for Eligibility {
    /// The platform gate: approval rate above 97% and more than 500 approved
    /// tasks.
    fn default() -> Self {
        Eligibility {
            min_approval_rate_pct: Some(97.0),
            min_approved_hits: Some(500),
            requires_qualified: false,
        }
    }
}

impl Eligibility {
    /// Anyone may take part.
    pub fn open() -> Self {
        Eligibility {
            min_approval_rate_pct: None,
            min_approved_hits: None,
            requires_qualified: false,
        }
    }

    /// Platform gate plus the AVQA_Certified qualification.
    pub fn formal() -> Self {
        Eligibility {
            requires_qualified: true,
            ..Self::default()
        }
    }

    /// `Err` carries a human-readable reason.
    pub fn check(&self, profile: &WorkerProfile, qualified: bool) -> Result<(), String> {
        if let Some(min) = self.min_approval_rate_pct {
            if profile.approval_rate.is_nan() || profile.approval_rate <= min {
                return Err(format!("approval rate {} not above {min}", profile.approval_rate));
            }
        }
        if let Some(min) = self.min_approved_hits {
            if profile.approved_hits <= min {
                return Err(format!("{} approved tasks, more than {min} required", profile.approved_hits));
            }
        }
        if self.requires_qualified && !qualified {
            return Err("stage requires the AVQA_Certified qualification".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub srocc_min: f64,
    pub std_min: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            srocc_min: 0.5,
            std_min: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDef {
    pub id: GroupId,
    pub sequences: Vec<SequenceId>,
}

/// Declarative definition of one study stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub group_size: usize,
    pub groups: Vec<GroupDef>,
    pub eligibility: Eligibility,
    pub thresholds: FilterThresholds,
}

impl StageConfig {
    pub fn group(&self, id: &GroupId) -> Option<&GroupDef> {
        self.groups.iter().find(|g| &g.id == id)
    }

    /// Checks group sizes and that groups are pairwise disjoint.
    pub fn validate(&self) -> Result<(), DomainError> {
        let mut seen = HashSet::new();
        let mut group_ids = HashSet::new();
        for g in &self.groups {
            if !group_ids.insert(&g.id) {
                return Err(DomainError::Invalid(format!("{}: group {} listed twice", self.stage, g.id)));
            }
            if g.sequences.len() != self.group_size {
                return Err(DomainError::Invalid(format!(
                    "{}: group {} has {} members, expected {}",
                    self.stage,
                    g.id,
                    g.sequences.len(),
                    self.group_size
                )));
            }
            for s in &g.sequences {
                if !seen.insert(s) {
                    return Err(DomainError::Invalid(format!(
                        "{}: sequence {} appears in more than one group",
                        self.stage, s
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Aggregated scores for one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MosEntry {
    pub mos_avqa: f64,
    pub mos_av_vqa: f64,
    pub mos_av_aqa: f64,
    pub mean_audio_attention_pct: f64,
    pub n_ratings: u32,
}

impl MosEntry {
    pub fn get(&self, dim: Dimension) -> f64 {
        match dim {
            Dimension::Avqa => self.mos_avqa,
            Dimension::AvVqa => self.mos_av_vqa,
            Dimension::AvAqa => self.mos_av_aqa,
        }
    }
}

/// Per-sequence MOS, ordered by sequence id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MosTable {
    pub entries: BTreeMap<SequenceId, MosEntry>,
}

impl MosTable {
    pub fn get(&self, id: &SequenceId) -> Option<&MosEntry> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SequenceId, &MosEntry)> {
        self.entries.iter()
    }

    pub fn column(&self, dim: Dimension) -> Vec<f64> {
        self.entries.values().map(|e| e.get(dim)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationIssue {
    MissingSequence { sequence_id: SequenceId },
    UnexpectedSequence { sequence_id: SequenceId },
    RepeatedSequence { sequence_id: SequenceId },
    OutOfScale { sequence_id: SequenceId, field: String },
    Duplicate,
    IncompleteWatch,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::MissingSequence { sequence_id } => write!(f, "no rating for {sequence_id}"),
            ValidationIssue::UnexpectedSequence { sequence_id } => {
                write!(f, "{sequence_id} is not in the assigned group")
            }
            ValidationIssue::RepeatedSequence { sequence_id } => write!(f, "{sequence_id} rated twice"),
            ValidationIssue::OutOfScale { sequence_id, field } => {
                write!(f, "{field} for {sequence_id} is off the rating scale")
            }
            ValidationIssue::Duplicate => f.write_str("worker already submitted this group in this stage"),
            ValidationIssue::IncompleteWatch => f.write_str("playback requirement not met"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }

    /// `Pending` when valid, `RejectedInvalid` otherwise.
    pub fn verdict(&self) -> Verdict {
        if self.is_valid() {
            Verdict::Pending
        } else {
            Verdict::RejectedInvalid
        }
    }
}

/// Checks coverage, scales, duplication and the playback requirement.
///
/// `prior` holds the keys of submissions already stored; `sub` itself must
/// not be in it.
pub fn validate_submission(
    sub: &Submission,
    cfg: &StageConfig,
    prior: &HashSet<SubmissionKey>,
) -> Result<ValidationReport, DomainError> {
    let group = cfg
        .group(&sub.group_id)
        .ok_or_else(|| DomainError::UnknownGroup(sub.group_id.clone()))?;
    let mut issues = Vec::new();

    let expected: HashSet<&SequenceId> = group.sequences.iter().collect();
    let mut seen = HashSet::new();
    for r in &sub.records {
        if !expected.contains(&r.sequence_id) {
            issues.push(ValidationIssue::UnexpectedSequence {
                sequence_id: r.sequence_id.clone(),
            });
        } else if !seen.insert(&r.sequence_id) {
            issues.push(ValidationIssue::RepeatedSequence {
                sequence_id: r.sequence_id.clone(),
            });
        }
        let fields = [
            ("q1_avqa", r.q1_avqa.in_scale()),
            ("q2_av_vqa", r.q2_av_vqa.in_scale()),
            ("q3_av_aqa", r.q3_av_aqa.in_scale()),
            ("q4_audio_attention_pct", r.q4_audio_attention_pct.in_range()),
        ];
        for (field, ok) in fields {
            if !ok {
                issues.push(ValidationIssue::OutOfScale {
                    sequence_id: r.sequence_id.clone(),
                    field: field.to_owned(),
                });
            }
        }
    }
    for s in &group.sequences {
        if !seen.contains(s) {
            issues.push(ValidationIssue::MissingSequence { sequence_id: s.clone() });
        }
    }
    if prior.contains(&sub.key()) {
        issues.push(ValidationIssue::Duplicate);
    }
    if !sub.watch_complete {
        issues.push(ValidationIssue::IncompleteWatch);
    }
    Ok(ValidationReport { issues })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> StageConfig {
        StageConfig {
            stage: Stage::Pretest,
            group_size: n,
            groups: vec![GroupDef {
                id: "g0".into(),
                sequences: (0..n).map(|i| SequenceId(format!("s{i}"))).collect(),
            }],
            eligibility: Eligibility::default(),
            thresholds: FilterThresholds::default(),
        }
    }

    fn record(id: &str, q1: f64) -> RatingRecord {
        RatingRecord {
            sequence_id: id.into(),
            q1_avqa: Score::from_decimal(q1).unwrap(),
            q2_av_vqa: Score::from_decimal(3.0).unwrap(),
            q3_av_aqa: Score::from_decimal(3.0).unwrap(),
            q4_audio_attention_pct: AttentionPct::new(50),
        }
    }

    fn submission(n: usize) -> Submission {
        Submission {
            submission_id: "sub-1".into(),
            worker_id: "w1".into(),
            group_id: "g0".into(),
            stage: Stage::Pretest,
            records: (0..n).map(|i| record(&format!("s{i}"), 1.0 + (i % 40) as f64 / 10.0)).collect(),
            user_agent: "Mozilla/5.0".into(),
            interaction_log: vec![],
            watch_complete: true,
            verdict: Verdict::Pending,
            env_checks: None,
        }
    }

    #[test]
    fn complete_submission_is_valid() {
        let report = validate_submission(&submission(30), &cfg(30), &HashSet::new()).unwrap();
        assert!(report.is_valid(), "{report:?}");
        assert_eq!(report.verdict(), Verdict::Pending);
    }

    #[test]
    fn out_of_scale_score_is_invalid() {
        let mut sub = submission(30);
        sub.records[4].q1_avqa = Score::from_decimal(5.3).unwrap();
        let report = validate_submission(&sub, &cfg(30), &HashSet::new()).unwrap();
        assert_eq!(report.verdict(), Verdict::RejectedInvalid);
        assert!(matches!(&report.issues[0], ValidationIssue::OutOfScale { field, .. } if field == "q1_avqa"));
    }

    #[test]
    fn second_submission_for_same_group_is_duplicate() {
        let sub = submission(30);
        let prior = HashSet::from([sub.key()]);
        let report = validate_submission(&sub, &cfg(30), &prior).unwrap();
        assert_eq!(report.issues, vec![ValidationIssue::Duplicate]);
    }

    #[test]
    fn coverage_and_watch_problems_are_reported() {
        let mut sub = submission(30);
        sub.records.pop();
        sub.records.push(record("s0", 2.0));
        sub.records.push(record("zzz", 2.0));
        sub.watch_complete = false;
        let report = validate_submission(&sub, &cfg(30), &HashSet::new()).unwrap();
        assert!(report.issues.contains(&ValidationIssue::RepeatedSequence { sequence_id: "s0".into() }));
        assert!(report.issues.contains(&ValidationIssue::UnexpectedSequence { sequence_id: "zzz".into() }));
        assert!(report.issues.contains(&ValidationIssue::MissingSequence { sequence_id: "s29".into() }));
        assert!(report.issues.contains(&ValidationIssue::IncompleteWatch));
    }

    #[test]
    fn unknown_group_is_a_configuration_error() {
        let mut sub = submission(30);
        sub.group_id = "nope".into();
        assert!(matches!(
            validate_submission(&sub, &cfg(30), &HashSet::new()),
            Err(DomainError::UnknownGroup(_))
        ));
    }

    #[test]
    fn scores_quantize_to_tenths() {
        assert_eq!(Score::from_decimal(3.25).unwrap().tenths(), 33);
        assert_eq!(Score::from_decimal(4.0).unwrap().tenths(), 40);
        assert!(Score::from_decimal(f64::NAN).is_err());
        assert!(!Score::from_decimal(0.9).unwrap().in_scale());
        assert_eq!(Score::clamped(7.2), Score::MAX);
        assert_eq!(Score::clamped(-1.0), Score::MIN);
        let json = serde_json::to_string(&Score::from_tenths(37)).unwrap();
        assert_eq!(json, "3.7");
    }

    #[test]
    fn attention_split_is_complementary() {
        let a = AttentionPct::new(50);
        assert_eq!((a.audio(), a.video()), (50, 50));
        assert_eq!(AttentionPct::new(30).video(), 70);
        assert!(!AttentionPct::new(101).in_range());
    }

    #[test]
    fn audio_semantics_parse_and_display() {
        assert_eq!("speech;music".parse::<AudioSemantics>().unwrap(), AudioSemantics::SPEECH_MUSIC);
        assert_eq!(AudioSemantics::ALL_THREE.to_string(), "speech;music;sound");
        assert!("".parse::<AudioSemantics>().is_err());
        assert!("noise".parse::<AudioSemantics>().is_err());
        assert_eq!(AudioSemantics::ALL.len(), 7);
        assert!(AudioSemantics::ALL[..3].iter().all(|s| s.is_single()));
    }

    #[test]
    fn watch_time_sums_closed_intervals() {
        let s: SequenceId = "s0".into();
        let ev = |t, kind| InteractionEvent { t_ms: t, sequence_id: s.clone(), kind };
        let log = vec![
            ev(0, EventKind::Play),
            ev(4_000, EventKind::Pause),
            ev(5_000, EventKind::SeekAttempt),
            ev(6_000, EventKind::Play),
            ev(12_000, EventKind::Ended),
            ev(13_000, EventKind::Play),
        ];
        assert_eq!(watch_time_ms(&log, &s), 10_000);
        assert_eq!(watch_time_ms(&log[..2], &s), 4_000);
    }

    #[test]
    fn eligibility_thresholds_are_strict() {
        let rule = Eligibility::default();
        let ok = WorkerProfile { approval_rate: 98.0, approved_hits: 501 };
        assert!(rule.check(&ok, false).is_ok());
        assert!(rule.check(&WorkerProfile { approval_rate: 97.0, ..ok }, false).is_err());
        assert!(rule.check(&WorkerProfile { approved_hits: 500, ..ok }, false).is_err());
        let formal = Eligibility::formal();
        assert!(formal.check(&ok, false).is_err());
        assert!(formal.check(&ok, true).is_ok());
        let newcomer = WorkerProfile { approval_rate: 0.0, approved_hits: 0 };
        assert!(Eligibility::open().check(&newcomer, false).is_ok());
    }

    #[test]
    fn qualification_only_turns_on() {
        let mut s = Subject::new("w".into(), WorkerProfile { approval_rate: 99.0, approved_hits: 900 });
        assert!(s.grant_qualification());
        assert!(!s.grant_qualification());
        assert!(s.qualified);
    }

    #[test]
    fn stage_config_rejects_overlap_and_bad_sizes() {
        let mut c = cfg(2);
        assert!(c.validate().is_ok());
        c.groups.push(GroupDef { id: "g1".into(), sequences: vec!["s1".into(), "s9".into()] });
        assert!(c.validate().is_err());
        c.groups[1].sequences = vec!["s8".into()];
        assert!(c.validate().is_err());
    }
}
