use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::{Eligibility, FilterThresholds, GroupDef, GroupId, Sequence, Stage, StageConfig};
use crate::error::StudyError;

/// How stage MOS tables are combined in the export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Every accepted rating of a sequence, whatever the stage.
    #[default]
    AllAccepted,
    /// Only the latest stage with accepted ratings for the sequence.
    LatestStage,
}

/// Runtime settings that survive in the store next to the stage configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySettings {
    pub media_base_url: String,
    pub assignment_expiry_minutes: u32,
    pub pooling: Pooling,
    pub leave_one_out: bool,
    /// Per stage, per worker. `None` is unlimited.
    pub max_groups_per_worker: Option<usize>,
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings {
            media_base_url: "http://localhost:8080/media".into(),
            assignment_expiry_minutes: 60,
            pooling: Pooling::AllAccepted,
            leave_one_out: false,
            max_groups_per_worker: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stage: Stage,
    /// Defaults: pretest takes the first `pretest_groups` catalog groups,
    /// qualification reuses the pretest groups, formal takes the rest.
    #[serde(default)]
    pub groups: Option<Vec<GroupId>>,
    /// Defaults to open admission, except formal which gets the platform gate
    /// and the qualification requirement.
    #[serde(default)]
    pub eligibility: Option<Eligibility>,
    #[serde(default)]
    pub thresholds: Option<FilterThresholds>,
}

/// The study config file (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub media_base_url: String,
    pub assignment_expiry_minutes: u32,
    pub group_size: usize,
    pub pretest_groups: usize,
    pub thresholds: FilterThresholds,
    pub pooling: Pooling,
    pub leave_one_out: bool,
    pub max_groups_per_worker: Option<usize>,
    pub stages: Vec<StageSpec>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        let s = StudySettings::default();
        StudyConfig {
            media_base_url: s.media_base_url,
            assignment_expiry_minutes: s.assignment_expiry_minutes,
            group_size: 30,
            pretest_groups: 4,
            thresholds: FilterThresholds::default(),
            pooling: s.pooling,
            leave_one_out: s.leave_one_out,
            max_groups_per_worker: s.max_groups_per_worker,
            stages: Stage::ALL
                .iter()
                .map(|&stage| StageSpec {
                    stage,
                    groups: None,
                    eligibility: None,
                    thresholds: None,
                })
                .collect(),
        }
    }
}

impl StudyConfig {
    pub fn from_toml(text: &str) -> Result<Self, StudyError> {
        toml::from_str(text).map_err(|e| StudyError::Config(e.to_string()))
    }

    pub fn settings(&self) -> StudySettings {
        StudySettings {
            media_base_url: self.media_base_url.clone(),
            assignment_expiry_minutes: self.assignment_expiry_minutes,
            pooling: self.pooling,
            leave_one_out: self.leave_one_out,
            max_groups_per_worker: self.max_groups_per_worker,
        }
    }
}

/// Resolves the stage specs against the catalog's group membership.
///
/// Group members are ordered by sequence id. The formal stage always requires
/// the qualification flag, whatever the config says.
pub fn build_stage_configs(config: &StudyConfig, catalog: &[Sequence]) -> Result<Vec<StageConfig>, StudyError> {
    if config.group_size == 0 {
        return Err(StudyError::Config("group_size must be positive".into()));
    }
    let mut members: BTreeMap<GroupId, Vec<_>> = BTreeMap::new();
    for s in catalog {
        if let Some(g) = &s.group_id {
            members.entry(g.clone()).or_default().push(s.id.clone());
        }
    }
    for m in members.values_mut() {
        m.sort();
    }
    let all: Vec<GroupId> = members.keys().cloned().collect();

    let explicit = |stage: Stage| config.stages.iter().find(|s| s.stage == stage).and_then(|s| s.groups.clone());
    let pretest = explicit(Stage::Pretest).unwrap_or_else(|| all.iter().take(config.pretest_groups).cloned().collect());
    let pretest_set: BTreeSet<&GroupId> = pretest.iter().collect();

    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for spec in &config.stages {
        if !seen.insert(spec.stage) {
            return Err(StudyError::Config(format!("stage {} defined twice", spec.stage)));
        }
        let groups = match (&spec.groups, spec.stage) {
            (Some(g), _) => g.clone(),
            (None, Stage::Pretest | Stage::Qualification) => pretest.clone(),
            (None, Stage::Formal) => all.iter().filter(|g| !pretest_set.contains(g)).cloned().collect(),
        };
        let groups = groups
            .into_iter()
            .map(|id| match members.get(&id) {
                Some(seqs) => Ok(GroupDef {
                    id,
                    sequences: seqs.clone(),
                }),
                None => Err(StudyError::Config(format!("{}: group {id} has no sequences in the catalog", spec.stage))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut eligibility = spec.eligibility.clone().unwrap_or_else(|| match spec.stage {
            Stage::Formal => Eligibility::formal(),
            _ => Eligibility::open(),
        });
        if spec.stage == Stage::Formal {
            eligibility.requires_qualified = true;
        }
        let cfg = StageConfig {
            stage: spec.stage,
            group_size: config.group_size,
            groups,
            eligibility,
            thresholds: spec.thresholds.unwrap_or(config.thresholds),
        };
        cfg.validate()?;
        out.push(cfg);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AudioSemantics, Origin, SequenceId};

    fn catalog(groups: usize, size: usize) -> Vec<Sequence> {
        (0..groups * size)
            .map(|i| Sequence {
                id: SequenceId(format!("s{i:04}")),
                group_id: Some(GroupId(format!("g{:03}", i / size))),
                duration_s: 10.0,
                width: 1920,
                height: 1080,
                audio_semantics: AudioSemantics::SPEECH,
                pseudo_audio_pq: 5.0,
                pseudo_audio_ce: 5.0,
                pseudo_video_q: 0.5,
                origin: Origin::Sampled,
            })
            .collect()
    }

    #[test]
    fn defaults_split_pretest_and_formal() {
        let cfgs = build_stage_configs(&StudyConfig::default(), &catalog(10, 30)).unwrap();
        assert_eq!(cfgs.len(), 3);
        assert_eq!(cfgs[0].groups.len(), 4);
        assert_eq!(cfgs[1].groups, cfgs[0].groups);
        assert_eq!(cfgs[2].groups.len(), 6);
        assert!(cfgs[2].eligibility.requires_qualified);
        assert_eq!(cfgs[0].eligibility, Eligibility::open());
        assert_eq!(cfgs[2].eligibility.min_approved_hits, Some(500));
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let text = r#"
            media_base_url = "https://cdn.example.org/avq"
            group_size = 2
            [thresholds]
            srocc_min = 0.6
            std_min = 0.4

            [[stages]]
            stage = "pretest"
            groups = ["g001"]

            [[stages]]
            stage = "formal"
            groups = ["g000"]
            [stages.eligibility]
            min_approval_rate_pct = 95.0
            min_approved_hits = 100
            requires_qualified = false
        "#;
        let cfg = StudyConfig::from_toml(text).unwrap();
        assert_eq!(cfg.assignment_expiry_minutes, 60);
        let stages = build_stage_configs(&cfg, &catalog(2, 2)).unwrap();
        assert_eq!(stages.len(), 2);
        assert_eq!(stages[0].groups[0].id, GroupId::from("g001"));
        assert_eq!(stages[0].thresholds.srocc_min, 0.6);
        assert!(stages[1].eligibility.requires_qualified);
        assert_eq!(stages[1].eligibility.min_approved_hits, Some(100));
        let back = StudyConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_groups() {
        let mut cfg = StudyConfig {
            group_size: 30,
            ..Default::default()
        };
        assert!(build_stage_configs(&cfg, &catalog(5, 20)).is_err());
        cfg.stages[0].groups = Some(vec![GroupId::from("nope")]);
        assert!(build_stage_configs(&cfg, &catalog(5, 30)).is_err());
        assert!(StudyConfig::from_toml("colour = 1").is_err());
    }
}
