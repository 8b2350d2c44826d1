//! Synthetic stimuli, ground truth and rater populations.
//!
//! Used to exercise filtering, qualification and MOS recovery end to end
//! without a human crowd.

mod run;

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{AttentionPct, AudioSemantics, GroupId, Origin, RatingRecord, Score, Sequence, SequenceId};

pub use run::{
    full_watch_log, run_study_simulation, run_with_backend, CohortEntry, CohortSpec, InProcessBackend, ModelStats,
    SimulationReport, StagePlan, StageStats, StudyBackend,
};

/// Per-dimension defaults: AVQA, AV_VQA, AV_AQA.
pub const DEFAULT_MU: [f64; 3] = [3.47, 3.49, 3.44];
pub const DEFAULT_SD: [f64; 3] = [0.72, 0.77, 0.64];

pub const ATTENTION_MU: f64 = 50.01;
pub const ATTENTION_SD: f64 = 4.32;
/// Noise on a faithful rater's attention answer, in percentage points.
pub const ATTENTION_NOISE_SD: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QualityDistribution {
    Gaussian { mu: [f64; 3], sd: [f64; 3] },
    /// Uniform over the scale.
    Uniform,
    /// Beta(2, 5) stretched over the scale: most clips rate low.
    Skewed,
}

impl QualityDistribution {
    pub fn gaussian(mu: f64, sd: f64) -> Self {
        QualityDistribution::Gaussian { mu: [mu; 3], sd: [sd; 3] }
    }
}

impl Default for QualityDistribution {
    fn default() -> Self {
        QualityDistribution::Gaussian {
            mu: DEFAULT_MU,
            sd: DEFAULT_SD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub true_avqa: f64,
    pub true_vqa: f64,
    pub true_aqa: f64,
    pub true_attention: f64,
}

impl TruthEntry {
    pub fn get(&self, dim: crate::domain::Dimension) -> f64 {
        use crate::domain::Dimension::*;
        match dim {
            Avqa => self.true_avqa,
            AvVqa => self.true_vqa,
            AvAqa => self.true_aqa,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroundTruth {
    pub entries: BTreeMap<SequenceId, TruthEntry>,
}

impl GroundTruth {
    pub fn get(&self, id: &SequenceId) -> Option<&TruthEntry> {
        self.entries.get(id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogOptions {
    pub distribution: QualityDistribution,
    /// Correlation between the three true scores of a sequence.
    pub dimension_correlation: f64,
    /// Correlation between pseudo-labels and the matching true score.
    pub pseudo_label_correlation: f64,
    /// Consecutive sequences are grouped this many at a time; 0 leaves them
    /// ungrouped.
    pub group_size: usize,
    pub id_prefix: String,
}

impl Default for CatalogOptions {
    fn default() -> Self {
        CatalogOptions {
            distribution: QualityDistribution::default(),
            dimension_correlation: 0.85,
            pseudo_label_correlation: 0.7,
            group_size: 30,
            id_prefix: "seq".into(),
        }
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    Normal::new(0.0, 1.0).expect("valid normal").sample(rng)
}

/// Synthetic catalog with ground truth. Deterministic for a given seed.
pub fn synth_catalog(n_sequences: usize, options: &CatalogOptions, seed: u64) -> (Vec<Sequence>, GroundTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho = options.dimension_correlation.clamp(0.0, 1.0);
    let rho_p = options.pseudo_label_correlation.clamp(0.0, 1.0);
    let beta = Beta::new(2.0, 5.0).expect("valid beta");
    let width = (n_sequences.max(1) as f64).log10().floor() as usize + 1;

    let mut seqs = Vec::with_capacity(n_sequences);
    let mut truth = GroundTruth::default();
    for i in 0..n_sequences {
        let shared = standard_normal(&mut rng);
        let mut z = [0.0; 3];
        for zd in &mut z {
            *zd = rho * shared + (1.0 - rho * rho).sqrt() * standard_normal(&mut rng);
        }
        let (scores, zscores) = match &options.distribution {
            QualityDistribution::Gaussian { mu, sd } => {
                let s = [0, 1, 2].map(|d| (mu[d] + sd[d] * z[d]).clamp(1.0, 5.0));
                (s, z)
            }
            QualityDistribution::Uniform | QualityDistribution::Skewed => {
                let base = match options.distribution {
                    QualityDistribution::Uniform => rng.random::<f64>(),
                    _ => beta.sample(&mut rng),
                };
                let s = [0, 1, 2].map(|d| (1.0 + 4.0 * base + 0.25 * (1.0 - rho) * z[d]).clamp(1.0, 5.0));
                (s, s.map(|v| (v - 3.0) / 1.15))
            }
        };
        let true_attention = (ATTENTION_MU + ATTENTION_SD * standard_normal(&mut rng)).clamp(0.0, 100.0);
        let mut pseudo = |zs: f64| rho_p * zs + (1.0 - rho_p * rho_p).sqrt() * standard_normal(&mut rng);
        let pq = (5.5 + 1.5 * pseudo(zscores[2])).clamp(1.0, 10.0);
        let ce = (5.5 + 1.5 * pseudo(zscores[2])).clamp(1.0, 10.0);
        let vq = (0.5 + 0.15 * pseudo(zscores[1])).clamp(0.0, 1.0);
        let semantics = AudioSemantics::ALL[rng.random_range(0..7)];

        let id = SequenceId(format!("{}{:0width$}", options.id_prefix, i, width = width));
        let group_id = (options.group_size > 0).then(|| GroupId(format!("g{:03}", i / options.group_size)));
        seqs.push(Sequence {
            id: id.clone(),
            group_id,
            duration_s: 10.0,
            width: 1920,
            height: 1080,
            audio_semantics: semantics,
            pseudo_audio_pq: pq,
            pseudo_audio_ce: ce,
            pseudo_video_q: vq,
            origin: Origin::Sampled,
        });
        truth.entries.insert(
            id,
            TruthEntry {
                true_avqa: scores[0],
                true_vqa: scores[1],
                true_aqa: scores[2],
                true_attention,
            },
        );
    }
    (seqs, truth)
}

/// Ungrouped candidate pool with skewed pseudo-labels and uneven semantic
/// subsets, as input for the sampler.
pub fn synth_candidate_pool(n: usize, seed: u64) -> Vec<Sequence> {
    // speech, music, sound, speech+music, speech+sound, music+sound, all three
    const SUBSET_SHARES: [f64; 7] = [0.28, 0.20, 0.22, 0.10, 0.08, 0.06, 0.06];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pq_dist = Beta::new(5.0, 2.0).expect("valid beta");
    let ce_dist = Beta::new(4.0, 1.5).expect("valid beta");
    let vq_dist = Beta::new(2.0, 5.0).expect("valid beta");
    let subset_dist = rand::distr::weighted::WeightedIndex::new(SUBSET_SHARES).expect("valid weights");
    (0..n)
        .map(|i| Sequence {
            id: SequenceId(format!("cand{i:06}")),
            group_id: None,
            duration_s: if rng.random::<f64>() < 0.05 { 6.0 + 4.0 * rng.random::<f64>() } else { 10.0 },
            width: 1920,
            height: 1080,
            audio_semantics: AudioSemantics::ALL[subset_dist.sample(&mut rng)],
            pseudo_audio_pq: 1.0 + 9.0 * pq_dist.sample(&mut rng),
            pseudo_audio_ce: 1.0 + 9.0 * ce_dist.sample(&mut rng),
            pseudo_video_q: vq_dist.sample(&mut rng),
            origin: Origin::Sampled,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RaterModel {
    Faithful {
        noise_sd: f64,
    },
    Biased {
        offset: f64,
        scale: f64,
        noise_sd: f64,
    },
    RandomUniform,
    Midrange {
        #[serde(default = "midrange_center")]
        center: f64,
        noise_sd: f64,
    },
    Constant {
        value: f64,
    },
}

fn midrange_center() -> f64 {
    3.0
}

impl RaterModel {
    pub fn label(&self) -> String {
        match self {
            RaterModel::Faithful { noise_sd } => format!("faithful({noise_sd})"),
            RaterModel::Biased { offset, scale, noise_sd } => format!("biased({offset},{scale},{noise_sd})"),
            RaterModel::RandomUniform => "random_uniform".into(),
            RaterModel::Midrange { center, noise_sd } => format!("midrange({center},{noise_sd})"),
            RaterModel::Constant { value } => format!("constant({value})"),
        }
    }

    /// Parses the short forms used on the command line: `faithful(0.3)`,
    /// `biased(0.5,1,0.2)`, `random`, `midrange(0.05)`, `constant(3)`.
    /// Parameters may be omitted where a default exists.
    pub fn parse_short(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let (name, args) = match s.split_once('(') {
            Some((name, rest)) => {
                let inner = rest.strip_suffix(')').ok_or_else(|| format!("unbalanced parentheses in `{s}`"))?;
                (name.trim(), inner.split(',').map(str::trim).filter(|a| !a.is_empty()).collect())
            }
            None => (s, Vec::new()),
        };
        let args: Vec<f64> = args
            .iter()
            .map(|a: &&str| a.parse().map_err(|_| format!("`{a}` is not a number in `{s}`")))
            .collect::<Result<_, _>>()?;
        let arg = |i: usize, default: Option<f64>| -> Result<f64, String> {
            args.get(i)
                .copied()
                .or(default)
                .ok_or_else(|| format!("`{s}` needs at least {} parameter(s)", i + 1))
        };
        let model = match name {
            "faithful" => RaterModel::Faithful { noise_sd: arg(0, Some(0.3))? },
            "biased" => RaterModel::Biased {
                offset: arg(0, None)?,
                scale: arg(1, Some(1.0))?,
                noise_sd: arg(2, Some(0.3))?,
            },
            "random" | "random_uniform" => RaterModel::RandomUniform,
            "midrange" => RaterModel::Midrange {
                center: 3.0,
                noise_sd: arg(0, Some(0.1))?,
            },
            "constant" => RaterModel::Constant { value: arg(0, Some(3.0))? },
            other => return Err(format!("unknown rater model `{other}`")),
        };
        Ok(model)
    }
}

fn noisy<R: Rng>(rng: &mut R, sd: f64) -> f64 {
    if sd > 0.0 {
        Normal::new(0.0, sd).expect("positive sd").sample(rng)
    } else {
        0.0
    }
}

/// Ratings for `sequences` by one simulated rater. Sequences missing from
/// `truth` are skipped.
pub fn simulate_rater<R: Rng>(
    model: &RaterModel,
    truth: &GroundTruth,
    sequences: &[SequenceId],
    rng: &mut R,
) -> Vec<RatingRecord> {
    sequences
        .iter()
        .filter_map(|id| truth.get(id).map(|t| (id, t)))
        .map(|(id, t)| {
            let mut score = |true_value: f64| -> Score {
                match model {
                    RaterModel::Faithful { noise_sd } => Score::clamped(true_value + noisy(rng, *noise_sd)),
                    RaterModel::Biased { offset, scale, noise_sd } => {
                        Score::clamped(offset + scale * true_value + noisy(rng, *noise_sd))
                    }
                    RaterModel::RandomUniform => Score::from_tenths(rng.random_range(10..=50)),
                    RaterModel::Midrange { center, noise_sd } => Score::clamped(center + noisy(rng, *noise_sd)),
                    RaterModel::Constant { value } => Score::clamped(*value),
                }
            };
            let q1 = score(t.true_avqa);
            let q2 = score(t.true_vqa);
            let q3 = score(t.true_aqa);
            let attention = match model {
                RaterModel::Faithful { .. } | RaterModel::Biased { .. } => {
                    AttentionPct::clamped(t.true_attention + noisy(rng, ATTENTION_NOISE_SD))
                }
                _ => AttentionPct::new(rng.random_range(0..=100)),
            };
            RatingRecord {
                sequence_id: id.clone(),
                q1_avqa: q1,
                q2_av_vqa: q2,
                q3_av_aqa: q3,
                q4_audio_attention_pct: attention,
            }
        })
        .collect()
}
