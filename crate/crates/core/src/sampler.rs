//! Stratified stimulus selection with soft bin balancing.
//!
//! The pool is split by audio-semantic subset, each subset receives a quota
//! from the target ratios, and within a subset every continuous pseudo-label
//! is binned and reweighted by `(u/p)^alpha` so sparse bins are drawn a bit
//! more often. The merged intermediate set is then subsampled uniformly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{AudioSemantics, Sequence};
use crate::error::SamplerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    AudioPq,
    AudioCe,
    VideoQ,
}

impl Feature {
    pub const ALL: [Feature; 3] = [Feature::AudioPq, Feature::AudioCe, Feature::VideoQ];

    pub fn value(self, seq: &Sequence) -> f64 {
        match self {
            Feature::AudioPq => seq.pseudo_audio_pq,
            Feature::AudioCe => seq.pseudo_audio_ce,
            Feature::VideoQ => seq.pseudo_video_q,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::AudioPq => "audio_pq",
            Feature::AudioCe => "audio_ce",
            Feature::VideoQ => "video_q",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub alpha: f64,
    pub n_bins: usize,
    /// Raw (unnormalized) weight per semantic subset.
    pub group_ratios: BTreeMap<AudioSemantics, f64>,
    pub intermediate_n: usize,
    pub final_n: usize,
    pub seed: u64,
    /// When false, draws within a subset are plain uniform.
    pub balancing: bool,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            alpha: 0.3,
            n_bins: 8,
            group_ratios: default_ratios(),
            intermediate_n: 10_000,
            final_n: 1_296,
            seed: 0,
            balancing: true,
        }
    }
}

/// Single categories weigh 2, combinations 1.
pub fn default_ratios() -> BTreeMap<AudioSemantics, f64> {
    AudioSemantics::ALL
        .into_iter()
        .map(|s| (s, if s.is_single() { 2.0 } else { 1.0 }))
        .collect()
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(SamplerError::Plan(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.n_bins == 0 {
            return Err(SamplerError::Plan("n_bins must be >= 1".into()));
        }
        if self.final_n > self.intermediate_n {
            return Err(SamplerError::Plan(format!(
                "final_n {} exceeds intermediate_n {}",
                self.final_n, self.intermediate_n
            )));
        }
        if self.group_ratios.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(SamplerError::Plan("group ratios must be finite and non-negative".into()));
        }
        if self.group_ratios.values().sum::<f64>() <= 0.0 {
            return Err(SamplerError::Plan("group ratios sum to zero".into()));
        }
        Ok(())
    }

    /// Target share per subset, canonical order, summing to 1.
    pub fn normalized_ratios(&self) -> [f64; 7] {
        let total: f64 = self.group_ratios.values().sum();
        AudioSemantics::ALL.map(|s| self.group_ratios.get(&s).copied().unwrap_or(0.0) / total)
    }
}

/// Largest-remainder apportionment of `total` over `shares`; ties go to the
/// lower index.
pub fn apportion(shares: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    if sum <= 0.0 {
        return vec![0; shares.len()];
    }
    let exact: Vec<f64> = shares.iter().map(|s| s / sum * total as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        if shares[i] > 0.0 {
            quotas[i] += 1;
            left -= 1;
        }
    }
    quotas
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinWeights {
    pub bin_of_sample: Vec<usize>,
    pub counts: Vec<usize>,
    /// Normalized over occupied bins; empty bins are 0.
    pub bin_weights: Vec<f64>,
    /// Each sample carries its bin's weight, scaled so the total is 1.
    pub sample_weights: Vec<f64>,
}

/// Equal-width bin index over `[min, max]`; the top edge falls in the last bin.
pub fn bin_index(value: f64, min: f64, max: f64, n_bins: usize) -> usize {
    if max <= min {
        return 0;
    }
    let pos = ((value - min) / (max - min) * n_bins as f64).floor();
    (pos.max(0.0) as usize).min(n_bins - 1)
}

/// Soft-balancing weights for one continuous feature.
pub fn bin_weights(values: &[f64], n_bins: usize, alpha: f64) -> Result<BinWeights, SamplerError> {
    if values.is_empty() {
        return Err(SamplerError::EmptyPool);
    }
    if n_bins == 0 {
        return Err(SamplerError::Plan("n_bins must be >= 1".into()));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(SamplerError::Plan(format!("alpha must be >= 0, got {alpha}")));
    }
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let bin_of_sample: Vec<usize> = values.iter().map(|v| bin_index(*v, min, max, n_bins)).collect();
    let mut counts = vec![0usize; n_bins];
    for &b in &bin_of_sample {
        counts[b] += 1;
    }

    let n = values.len() as f64;
    let uniform = 1.0 / n_bins as f64;
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { (uniform / (c as f64 / n)).powf(alpha) })
        .collect();
    let raw_total: f64 = raw.iter().sum();
    let bin_weights: Vec<f64> = raw.iter().map(|w| w / raw_total).collect();

    let mass: f64 = counts.iter().zip(&bin_weights).map(|(&c, w)| c as f64 * w).sum();
    let sample_weights = bin_of_sample.iter().map(|&b| bin_weights[b] / mass).collect();
    Ok(BinWeights {
        bin_of_sample,
        counts,
        bin_weights,
        sample_weights,
    })
}

/// Combined per-sample weight over all three features: product, renormalized.
pub fn combined_weights(members: &[&Sequence], n_bins: usize, alpha: f64) -> Result<Vec<f64>, SamplerError> {
    let mut w = vec![1.0; members.len()];
    for feature in Feature::ALL {
        let values: Vec<f64> = members.iter().map(|s| feature.value(s)).collect();
        let bw = bin_weights(&values, n_bins, alpha)?;
        for (acc, sw) in w.iter_mut().zip(&bw.sample_weights) {
            *acc *= sw;
        }
    }
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Draws `k` distinct indices with probability proportional to `weights`,
/// equivalent to repeated weighted draws without replacement.
pub fn weighted_sample_without_replacement<R: Rng>(rng: &mut R, weights: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(weights.len());
    if k == 0 {
        return Vec::new();
    }
    // Efraimidis–Spirakis keys: ln(u) / w, keep the k largest.
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u: f64 = 1.0 - rng.random::<f64>();
            let key = if w > 0.0 { u.ln() / w } else { f64::NEG_INFINITY };
            (key, i)
        })
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k - 1, cmp);
        keyed.truncate(k);
    }
    keyed.sort_by(cmp);
    keyed.into_iter().map(|(_, i)| i).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupAllocation {
    pub subset: AudioSemantics,
    pub available: usize,
    pub quota: usize,
    pub taken: usize,
}

#[derive(Debug, Clone)]
pub struct Selection {
    /// The merged per-subset draws, before the final uniform subsample.
    pub intermediate: Vec<Sequence>,
    pub selected: Vec<Sequence>,
    pub allocations: Vec<GroupAllocation>,
    pub warnings: Vec<String>,
}

/// Quotas after moving any shortfall to subsets that still have candidates.
fn allocate(plan: &SamplingPlan, available: &[usize; 7], warnings: &mut Vec<String>) -> Vec<usize> {
    let ratios = plan.normalized_ratios();
    let mut quotas = apportion(&ratios, plan.intermediate_n);
    loop {
        let mut deficit = 0;
        for i in 0..7 {
            if quotas[i] > available[i] {
                let short = quotas[i] - available[i];
                warnings.push(format!(
                    "subset {} has {} candidates for a quota of {}; redistributing {}",
                    AudioSemantics::ALL[i],
                    available[i],
                    quotas[i],
                    short
                ));
                deficit += short;
                quotas[i] = available[i];
            }
        }
        if deficit == 0 {
            return quotas;
        }
        let open: Vec<f64> = (0..7)
            .map(|i| if quotas[i] < available[i] { ratios[i] } else { 0.0 })
            .collect();
        if open.iter().sum::<f64>() <= 0.0 {
            // every subset with a positive ratio is exhausted; spill into any with room
            let spare: Vec<f64> = (0..7).map(|i| (available[i] - quotas[i]) as f64).collect();
            for (q, extra) in quotas.iter_mut().zip(apportion(&spare, deficit)) {
                *q += extra;
            }
            return quotas;
        }
        for (q, extra) in quotas.iter_mut().zip(apportion(&open, deficit)) {
            *q += extra;
        }
    }
}

/// Runs the full selection. Deterministic for a fixed pool order, plan and seed.
pub fn stratified_sample(pool: &[Sequence], plan: &SamplingPlan) -> Result<Selection, SamplerError> {
    plan.validate()?;
    if pool.is_empty() {
        return Err(SamplerError::EmptyPool);
    }
    if plan.intermediate_n > pool.len() {
        return Err(SamplerError::Plan(format!(
            "intermediate_n {} exceeds pool size {}",
            plan.intermediate_n,
            pool.len()
        )));
    }

    let mut groups: [Vec<&Sequence>; 7] = Default::default();
    for seq in pool {
        groups[seq.audio_semantics.canonical_index()].push(seq);
    }
    let available = groups.each_ref().map(Vec::len);
    let mut warnings = Vec::new();
    let quotas = allocate(plan, &available, &mut warnings);
    for w in &warnings {
        tracing::warn!("{w}");
    }

    let drawn: Vec<Vec<&Sequence>> = groups
        .par_iter()
        .enumerate()
        .map(|(i, members)| {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
            rng.set_stream(i as u64 + 1);
            let weights = if plan.balancing && !members.is_empty() {
                combined_weights(members, plan.n_bins, plan.alpha)?
            } else {
                vec![1.0; members.len()]
            };
            Ok(weighted_sample_without_replacement(&mut rng, &weights, quotas[i])
                .into_iter()
                .map(|j| members[j])
                .collect())
        })
        .collect::<Result<_, SamplerError>>()?;

    let allocations = AudioSemantics::ALL
        .iter()
        .enumerate()
        .map(|(i, &subset)| GroupAllocation {
            subset,
            available: available[i],
            quota: quotas[i],
            taken: drawn[i].len(),
        })
        .collect();

    let intermediate: Vec<Sequence> = drawn.into_iter().flatten().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut picked = index::sample(&mut rng, intermediate.len(), plan.final_n).into_vec();
    picked.sort_unstable();
    let selected = picked.into_iter().map(|i| intermediate[i].clone()).collect();

    Ok(Selection {
        intermediate,
        selected,
        allocations,
        warnings,
    })
}

/// Shannon entropy in bits of a histogram; empty histograms give 0.
pub fn entropy_bits(hist: &[usize]) -> f64 {
    let total: usize = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum()
}

pub fn histogram(values: impl IntoIterator<Item = f64>, min: f64, max: f64, n_bins: usize) -> Vec<usize> {
    let mut h = vec![0; n_bins];
    for v in values {
        h[bin_index(v, min, max, n_bins)] += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureDiversity {
    pub feature: Feature,
    /// Bin edges span the pool's observed range.
    pub range: [f64; 2],
    pub before_hist: Vec<usize>,
    pub after_hist: Vec<usize>,
    pub before_entropy_bits: f64,
    pub after_entropy_bits: f64,
    pub before_occupied_bins: usize,
    pub after_occupied_bins: usize,
    pub after_min: Option<f64>,
    pub after_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetShare {
    pub subset: AudioSemantics,
    pub pool_count: usize,
    pub selected_count: usize,
    pub selected_ratio: f64,
    pub target_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiversityReport {
    pub pool_size: usize,
    pub selected_size: usize,
    pub features: Vec<FeatureDiversity>,
    pub subsets: Vec<SubsetShare>,
}

pub fn diversity_report(selected: &[Sequence], pool: &[Sequence], plan: &SamplingPlan) -> DiversityReport {
    let n_bins = plan.n_bins.max(1);
    let features = Feature::ALL
        .into_iter()
        .map(|feature| {
            let range_src = if pool.is_empty() { selected } else { pool };
            let (min, max) = range_src
                .iter()
                .map(|s| feature.value(s))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let (min, max) = if min.is_finite() { (min, max) } else { (0.0, 0.0) };
            let before_hist = histogram(pool.iter().map(|s| feature.value(s)), min, max, n_bins);
            let after_hist = histogram(selected.iter().map(|s| feature.value(s)), min, max, n_bins);
            let after = selected.iter().map(|s| feature.value(s));
            FeatureDiversity {
                feature,
                range: [min, max],
                before_entropy_bits: entropy_bits(&before_hist),
                after_entropy_bits: entropy_bits(&after_hist),
                before_occupied_bins: before_hist.iter().filter(|&&c| c > 0).count(),
                after_occupied_bins: after_hist.iter().filter(|&&c| c > 0).count(),
                after_min: after.clone().reduce(f64::min),
                after_max: after.reduce(f64::max),
                before_hist,
                after_hist,
            }
        })
        .collect();

    let targets = plan.normalized_ratios();
    let subsets = AudioSemantics::ALL
        .iter()
        .enumerate()
        .map(|(i, &subset)| {
            let selected_count = selected.iter().filter(|s| s.audio_semantics == subset).count();
            SubsetShare {
                subset,
                pool_count: pool.iter().filter(|s| s.audio_semantics == subset).count(),
                selected_count,
                selected_ratio: if selected.is_empty() {
                    0.0
                } else {
                    selected_count as f64 / selected.len() as f64
                },
                target_ratio: targets[i],
            }
        })
        .collect();

    DiversityReport {
        pool_size: pool.len(),
        selected_size: selected.len(),
        features,
        subsets,
    }
}

impl DiversityReport {
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "selected {} of {} candidates", self.selected_size, self.pool_size);
        for f in &self.features {
            let _ = writeln!(
                out,
                "  {:<9} entropy {:.3} -> {:.3} bits, occupied bins {} -> {}",
                f.feature.name(),
                f.before_entropy_bits,
                f.after_entropy_bits,
                f.before_occupied_bins,
                f.after_occupied_bins
            );
        }
        for s in &self.subsets {
            let _ = writeln!(
                out,
                "  {:<18} {:>6} selected  {:>6.2}% (target {:.2}%)",
                s.subset.to_string(),
                s.selected_count,
                100.0 * s.selected_ratio,
                100.0 * s.target_ratio
            );
        }
        out
    }
}
