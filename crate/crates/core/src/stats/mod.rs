//! Rank correlation, dispersion, consensus filtering and MOS aggregation.

mod filter;
mod rank;

pub use filter::{
    compute_mos, dynamic_filter, score_submission, FilterMode, FilterOptions, FilterOutcome, MosAccumulator,
    RejectReason,
};
pub use rank::{dispersion, fractional_ranks, pearson, srocc};
