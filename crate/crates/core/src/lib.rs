//! Core of the audio-visual quality study platform.
//!
//! - [`domain`]: stimuli, ratings, submissions, subjects, stages
//! - [`stats`]: rank correlation, dispersion, consensus filtering, MOS
//! - [`sampler`]: stratified stimulus selection with soft bin balancing
//! - [`study`]: stage orchestration, task assignment and intake
//! - [`simulator`]: synthetic catalogs and rater cohorts
//! - [`analysis`]: post-hoc reports over a MOS table
//! - [`io`]: catalog, archive and export file formats

pub mod analysis;
pub mod domain;
pub mod error;
pub mod io;
pub mod sampler;
pub mod simulator;
pub mod stats;
pub mod study;
