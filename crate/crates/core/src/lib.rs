//! Clustering hidden Markov models in distribution space.
//!
//! The crate reduces a mixture of HMMs (an H3M) with many components to one
//! with fewer components by variational hierarchical EM, producing both a
//! clustering of the input HMMs and new HMM cluster centers. It also carries
//! the baselines used to judge that reduction: Baum-Welch, EM for H3Ms on raw
//! sequences, and sampled hierarchical EM.

pub mod error;
pub mod gaussian;
pub mod h3m_em;
pub mod hierclust;
pub mod hmm;
pub mod io;
pub mod logspace;
pub mod seed;
pub mod vhem;

pub use error::{Error, Result};
pub use gaussian::{
    expected_gauss_ll, gmm_bound, gmm_lower_bound, gmm_variational_estep, EtaMatrix, Gaussian, Gmm,
    GmmBound,
};
pub use h3m_em::{em_h3m, em_h3m_restarts, shem_h3m, AssignmentGroup, EmH3mFit, H3m, ShemFit};
pub use vhem::{hmm_pair_estep, vhem_reduce, ClusteringResult, PairEstep, VhemConfig, VhemOutput, VhemState};
pub use hierclust::{
    build_hierarchy, clustering_expected_ll, rand_index, synth_generate, Hierarchy, Scenario,
    SynthSpec,
};
pub use hmm::{
    baum_welch, forward_backward, log_likelihood, sample, BaumWelchFit, FbStats, FitConfig, Hmm,
    HmmInit, Sequence,
};
