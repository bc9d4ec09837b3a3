//! Representation analysis: SVCCA similarity between languages and linear
//! probes on encoder states.

mod features;
mod plot;
mod probe;
mod svcca;

pub use features::{layer_states, meanpool_sentences, FeatureMatrix};
pub use plot::{write_plot_csv, PlotSeries};
pub use probe::{
    fit_linear_probe, probe_positional_information, probe_split, timestep_features, LabelType, ProbeConfig,
    ProbeEntry, ProbeFit, ProbeOptimizer, ProbeReport,
};
pub use svcca::{
    multiway_sentences, per_layer_svcca, random_svcca_baseline, svcca_score, SimilarityReport, SvccaEntry,
    DEFAULT_VARIANCE_THRESHOLD,
};
