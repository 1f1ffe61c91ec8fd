//! Classifier-based analogs of FD, IS and KL, plus prompt-adherence accuracy.

mod classifier;
mod report;
mod stats;

pub use classifier::{
    classifier_mel, train_classifier, Classifier, ClassifierConfig, ClassifierOutput, CLASSIFIER_FRAMES, CLASSIFIER_RATE, EMBED_DIM,
    NUM_CLASSES,
};
pub use report::{evaluate_model, generate_all, render_table, score_clips, test_entries, MetricReport, RateMetrics, MAX_FAILURE_RATE};
pub use stats::{frechet_distance, inception_score, paired_kl, COV_EPS, PROB_FLOOR};
