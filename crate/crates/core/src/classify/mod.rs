//! Viewer identification: linear classifiers over Fisher features, generative
//! Bayes identification, and the split/cross-validation evaluation harness.

mod protocol;
mod svm;

pub use protocol::{
    eval_grid, make_split, run_protocol, split_saliency, Classifier, CurvePoint, EvalProtocol, EvalResult,
    HyperParams, ModelFamily, Split,
};
pub use svm::{decision_scores, identify, train, LinearModel, SvmOptions};

/// Stream tag for classifier training seeds.
pub const SVM_STREAM: u64 = 0x5356_4d;
