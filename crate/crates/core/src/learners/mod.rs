//! Weighted regression and probabilistic classification base learners.

mod classifier;
mod features;
mod regressor;

pub use classifier::{
    fit_classifier, logistic_problem, ClassifierSpec, FittedClassifier, LogisticProblem, PROB_EPS,
};
pub use features::{CosineFeatures, FeatureMap, Standardizer};
pub use regressor::{
    fit_regressor, FittedRegressor, KnnModel, LookupEntry, LookupModel, RegressorKind,
    RegressorModel, RegressorSpec, RidgeModel,
};
