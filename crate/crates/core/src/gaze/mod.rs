//! Gaze regression: adapter training, personalization and metrics.

mod cluster;
mod data;
mod metrics;
mod train;

pub use cluster::{
    balanced_batches, kmeans, kmeans_cluster, label_points, lloyd_step, nearest, BalancedSampler,
    ClusterModel, DEFAULT_CLUSTERS,
};
pub use data::{as_batch, Gaze, GazeDataset, GazeSample, Split};
pub use metrics::{
    angular_error, evaluate, gaze_vector, median, predict, to_gazes, EvalReport, SubjectRow,
    EVAL_CHUNK, EVAL_CSV_HEADER,
};
pub use train::{
    backbone_digest, per_subject_means, personalize, train_generalized, train_step,
    PersonalizeInputs, PersonalizeReport, TrainConfig, TrainReport, PERSONAL_SHOTS,
};
