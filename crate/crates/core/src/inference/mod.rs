//! Posterior rollouts, ELBO assembly, training, open-loop prediction and
//! linear-Gaussian reference filters.

mod kalman;
mod predict;
mod rollout;
mod train;

pub use kalman::{kalman_filter_smoother, kalman_open_loop, kalman_predict, kalman_update, KalmanResult};
pub use predict::{evaluate, evaluate_trajectories, predict_open_loop, EvalSummary, Metrics, Prediction};
pub use rollout::{
    backward_pass, elbo, rollout, Algorithm, ElboTerms, ElboValues, KlScale, Rollout, RolloutNoise,
    RolloutSpec,
};
pub use train::{init_model, train, Adam, TrainConfig, TrainOutcome};
