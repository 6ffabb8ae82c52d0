//! Built-in panel models and their exact likelihoods.

pub mod gompertz;
pub mod kalman;
pub mod random_walk;

use std::sync::Arc;

use crate::model::UnitDynamics;

pub use gompertz::{gompertz_dmeasure, gompertz_step, panel_gompertz, Gompertz, GompertzParams};
pub use kalman::{exact_loglik, gompertz_kalman_loglik, random_walk_kalman_loglik, ExactLoglik};
pub use random_walk::{panel_random_walk, RandomWalk};

/// Keys accepted by [`registry`].
pub const REGISTERED: [&str; 2] = ["gompertz", "random_walk"];

/// Looks up a built-in model by key.
pub fn registry(key: &str) -> Option<Arc<dyn UnitDynamics>> {
    match key {
        "gompertz" => Some(Arc::new(Gompertz::default())),
        "random_walk" => Some(Arc::new(RandomWalk::default())),
        _ => None,
    }
}
