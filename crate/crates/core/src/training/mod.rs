//! The ATCL training step, the optimizer and checkpointed training runs.
//!
//! Each step forwards the clean batch, takes the loss gradient at the
//! embedded inputs, shifts one word per sentence along it, forwards the
//! shifted batch and descends `J = L + alpha L_adv + beta L_cont`.

mod config;
mod optim;
mod step;
mod trainer;

pub use config::{Mode, Task, TrainConfig};
pub use optim::Adam;
pub use step::{
    build_objective, compute_step, objective_with_setup, prepare_adversarial, AdversarialSetup, Losses, Objective,
    StepOutput, StepRecord,
};
pub use trainer::{
    read_header, translate_pairs, TrainData, Trainer, MERGES_FILE, METRICS_FILE, MODEL_FILE, STATE_FILE, VOCAB_FILE,
};
