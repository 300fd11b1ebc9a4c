//! Cascade and end-to-end training, checkpoints and evaluation glue.

mod checkpoint;
mod config;
mod evaluate;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, Manifest, TensorEntry};
pub use config::{Stage, TrainConfig};
pub use evaluate::{evaluate_model, ground_truth, predict_records, score_predictions, split_for, EvalSpace};
pub use optim::{clip_global_norm, global_norm, learning_rate, Adam};
pub use train::{
    end_to_end_train, example_loss, example_objective, parse_triplet_key, prepare_example, relation_prompt, train, train_decoder,
    train_detector, Example, ExampleLoss, PromptCache, TrainIo, TrainingLabels,
};
