//! Staged training: example builders, the masked loss, schedules and the optimization loop.

pub mod examples;
pub mod features;
pub mod loss;
pub mod schedule;
pub mod trainer;

pub use examples::{
    assemble_dialogue, build_stage1_example, build_stage2_example, build_stage3_example, face_target, speech_target,
    AssembledDialogue, DialogueRound, ExampleContext, TurnFeatures,
};
pub use features::FeatureStore;
pub use loss::{masked_nll, masked_nll_sum, sequence_nll, LossReduction};
pub use schedule::OptimizerConfig;
pub use trainer::{train_stage, StageConfig, StageReport, TrainingData};
