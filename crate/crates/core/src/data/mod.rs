//! Landmark recordings, task-module segmentation, padding, augmentation,
//! dataset files, splits and the synthetic generator.

mod augment;
mod frame;
pub mod io;
mod pad;
mod segment;
mod split;
pub mod synth;


pub use augment::{
    apply_augmentation_policy, augment_noise, augment_resize, resample, resized_length,
    AugmentationConfig, AugmentationPolicy, RESIZE_FACTOR_RANGE,
};
pub use frame::{
    spans_from_labels, Agent, Dataset, LandmarkFrame, ModuleSpan, Recording, COORDS, FRAME_RATE,
    HANDS, LANDMARKS, NO_LABEL, NUM_CLASSES,
};
pub use io::{load_dataset, save_dataset};
pub use pad::{pad, FrameOrigin, PadKind, PadSources, PaddedSequence};
pub use segment::{idle_pool, segment, validate_spans, TaskModuleSequence};
pub use split::{kfold, partition, DatasetSplit, Partition, TRAIN_OPERATOR};
pub use synth::{
    generate_dataset, synth_generate, ClassTemplates, GenerationPlan, GeneratorSpec, OperatorSpec,
};
