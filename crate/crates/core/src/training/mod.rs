//! Trainer lifecycle, optimization and run artifacts.

pub mod optim;
pub mod plot;
pub mod preview;
pub mod state;
mod trainer;

pub use optim::{clip_grad_norm, ema_update, grad_norm, LrScheduler, Optimizer, PolyScheduler, Sgd};
pub use preview::{save_previews, worst_case_index, PREVIEW_FILES};
pub use state::{EpochRecord, StateOrb, TrainArgs};
pub use trainer::{
    build_toolbox, flat_params, logits_to_classes, sanity_check, summary_json, text_table, CaseResult, SanityReport,
    TrainSummary, Trainer, TrainerHooks, TrainerToolbox,
};
