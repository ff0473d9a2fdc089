//! Teacher and student optimisation, evaluation and the multi-run protocol.

mod adam;
mod config;
mod eval;
mod protocol;
mod train;

pub use adam::Adam;
pub use config::TrainConfig;
pub use eval::{accuracy_and_macro_f1, evaluate, predict_logits, Evaluation, ExampleRecord, EVAL_CHUNK};
pub use protocol::{
    aggregate, comparisons, mean_std, run_protocol, run_student, run_teacher, Aggregate, Comparison, PeftKind, ProtocolModels, ProtocolReport,
    ProtocolSpec, RunRecord, StudentVariant, TeacherRecord, TeacherRun,
};
pub use train::{train_student, train_teacher, EpochLog, Trained};

#[cfg(test)]
mod tests;
