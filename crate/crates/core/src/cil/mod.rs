//! Class-incremental protocol: scenarios, herding rehearsal memory,
//! distillation-regularized training, NME evaluation and the accuracy
//! metrics, plus the joint-training baseline.

mod accuracy;
mod memory;
mod optim;
mod run;
mod scenario;
mod train;

pub use accuracy::{AccuracyMatrix, CilMetrics};
pub use memory::{features, herding_select, l2_normalize, nme_classify, ClassExemplars, RehearsalMemory};
pub use optim::{clip_grad_norm, cosine_lr, warmup_cosine_lr, AdamW};
pub use run::{run_cil, run_joint, CilConfig, CilRun, JointPoint, ScenarioData};
pub use scenario::{build_scenario, parse_scenario_name, Scenario};
pub use train::{
    distillation_loss, distillation_term, evaluate, joint_train, train_step, train_task, EvalCounts, TaskLog,
    TrainConfig,
};
