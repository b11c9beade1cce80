//! Group-relative masked policy-gradient training, plus supervised
//! pretraining of the backbone on demonstrations.

mod advantage;
mod loss;
mod optim;
mod pretrain;
mod rl;

pub use advantage::{group_advantage, ADVANTAGE_EPS};
pub use loss::{accumulate_nll_grad, accumulate_pg_grad, token_mask, LossStats, Scored, Target};
pub use optim::{warmup_lr, Adam, Optimizer, Sgd};
pub use pretrain::{demo_accuracy, pretrain, trained_positions, PretrainConfig, PretrainReport, PretrainRow};
pub use rl::{
    collect_rollouts, dart_role_target, train, write_train_log, QuestionSet, TrainConfig, TrainReport, TrainRow,
    TRAIN_LOG_HEADER,
};
