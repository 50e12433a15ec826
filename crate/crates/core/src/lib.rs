//! Contrastive role representations with attention-guided value mixing for
//! cooperative multi-agent Q-learning, plus the RoleArena environment used to
//! train and evaluate it.

pub mod agent_net;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod env;
pub mod episode;
pub mod error;
pub mod graph;
pub mod harness;
pub mod kmeans;
pub mod learner;
pub mod mixer;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use agent_net::{greedy_action, one_hot, select_action, AgentNet};
pub use attention::{AttentionOutput, MultiHeadAttention};
pub use config::{NetConfig, TargetUpdateMode, TrainConfig, Variant};
pub use contrastive::{infonce_loss, infonce_loss_grad, EncoderKind, RoleEncoders};
pub use env::{EnvConfig, Preset, RoleArena, StepResult, UnitClass};
pub use episode::{Batch, EpisodeRecord, ReplayBuffer};
pub use error::{Error, Result};
pub use kmeans::{kmeans, ClusterAssignment};
pub use learner::{ContrastiveStats, Learner, Networks, TdStats};
pub use mixer::Mixer;
pub use params::{momentum_update, ParamId, ParamStore};
pub use tensor::Mat;
pub use trainer::{collect_episode, evaluate, train, EvalReport, MetricsLog, TrainSummary, Trainer};
