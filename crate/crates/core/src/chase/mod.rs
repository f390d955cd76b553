//! Gradual channel pruning inside dynamic sparse training.

mod channel;
mod config;
mod feedback;
mod schedule;
mod topology;

pub use channel::{
    beta_floor, global_channel_prune, one_shot_channel_prune, ChannelPruneOutcome, PruneCriterion,
};
pub use config::ChaseConfig;
pub use feedback::{
    global_grow_feedback, global_prune_feedback, rebalance, FeedbackParams, FeedbackState,
};
pub use schedule::{channel_sparsity_target, SparsitySchedule};
pub use topology::{
    channel_sparsity, dead_channels, kill_channel, ChannelTopology, Consumer, ExclusionReason,
    LayerTopology,
};
