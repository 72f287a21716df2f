//! Learning event schedules with recurrent marked temporal point process
//! policies trained by policy gradients.

pub mod baselines;
pub mod broadcast;
pub mod env;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod mtpp;
pub mod policy;
pub mod reinforce;
pub mod samplecheck;
pub mod sampler;
pub mod stats;
pub mod toy;

pub use env::{Agent, AgentFactory, EnvEpisode, Environment, EpisodeRng, NeuralPolicy, Rollout};
pub use error::{Error, Result};
pub use mtpp::{EpisodeHistory, Event, EventKind, IntensitySegment, MarkPmf};
pub use policy::{
    GradientBundle, HiddenState, InitConfig, PolicyParams, PolicyShape, RegularizerSpec, Tensor,
};
pub use reinforce::{LrSchedule, TrainConfig, TrainingStats};
