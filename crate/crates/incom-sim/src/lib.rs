pub mod dataset;
pub mod episode;
pub mod expert;
pub mod obs;
pub mod world;

pub use episode::{read_episode, write_episode, Episode, EpisodeDims};
pub use obs::{observe, Observation};
pub use world::{Action, Phase, SimConfig, SimError, StepInfo, World, WorldState};
