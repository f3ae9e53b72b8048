pub mod check;
pub mod controller;
pub mod netsim;
pub mod qpsolver;
pub mod rbd;
pub mod tsid;
pub mod harness;

pub use controller::{Scheme, SolutionPacket};
pub use harness::{run_episode, ChannelSpec, EpisodeConfig, TaskChoice};
pub use netsim::{ChannelModel, Preset, Trace};
pub use qpsolver::{ActiveSet, Decomposition, LeastSquaresQp, Solution};
pub use rbd::{ContactSet, RobotModel, RobotState};
pub use tsid::{TaskSpec, TaskTuning};
