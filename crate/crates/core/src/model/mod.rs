//! Small networks, datasets, the convection PINN problem and training.

pub mod data;
pub mod loss;
pub mod network;
pub mod params;
pub mod pinn;
pub mod spec;
pub mod train;

pub use data::{make_toy_classification, Dataset};
pub use loss::{accuracy, loss, LossKind};
pub use network::{build_network, forward, hidden_features, predict, BnState, Mode, Normalization};
pub use params::{layout_for, ParamVector, Role, Segment};
pub use pinn::{pinn_loss, PinnLoss, PinnPoints, PinnProblem};
pub use spec::{Activation, NetworkSpec, OutputHead};
pub use train::{train, ModelRecord, Optimizer, TrainConfig, TrainingData};
