pub mod agents;
pub mod experiment;
pub mod mechanism;
pub mod network;
pub mod zdd;
