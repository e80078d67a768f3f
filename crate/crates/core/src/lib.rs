pub mod backend;
pub mod group;
pub mod metering;
pub mod pedersen;
pub mod privacy;
pub mod wire;
pub mod analysis;
pub mod sim;
pub mod node;
