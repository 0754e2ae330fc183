pub mod bench;
pub mod collectives;
pub mod engine;
pub mod platform;
pub mod time;
pub mod transport;
pub mod wire;
