pub mod analysis;
pub mod backend;
pub mod game;
pub mod orchestrator;
pub mod profile;
pub mod protocol;
pub mod report;
pub mod store;
