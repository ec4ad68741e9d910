pub mod config;
pub mod experiments;
pub mod pipeline;
pub mod stages;
pub mod store;
