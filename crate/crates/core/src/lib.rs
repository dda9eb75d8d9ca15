pub mod classifier;
pub mod data;
pub mod engine;
pub mod experiment;
pub mod llm;
pub mod metrics;
pub mod seed;
pub mod strategies;
pub mod sweep;
