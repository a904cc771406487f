pub mod chunks;
pub mod conformance;
pub mod cost;
pub mod engine;
pub mod pipeline;
pub mod prefetch;
pub mod report;
pub mod sim;
pub mod tree;
pub mod workload;
