//! Trace-driven simulator and policy library for GPU cold-start
//! optimization of serverless LLM functions.
//!
//! The pipeline: trace a function's initialization and inference
//! ([`tracer`]), build an adaptive startup template ([`template`]), plan a
//! forked startup ([`fork`]), and evaluate it with a deterministic
//! discrete-event engine ([`sim`]) — standalone or under a cluster
//! scheduler ([`pool`]) against recorded or synthesized traffic
//! ([`workload`]).

pub mod config;
pub mod fork;
pub mod model;
pub mod pool;
pub mod presets;
pub mod report;
pub mod sim;
pub mod template;
pub mod tracer;
pub mod workload;
