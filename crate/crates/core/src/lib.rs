pub mod dsp;
pub mod labels;
pub mod nn;
pub mod synth;
pub mod pipeline;
pub mod metrics;
pub mod telemetry;
pub mod tuner;
pub mod sim;
pub mod protocol;
