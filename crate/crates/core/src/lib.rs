pub mod cotrain;
pub mod distill;
pub mod encoder;
pub mod graph;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod tensor;
