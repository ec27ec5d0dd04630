pub mod codec;
pub mod metrics;
pub mod preprocess;
pub mod prompts;
pub mod quantizer;
pub mod rng;
pub mod signal;
pub mod spectral;
pub mod synth;
pub mod tensor;
pub mod tokens;
