pub mod attention;
pub mod autograd;
pub mod control;
pub mod diffusion;
pub mod exec;
pub mod flow_smoothing;
pub mod metrics;
pub mod pipeline;
pub mod providers;
pub mod rng;
pub mod tensor_io;
pub mod video_model;
