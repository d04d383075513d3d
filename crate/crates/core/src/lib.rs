pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod sampler;
pub mod sc_loss;
pub mod tensor;
pub mod trainer;
