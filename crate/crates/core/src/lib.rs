pub mod autodiff;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod meta_train;
pub mod model;
pub mod oracle;
pub mod plasticity;
pub mod tasks;
pub mod tensor;
