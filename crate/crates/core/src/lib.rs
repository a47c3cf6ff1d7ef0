//! Proxy-variable production-function estimation: a firm-panel simulator,
//! two-step GMM with original and orthogonalized moments, clustered LM
//! inference, an invertibility test and a sensitivity diagnostic.

pub mod basis;
pub mod dgp;
pub mod error;
pub mod experiment;
pub mod gmm;
pub mod inference;
pub mod invertibility;
pub mod linalg;
pub mod mlp;
pub mod optim;
pub mod model;
pub mod panel;
pub mod sensitivity;
pub mod step1;

pub use error::{Error, Result};
pub use model::{FirmState, ModelParams};
