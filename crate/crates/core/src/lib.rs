pub mod autodiff;
pub mod certify;
pub mod cegis;
pub mod bounds;
pub mod checkpoint;
pub mod domain;
pub mod dynamics;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod pgd;
pub mod pipeline;
pub mod relax;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
