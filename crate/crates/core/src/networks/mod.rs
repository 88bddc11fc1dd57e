//! Neural building blocks and the two models.

pub mod cen;
pub mod im2col;
pub mod layers;
pub mod mmg;
mod norm;

pub use cen::{CenArchConfig, CenModel};
pub use layers::no_grad;
pub use mmg::{MmgArchConfig, MmgModel};
