//! Missing-modality brain MRI synthesis.
//!
//! A shared encoder maps the four co-registered slices (one zeroed) to a
//! latent, a latent diffusion model refines it, and per-modality decoders
//! reconstruct every contrast. A volumetric refiner then restores
//! inter-slice coherence over overlapping sub-volumes.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod io;
pub mod losses;
pub mod networks;
pub mod phantom;
pub mod pipeline;
pub mod preprocessing;
pub mod training;
pub mod types;
pub mod volumetric;

pub use error::{Error, Result};
pub use types::{Modality, MultiModalVolume, SliceSample, Volume};
