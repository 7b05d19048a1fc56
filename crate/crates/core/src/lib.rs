//! Desk-scale TOF-PET pipeline: analytical phantoms, list-mode simulation,
//! most-likely-annihilation-position histo-images, and a 3D convolutional
//! U-Net that reconstructs activity volumes from histo-image/attenuation
//! pairs.

pub mod error;
pub mod geometry;
pub mod histogram;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod parallel;
pub mod phantom;
pub mod simulate;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
