//! Joint retinal vessel segmentation, FAZ segmentation and vascular junction
//! detection/classification from three co-registered OCTA en-face images.

pub mod codec;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod par;
pub mod train;

pub use error::{Error, Result};
