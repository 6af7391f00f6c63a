//! Back-end for multi-agent collaborative localization and dense map fusion.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches files,
//! clocks or the terminal lives in the companion `clusterfusion` crate.
//!
//! Conventions used throughout:
//!
//! * Quaternions are Hamilton, stored `(w, x, y, z)`. A [`Pose`] maps points
//!   from its own frame into the parent frame: `p_parent = R * p + t`.
//! * Camera frames are `x` right, `y` down, `z` along the optical axis.
//!   Normalized image coordinates are `(X/Z, Y/Z)`.
//! * The scenario world frame is East-North-Up at a declared geodetic origin.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod camera;
pub mod densify;
pub mod error;
pub mod fusion;
pub mod geom;
pub mod gnss;
pub mod kdtree;
pub mod metrics;
pub mod nlls;
pub mod relpose;
pub mod scenario;
pub mod sim;
pub mod vo;
pub mod wire;

pub use error::{Error, Result};
pub use geom::{EnuPoint, GnssFix, Pose};
