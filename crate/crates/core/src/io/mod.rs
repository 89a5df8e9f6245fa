//! Netpbm images and the binary weights container.

pub mod netpbm;
pub mod weights;

pub use netpbm::{read_pam_pairs, read_pgm16, read_ppm, read_ppm_divisible, write_pam_pairs, write_pgm16, write_ppm, RgbImage};
pub use weights::{load_weights, read_weights, save_weights, write_weights, Manifest, WeightsFile};
