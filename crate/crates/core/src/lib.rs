pub mod assignment;
pub mod backbone;
pub mod error;
pub mod grid;
pub mod grouping;
pub mod heads;
pub mod io;
pub mod model;
pub mod numerics;
pub mod sparse;
pub mod train;

pub use error::{Error, Result};
pub use grid::TokenGrid;
