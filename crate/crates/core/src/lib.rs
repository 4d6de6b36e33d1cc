//! Monte Carlo simulation of iterative atom-array loading from a repeatedly
//! refilled reservoir, with the cavity-lattice optics, imaging, loss and
//! rearrangement models it is built from.

pub mod cavity;
pub mod imaging;
pub mod losses;
pub mod params;
pub mod protocol;
pub mod rearrange;
pub mod thermal;
pub mod units;

pub use params::{default_paper_config, load_config, validate, SimConfig};
