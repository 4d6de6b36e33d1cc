//! Physical constants and unit conversions shared across the models.
//!
//! Temperatures are in µK, frequencies in kHz or MHz as named, lengths in µm
//! and durations in ms unless a field name says otherwise.

/// Planck constant over Boltzmann constant, in µK per kHz.
pub const H_OVER_KB_UK_PER_KHZ: f64 = 6.626_070_15e-34 / 1.380_649e-23 * 1e3 * 1e6;

/// Trap depth conversion: one MHz of light shift expressed as a temperature in µK.
pub const UK_PER_MHZ: f64 = H_OVER_KB_UK_PER_KHZ * 1e3;

pub fn mhz_to_uk(mhz: f64) -> f64 {
    mhz * UK_PER_MHZ
}

pub fn uk_to_mhz(uk: f64) -> f64 {
    uk / UK_PER_MHZ
}
