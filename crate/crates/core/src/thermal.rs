//! Motional-occupation bookkeeping at the rate-equation level.
//!
//! Each axis carries a mean occupation `nbar` at a trap frequency. Temperatures
//! and occupations are related through the Bose–Einstein formula at that axis
//! frequency. Cooling stages relax occupations toward configured floors and
//! lattice heating grows them exponentially.

use serde::{Deserialize, Serialize};

use crate::units::H_OVER_KB_UK_PER_KHZ;

/// Mean occupation of a harmonic mode at temperature `t_uk` and frequency `f_khz`.
pub fn nbar_from_temperature(t_uk: f64, f_khz: f64) -> f64 {
    if t_uk <= 0.0 {
        return 0.0;
    }
    let x = H_OVER_KB_UK_PER_KHZ * f_khz / t_uk;
    1.0 / x.exp_m1()
}

/// Inverse of [`nbar_from_temperature`].
pub fn temperature_from_nbar(nbar: f64, f_khz: f64) -> f64 {
    if nbar <= 0.0 {
        return 0.0;
    }
    H_OVER_KB_UK_PER_KHZ * f_khz / (1.0 / nbar).ln_1p()
}

/// Red/blue sideband strength ratio for a thermal state with mean occupation `nbar`.
pub fn sideband_asymmetry(nbar: f64) -> f64 {
    nbar / (nbar + 1.0)
}

/// Mean occupation implied by a measured red/blue sideband ratio in `[0, 1)`.
pub fn nbar_from_sideband_asymmetry(ratio: f64) -> f64 {
    ratio / (1.0 - ratio)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalState {
    pub nbar_x: f64,
    pub nbar_y: f64,
    pub nbar_z: f64,
    pub trap_freq_x_khz: f64,
    pub trap_freq_y_khz: f64,
    pub trap_freq_z_khz: f64,
}

impl ThermalState {
    /// Thermal state at temperature `t_uk` in a trap with in-plane frequency
    /// `f_xy_khz` and axial frequency `f_z_khz`.
    pub fn at_temperature(t_uk: f64, f_xy_khz: f64, f_z_khz: f64) -> Self {
        Self {
            nbar_x: nbar_from_temperature(t_uk, f_xy_khz),
            nbar_y: nbar_from_temperature(t_uk, f_xy_khz),
            nbar_z: nbar_from_temperature(t_uk, f_z_khz),
            trap_freq_x_khz: f_xy_khz,
            trap_freq_y_khz: f_xy_khz,
            trap_freq_z_khz: f_z_khz,
        }
    }

    pub fn is_valid(&self) -> bool {
        let occupations = [self.nbar_x, self.nbar_y, self.nbar_z];
        let freqs = [
            self.trap_freq_x_khz,
            self.trap_freq_y_khz,
            self.trap_freq_z_khz,
        ];
        occupations.iter().all(|n| n.is_finite() && *n >= 0.0)
            && freqs.iter().all(|f| f.is_finite() && *f > 0.0)
    }

    /// Per-axis temperatures (x, y, z) in µK.
    pub fn temperatures_uk(&self) -> [f64; 3] {
        [
            temperature_from_nbar(self.nbar_x, self.trap_freq_x_khz),
            temperature_from_nbar(self.nbar_y, self.trap_freq_y_khz),
            temperature_from_nbar(self.nbar_z, self.trap_freq_z_khz),
        ]
    }

    /// Mean of the three axis temperatures, used as the temperature of the
    /// three-dimensional energy distribution.
    pub fn mean_temperature_uk(&self) -> f64 {
        self.temperatures_uk().iter().sum::<f64>() / 3.0
    }

    fn map_axes(self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            nbar_x: f(self.nbar_x, self.trap_freq_x_khz),
            nbar_y: f(self.nbar_y, self.trap_freq_y_khz),
            nbar_z: f(self.nbar_z, self.trap_freq_z_khz),
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoolingStage {
    Doppler,
    Rsc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThermalParams {
    /// Temperature reached by the Doppler pulse in the lattice.
    pub doppler_floor_temperature_uk: f64,
    pub rsc_floor_nbar_xy: f64,
    pub rsc_floor_nbar_z: f64,
    pub rsc_iterations: u32,
    /// Fraction of the excess occupation above the floor left after one
    /// cooling iteration. Not reported directly; 0.5 makes 20 iterations
    /// converge to the floor within one part in 10^6.
    pub rsc_residual_per_iteration: f64,
    pub heating_time_constant_ms: f64,
    /// Temperature the atoms are left at by an image.
    pub post_image_temperature_uk: f64,
    pub lattice_trap_freq_xy_khz: f64,
    pub lattice_trap_freq_z_khz: f64,
}

impl Default for ThermalParams {
    fn default() -> Self {
        Self {
            doppler_floor_temperature_uk: 10.0,
            rsc_floor_nbar_xy: 0.08,
            rsc_floor_nbar_z: 0.12,
            rsc_iterations: 20,
            rsc_residual_per_iteration: 0.5,
            heating_time_constant_ms: 190.0,
            post_image_temperature_uk: 20.0,
            lattice_trap_freq_xy_khz: 160.0,
            lattice_trap_freq_z_khz: 50.0,
        }
    }
}

impl ThermalParams {
    /// State of an atom just after imaging in the lattice.
    pub fn post_image_state(&self) -> ThermalState {
        ThermalState::at_temperature(
            self.post_image_temperature_uk,
            self.lattice_trap_freq_xy_khz,
            self.lattice_trap_freq_z_khz,
        )
    }

    /// State at the sideband-cooling floor.
    pub fn rsc_floor_state(&self) -> ThermalState {
        ThermalState {
            nbar_x: self.rsc_floor_nbar_xy,
            nbar_y: self.rsc_floor_nbar_xy,
            nbar_z: self.rsc_floor_nbar_z,
            trap_freq_x_khz: self.lattice_trap_freq_xy_khz,
            trap_freq_y_khz: self.lattice_trap_freq_xy_khz,
            trap_freq_z_khz: self.lattice_trap_freq_z_khz,
        }
    }
}

pub fn apply_cooling(
    state: ThermalState,
    stage: CoolingStage,
    params: &ThermalParams,
) -> ThermalState {
    match stage {
        CoolingStage::Doppler => {
            let floor = params.doppler_floor_temperature_uk;
            state.map_axes(|n, f| n.min(nbar_from_temperature(floor, f)))
        }
        CoolingStage::Rsc => {
            let residual = params
                .rsc_residual_per_iteration
                .powi(params.rsc_iterations as i32);
            let relax = |n: f64, floor: f64| {
                if n > floor {
                    floor + (n - floor) * residual
                } else {
                    n
                }
            };
            ThermalState {
                nbar_x: relax(state.nbar_x, params.rsc_floor_nbar_xy),
                nbar_y: relax(state.nbar_y, params.rsc_floor_nbar_xy),
                nbar_z: relax(state.nbar_z, params.rsc_floor_nbar_z),
                ..state
            }
        }
    }
}

/// Parametric heating in the lattice: every axis grows as `exp(dwell / tau)`.
pub fn apply_heating(state: ThermalState, dwell_ms: f64, tau_heat_ms: f64) -> ThermalState {
    let growth = (dwell_ms / tau_heat_ms).exp();
    state.map_axes(|n, _| n * growth)
}
