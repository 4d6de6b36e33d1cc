//! Cavity-enhanced lattice optics: linewidth/finesse relations, power buildup,
//! trap depth per unit power for lattices and tweezer arrays, and the spatial
//! homogeneity of the two lattice cavities across the target array.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::uk_to_mhz;

/// Relative disagreement allowed between a stored finesse and `fsr / linewidth`.
pub const FINESSE_CONSISTENCY_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum OpticsError {
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("impedance match {0} outside (0, 1]")]
    ImpedanceMatch(f64),
    #[error("finesse {finesse} inconsistent with fsr/linewidth = {implied}")]
    InconsistentFinesse { finesse: f64, implied: f64 },
    #[error("crossing angle {0} deg outside (0, 90)")]
    CrossingAngle(f64),
}

fn positive(name: &'static str, value: f64) -> Result<f64, OpticsError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(OpticsError::NonPositive { name, value })
    }
}

pub fn finesse_from_linewidth(fsr_mhz: f64, linewidth_khz: f64) -> Result<f64, OpticsError> {
    let fsr = positive("fsr", fsr_mhz)?;
    let linewidth = positive("linewidth", linewidth_khz)?;
    Ok(fsr * 1e3 / linewidth)
}

/// Intracavity photon lifetime `1 / (2π Δν)` in ns.
pub fn photon_lifetime_ns(linewidth_khz: f64) -> Result<f64, OpticsError> {
    let linewidth = positive("linewidth", linewidth_khz)?;
    Ok(1e6 / (2.0 * PI * linewidth))
}

/// A lattice cavity as seen by the atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavitySpec {
    pub finesse: f64,
    pub fsr_mhz: f64,
    pub linewidth_khz: f64,
    pub waist_um: f64,
    /// 4 for a simple standing wave or a self-intersecting travelling wave,
    /// 16 for a self-intersecting standing wave.
    pub interference_factor: f64,
    pub input_transmission: f64,
    /// Round-trip transmission summed over all mirrors.
    pub total_transmission: f64,
    /// Round-trip loss other than transmission.
    pub total_loss: f64,
}

impl CavitySpec {
    /// Builds a cavity from its measured fsr and linewidth and a target
    /// impedance match. The round-trip loss `2π / F` is split so that
    /// `input_transmission / (total_loss + total_transmission)` equals `epsilon`.
    pub fn from_measurements(
        fsr_mhz: f64,
        linewidth_khz: f64,
        waist_um: f64,
        interference_factor: f64,
        epsilon: f64,
    ) -> Result<Self, OpticsError> {
        let finesse = finesse_from_linewidth(fsr_mhz, linewidth_khz)?;
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(OpticsError::ImpedanceMatch(epsilon));
        }
        let round_trip = 2.0 * PI / finesse;
        let spec = Self {
            finesse,
            fsr_mhz,
            linewidth_khz,
            waist_um,
            interference_factor,
            input_transmission: epsilon * round_trip,
            total_transmission: epsilon * round_trip,
            total_loss: (1.0 - epsilon) * round_trip,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn impedance_match(&self) -> f64 {
        self.input_transmission / (self.total_loss + self.total_transmission)
    }

    pub fn validate(&self) -> Result<(), OpticsError> {
        positive("finesse", self.finesse)?;
        positive("waist", self.waist_um)?;
        positive("interference_factor", self.interference_factor)?;
        let eps = self.impedance_match();
        if !(eps > 0.0 && eps <= 1.0 + 1e-12) {
            return Err(OpticsError::ImpedanceMatch(eps));
        }
        let implied = finesse_from_linewidth(self.fsr_mhz, self.linewidth_khz)?;
        if (implied - self.finesse).abs() > FINESSE_CONSISTENCY_TOLERANCE * self.finesse {
            return Err(OpticsError::InconsistentFinesse {
                finesse: self.finesse,
                implied,
            });
        }
        Ok(())
    }
}

/// Intracavity power buildup `Λ = 2 F ε / π`.
pub fn buildup_factor(spec: &CavitySpec) -> f64 {
    2.0 * spec.finesse * spec.impedance_match() / PI
}

/// Depth of the deepest lattice sites per unit input power, in MHz/mW, for an
/// atomic polarizability given in MHz per (mW/µm²).
pub fn lattice_depth_per_power(spec: &CavitySpec, polarizability: f64) -> f64 {
    2.0 * polarizability * buildup_factor(spec) * spec.interference_factor
        / (PI * spec.waist_um * spec.waist_um)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticalParams {
    /// MHz per (mW/µm²).
    pub polarizability: f64,
    pub tweezer_waist_um: f64,
    pub tweezer_count: u32,
    pub laser_power_mw: f64,
}

impl OpticalParams {
    pub fn validate(&self) -> Result<(), OpticsError> {
        positive("polarizability", self.polarizability)?;
        positive("tweezer_waist", self.tweezer_waist_um)?;
        positive("tweezer_count", self.tweezer_count as f64)?;
        Ok(())
    }
}

/// Depth per unit total power of an array of `N` equal tweezers, in MHz/mW.
pub fn tweezer_depth_per_power(params: &OpticalParams) -> f64 {
    let w = params.tweezer_waist_um;
    2.0 * params.polarizability / (PI * w * w * params.tweezer_count as f64)
}

/// How many times less power the lattice needs than the tweezers for equal depth.
pub fn power_advantage(lattice_mhz_per_mw: f64, tweezer_mhz_per_mw: f64) -> f64 {
    lattice_mhz_per_mw / tweezer_mhz_per_mw
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeGeometry {
    pub xy_waist_um: f64,
    pub z_waist_um: f64,
    /// Elevation of each Z-cavity pass above or below the XY plane.
    pub z_crossing_angle_deg: f64,
    pub array_halfwidth_um: f64,
    pub site_spacing_um: f64,
}

impl Default for LatticeGeometry {
    fn default() -> Self {
        Self {
            xy_waist_um: 268.0,
            z_waist_um: 183.0,
            z_crossing_angle_deg: 15.0,
            array_halfwidth_um: 57.5,
            site_spacing_um: 3.3,
        }
    }
}

impl LatticeGeometry {
    pub fn validate(&self) -> Result<(), OpticsError> {
        positive("xy_waist", self.xy_waist_um)?;
        positive("z_waist", self.z_waist_um)?;
        positive("site_spacing", self.site_spacing_um)?;
        if !(self.z_crossing_angle_deg > 0.0 && self.z_crossing_angle_deg < 90.0) {
            return Err(OpticsError::CrossingAngle(self.z_crossing_angle_deg));
        }
        Ok(())
    }

    /// Relative depth of the XY lattice at in-plane offset `(x, y)` from the mode
    /// center. The mode crosses itself along x and y; the interference term is
    /// the product of the two field envelopes.
    pub fn xy_relative_depth(&self, x: f64, y: f64) -> f64 {
        let w2 = self.xy_waist_um * self.xy_waist_um;
        (-(x * x) / w2).exp() * (-(y * y) / w2).exp()
    }

    /// Relative depth of the Z lattice. Both passes propagate along
    /// `(cos θ, 0, ±sin θ)`; a site at `(x, y, 0)` sits a transverse distance
    /// `ρ² = x² sin²θ + y²` from either pass, and the interference term is the
    /// product of the two equal field envelopes.
    pub fn z_relative_depth(&self, x: f64, y: f64) -> f64 {
        let s = self.z_crossing_angle_deg.to_radians().sin();
        let rho2 = x * x * s * s + y * y;
        let w2 = self.z_waist_um * self.z_waist_um;
        (-2.0 * rho2 / w2).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SitePosition {
    pub row: usize,
    pub col: usize,
    pub x_um: f64,
    pub y_um: f64,
}

/// Square `n × n` grid of sites with the given pitch, row-major.
pub fn square_grid(n: usize, spacing_um: f64) -> Vec<SitePosition> {
    (0..n)
        .flat_map(|row| {
            (0..n).map(move |col| SitePosition {
                row,
                col,
                x_um: col as f64 * spacing_um,
                y_um: row as f64 * spacing_um,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatticeCavity {
    Xy,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteDepth {
    pub row: usize,
    pub col: usize,
    pub x_um: f64,
    pub y_um: f64,
    pub xy: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogeneityMap {
    /// Offsets are measured from the array centroid, where the modes are centered.
    pub sites: Vec<SiteDepth>,
    pub xy_row_means: Vec<f64>,
    pub xy_col_means: Vec<f64>,
    pub z_row_means: Vec<f64>,
    pub z_col_means: Vec<f64>,
    /// Set when some site sits below half of the central depth.
    pub exceeds_mode: bool,
}

impl HomogeneityMap {
    pub fn values(&self, cavity: LatticeCavity) -> impl Iterator<Item = f64> + '_ {
        self.sites.iter().map(move |s| match cavity {
            LatticeCavity::Xy => s.xy,
            LatticeCavity::Z => s.z,
        })
    }

    /// Largest fractional shortfall from the central depth.
    pub fn peak_deviation(&self, cavity: LatticeCavity) -> f64 {
        self.values(cavity).fold(0.0, |m, v| m.max(1.0 - v))
    }

    /// CSV with columns `row,col,x_um,y_um,value`.
    pub fn to_csv(&self, cavity: LatticeCavity) -> String {
        let mut out = String::from("row,col,x_um,y_um,value\n");
        for (s, v) in self.sites.iter().zip(self.values(cavity)) {
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{:.8}\n",
                s.row, s.col, s.x_um, s.y_um, v
            ));
        }
        out
    }
}

fn grouped_means(
    sites: &[SiteDepth],
    key: impl Fn(&SiteDepth) -> usize,
    value: impl Fn(&SiteDepth) -> f64,
) -> Vec<f64> {
    let n = sites.iter().map(&key).max().map_or(0, |m| m + 1);
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for s in sites {
        sum[key(s)] += value(s);
        count[key(s)] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect()
}

/// Relative lattice depth of each cavity at every site, with the modes centered
/// on the centroid of `positions`.
pub fn homogeneity_map(
    geom: &LatticeGeometry,
    positions: &[SitePosition],
) -> Result<HomogeneityMap, OpticsError> {
    geom.validate()?;
    let n = positions.len().max(1) as f64;
    let cx = positions.iter().map(|p| p.x_um).sum::<f64>() / n;
    let cy = positions.iter().map(|p| p.y_um).sum::<f64>() / n;
    let sites: Vec<SiteDepth> = positions
        .iter()
        .map(|p| {
            let (x, y) = (p.x_um - cx, p.y_um - cy);
            SiteDepth {
                row: p.row,
                col: p.col,
                x_um: x,
                y_um: y,
                xy: geom.xy_relative_depth(x, y),
                z: geom.z_relative_depth(x, y),
            }
        })
        .collect();
    let exceeds_mode = sites.iter().any(|s| s.xy < 0.5 || s.z < 0.5);
    Ok(HomogeneityMap {
        xy_row_means: grouped_means(&sites, |s| s.row, |s| s.xy),
        xy_col_means: grouped_means(&sites, |s| s.col, |s| s.xy),
        z_row_means: grouped_means(&sites, |s| s.row, |s| s.z),
        z_col_means: grouped_means(&sites, |s| s.col, |s| s.z),
        sites,
        exceeds_mode,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftMap {
    pub sites: Vec<SiteDepth>,
}

impl ShiftMap {
    pub fn to_csv(&self, cavity: LatticeCavity) -> String {
        HomogeneityMap {
            sites: self.sites.clone(),
            xy_row_means: vec![],
            xy_col_means: vec![],
            z_row_means: vec![],
            z_col_means: vec![],
            exceeds_mode: false,
        }
        .to_csv(cavity)
    }
}

/// Differential light shift (MHz) of a transition whose excited state has
/// `polarizability_ratio` times the ground-state polarizability, for each
/// cavity contributing `peak_depth_uk` at the array center.
pub fn light_shift_map(
    map: &HomogeneityMap,
    peak_depth_uk: f64,
    polarizability_ratio: f64,
) -> ShiftMap {
    let scale = (polarizability_ratio - 1.0) * uk_to_mhz(peak_depth_uk);
    ShiftMap {
        sites: map
            .sites
            .iter()
            .map(|s| SiteDepth {
                xy: scale * s.xy,
                z: scale * s.z,
                ..*s
            })
            .collect(),
    }
}

/// Both lattice cavities plus the tweezer array they are compared with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticsConfig {
    pub xy_fsr_mhz: f64,
    pub xy_linewidth_khz: f64,
    pub xy_interference_factor: f64,
    pub z_fsr_mhz: f64,
    pub z_linewidth_khz: f64,
    pub z_interference_factor: f64,
    pub impedance_match: f64,
    pub polarizability: f64,
    pub tweezer_waist_um: f64,
    pub tweezer_count: u32,
    /// Excited/ground polarizability ratio of the transition used to map depths.
    pub shift_polarizability_ratio: f64,
    pub xy_peak_depth_uk: f64,
    pub z_peak_depth_uk: f64,
    pub lattice: LatticeGeometry,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        Self {
            xy_fsr_mhz: 890.38,
            xy_linewidth_khz: 307.0,
            xy_interference_factor: 16.0,
            z_fsr_mhz: 1345.13,
            z_linewidth_khz: 448.0,
            z_interference_factor: 4.0,
            impedance_match: 0.96,
            polarizability: 0.79,
            tweezer_waist_um: 0.7,
            tweezer_count: 1225,
            shift_polarizability_ratio: 1.4,
            xy_peak_depth_uk: 330.0,
            z_peak_depth_uk: 260.0,
            lattice: LatticeGeometry::default(),
        }
    }
}

impl OpticsConfig {
    pub fn xy_cavity(&self) -> Result<CavitySpec, OpticsError> {
        CavitySpec::from_measurements(
            self.xy_fsr_mhz,
            self.xy_linewidth_khz,
            self.lattice.xy_waist_um,
            self.xy_interference_factor,
            self.impedance_match,
        )
    }

    pub fn z_cavity(&self) -> Result<CavitySpec, OpticsError> {
        CavitySpec::from_measurements(
            self.z_fsr_mhz,
            self.z_linewidth_khz,
            self.lattice.z_waist_um,
            self.z_interference_factor,
            self.impedance_match,
        )
    }

    pub fn tweezers(&self) -> OpticalParams {
        OpticalParams {
            polarizability: self.polarizability,
            tweezer_waist_um: self.tweezer_waist_um,
            tweezer_count: self.tweezer_count,
            laser_power_mw: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CavityFigures {
    pub finesse: f64,
    pub photon_lifetime_ns: f64,
    pub buildup: f64,
    pub depth_per_power_mhz_per_mw: f64,
    pub power_advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpticsReport {
    pub xy: CavityFigures,
    pub z: CavityFigures,
    pub tweezer_depth_per_power_mhz_per_mw: f64,
}

impl OpticsReport {
    pub fn compute(cfg: &OpticsConfig) -> Result<Self, OpticsError> {
        let tweezers = cfg.tweezers();
        tweezers.validate()?;
        let tweezer = tweezer_depth_per_power(&tweezers);
        let figures = |spec: CavitySpec| -> Result<CavityFigures, OpticsError> {
            let depth = lattice_depth_per_power(&spec, cfg.polarizability);
            Ok(CavityFigures {
                finesse: spec.finesse,
                photon_lifetime_ns: photon_lifetime_ns(spec.linewidth_khz)?,
                buildup: buildup_factor(&spec),
                depth_per_power_mhz_per_mw: depth,
                power_advantage: power_advantage(depth, tweezer),
            })
        };
        Ok(Self {
            xy: figures(cfg.xy_cavity()?)?,
            z: figures(cfg.z_cavity()?)?,
            tweezer_depth_per_power_mhz_per_mw: tweezer,
        })
    }

    /// CSV with columns `quantity,xy,z`.
    pub fn to_csv(&self) -> String {
        let rows: [(&str, f64, f64); 5] = [
            ("finesse", self.xy.finesse, self.z.finesse),
            (
                "photon_lifetime_ns",
                self.xy.photon_lifetime_ns,
                self.z.photon_lifetime_ns,
            ),
            ("buildup_factor", self.xy.buildup, self.z.buildup),
            (
                "lattice_depth_per_power_mhz_per_mw",
                self.xy.depth_per_power_mhz_per_mw,
                self.z.depth_per_power_mhz_per_mw,
            ),
            (
                "power_advantage_vs_tweezers",
                self.xy.power_advantage,
                self.z.power_advantage,
            ),
        ];
        let mut out = String::from("quantity,xy,z\n");
        for (name, xy, z) in rows {
            out.push_str(&format!("{name},{xy:.6},{z:.6}\n"));
        }
        out.push_str(&format!(
            "tweezer_depth_per_power_mhz_per_mw,{t:.8},{t:.8}\n",
            t = self.tweezer_depth_per_power_mhz_per_mw
        ));
        out
    }
}
