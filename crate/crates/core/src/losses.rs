//! Per-mechanism loss models: background-gas collisions, tweezer/lattice
//! handoffs (depth, temperature and alignment dependent), the rearrangement
//! tweezer's pickup and disturbance response, the alignment scan used to
//! find the optimal tweezer/lattice offset, and the per-cycle loss budget.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{check_non_negative, check_positive, check_probability, SimConfig, Violation};
use crate::thermal::ThermalState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMechanism {
    Vacuum,
    ImagingVacuum,
    ImagingRaman,
    Handoff,
    Disturbance,
    Collision,
    SpinFlip,
}

impl LossMechanism {
    pub const ALL: [LossMechanism; 7] = [
        LossMechanism::Vacuum,
        LossMechanism::ImagingVacuum,
        LossMechanism::ImagingRaman,
        LossMechanism::Handoff,
        LossMechanism::Disturbance,
        LossMechanism::Collision,
        LossMechanism::SpinFlip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossMechanism::Vacuum => "vacuum",
            LossMechanism::ImagingVacuum => "imaging_vacuum",
            LossMechanism::ImagingRaman => "imaging_raman",
            LossMechanism::Handoff => "handoff",
            LossMechanism::Disturbance => "disturbance",
            LossMechanism::Collision => "collision",
            LossMechanism::SpinFlip => "spin_flip",
        }
    }
}

/// Trapping wavelength of a target-array zone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Wavelength {
    #[serde(rename = "459")]
    Nm459,
    #[serde(rename = "423")]
    Nm423,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    /// Loss per tweezer→lattice→tweezer pair at nominal depth, aligned.
    pub handoff_loss_459: f64,
    pub handoff_loss_423: f64,
    /// Handoff depth (fraction of nominal) below which thermal spilling sets in.
    pub handoff_depth_threshold: f64,
    /// Pair loss at half-period misalignment.
    pub misaligned_handoff_loss_max: f64,
    /// Extra temperature picked up during the transfer, added to the lattice
    /// state's temperature when computing spilling from a shallow tweezer.
    pub handoff_heating_uk: f64,
    pub proximity_distance_um: f64,
    /// Geometric slack on the proximity test; the channel centre sits at half
    /// the spacing (1.65 µm) from the adjacent sites.
    pub proximity_tolerance_um: f64,
    pub rearr_depth_nominal_uk: f64,
    pub target_depth_nominal_uk: f64,
    /// Operating depth of the rearrangement tweezer, as a fraction of nominal.
    pub rearr_depth_fraction: f64,
    /// Operating depth of the target tweezers during handoffs.
    pub target_depth_fraction: f64,
    /// Depth fraction at which pickup succeeds with probability 1 - 1/e.
    pub pickup_depth_scale: f64,
    pub pickup_exponent: f64,
    /// Disturbance per close pass is `coefficient * (depth_fraction - 1)^2` above nominal.
    pub disturbance_coefficient: f64,
    /// Fractional deviation from the magic condition per nm of detuning; stored only.
    pub magic_sensitivity_per_nm: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            handoff_loss_459: 0.0006,
            handoff_loss_423: 0.0015,
            handoff_depth_threshold: 0.75,
            misaligned_handoff_loss_max: 0.02,
            handoff_heating_uk: 2.5,
            proximity_distance_um: 1.6,
            proximity_tolerance_um: 0.1,
            rearr_depth_nominal_uk: 150.0,
            target_depth_nominal_uk: 50.0,
            rearr_depth_fraction: 1.0,
            target_depth_fraction: 1.0,
            pickup_depth_scale: 0.5,
            pickup_exponent: 4.0,
            disturbance_coefficient: 0.02,
            magic_sensitivity_per_nm: 0.007,
        }
    }
}

impl LossParams {
    pub fn plateau_loss(&self, wavelength: Wavelength) -> f64 {
        match wavelength {
            Wavelength::Nm459 => self.handoff_loss_459,
            Wavelength::Nm423 => self.handoff_loss_423,
        }
    }

    pub fn validate(&self, prefix: &str, out: &mut Vec<Violation>) {
        for (name, v) in [
            ("handoff_loss_459", self.handoff_loss_459),
            ("handoff_loss_423", self.handoff_loss_423),
            (
                "misaligned_handoff_loss_max",
                self.misaligned_handoff_loss_max,
            ),
            ("disturbance_coefficient", self.disturbance_coefficient),
        ] {
            check_probability(out, &format!("{prefix}{name}"), v);
        }
        if !(self.handoff_depth_threshold > 0.0 && self.handoff_depth_threshold <= 1.0) {
            out.push(Violation::new(
                format!("{prefix}handoff_depth_threshold"),
                "must be in (0, 1]",
            ));
        }
        for (name, v) in [
            ("proximity_distance_um", self.proximity_distance_um),
            ("rearr_depth_nominal_uk", self.rearr_depth_nominal_uk),
            ("target_depth_nominal_uk", self.target_depth_nominal_uk),
            ("pickup_depth_scale", self.pickup_depth_scale),
            ("pickup_exponent", self.pickup_exponent),
        ] {
            check_positive(out, &format!("{prefix}{name}"), v);
        }
        for (name, v) in [
            ("handoff_heating_uk", self.handoff_heating_uk),
            ("proximity_tolerance_um", self.proximity_tolerance_um),
            ("rearr_depth_fraction", self.rearr_depth_fraction),
            ("target_depth_fraction", self.target_depth_fraction),
            ("magic_sensitivity_per_nm", self.magic_sensitivity_per_nm),
        ] {
            check_non_negative(out, &format!("{prefix}{name}"), v);
        }
    }
}

/// Offset of the tweezer array relative to the nearest lattice antinode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentState {
    pub offset_x_um: f64,
    pub offset_y_um: f64,
    pub lattice_period_um: f64,
}

/// Half the 783.8 nm lattice wavelength.
pub const DEFAULT_LATTICE_PERIOD_UM: f64 = 0.3919;

/// Typical residual offset per axis between realignments.
pub const DEFAULT_RESIDUAL_OFFSET_UM: f64 = 0.045;

impl Default for AlignmentState {
    fn default() -> Self {
        Self {
            offset_x_um: DEFAULT_RESIDUAL_OFFSET_UM,
            offset_y_um: DEFAULT_RESIDUAL_OFFSET_UM,
            lattice_period_um: DEFAULT_LATTICE_PERIOD_UM,
        }
    }
}

impl AlignmentState {
    pub fn aligned() -> Self {
        Self {
            offset_x_um: 0.0,
            offset_y_um: 0.0,
            lattice_period_um: DEFAULT_LATTICE_PERIOD_UM,
        }
    }

    pub fn with_offset(&self, dx: f64, dy: f64) -> Self {
        Self {
            offset_x_um: self.offset_x_um + dx,
            offset_y_um: self.offset_y_um + dy,
            ..self.clone()
        }
    }

    /// Raised-cosine misalignment in `[0, 1]`: 0 on an antinode, 1 half a period away
    /// along either axis.
    pub fn misalignment(&self) -> f64 {
        let k = PI / self.lattice_period_um;
        1.0 - (k * self.offset_x_um).cos().powi(2) * (k * self.offset_y_um).cos().powi(2)
    }

    pub fn validate(&self, prefix: &str, out: &mut Vec<Violation>) {
        check_positive(
            out,
            &format!("{prefix}lattice_period_um"),
            self.lattice_period_um,
        );
        for (name, v) in [
            ("offset_x_um", self.offset_x_um),
            ("offset_y_um", self.offset_y_um),
        ] {
            if !v.is_finite() {
                out.push(Violation::new(format!("{prefix}{name}"), "must be finite"));
            }
        }
    }
}

pub fn vacuum_survival(dwell_ms: f64, lifetime_ms: f64) -> f64 {
    if dwell_ms <= 0.0 || lifetime_ms.is_infinite() {
        return 1.0;
    }
    (-dwell_ms / lifetime_ms).exp()
}

/// Fraction of a 3D harmonic thermal distribution with total energy below `eta` kT.
fn bound_fraction(eta: f64) -> f64 {
    if eta <= 0.0 {
        return 0.0;
    }
    1.0 - (-eta).exp() * (1.0 + eta + 0.5 * eta * eta)
}

/// Temperature relevant for spilling out of the target tweezer after a handoff.
pub fn handoff_temperature_uk(state: &ThermalState, params: &LossParams) -> f64 {
    state.mean_temperature_uk() + params.handoff_heating_uk
}

/// Retention when handing off into a tweezer at `depth_fraction` of nominal,
/// relative to a handoff at the threshold depth. 1 at or above threshold.
pub fn shallow_trap_retention(
    depth_fraction: f64,
    state: &ThermalState,
    params: &LossParams,
) -> f64 {
    if depth_fraction >= params.handoff_depth_threshold {
        return 1.0;
    }
    let t = handoff_temperature_uk(state, params);
    let eta = |d: f64| d * params.target_depth_nominal_uk / t;
    bound_fraction(eta(depth_fraction)) / bound_fraction(eta(params.handoff_depth_threshold))
}

/// Pair loss from the wavelength plateau and misalignment alone.
pub fn aligned_pair_loss(
    wavelength: Wavelength,
    alignment: &AlignmentState,
    params: &LossParams,
) -> f64 {
    let plateau = params.plateau_loss(wavelength);
    plateau + (params.misaligned_handoff_loss_max - plateau).max(0.0) * alignment.misalignment()
}

/// Survival of the tweezer→lattice transfer. The alignment-dependent part of the
/// pair loss is taken here: a tweezer off the antinode releases its atom away
/// from the lattice minimum, while the return transfer starts from the well.
pub fn inbound_handoff_survival(
    wavelength: Wavelength,
    alignment: &AlignmentState,
    params: &LossParams,
) -> f64 {
    (1.0 - aligned_pair_loss(wavelength, alignment, params))
        / (1.0 - params.plateau_loss(wavelength)).sqrt()
}

/// Survival of the lattice→tweezer transfer: half the plateau loss times the
/// shallow-trap retention.
pub fn outbound_handoff_survival(
    wavelength: Wavelength,
    retention: f64,
    params: &LossParams,
) -> f64 {
    (1.0 - params.plateau_loss(wavelength)).sqrt() * retention
}

/// Survival probability for one tweezer→lattice→tweezer handoff pair.
pub fn handoff_survival(
    depth_fraction: f64,
    wavelength: Wavelength,
    state: &ThermalState,
    alignment: &AlignmentState,
    params: &LossParams,
) -> f64 {
    let survival = inbound_handoff_survival(wavelength, alignment, params)
        * outbound_handoff_survival(
            wavelength,
            shallow_trap_retention(depth_fraction, state, params),
            params,
        );
    survival.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TweezerResponse {
    pub pickup_success: f64,
    pub disturbance_per_pass: f64,
}

/// Pickup saturates with depth; passing near occupied sites only disturbs them
/// once the moving tweezer is deeper than nominal.
pub fn rearrangement_tweezer_response(depth_fraction: f64, params: &LossParams) -> TweezerResponse {
    let d = depth_fraction.max(0.0);
    let pickup_success =
        1.0 - (-(d / params.pickup_depth_scale).powf(params.pickup_exponent)).exp();
    let excess = (d - 1.0).max(0.0);
    TweezerResponse {
        pickup_success,
        disturbance_per_pass: (params.disturbance_coefficient * excess * excess).min(1.0),
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AlignmentError {
    #[error("scan must span at least one lattice period ({period} µm), got {span} µm")]
    ScanTooNarrow { span: f64, period: f64 },
    #[error("modulation amplitude {amplitude:.2e} indistinguishable from noise ({noise:.2e})")]
    NoModulation { amplitude: f64, noise: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub offset_um: f64,
    pub survival: f64,
    pub trials: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScan {
    pub points: Vec<ScanPoint>,
    pub period_um: f64,
    pub mean_survival: f64,
    pub amplitude: f64,
    /// Scan offset that maximizes the fitted survival, wrapped to `[-period/2, period/2)`.
    pub optimum_um: f64,
}

impl AlignmentScan {
    pub fn fitted_survival(&self, offset_um: f64) -> f64 {
        self.mean_survival
            + self.amplitude * (2.0 * PI * (offset_um - self.optimum_um) / self.period_um).cos()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("offset_um,survival,trials,fit\n");
        for p in &self.points {
            out.push_str(&format!(
                "{:.6},{:.6},{},{:.6}\n",
                p.offset_um,
                p.survival,
                p.trials,
                self.fitted_survival(p.offset_um)
            ));
        }
        out
    }
}

/// Simulates `n_handoffs` handoff pairs at each x offset of the tweezer array
/// (added to the true residual offset in `alignment`), then fits
/// `c + a cos(kx) + b sin(kx)` with the lattice period fixed.
pub fn alignment_scan<R: Rng + ?Sized>(
    offsets_um: &[f64],
    n_handoffs: u64,
    wavelength: Wavelength,
    state: &ThermalState,
    alignment: &AlignmentState,
    params: &LossParams,
    rng: &mut R,
) -> Result<AlignmentScan, AlignmentError> {
    let period = alignment.lattice_period_um;
    let span = offsets_um.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - offsets_um.iter().copied().fold(f64::INFINITY, f64::min);
    if span.is_nan() || span < period || offsets_um.len() < 4 {
        return Err(AlignmentError::ScanTooNarrow {
            span: span.max(0.0),
            period,
        });
    }
    let points: Vec<ScanPoint> = offsets_um
        .iter()
        .map(|&x| {
            let s = handoff_survival(
                params.target_depth_fraction,
                wavelength,
                state,
                &alignment.with_offset(x, 0.0),
                params,
            );
            let survived = (0..n_handoffs).filter(|_| rng.random::<f64>() < s).count() as u64;
            ScanPoint {
                offset_um: x,
                survival: survived as f64 / n_handoffs.max(1) as f64,
                trials: n_handoffs,
            }
        })
        .collect();

    let k = 2.0 * PI / period;
    let rows: Vec<[f64; 3]> = points
        .iter()
        .map(|p| [1.0, (k * p.offset_um).cos(), (k * p.offset_um).sin()])
        .collect();
    let ys: Vec<f64> = points.iter().map(|p| p.survival).collect();
    let coef = least_squares3(&rows, &ys);
    let rss: f64 = rows
        .iter()
        .zip(&ys)
        .map(|(r, y)| (y - (coef[0] * r[0] + coef[1] * r[1] + coef[2] * r[2])).powi(2))
        .sum();
    let n = points.len() as f64;
    let sigma2 = rss / (n - 3.0).max(1.0);
    let amplitude = coef[1].hypot(coef[2]);
    let noise = (2.0 * sigma2 / n).sqrt();
    if amplitude.is_nan() || amplitude <= 3.0 * noise {
        return Err(AlignmentError::NoModulation { amplitude, noise });
    }
    let mut optimum = coef[2].atan2(coef[1]) / k;
    optimum -= period * ((optimum + 0.5 * period) / period).floor();
    Ok(AlignmentScan {
        points,
        period_um: period,
        mean_survival: coef[0],
        amplitude,
        optimum_um: optimum,
    })
}

/// Ordinary least squares with three regressors via the normal equations.
fn least_squares3(rows: &[[f64; 3]], ys: &[f64]) -> [f64; 3] {
    let mut a = [[0.0; 4]; 3];
    for (r, y) in rows.iter().zip(ys) {
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += r[i] * r[j];
            }
            a[i][3] += r[i] * y;
        }
    }
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        for row in 0..3 {
            if row != col && a[col][col] != 0.0 {
                let f = a[row][col] / a[col][col];
                let pivot_row = a[col];
                for (x, p) in a[row].iter_mut().zip(pivot_row).skip(col) {
                    *x -= f * p;
                }
            }
        }
    }
    [0, 1, 2].map(|i| {
        if a[i][i] != 0.0 {
            a[i][3] / a[i][i]
        } else {
            0.0
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub mechanism: LossMechanism,
    /// Probability per cycle that a target atom is lost to this mechanism.
    pub probability: f64,
    pub dominant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBudget {
    pub rows: Vec<BudgetRow>,
    pub cycle_duration_ms: f64,
    pub rearrangement_ms: f64,
    pub moves_per_cycle: f64,
}

impl LossBudget {
    pub fn total(&self) -> f64 {
        1.0 - self
            .rows
            .iter()
            .map(|r| 1.0 - r.probability)
            .product::<f64>()
    }

    pub fn row(&self, m: LossMechanism) -> Option<&BudgetRow> {
        self.rows.iter().find(|r| r.mechanism == m)
    }

    pub fn dominant(&self) -> LossMechanism {
        self.rows
            .iter()
            .find(|r| r.dominant)
            .map(|r| r.mechanism)
            .unwrap_or(LossMechanism::Vacuum)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mechanism,probability_per_cycle,dominant\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6e},{}\n",
                r.mechanism.name(),
                r.probability,
                r.dominant
            ));
        }
        out.push_str(&format!("total,{:.6e},false\n", self.total()));
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "per-cycle loss budget (cycle {:.1} ms, rearrangement {:.1} ms, {:.1} moves)\n",
            self.cycle_duration_ms, self.rearrangement_ms, self.moves_per_cycle
        );
        for r in &self.rows {
            out.push_str(&format!(
                "  {:<15} {:>9.4}%{}\n",
                r.mechanism.name(),
                100.0 * r.probability,
                if r.dominant { "  <- dominant" } else { "" }
            ));
        }
        out.push_str(&format!(
            "  {:<15} {:>9.4}%\n",
            "total",
            100.0 * self.total()
        ));
        out
    }
}

/// Expected per-cycle loss probabilities for an atom in the target array at
/// steady state, from the same survival models the Monte Carlo uses.
pub fn budget_report(config: &SimConfig) -> LossBudget {
    let ss = crate::protocol::steady_state_analytic(config);
    let t = &ss.terms;
    let mut rows: Vec<BudgetRow> = vec![
        (LossMechanism::Vacuum, 1.0 - t.vacuum_survival_cycle),
        (
            LossMechanism::ImagingVacuum,
            t.imaging_loss * config.imaging.vacuum_fraction_of_loss,
        ),
        (
            LossMechanism::ImagingRaman,
            t.imaging_loss * (1.0 - config.imaging.vacuum_fraction_of_loss),
        ),
        (LossMechanism::Handoff, 1.0 - t.handoff_survival_mean),
        (LossMechanism::Disturbance, t.disturbance_per_atom),
        (LossMechanism::Collision, t.collision_per_atom),
        (LossMechanism::SpinFlip, t.spin_flip),
    ]
    .into_iter()
    .map(|(mechanism, probability)| BudgetRow {
        mechanism,
        probability,
        dominant: false,
    })
    .collect();
    if let Some(i) =
        (0..rows.len()).max_by(|&a, &b| rows[a].probability.total_cmp(&rows[b].probability))
    {
        rows[i].dominant = true;
    }
    LossBudget {
        rows,
        cycle_duration_ms: ss.cycle_duration_ms,
        rearrangement_ms: ss.rearrangement_ms,
        moves_per_cycle: ss.moves_per_cycle,
    }
}
