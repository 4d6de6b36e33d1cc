//! Scenario configuration: the default parameter set, JSON ingestion and
//! validation. JSON keys carry their unit as a suffix (`_um`, `_ms`, `_s`, ...).

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cavity::OpticsConfig;
use crate::imaging::ImagingModel;
use crate::losses::{AlignmentState, LossParams};
use crate::rearrange::PlannerParams;
use crate::thermal::ThermalParams;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

pub fn check_probability(out: &mut Vec<Violation>, path: &str, v: f64) {
    if !(0.0..=1.0).contains(&v) {
        out.push(Violation::new(
            path,
            format!("probability {v} outside [0, 1]"),
        ));
    }
}

pub fn check_positive(out: &mut Vec<Violation>, path: &str, v: f64) {
    if v.is_nan() || v <= 0.0 {
        out.push(Violation::new(path, format!("must be > 0, got {v}")));
    }
}

pub fn check_non_negative(out: &mut Vec<Violation>, path: &str, v: f64) {
    if !(v >= 0.0 && v.is_finite()) {
        out.push(Violation::new(
            path,
            format!("must be finite and >= 0, got {v}"),
        ));
    }
}

/// Durations of the fixed phases of one loading cycle, in ms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseTimings {
    pub mot_load_ms: f64,
    pub transport_ms: f64,
    /// One tweezer ramp; each handoff uses one.
    pub tweezer_ramp_ms: f64,
    pub galvo_translate_ms: f64,
    pub doppler_ms: f64,
    pub rsc_total_ms: f64,
    pub image_ms: f64,
    /// Camera readout and control latency before the rearrangement starts.
    pub rearrange_fixed_overhead_ms: f64,
}

impl Default for PhaseTimings {
    fn default() -> Self {
        Self {
            mot_load_ms: 80.0,
            transport_ms: 100.0,
            tweezer_ramp_ms: 1.0,
            galvo_translate_ms: 10.0,
            doppler_ms: 2.0,
            rsc_total_ms: 8.0,
            image_ms: 7.0,
            rearrange_fixed_overhead_ms: 20.0,
        }
    }
}

impl PhaseTimings {
    fn fields(&self) -> [(&'static str, f64); 8] {
        [
            ("mot_load_ms", self.mot_load_ms),
            ("transport_ms", self.transport_ms),
            ("tweezer_ramp_ms", self.tweezer_ramp_ms),
            ("galvo_translate_ms", self.galvo_translate_ms),
            ("doppler_ms", self.doppler_ms),
            ("rsc_total_ms", self.rsc_total_ms),
            ("image_ms", self.image_ms),
            (
                "rearrange_fixed_overhead_ms",
                self.rearrange_fixed_overhead_ms,
            ),
        ]
    }

    /// Time from the reservoir reaching the lattice to the start of rearrangement
    /// (MOT loading runs in parallel and is not included).
    pub fn pre_rearrangement_ms(&self) -> f64 {
        self.transport_ms
            + self.tweezer_ramp_ms
            + self.image_ms
            + self.doppler_ms
            + self.rsc_total_ms
            + self.tweezer_ramp_ms
            + self.galvo_translate_ms
            + self.rearrange_fixed_overhead_ms
    }
}

fn lifetime_or_infinite<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub reservoir_sites: u32,
    pub target_rows: u32,
    pub target_cols: u32,
    pub target_spacing_um: f64,
    /// Gap between the target edge column and the nearest reservoir column.
    pub reservoir_offset_um: f64,
    pub lac_fill_probability: f64,
    pub mot_load_rate_per_s: f64,
    pub mot_saturation_time_ms: f64,
    /// Atoms delivered to the reservoir at which every site reaches the
    /// collisional-blockade fill probability; smaller deliveries scale it down.
    pub reservoir_saturation_atoms: f64,
    pub transport_survival: f64,
    /// `null` in JSON means no background-gas loss.
    #[serde(deserialize_with = "lifetime_or_infinite")]
    pub vacuum_lifetime_s: f64,
    pub phase_timings: PhaseTimings,
    pub imaging: ImagingModel,
    pub thermal: ThermalParams,
    pub losses: LossParams,
    /// Residual offset between tweezer array and lattice.
    pub alignment: AlignmentState,
    pub planner: PlannerParams,
    pub optics: OpticsConfig,
    /// Take a diagnostic image after rearrangement every this many cycles; 0 disables.
    pub diagnostic_image_interval: u32,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            reservoir_sites: 105,
            target_rows: 35,
            target_cols: 35,
            target_spacing_um: 3.3,
            reservoir_offset_um: 3.3,
            lac_fill_probability: 0.5,
            mot_load_rate_per_s: 1.5e6,
            mot_saturation_time_ms: 80.0,
            reservoir_saturation_atoms: 1.5e6 * 0.080 * 0.7,
            transport_survival: 0.7,
            vacuum_lifetime_s: 30.0,
            phase_timings: PhaseTimings::default(),
            imaging: ImagingModel::default(),
            thermal: ThermalParams::default(),
            losses: LossParams::default(),
            alignment: AlignmentState::default(),
            planner: PlannerParams::default(),
            optics: OpticsConfig::default(),
            diagnostic_image_interval: 0,
            rng_seed: 1,
        }
    }
}

pub fn default_paper_config() -> SimConfig {
    SimConfig::default()
}

impl SimConfig {
    pub fn target_sites(&self) -> usize {
        self.target_rows as usize * self.target_cols as usize
    }

    pub fn vacuum_lifetime_ms(&self) -> f64 {
        self.vacuum_lifetime_s * 1e3
    }

    /// Probability that a reservoir site holds an atom after one MOT load of
    /// `mot_ms` followed by transport.
    pub fn reservoir_fill_probability(&self, mot_ms: f64) -> f64 {
        let delivered = self.mot_load_rate_per_s * mot_ms * 1e-3 * self.transport_survival;
        self.lac_fill_probability * (delivered / self.reservoir_saturation_atoms).min(1.0)
    }

    /// Same scenario with every loss and readout error switched off: infinite
    /// lifetime, lossless noiseless imaging, perfect handoffs and pickups.
    pub fn without_losses(mut self) -> Self {
        self.vacuum_lifetime_s = f64::INFINITY;
        self.imaging.loss_per_image = 0.0;
        self.imaging.spin_flip_probability = 0.0;
        self.imaging.signal_width = 0.0;
        self.imaging.background_width = 0.0;
        self.losses.handoff_loss_459 = 0.0;
        self.losses.handoff_loss_423 = 0.0;
        self.losses.misaligned_handoff_loss_max = 0.0;
        self.losses.disturbance_coefficient = 0.0;
        self.losses.pickup_depth_scale = 1e-3;
        self.alignment = AlignmentState {
            offset_x_um: 0.0,
            offset_y_um: 0.0,
            ..self.alignment
        };
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub fn validate(config: &SimConfig) -> ValidationReport {
    let c = config;
    let mut v = Vec::new();
    for (name, n) in [
        ("target_rows", c.target_rows),
        ("target_cols", c.target_cols),
    ] {
        if n == 0 {
            v.push(Violation::new(name, "must be at least 1"));
        }
    }
    check_positive(&mut v, "target_spacing_um", c.target_spacing_um);
    check_positive(&mut v, "reservoir_offset_um", c.reservoir_offset_um);
    check_probability(&mut v, "lac_fill_probability", c.lac_fill_probability);
    check_non_negative(&mut v, "mot_load_rate_per_s", c.mot_load_rate_per_s);
    check_non_negative(&mut v, "mot_saturation_time_ms", c.mot_saturation_time_ms);
    check_positive(
        &mut v,
        "reservoir_saturation_atoms",
        c.reservoir_saturation_atoms,
    );
    check_probability(&mut v, "transport_survival", c.transport_survival);
    check_positive(&mut v, "vacuum_lifetime_s", c.vacuum_lifetime_s);
    for (name, t) in c.phase_timings.fields() {
        check_non_negative(&mut v, &format!("phase_timings.{name}"), t);
    }
    c.imaging.validate("imaging.", &mut v);

    let th = &c.thermal;
    for (name, x) in [
        (
            "doppler_floor_temperature_uk",
            th.doppler_floor_temperature_uk,
        ),
        ("heating_time_constant_ms", th.heating_time_constant_ms),
        ("post_image_temperature_uk", th.post_image_temperature_uk),
        ("lattice_trap_freq_xy_khz", th.lattice_trap_freq_xy_khz),
        ("lattice_trap_freq_z_khz", th.lattice_trap_freq_z_khz),
    ] {
        check_positive(&mut v, &format!("thermal.{name}"), x);
    }
    for (name, x) in [
        ("rsc_floor_nbar_xy", th.rsc_floor_nbar_xy),
        ("rsc_floor_nbar_z", th.rsc_floor_nbar_z),
    ] {
        check_non_negative(&mut v, &format!("thermal.{name}"), x);
    }
    check_probability(
        &mut v,
        "thermal.rsc_residual_per_iteration",
        th.rsc_residual_per_iteration,
    );

    c.losses.validate("losses.", &mut v);
    c.alignment.validate("alignment.", &mut v);
    c.planner.validate("planner.", &mut v);

    let o = &c.optics;
    if let Err(e) = o.xy_cavity() {
        v.push(Violation::new("optics", format!("xy cavity: {e}")));
    }
    if let Err(e) = o.z_cavity() {
        v.push(Violation::new("optics", format!("z cavity: {e}")));
    }
    if let Err(e) = o.tweezers().validate() {
        v.push(Violation::new("optics", e.to_string()));
    }
    if let Err(e) = o.lattice.validate() {
        v.push(Violation::new("optics.lattice", e.to_string()));
    }
    ValidationReport { violations: v }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(ValidationReport),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
}

/// Parses a JSON scenario, fills omitted keys from the defaults and validates.
pub fn load_config(text: &str) -> Result<SimConfig, ConfigError> {
    let config: SimConfig =
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let report = validate(&config);
    if report.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError::Invalid(report))
    }
}

/// Returns a copy of `config` with the dotted key path set to `value`
/// (e.g. `losses.rearr_depth_fraction`), validated.
pub fn with_override(config: &SimConfig, key: &str, value: f64) -> Result<SimConfig, ConfigError> {
    let mut doc = serde_json::to_value(config).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let mut slot = &mut doc;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
    }
    *slot = match slot {
        Value::Number(n) if (n.is_u64() || n.is_i64()) && value.fract() == 0.0 && value >= 0.0 => {
            Value::from(value as u64)
        }
        Value::Number(_) | Value::Null => serde_json::Number::from_f64(value)
            .map(Value::Number)
            .ok_or_else(|| ConfigError::Parse(format!("{key}: non-finite value {value}")))?,
        _ => return Err(ConfigError::UnknownKey(key.to_string())),
    };
    let updated: SimConfig =
        serde_json::from_value(doc).map_err(|e| ConfigError::Parse(format!("{key}: {e}")))?;
    let report = validate(&updated);
    if report.is_empty() {
        Ok(updated)
    } else {
        Err(ConfigError::Invalid(report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn paper_defaults() {
        let c = default_paper_config();
        assert_eq!(c.reservoir_sites, 105);
        assert_eq!(c.mot_load_rate_per_s, 1.5e6);
        assert_eq!(c.mot_saturation_time_ms, 80.0);
        assert_eq!(c.vacuum_lifetime_s, 30.0);
        assert_eq!(c.target_sites(), 1225);
        assert!(validate(&c).is_empty(), "{}", validate(&c));
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(load_config("{}").unwrap(), default_paper_config());
    }

    #[test]
    fn single_override() {
        let c = load_config(r#"{"reservoir_sites": 50}"#).unwrap();
        assert_eq!(
            c,
            SimConfig {
                reservoir_sites: 50,
                ..default_paper_config()
            }
        );
        let c = load_config(r#"{"losses": {"proximity_distance_um": 2.0}}"#).unwrap();
        assert_eq!(c.losses.proximity_distance_um, 2.0);
        assert_eq!(
            c.losses.handoff_loss_459,
            LossParams::default().handoff_loss_459
        );
    }

    #[test]
    fn negative_lifetime_names_key() {
        match load_config(r#"{"vacuum_lifetime_s": -1}"#) {
            Err(ConfigError::Invalid(r)) => {
                assert_eq!(r.violations.len(), 1);
                assert_eq!(r.violations[0].path, "vacuum_lifetime_s");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn null_lifetime_is_infinite() {
        let c = load_config(r#"{"vacuum_lifetime_s": null}"#).unwrap();
        assert!(c.vacuum_lifetime_s.is_infinite());
        assert_eq!(load_config(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        assert!(matches!(
            load_config(r#"{"reservoir_size": 3}"#),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            load_config(r#"{"imaging": {"gain": 3}}"#),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(load_config("{"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn single_violations() {
        let c = SimConfig {
            lac_fill_probability: 1.5,
            ..default_paper_config()
        };
        assert_eq!(validate(&c).violations.len(), 1);
        let c = SimConfig {
            target_spacing_um: 0.0,
            ..default_paper_config()
        };
        let r = validate(&c);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].path, "target_spacing_um");
    }

    #[test]
    fn overrides_by_path() {
        let base = default_paper_config();
        let c = with_override(&base, "losses.rearr_depth_fraction", 1.3).unwrap();
        assert_eq!(c.losses.rearr_depth_fraction, 1.3);
        let c = with_override(&base, "reservoir_sites", 40.0).unwrap();
        assert_eq!(c.reservoir_sites, 40);
        assert!(matches!(
            with_override(&base, "losses.nope", 1.0),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            with_override(&base, "lac_fill_probability", 2.0),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn reservoir_supply_scaling() {
        let c = default_paper_config();
        assert!((c.reservoir_fill_probability(80.0) - 0.5).abs() < 1e-12);
        assert_eq!(c.reservoir_fill_probability(0.0), 0.0);
        assert!((c.reservoir_fill_probability(40.0) - 0.25).abs() < 1e-12);
        assert_eq!(c.reservoir_fill_probability(500.0), 0.5);
    }

    proptest! {
        #[test]
        fn json_round_trip(
            sites in 0u32..400,
            rows in 1u32..60,
            spacing in 0.1f64..20.0,
            p in 0.0f64..=1.0,
            lifetime in prop_oneof![Just(f64::INFINITY), 0.1f64..1e4],
            seed in any::<u64>(),
            speed in 1.0f64..500.0,
        ) {
            let mut c = default_paper_config();
            c.reservoir_sites = sites;
            c.target_rows = rows;
            c.target_spacing_um = spacing;
            c.lac_fill_probability = p;
            c.vacuum_lifetime_s = lifetime;
            c.rng_seed = seed;
            c.planner.speed_um_per_ms = speed;
            let back = load_config(&c.to_json()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
