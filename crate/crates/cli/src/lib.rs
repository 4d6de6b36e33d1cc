//! Command-line front end: `run`, `sweep`, `budget`, `optics` and `align`.
//! Every output file starts with a header naming the config hash and seed.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use loadsim::cavity::{homogeneity_map, square_grid, LatticeCavity, OpticsReport};
use loadsim::losses::{alignment_scan, budget_report, Wavelength};
use loadsim::params::{load_config, with_override, ConfigError, SimConfig};
use loadsim::protocol::{run_simulation, steady_state_analytic, RunMode, RunRecord};

mod report;
pub use report::render_summary;

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "LOADSIM_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "loadsim-out";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "loadsim",
    version,
    about = "Repeated-loading atom array simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON scenario file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $LOADSIM_OUT_DIR or ./loadsim-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's rng_seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Loading,
    Maintenance,
}

impl From<ModeArg> for RunMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Loading => RunMode::Loading,
            ModeArg::Maintenance => RunMode::Maintenance,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WavelengthArg {
    #[value(name = "459")]
    Nm459,
    #[value(name = "423")]
    Nm423,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate loading cycles and write the per-cycle record.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        cycles: u32,
        #[arg(long, value_enum, default_value_t = ModeArg::Loading)]
        mode: ModeArg,
        /// Diagnostic post-rearrangement image every N cycles (0 = off).
        #[arg(long)]
        diagnostic_interval: Option<u32>,
    },
    /// Repeat `run` over values of one config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted config key, e.g. losses.rearr_depth_fraction.
        #[arg(long)]
        key: String,
        /// `start:stop:count` or a comma-separated list.
        #[arg(long)]
        values: String,
        #[arg(long, default_value_t = 100)]
        cycles: u32,
        #[arg(long, value_enum, default_value_t = ModeArg::Maintenance)]
        mode: ModeArg,
    },
    /// Per-cycle loss budget.
    Budget {
        #[command(flatten)]
        common: Common,
    },
    /// Cavity and tweezer depth-per-power comparison and lattice homogeneity maps.
    Optics {
        #[command(flatten)]
        common: Common,
    },
    /// Simulated tweezer/lattice alignment scan.
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = WavelengthArg::Nm459)]
        wavelength: WavelengthArg,
        /// Handoff pairs simulated per offset.
        #[arg(long, default_value_t = 20_000)]
        handoffs: u64,
        /// Number of offsets across the scan.
        #[arg(long, default_value_t = 41)]
        points: usize,
        /// Half-width of the scan in lattice periods.
        #[arg(long, default_value_t = 1.0)]
        periods: f64,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::UnknownKey(_) => CliError::Usage(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn dispatch(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("loadsim: {}", e.to_string().replace('\n', " "));
            e.code()
        }
    }
}

struct Context {
    config: SimConfig,
    out: PathBuf,
    header: Header,
}

#[derive(Clone)]
struct Header {
    config_sha256: String,
    seed: u64,
}

impl Header {
    fn of(config: &SimConfig) -> Self {
        let canonical = serde_json::to_string(config).expect("config serializes");
        Self {
            config_sha256: hex::encode(Sha256::digest(canonical.as_bytes())),
            seed: config.rng_seed,
        }
    }

    fn comment(&self) -> String {
        format!(
            "# config_sha256={} seed={}\n",
            self.config_sha256, self.seed
        )
    }

    fn json(&self) -> String {
        serde_json::json!({ "config_sha256": self.config_sha256, "seed": self.seed }).to_string()
            + "\n"
    }
}

fn context(common: &Common) -> Result<Context, CliError> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Runtime(format!("cannot read config {}: {e}", path.display()))
            })?;
            load_config(&text)?
        }
        None => SimConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.rng_seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let header = Header::of(&config);
    Ok(Context {
        config,
        out,
        header,
    })
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_run(dir: &Path, record: &RunRecord, header: &Header) -> Result<(), CliError> {
    write(dir, "run.jsonl", &(header.json() + &record.to_jsonl()))?;
    write(dir, "run.csv", &(header.comment() + &record.to_csv()))?;
    write(
        dir,
        "summary.txt",
        &(header.comment() + &render_summary(record)),
    )
}

/// `start:stop:count` (inclusive, evenly spaced) or `a,b,c`.
fn parse_values(text: &str) -> Result<Vec<f64>, CliError> {
    let bad = || {
        CliError::Usage(format!(
            "bad --values `{text}`: expected start:stop:count or a comma list"
        ))
    };
    let parts: Vec<&str> = text.split(':').collect();
    let values = if parts.len() == 3 {
        let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let stop: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
        match count {
            0 => return Err(bad()),
            1 => vec![start],
            n => (0..n)
                .map(|i| start + (stop - start) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    } else if parts.len() == 1 {
        text.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    } else {
        return Err(bad());
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad());
    }
    // Trim accumulated float noise so 0.3:2.0:18 prints as 0.4, not 0.39999999999999997.
    Ok(values
        .into_iter()
        .map(|v| (v * 1e12).round() / 1e12)
        .collect())
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run {
            common,
            cycles,
            mode,
            diagnostic_interval,
        } => {
            if cycles == 0 {
                return Err(CliError::Usage("--cycles must be at least 1".into()));
            }
            let mut ctx = context(&common)?;
            if let Some(k) = diagnostic_interval {
                ctx.config.diagnostic_image_interval = k;
                ctx.header = Header::of(&ctx.config);
            }
            let record = run_simulation(&ctx.config, cycles, mode.into());
            write_run(&ctx.out, &record, &ctx.header)?;
            print!("{}", render_summary(&record));
            Ok(())
        }
        Command::Sweep {
            common,
            key,
            values,
            cycles,
            mode,
        } => {
            if cycles == 0 {
                return Err(CliError::Usage("--cycles must be at least 1".into()));
            }
            let ctx = context(&common)?;
            let values = parse_values(&values)?;
            let configs = values
                .iter()
                .map(|&v| with_override(&ctx.config, &key, v))
                .collect::<Result<Vec<_>, _>>()?;
            let records: Vec<RunRecord> = configs
                .par_iter()
                .map(|c| run_simulation(c, cycles, mode.into()))
                .collect();
            let mut summary = ctx.header.comment();
            summary.push_str(&format!(
                "# key={key}\nvalue,mean_pre_fill,mean_post_fill,final_vacancy\n"
            ));
            for (i, (value, record)) in values.iter().zip(&records).enumerate() {
                let header = Header::of(&record.config);
                write_run(&ctx.out.join(format!("value_{i:03}")), record, &header)?;
                let pre = record
                    .summary
                    .steady_pre_fill
                    .as_ref()
                    .map(|m| m.mean)
                    .unwrap_or(f64::NAN);
                let post = record
                    .summary
                    .steady_true_post_fill
                    .as_ref()
                    .map(|m| m.mean)
                    .unwrap_or(f64::NAN);
                summary.push_str(&format!("{value},{pre:.6},{post:.6},{:.6}\n", 1.0 - post));
            }
            write(&ctx.out, "summary.csv", &summary)?;
            print!("{}", summary);
            Ok(())
        }
        Command::Budget { common } => {
            let ctx = context(&common)?;
            let budget = budget_report(&ctx.config);
            let ss = steady_state_analytic(&ctx.config);
            let mut text = budget.to_text();
            text.push_str(&format!(
                "analytic steady state: pre-rearrangement fill {:.4}, post-rearrangement fill {:.4}\n",
                ss.pre_fill, ss.post_fill
            ));
            if let Some(why) = &ss.supply_limited {
                text.push_str(&format!("supply limited: {why}\n"));
            }
            write(
                &ctx.out,
                "budget.csv",
                &(ctx.header.comment() + &budget.to_csv()),
            )?;
            write(&ctx.out, "budget.txt", &(ctx.header.comment() + &text))?;
            print!("{text}");
            Ok(())
        }
        Command::Optics { common } => {
            let ctx = context(&common)?;
            let optics = &ctx.config.optics;
            let report =
                OpticsReport::compute(optics).map_err(|e| CliError::Validation(e.to_string()))?;
            let geom = &optics.lattice;
            let n = (2.0 * geom.array_halfwidth_um / geom.site_spacing_um).round() as usize + 1;
            let map = homogeneity_map(geom, &square_grid(n, geom.site_spacing_um))
                .map_err(|e| CliError::Validation(e.to_string()))?;
            let csv = report.to_csv();
            write(&ctx.out, "optics.csv", &(ctx.header.comment() + &csv))?;
            write(
                &ctx.out,
                "homogeneity_xy.csv",
                &(ctx.header.comment() + &map.to_csv(LatticeCavity::Xy)),
            )?;
            write(
                &ctx.out,
                "homogeneity_z.csv",
                &(ctx.header.comment() + &map.to_csv(LatticeCavity::Z)),
            )?;
            print!("{csv}");
            println!(
                "peak depth deviation over {n}x{n} sites: xy {:.2}%, z {:.2}%",
                100.0 * map.peak_deviation(LatticeCavity::Xy),
                100.0 * map.peak_deviation(LatticeCavity::Z)
            );
            Ok(())
        }
        Command::Align {
            common,
            wavelength,
            handoffs,
            points,
            periods,
        } => {
            if points < 4 || handoffs == 0 || periods.is_nan() || periods <= 0.0 {
                return Err(CliError::Usage(
                    "align needs --points >= 4, --handoffs >= 1, --periods > 0".into(),
                ));
            }
            let ctx = context(&common)?;
            let c = &ctx.config;
            let period = c.alignment.lattice_period_um;
            let half = periods * period;
            let offsets: Vec<f64> = (0..points)
                .map(|i| -half + 2.0 * half * i as f64 / (points - 1) as f64)
                .collect();
            let w = match wavelength {
                WavelengthArg::Nm459 => Wavelength::Nm459,
                WavelengthArg::Nm423 => Wavelength::Nm423,
            };
            let state = c.thermal.rsc_floor_state();
            let mut rng = ChaCha8Rng::seed_from_u64(c.rng_seed);
            let scan = alignment_scan(
                &offsets,
                handoffs,
                w,
                &state,
                &c.alignment,
                &c.losses,
                &mut rng,
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            let text = format!(
                "fitted optimum offset {:+.4} um (period {:.4} um), survival {:.5} +/- {:.5}\n",
                scan.optimum_um, scan.period_um, scan.mean_survival, scan.amplitude
            );
            write(
                &ctx.out,
                "align.csv",
                &(ctx.header.comment() + &scan.to_csv()),
            )?;
            write(&ctx.out, "align.txt", &(ctx.header.comment() + &text))?;
            print!("{text}");
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_specs() {
        assert_eq!(parse_values("0.3:2.0:18").unwrap().len(), 18);
        let v = parse_values("1:2:3").unwrap();
        assert_eq!(v, vec![1.0, 1.5, 2.0]);
        assert_eq!(parse_values("0.5, 1,2").unwrap(), vec![0.5, 1.0, 2.0]);
        assert!(parse_values("1:2").is_err());
        assert!(parse_values("1:2:0").is_err());
        assert!(parse_values("a,b").is_err());
    }

    #[test]
    fn header_depends_on_seed_and_config() {
        let a = SimConfig::default();
        let b = SimConfig {
            rng_seed: 2,
            ..a.clone()
        };
        assert_ne!(Header::of(&a).config_sha256, Header::of(&b).config_sha256);
        assert_eq!(
            Header::of(&a).config_sha256,
            Header::of(&a.clone()).config_sha256
        );
        assert!(Header::of(&a).comment().starts_with("# config_sha256="));
    }
}
