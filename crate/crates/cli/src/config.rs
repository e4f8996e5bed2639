use std::collections::BTreeMap;
use std::path::PathBuf;

use sof_core::optimize::{Method, StepSize};
use sof_core::systems;
use sof_core::{Gain, LtiSystem, SofError};

use crate::args::{Cli, Command, Example};

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;
pub const EXIT_BAD_ARGS: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn bad_args(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_BAD_ARGS,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl From<SofError> for CliError {
    fn from(e: SofError) -> Self {
        match e {
            SofError::Dimension { .. } | SofError::Malformed { .. } => Self::validation(e.to_string()),
            SofError::InvalidArgument(_) => Self::bad_args(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(format!("i/o: {e}"))
    }
}

/// Options each command accepts, by flag name.
fn accepted(command: Command) -> &'static [&'static str] {
    const SYS: [&str; 2] = ["system", "example"];
    match command {
        Command::Validate => &SYS,
        Command::Eval | Command::GradCheck => &["system", "example", "gain"],
        Command::Optimize => &[
            "system", "example", "gain", "method", "eta", "epsilon", "max-iters", "out",
        ],
        Command::Modelfree => &[
            "system", "example", "gain", "method", "eta", "epsilon", "max-iters", "seed-list",
            "out", "z", "l", "r",
        ],
        Command::Landscape => &["system", "example", "gain", "alpha", "samples", "seed-list", "out"],
        Command::Sweep => &["system", "example", "grid", "out"],
        Command::Reproduce => &["example", "seed-list", "out", "z", "l", "r"],
    }
}

/// Where the plant came from.
#[derive(Debug, Clone)]
pub enum SystemSource {
    Path(PathBuf),
    Bundled(Example),
}

/// Parsed and validated invocation.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub command: Command,
    pub source: Option<SystemSource>,
    pub method: Option<Method>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    cli: Cli,
}

pub const DEFAULT_SEEDS: std::ops::Range<u64> = 0..10;

impl ExperimentConfig {
    pub fn from_cli(cli: Cli) -> Result<Self, CliError> {
        let mut overrides = BTreeMap::new();
        let mut put = |key: &'static str, v: Option<String>| {
            if let Some(v) = v {
                overrides.insert(key, v);
            }
        };
        put("system", cli.system.as_ref().map(|p| p.display().to_string()));
        put("example", cli.example.map(|e| format!("{e:?}").to_lowercase()));
        put("method", cli.method.clone());
        put("eta", cli.eta.clone());
        put("epsilon", cli.epsilon.map(|v| v.to_string()));
        put("max-iters", cli.max_iters.map(|v| v.to_string()));
        put("seed-list", cli.seed_list.clone());
        put("out", cli.out.as_ref().map(|p| p.display().to_string()));
        put("gain", cli.gain.clone());
        put("z", cli.z.map(|v| v.to_string()));
        put("l", cli.l.map(|v| v.to_string()));
        put("r", cli.r.map(|v| v.to_string()));
        put("alpha", cli.alpha.map(|v| v.to_string()));
        put("grid", cli.grid.clone());
        put("samples", cli.samples.map(|v| v.to_string()));

        let allowed = accepted(cli.command);
        let rejected: Vec<String> = overrides
            .keys()
            .filter(|k| !allowed.contains(k))
            .map(|k| format!("--{k}"))
            .collect();
        if !rejected.is_empty() {
            return Err(CliError::bad_args(format!(
                "`{}` does not accept {}",
                cli.command.name(),
                rejected.join(", ")
            )));
        }

        let source = match (&cli.system, cli.example) {
            (Some(_), Some(_)) => {
                return Err(CliError::bad_args("give either --system or --example, not both"))
            }
            (Some(p), None) => Some(SystemSource::Path(p.clone())),
            (None, Some(e)) => Some(SystemSource::Bundled(e)),
            (None, None) => None,
        };
        let method = cli
            .method
            .as_deref()
            .map(|m| Method::parse(m).ok_or_else(|| CliError::bad_args(format!("unknown method {m:?}"))))
            .transpose()?;
        let seeds = match &cli.seed_list {
            Some(s) => parse_list::<u64>(s, "seed-list")?,
            None => DEFAULT_SEEDS.collect(),
        };
        if seeds.is_empty() {
            return Err(CliError::bad_args("--seed-list is empty"));
        }
        for (name, v) in [("epsilon", cli.epsilon), ("r", cli.r), ("alpha", cli.alpha)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(CliError::bad_args(format!("--{name} must be positive, got {v}")));
                }
            }
        }
        for (name, v) in [("max-iters", cli.max_iters), ("z", cli.z), ("l", cli.l), ("samples", cli.samples)] {
            if v == Some(0) {
                return Err(CliError::bad_args(format!("--{name} must be positive")));
            }
        }
        Ok(Self {
            command: cli.command,
            source,
            method,
            seeds,
            output_dir: cli.out.clone(),
            cli,
        })
    }

    pub fn cli(&self) -> &Cli {
        &self.cli
    }

    /// Loads the plant. Unreadable files are argument errors; malformed
    /// contents are validation failures.
    pub fn system(&self) -> Result<LtiSystem, CliError> {
        match &self.source {
            Some(SystemSource::Path(p)) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::bad_args(format!("cannot read {}: {e}", p.display())))?;
                LtiSystem::from_json_str(&text).map_err(CliError::from)
            }
            Some(SystemSource::Bundled(Example::One)) => Ok(systems::example_one()),
            Some(SystemSource::Bundled(Example::Two)) => Ok(systems::example_two()),
            None => Err(CliError::bad_args("--system PATH or --example is required")),
        }
    }

    /// `--gain`, or the reference initial gain when the plant is one of the
    /// bundled examples.
    pub fn gain(&self, sys: &LtiSystem) -> Result<Gain, CliError> {
        if let Some(raw) = &self.cli.gain {
            let values = parse_list::<f64>(raw, "gain")?;
            if values.len() != sys.m() * sys.d() {
                return Err(CliError::bad_args(format!(
                    "--gain needs {} entries (m x d = {} x {}), got {}",
                    sys.m() * sys.d(),
                    sys.m(),
                    sys.d(),
                    values.len()
                )));
            }
            return Gain::from_row_slice(sys.m(), sys.d(), &values).map_err(CliError::from);
        }
        if *sys == systems::example_one() {
            Ok(systems::example_one_k0())
        } else if *sys == systems::example_two() {
            Ok(systems::example_two_k0())
        } else {
            Err(CliError::bad_args("--gain is required for this system"))
        }
    }

    pub fn step_size(&self, default: StepSize) -> Result<StepSize, CliError> {
        match self.cli.eta.as_deref() {
            None => Ok(default),
            Some("auto") => Ok(StepSize::Auto),
            Some(s) => {
                let v: f64 = s
                    .parse()
                    .map_err(|_| CliError::bad_args(format!("--eta must be a number or `auto`, got {s:?}")))?;
                if v > 0.0 && v.is_finite() {
                    Ok(StepSize::Fixed(v))
                } else {
                    Err(CliError::bad_args(format!("--eta must be positive, got {v}")))
                }
            }
        }
    }
}

pub fn parse_list<T: std::str::FromStr>(raw: &str, name: &str) -> Result<Vec<T>, CliError> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| CliError::bad_args(format!("--{name}: cannot parse {s:?}")))
        })
        .collect()
}

/// `lo:hi:count`, inclusive of both ends.
pub fn parse_grid(raw: &str) -> Result<(f64, f64, usize), CliError> {
    let parts: Vec<&str> = raw.split(':').collect();
    let bad = || CliError::bad_args(format!("--grid must be LO:HI:N, got {raw:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if !(lo < hi) || n < 2 {
        return Err(bad());
    }
    Ok((lo, hi, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    fn cfg(args: &[&str]) -> Result<ExperimentConfig, CliError> {
        let mut full = vec!["sof"];
        full.extend_from_slice(args);
        ExperimentConfig::from_cli(Cli::try_parse_from(full).unwrap())
    }

    #[test]
    fn rejects_options_the_command_does_not_take() {
        let err = cfg(&["validate", "--example", "one", "--eta", "0.2"]).unwrap_err();
        assert_eq!(err.code, EXIT_BAD_ARGS);
        assert!(err.message.contains("--eta"));
        assert!(cfg(&["optimize", "--example", "one", "--eta", "0.2"]).is_ok());
    }

    #[test]
    fn seeds_default_to_ten() {
        let c = cfg(&["reproduce", "--example", "one"]).unwrap();
        assert_eq!(c.seeds, (0..10).collect::<Vec<_>>());
        let c = cfg(&["reproduce", "--example", "one", "--seed-list", "3, 5"]).unwrap();
        assert_eq!(c.seeds, vec![3, 5]);
    }

    #[test]
    fn gain_defaults_and_shape_checks() {
        let c = cfg(&["eval", "--example", "two"]).unwrap();
        let sys = c.system().unwrap();
        assert_eq!(c.gain(&sys).unwrap(), systems::example_two_k0());
        let c = cfg(&["eval", "--example", "two", "--gain", "1,2,3"]).unwrap();
        assert_eq!(c.gain(&sys).unwrap_err().code, EXIT_BAD_ARGS);
    }

    #[test]
    fn eta_accepts_auto() {
        let c = cfg(&["optimize", "--example", "one", "--eta", "auto"]).unwrap();
        assert_eq!(c.step_size(StepSize::Fixed(0.2)).unwrap(), StepSize::Auto);
        let c = cfg(&["optimize", "--example", "one", "--eta", "-1"]).unwrap();
        assert!(c.step_size(StepSize::Fixed(0.2)).is_err());
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("2.1:22.05:1000").unwrap(), (2.1, 22.05, 1000));
        assert!(parse_grid("3:2:10").is_err());
        assert!(parse_grid("1:2").is_err());
    }
}
