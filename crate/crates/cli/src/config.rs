//! Run documents read by the subcommands.

use std::path::Path;

use cpsc_core::corrector::{ScheduleOptions, SolverConfig};
use cpsc_core::gluing::GluingConfig;
use cpsc_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Parameters of the single-orbit commands. Command-line flags override
/// the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitRequest {
    pub n: Option<usize>,
    pub eps: Option<f64>,
    /// Highest mode of the `modes` table.
    pub jmax: Option<usize>,
    /// Mode of the `floquet` command.
    pub j: Option<usize>,
    /// Periods covered by the Jacobi field samples.
    pub periods: Option<usize>,
}

/// Neck parameters scanned by `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(rename = "T")]
    pub t_values: Vec<f64>,
}

/// Document for `glue`, `solve`, `verify`, `sweep` and `check`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub gluing: GluingConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    /// For chains: choose the neck parameters by the schedule search
    /// before solving. The `T` values of `gluing` are then ignored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleOptions>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.gluing.validate()?;
        self.solver.validate()?;
        self.solver.apply(&self.gluing).validate()?;
        if let Some(s) = &self.sweep {
            if s.t_values.len() < 4 {
                return Err(Error::Config("sweep.T needs at least four values".into()));
            }
            if s.t_values.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config("sweep.T must be increasing".into()));
            }
            let w = self.gluing.cutoff_width;
            if s.t_values[0] <= 2.0 * (w + 1.0) {
                return Err(Error::Config(format!("sweep.T values must exceed 2·(cutoff_width + 1) = {}", 2.0 * (w + 1.0))));
            }
        }
        Ok(())
    }
}

pub fn parse<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("{what}: schema error: {e}")))
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse(&text, &path.display().to_string())
}

pub fn read_run(path: &Path) -> Result<RunConfig> {
    let run: RunConfig = read(path)?;
    run.validate()?;
    Ok(run)
}
