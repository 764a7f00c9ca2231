//! Run configuration, read from TOML with one table per command.

use std::fs;
use std::path::Path;

use lfhj::analysis::{InitialProfile, Quantity, ReferencePolicy};
use lfhj::flux::{FluxModel, ModelId};
use lfhj::grid::StaggeredGrid;
use lfhj::scheme::{CflPolicy, SchemeConfig};
use lfhj::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub id: ModelId,
    pub amplitude: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { id: ModelId::Quadratic, amplitude: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub n: usize,
    pub k: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { n: 32, k: 32 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    #[default]
    U,
    V,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSection {
    pub c: f64,
    pub h: f64,
    pub cfl: CflPolicy,
    pub field: FieldKind,
    pub steps: usize,
    /// Snapshot stride; 0 keeps only the final level.
    pub record_every: usize,
}

impl Default for SolveSection {
    fn default() -> Self {
        SolveSection { c: 0.0, h: 0.0, cfl: CflPolicy::Abort, field: FieldKind::U, steps: 16, record_every: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeriodicSection {
    pub c: f64,
    pub tol: f64,
    pub max_periods: usize,
    pub drift_periods: usize,
}

impl Default for PeriodicSection {
    fn default() -> Self {
        PeriodicSection { c: 0.0, tol: 1e-10, max_periods: 5000, drift_periods: lfhj::periodic::DEFAULT_DRIFT_PERIODS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub c_min: f64,
    pub c_max: f64,
    pub points: usize,
    pub tol: f64,
    pub max_periods: usize,
    /// Smallest accepted second difference.
    pub convexity_floor: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { c_min: -1.0, c_max: 1.0, points: 21, tol: 1e-10, max_periods: 5000, convexity_floor: -1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeSection {
    pub c: f64,
    pub h: f64,
    pub t: f64,
    pub meshes: Vec<usize>,
    pub k_factor: usize,
    pub quantity: Quantity,
    pub reference: ReferencePolicy,
    pub fine_factor: usize,
    pub y_resolution: usize,
    pub min_order: f64,
}

impl Default for ConvergeSection {
    fn default() -> Self {
        ConvergeSection {
            c: 0.0,
            h: 0.0,
            t: 0.5,
            meshes: vec![16, 32, 64],
            k_factor: 1,
            quantity: Quantity::VSup,
            reference: ReferencePolicy::Auto,
            fine_factor: 4,
            y_resolution: 2001,
            min_order: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkSection {
    pub c: f64,
    /// Apex column; `apex + depth` must be odd.
    pub apex: i64,
    /// Apex level `l + 1`.
    pub depth: usize,
    pub n_samples: usize,
    pub state_budget: usize,
    pub mc_samples: usize,
}

impl Default for WalkSection {
    fn default() -> Self {
        WalkSection { c: 0.0, apex: 1, depth: 16, n_samples: 1000, state_budget: lfhj::stochastic::DEFAULT_STATE_BUDGET, mc_samples: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilitySection {
    pub c: f64,
    pub periods: usize,
    pub margin_fraction: f64,
    pub lambda1: f64,
    /// Time horizon of the tabulated constants.
    pub t_max: f64,
}

impl Default for StabilitySection {
    fn default() -> Self {
        StabilitySection { c: 0.0, periods: 100, margin_fraction: 0.5, lambda1: 1.25, t_max: 1.0 }
    }
}

/// Everything a command needs; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub grid: GridSection,
    pub initial: InitialProfile,
    pub solve: SolveSection,
    pub periodic: PeriodicSection,
    pub sweep: SweepSection,
    pub converge: ConvergeSection,
    pub walk: WalkSection,
    pub stability: StabilitySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelSection::default(),
            grid: GridSection::default(),
            initial: InitialProfile::Zero,
            solve: SolveSection::default(),
            periodic: PeriodicSection::default(),
            sweep: SweepSection::default(),
            converge: ConvergeSection::default(),
            walk: WalkSection::default(),
            stability: StabilitySection::default(),
        }
    }
}

impl RunConfig {
    /// Parse errors carry the offending line and key.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn flux(&self) -> FluxModel {
        FluxModel::from_id(&self.model.id, self.model.amplitude)
    }

    pub fn grid(&self) -> Result<StaggeredGrid> {
        StaggeredGrid::new(self.grid.n, self.grid.k)
    }

    pub fn scheme(&self, c: f64) -> Result<SchemeConfig> {
        Ok(SchemeConfig::new(self.flux(), self.grid()?, c))
    }
}
