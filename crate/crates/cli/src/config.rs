//! The experiment configuration document and everything derived from it.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use assim_core::cost::{
    build_minimum_energy, build_onsager_machlup, CoordinateProjection, MatrixFn, OnsagerMachlupCost,
    OnsagerMachlupSpec, QuadraticCost, QuadraticCostSpec,
};
use assim_core::dynamics::{integrate_state, ControlPath, LinearModel, Lorenz63, Lorenz63Params, Lorenz96};
use assim_core::hamiltonian_bvp::ShootingConfig;
use assim_core::{ControlSet, Cost, Model, OptimizerConfig, TimeGrid};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub truth: TruthConfig,
    #[serde(default)]
    pub observation: ObservationConfig,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub control_set: ControlSet,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Run single shooting after the gradient solve when present.
    #[serde(default)]
    pub shooting: Option<ShootingConfig>,
    #[serde(default)]
    pub assimilation: AssimilationConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Lorenz63 {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_r")]
        r: f64,
        #[serde(default = "default_b")]
        b: f64,
    },
    Lorenz96 {
        dim: usize,
        #[serde(default = "default_forcing")]
        forcing: f64,
    },
    /// `x' = A x + c + B u`.
    Linear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        #[serde(default)]
        c: Option<Vec<f64>>,
    },
}

fn default_sigma() -> f64 {
    10.0
}
fn default_r() -> f64 {
    28.0
}
fn default_b() -> f64 {
    8.0 / 3.0
}
fn default_forcing() -> f64 {
    8.0
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub xi: Vec<f64>,
    /// Uncontrolled integration time applied to `xi` before `t = 0`, at the
    /// grid step size.
    #[serde(default)]
    pub spinup: f64,
    /// Constant control driving the truth; zero when absent.
    #[serde(default)]
    pub control: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Observed {
    Keyword(ObservedKeyword),
    Indices(Vec<usize>),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ObservedKeyword {
    Full,
}

/// A scalar (times the identity), a diagonal, or a full row-major matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix(&self, dim: usize, what: &str) -> Result<DMatrix<f64>, CliError> {
        let m = match self {
            MatrixSpec::Scalar(s) => DMatrix::identity(dim, dim) * *s,
            MatrixSpec::Diagonal(d) => {
                if d.len() != dim {
                    return Err(CliError::config(format!("{what}: diagonal needs {dim} entries, got {}", d.len())));
                }
                DMatrix::from_diagonal(&DVector::from_column_slice(d))
            }
            MatrixSpec::Full(rows) => nested(rows, dim, dim, what)?,
        };
        if m.iter().any(|v| !v.is_finite()) {
            return Err(CliError::config(format!("{what}: entries must be finite")));
        }
        Ok(m)
    }
}

fn nested(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::config(format!("{what}: expected a {nrows}x{ncols} matrix")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    #[serde(default = "default_observed")]
    pub h: Observed,
    #[serde(default = "unit_matrix")]
    pub r: MatrixSpec,
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_observed() -> Observed {
    Observed::Keyword(ObservedKeyword::Full)
}
fn unit_matrix() -> MatrixSpec {
    MatrixSpec::Scalar(1.0)
}
fn default_noise() -> f64 {
    0.1
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            h: default_observed(),
            r: unit_matrix(),
            noise_scale: default_noise(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    #[default]
    MinimumEnergy,
    OnsagerMachlup,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    #[serde(default)]
    pub kind: CostKind,
    /// Control weight of the minimum-energy cost. Onsager–Machlup uses
    /// `(g g^T)^{-1}` instead.
    #[serde(default = "unit_matrix")]
    pub s: MatrixSpec,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            kind: CostKind::default(),
            s: unit_matrix(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssimilationConfig {
    /// Initial state for the estimate; defaults to the truth's.
    #[serde(default)]
    pub xi: Option<Vec<f64>>,
    /// Added to the initial state (after `xi` or the truth's).
    #[serde(default)]
    pub xi_offset: Option<Vec<f64>>,
}

/// A validated configuration with its model and costs built.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
    pub grid: TimeGrid,
    pub model: Arc<dyn Model>,
    pub observed: Vec<usize>,
    pub minimum_energy: QuadraticCost,
    /// `None` when the model has a non-square or state-dependent `g`.
    pub onsager_machlup: Option<OnsagerMachlupCost>,
    /// Initial state of the truth at `t = 0`, after spin-up.
    pub xi_truth: DVector<f64>,
    pub truth_control: ControlPath,
    pub xi_assim: DVector<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes).map_err(|_| CliError::config("config is not UTF-8"))?;
        Ok((Self::from_json(text)?, bytes))
    }

    /// SHA-256 of the parsed configuration re-serialised with sorted keys,
    /// so formatting and key order do not change it.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        let canonical = serde_json::to_vec(&value).expect("value serialises");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn build(self) -> Result<Experiment, CliError> {
        let hash = self.hash();
        let grid = TimeGrid::new(self.grid.horizon, self.grid.n_steps).map_err(CliError::from_spec)?;
        let model = self.build_model()?;
        let n = model.state_dim();
        let m = model.control_dim();

        let observed: Vec<usize> = match &self.observation.h {
            Observed::Keyword(ObservedKeyword::Full) => (0..n).collect(),
            Observed::Indices(ix) => ix.clone(),
        };
        let projection = CoordinateProjection::new(observed.clone(), n).map_err(CliError::from_spec)?;
        let d = observed.len();
        let r = self.observation.r.to_matrix(d, "observation.r")?;
        if !(self.observation.noise_scale >= 0.0) || !self.observation.noise_scale.is_finite() {
            return Err(CliError::config("observation.noise_scale must be finite and nonnegative"));
        }
        let s = self.cost.s.to_matrix(m, "cost.s")?;
        let spec = QuadraticCostSpec {
            h: Arc::new(projection),
            r: MatrixFn::Constant(r),
            s: MatrixFn::Constant(s),
            control_dim: m,
        };
        let minimum_energy = build_minimum_energy(spec.clone(), &grid).map_err(CliError::from_spec)?;
        let onsager_machlup = build_onsager_machlup(
            OnsagerMachlupSpec {
                base: spec,
                model: model.clone(),
                div_f: None,
            },
            &grid,
        );
        let onsager_machlup = match (self.cost.kind, onsager_machlup) {
            (_, Ok(c)) => Some(c),
            (CostKind::OnsagerMachlup, Err(e)) => return Err(CliError::from_spec(e)),
            (CostKind::MinimumEnergy, Err(_)) => None,
        };

        self.control_set.validate(m).map_err(CliError::from_spec)?;
        self.optimizer.validate().map_err(CliError::from_spec)?;
        if let Some(sh) = &self.shooting {
            sh.validate().map_err(CliError::from_spec)?;
        }

        let xi = vector(&self.truth.xi, n, "truth.xi")?;
        if !(self.truth.spinup >= 0.0) || !self.truth.spinup.is_finite() {
            return Err(CliError::config("truth.spinup must be finite and nonnegative"));
        }
        let xi_truth = if self.truth.spinup > 0.0 {
            let steps = ((self.truth.spinup / grid.dt()).round() as usize).max(1);
            let spin = TimeGrid::new(self.truth.spinup, steps).map_err(CliError::from_spec)?;
            integrate_state(model.as_ref(), &ControlPath::zeros(spin, m), &xi)
                .map_err(CliError::Runtime)?
                .last()
                .clone()
        } else {
            xi
        };
        let truth_control = match &self.truth.control {
            None => ControlPath::zeros(grid, m),
            Some(c) => ControlPath::constant(grid, vector(c, m, "truth.control")?).map_err(CliError::from_spec)?,
        };
        let mut xi_assim = match &self.assimilation.xi {
            Some(x) => vector(x, n, "assimilation.xi")?,
            None => xi_truth.clone(),
        };
        if let Some(off) = &self.assimilation.xi_offset {
            xi_assim += vector(off, n, "assimilation.xi_offset")?;
        }

        Ok(Experiment {
            config: self,
            hash,
            grid,
            model,
            observed,
            minimum_energy,
            onsager_machlup,
            xi_truth,
            truth_control,
            xi_assim,
        })
    }

    fn build_model(&self) -> Result<Arc<dyn Model>, CliError> {
        Ok(match &self.model {
            ModelConfig::Lorenz63 { sigma, r, b } => Arc::new(
                Lorenz63::new(Lorenz63Params {
                    sigma: *sigma,
                    r: *r,
                    b: *b,
                })
                .map_err(CliError::from_spec)?,
            ),
            ModelConfig::Lorenz96 { dim, forcing } => {
                Arc::new(Lorenz96::new(*dim, *forcing).map_err(CliError::from_spec)?)
            }
            ModelConfig::Linear { a, b, c } => {
                let n = a.len();
                if n == 0 {
                    return Err(CliError::config("model.a must be non-empty"));
                }
                let m = b.first().map_or(0, |r| r.len());
                let a = nested(a, n, n, "model.a")?;
                let b = nested(b, n, m, "model.b")?;
                let c = match c {
                    Some(c) => vector(c, n, "model.c")?,
                    None => DVector::zeros(n),
                };
                Arc::new(LinearModel::affine(a, b, c).map_err(CliError::from_spec)?)
            }
        })
    }
}

impl Experiment {
    /// The cost selected by `cost.kind`.
    pub fn cost(&self) -> &dyn Cost {
        match self.config.cost.kind {
            CostKind::MinimumEnergy => &self.minimum_energy,
            CostKind::OnsagerMachlup => self.onsager_machlup.as_ref().expect("checked in build"),
        }
    }

    /// Seeds that determine every random draw of a run.
    pub fn seeds(&self) -> serde_json::Value {
        serde_json::json!({
            "observation": self.config.observation.seed,
            "optimizer": self.config.optimizer.seed,
        })
    }
}

fn vector(values: &[f64], dim: usize, what: &str) -> Result<DVector<f64>, CliError> {
    if values.len() != dim {
        return Err(CliError::config(format!("{what}: expected {dim} entries, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::config(format!("{what}: entries must be finite")));
    }
    Ok(DVector::from_column_slice(values))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"name": "lorenz63"},
        "grid": {"horizon": 1.0, "n_steps": 64},
        "truth": {"xi": [1.0, 1.0, 1.0]}
    }"#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.observation.noise_scale, 0.1);
        assert_eq!(c.cost.kind, CostKind::MinimumEnergy);
        assert_eq!(c.optimizer.max_iters, 500);
        let e = c.build().unwrap();
        assert_eq!(e.observed, vec![0, 1, 2]);
        assert!(e.onsager_machlup.is_some());
        assert_eq!(e.xi_assim, e.xi_truth);
    }

    #[test]
    fn hash_ignores_formatting_and_key_order() {
        let a = ExperimentConfig::from_json(MINIMAL).unwrap();
        let b = ExperimentConfig::from_json(
            r#"{"truth":{"xi":[1,1,1]},"grid":{"n_steps":64,"horizon":1},"model":{"name":"lorenz63"}}"#,
        )
        .unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.observation.seed = 1;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn matrices_accept_three_shapes() {
        let d = MatrixSpec::Diagonal(vec![1.0, 2.0]).to_matrix(2, "r").unwrap();
        assert_eq!(d[(1, 1)], 2.0);
        let f = MatrixSpec::Full(vec![vec![1.0, 0.5], vec![0.5, 1.0]]).to_matrix(2, "r").unwrap();
        assert_eq!(f[(0, 1)], 0.5);
        assert!(MatrixSpec::Diagonal(vec![1.0]).to_matrix(2, "r").is_err());
    }

    #[test]
    fn invalid_documents_are_config_errors() {
        for text in [
            r#"{"model": {"name": "nope"}, "grid": {"horizon": 1, "n_steps": 4}, "truth": {"xi": [0]}}"#,
            r#"{"model": {"name": "lorenz63"}, "grid": {"horizon": 1, "n_steps": 4}, "truth": {"xi": [0]}}"#,
            r#"{"model": {"name": "lorenz63"}, "grid": {"horizon": -1, "n_steps": 4}, "truth": {"xi": [0,0,0]}}"#,
            r#"{"model": {"name": "lorenz63"}, "grid": {"horizon": 1, "n_steps": 4}, "truth": {"xi": [0,0,0]}, "extra": 1}"#,
            r#"{"model": {"name": "lorenz63"}, "grid": {"horizon": 1, "n_steps": 4}, "truth": {"xi": [0,0,0]},
                "cost": {"s": 0.0}}"#,
        ] {
            let err = ExperimentConfig::from_json(text).and_then(|c| c.build().map(|_| ()));
            assert!(matches!(err, Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn onsager_machlup_needs_square_g() {
        let text = r#"{
            "model": {"name": "linear", "a": [[0, 1], [0, 0]], "b": [[0], [1]]},
            "grid": {"horizon": 1.0, "n_steps": 8},
            "truth": {"xi": [1, 0]},
            "cost": {"kind": "onsager_machlup"}
        }"#;
        let err = ExperimentConfig::from_json(text).unwrap().build();
        assert!(matches!(err, Err(CliError::Config(_))));
    }
}
