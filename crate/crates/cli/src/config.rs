//! Experiment configuration: JSON file, built-in presets and flag overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use dpca::models::{spiked_gap, CustomEntries, InnovationKind};
use dpca::runtime::TransportKind;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Estimator compared in a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Full-sample PCA on the pooled data.
    Full,
    /// One-shot distributed PCA; each machine sends `K + extra` eigenvectors.
    Distributed { extra: usize },
}

impl Method {
    pub const DP: Method = Method::Distributed { extra: 0 };

    pub fn extra(self) -> usize {
        match self {
            Method::Full => 0,
            Method::Distributed { extra } => extra,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Full => f.write_str("FP"),
            Method::Distributed { extra: 0 } => f.write_str("DP"),
            Method::Distributed { extra } => write!(f, "DP{extra}"),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let t = s.trim().to_ascii_uppercase();
        match t.as_str() {
            "FP" => Ok(Method::Full),
            "DP" => Ok(Method::DP),
            _ => t
                .strip_prefix("DP")
                .and_then(|x| x.parse().ok())
                .map(|extra| Method::Distributed { extra })
                .ok_or_else(|| format!("unknown method {s:?} (expected DP, FP or DP<x>)")),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Data-generating distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// `diag(lambda, lambda/2, lambda/4, 1, ..., 1)` with `K = 3`.
    #[default]
    Spiked,
    /// `diag(lambda, 1, ..., 1)` under the sphere-mixture innovation, `K = 1`.
    Adversarial,
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "spiked" => Ok(ModelKind::Spiked),
            "adversarial" => Ok(ModelKind::Adversarial),
            _ => Err(format!("unknown model {s:?} (expected spiked or adversarial)")),
        }
    }
}

/// Innovation law for the spiked model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Innovation {
    #[default]
    Gaussian,
    Rademacher,
    /// i.i.d. uniform entries on `[-sqrt 3, sqrt 3]`.
    Uniform,
}

impl Innovation {
    pub fn kind(self) -> InnovationKind {
        match self {
            Innovation::Gaussian => InnovationKind::Gaussian,
            Innovation::Rademacher => InnovationKind::Rademacher,
            Innovation::Uniform => InnovationKind::Custom(CustomEntries::uniform()),
        }
    }
}

impl FromStr for Innovation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gaussian" => Ok(Innovation::Gaussian),
            "rademacher" => Ok(Innovation::Rademacher),
            "uniform" => Ok(Innovation::Uniform),
            _ => Err(format!("unknown innovation {s:?}")),
        }
    }
}

/// Cartesian product of covariate values. With `total` set, `n = total / m`
/// for each `m` and the `n` list is ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub d: Vec<usize>,
    pub m: Vec<usize>,
    #[serde(default)]
    pub n: Vec<usize>,
    pub lambda: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total: Option<usize>,
}

/// One experiment cell: every method is run on the same replicate data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub lambda: f64,
}

impl Cell {
    /// Stable identifier used for checkpoints and seeding.
    pub fn key(&self) -> String {
        format!("d={},m={},n={},lambda={}", self.d, self.m, self.n, self.lambda)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub panels: Vec<Panel>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub model: ModelKind,
    #[serde(default)]
    pub innovation: Innovation,
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Run through spawned workers over this transport instead of in-process.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transport: Option<TransportKind>,
    #[serde(default)]
    pub allow_partial: bool,
    #[serde(default)]
    pub eigenvalue_round: bool,
}

fn default_k() -> usize {
    3
}

fn default_methods() -> Vec<Method> {
    vec![Method::DP]
}

/// Built-in experiment designs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Marginal sweeps over `d`, `m`, `n` and `lambda` for the scaling-law fit.
    Scaling,
    /// Fixed total sample size split over a growing number of machines.
    Splitting,
    /// DP vs FP vs DP5.
    Comparison,
    /// Undersampled local PCA under the adversarial distribution.
    Adversarial,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "scaling" => Ok(Preset::Scaling),
            "splitting" => Ok(Preset::Splitting),
            "comparison" => Ok(Preset::Comparison),
            "adversarial" => Ok(Preset::Adversarial),
            _ => Err(format!("unknown preset {s:?}")),
        }
    }
}

fn panel(d: &[usize], m: &[usize], n: &[usize], lambda: &[f64]) -> Panel {
    Panel {
        d: d.to_vec(),
        m: m.to_vec(),
        n: n.to_vec(),
        lambda: lambda.to_vec(),
        total: None,
    }
}

fn divisors_up_to(total: usize, cap: usize) -> Vec<usize> {
    (1..=cap.min(total)).filter(|m| total.is_multiple_of(*m)).collect()
}

impl ExperimentConfig {
    fn base(panels: Vec<Panel>, reps: usize) -> Self {
        ExperimentConfig {
            panels,
            k: 3,
            methods: vec![Method::DP],
            model: ModelKind::Spiked,
            innovation: Innovation::Gaussian,
            reps,
            seed: 20_240_101,
            transport: None,
            allow_partial: false,
            eigenvalue_round: false,
        }
    }

    /// Desk-scale designs run in minutes; `paper_scale` selects the full grids.
    pub fn preset(preset: Preset, paper_scale: bool) -> Self {
        match (preset, paper_scale) {
            // d x m grid (d/n up to 0.8), an n sweep and a lambda sweep through a shared center.
            (Preset::Scaling, false) => Self::base(
                vec![
                    panel(&[100, 200, 400], &[10, 20, 40], &[500], &[50.0]),
                    panel(&[200], &[20], &[250, 500, 1000], &[50.0]),
                    panel(&[200], &[20], &[500], &[50.0, 100.0, 200.0]),
                ],
                50,
            ),
            (Preset::Scaling, true) => Self::base(
                vec![
                    panel(&[200, 400, 800, 1600], &[10, 20, 50, 100], &[2000], &[50.0]),
                    panel(&[200, 400, 800, 1600], &[50], &[500, 1000, 2000, 4000], &[50.0]),
                    panel(&[800], &[10, 20, 50], &[2000], &[30.0, 50.0, 100.0, 200.0]),
                ],
                100,
            ),
            (Preset::Splitting, false) => {
                let mut c = Self::base(
                    vec![Panel {
                        total: Some(3000),
                        ..panel(&[100], &[1, 2, 5, 10, 25, 50], &[], &[50.0])
                    }],
                    100,
                );
                c.methods = vec![Method::DP];
                c
            }
            (Preset::Splitting, true) => Self::base(
                vec![Panel {
                    total: Some(6000),
                    ..panel(&[100, 200, 400, 800], &divisors_up_to(6000, 300), &[], &[50.0])
                }],
                100,
            ),
            (Preset::Comparison, false) => {
                let mut c = Self::base(vec![panel(&[200], &[10], &[500], &[50.0])], 100);
                c.methods = vec![Method::DP, Method::Full, Method::Distributed { extra: 5 }];
                c
            }
            (Preset::Comparison, true) => {
                let mut c = Self::base(
                    vec![
                        panel(&[200, 400, 800, 1600], &[20], &[2000], &[50.0]),
                        panel(&[1600], &[5, 10, 20, 50], &[1000], &[30.0]),
                        panel(&[800], &[5], &[500, 1000, 2000, 4000], &[30.0]),
                        panel(&[1600], &[10], &[500], &[10.0, 30.0, 50.0, 100.0]),
                    ],
                    100,
                );
                c.methods = vec![Method::DP, Method::Full, Method::Distributed { extra: 5 }];
                c
            }
            (Preset::Adversarial, _) => {
                let mut c = Self::base(vec![panel(&[1600], &[20], &[256], &[2.0])], 50);
                c.model = ModelKind::Adversarial;
                c.k = 1;
                c
            }
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Replaces the corresponding list in every panel.
    pub fn apply_overrides(&mut self, o: &Overrides) {
        for p in &mut self.panels {
            if let Some(d) = &o.d {
                p.d = d.clone();
            }
            if let Some(m) = &o.m {
                p.m = m.clone();
            }
            if let Some(n) = &o.n {
                p.n = n.clone();
                p.total = None;
            }
            if let Some(l) = &o.lambda {
                p.lambda = l.clone();
            }
        }
        if let Some(k) = o.k {
            self.k = k;
        }
        if let Some(m) = &o.methods {
            self.methods = m.clone();
        }
        if let Some(r) = o.reps {
            self.reps = r;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.transport {
            self.transport = Some(t);
        }
        if o.allow_partial {
            self.allow_partial = true;
        }
        if let Some(m) = o.model {
            self.model = m;
            if m == ModelKind::Adversarial && o.k.is_none() {
                self.k = 1;
            }
        }
        if let Some(i) = o.innovation {
            self.innovation = i;
        }
    }

    /// All distinct cells, in first-appearance order.
    pub fn cells(&self) -> CliResult<Vec<Cell>> {
        let mut out: Vec<Cell> = Vec::new();
        for p in &self.panels {
            for &d in &p.d {
                for &m in &p.m {
                    let ns = match p.total {
                        Some(total) => {
                            if m == 0 || total % m != 0 {
                                return Err(CliError::Config(format!("m = {m} does not divide N = {total}")));
                            }
                            vec![total / m]
                        }
                        None => p.n.clone(),
                    };
                    for &n in &ns {
                        for &lambda in &p.lambda {
                            let cell = Cell { d, m, n, lambda };
                            if !out.contains(&cell) {
                                out.push(cell);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Eigengap of the cell's population model.
    pub fn delta(&self, cell: &Cell) -> f64 {
        match self.model {
            ModelKind::Spiked => spiked_gap(cell.lambda),
            ModelKind::Adversarial => cell.lambda - 1.0,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.panels.is_empty() {
            return bad("no panels".into());
        }
        for (i, p) in self.panels.iter().enumerate() {
            if p.d.is_empty() || p.m.is_empty() || p.lambda.is_empty() || (p.total.is_none() && p.n.is_empty()) {
                return bad(format!("panel {i} has an empty grid"));
            }
        }
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("no methods".into());
        }
        if self.k == 0 {
            return bad("K must be positive".into());
        }
        match self.model {
            ModelKind::Spiked if self.k != 3 => {
                return bad(format!("the spiked model has K = 3, got K = {}", self.k));
            }
            ModelKind::Adversarial if self.k != 1 => {
                return bad(format!("the adversarial model has K = 1, got K = {}", self.k));
            }
            ModelKind::Adversarial if self.innovation != Innovation::Gaussian => {
                return bad("the adversarial model fixes its own innovation".into());
            }
            _ => {}
        }
        for c in self.cells()? {
            if c.m == 0 || c.n == 0 {
                return bad(format!("{}: m and n must be positive", c.key()));
            }
            let max_extra = self.methods.iter().map(|m| m.extra()).max().unwrap_or(0);
            if self.k + max_extra > c.d {
                return bad(format!("{}: K + x = {} exceeds d", c.key(), self.k + max_extra));
            }
            match self.model {
                ModelKind::Spiked if !(c.lambda > 4.0) || c.d < 4 => {
                    return bad(format!("{}: the spiked model needs lambda > 4 and d >= 4", c.key()));
                }
                ModelKind::Adversarial if !(c.lambda >= 2.0) || c.d < 2 => {
                    return bad(format!("{}: the adversarial model needs lambda >= 2 and d >= 2", c.key()));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Command-line replacements for config fields.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub d: Option<Vec<usize>>,
    pub m: Option<Vec<usize>>,
    pub n: Option<Vec<usize>>,
    pub lambda: Option<Vec<f64>>,
    pub k: Option<usize>,
    pub methods: Option<Vec<Method>>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub transport: Option<TransportKind>,
    pub allow_partial: bool,
    pub model: Option<ModelKind>,
    pub innovation: Option<Innovation>,
}
