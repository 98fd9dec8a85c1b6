//! Problem data: matrices, memory kernel, grid and initial data, together
//! with the JSON problem-file format and the canonical example builders.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, Mat, Vector};
use crate::{Error, Result};

/// Largest accepted number of grid steps.
pub const MAX_STEPS: usize = 100_000;
/// Largest accepted state or control dimension.
pub const MAX_DIM: usize = 1024;
/// Largest accepted number of stored kernel entries, `(N + 1)·n²` for matrix kernels.
const MAX_KERNEL_ENTRIES: usize = 1 << 26;

/// Uniform grid `t_i = i·h`, `i = 0..=N`, `h = T/N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    steps: usize,
    horizon: f64,
    step: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Validation(format!("horizon T must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Validation("number of steps N must be at least 1".into()));
        }
        if steps > MAX_STEPS {
            return Err(Error::Validation(format!("number of steps N exceeds {MAX_STEPS}")));
        }
        Ok(Self {
            steps,
            horizon,
            step: horizon / steps as f64,
        })
    }

    /// Number of steps `N`; there are `N + 1` nodes.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.step
        }
    }

    /// Trapezoid weight of node `k` for the rule on `[t_lo, t_hi]`.
    pub fn trap_weight(&self, k: usize, lo: usize, hi: usize) -> f64 {
        debug_assert!(lo <= k && k <= hi);
        if lo == hi {
            0.0
        } else if k == lo || k == hi {
            0.5 * self.step
        } else {
            self.step
        }
    }

    /// Trapezoid weights for nodes `lo..=hi`, indexed from zero.
    pub fn trap_weights(&self, lo: usize, hi: usize) -> Vec<f64> {
        (lo..=hi).map(|k| self.trap_weight(k, lo, hi)).collect()
    }

    /// Index of the node at time `t`, if `t` sits on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = t / self.step;
        let r = x.round();
        if r < 0.0 || r > self.steps as f64 || (x - r).abs() > 1e-9 * r.max(1.0) {
            None
        } else {
            Some(r as usize)
        }
    }
}

/// Validation thresholds; all default to `1e-10`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    #[serde(default = "default_tol")]
    pub sym: f64,
    #[serde(default = "default_tol")]
    pub psd: f64,
    #[serde(default = "default_tol")]
    pub commute: f64,
}

fn default_tol() -> f64 {
    1e-10
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            sym: 1e-10,
            psd: 1e-10,
            commute: 1e-10,
        }
    }
}

/// A matrix written either as a flat row-major array or as nested rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixLiteral {
    Flat(Vec<f64>),
    Nested(Vec<Vec<f64>>),
}

impl MatrixLiteral {
    fn to_matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Mat> {
        if rows > MAX_DIM || cols > MAX_DIM {
            return Err(Error::Validation(format!("{name} dimensions exceed {MAX_DIM}")));
        }
        let flat: Vec<f64> = match self {
            MatrixLiteral::Flat(v) => v.clone(),
            MatrixLiteral::Nested(rs) => {
                if rs.len() != rows || rs.iter().any(|r| r.len() != cols) {
                    return Err(Error::Dimension(format!("{name} must be {rows}x{cols}")));
                }
                rs.iter().flatten().copied().collect()
            }
        };
        if flat.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{name} must have {} entries ({rows}x{cols}), got {}",
                rows * cols,
                flat.len()
            )));
        }
        Ok(linalg::from_row_major(rows, cols, &flat))
    }
}

/// One kernel sample in a `samples` kernel: a scalar or a row-major `n×n` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleLiteral {
    Scalar(f64),
    Matrix(Vec<f64>),
}

/// Closed-form or tabulated description of the memory kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum KernelSpec {
    Zero,
    Constant {
        value: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        matrix: Option<MatrixLiteral>,
    },
    /// `K(t) = amplitude · exp(-rate · t)`, optionally times a fixed matrix.
    Exponential {
        amplitude: f64,
        rate: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        matrix: Option<MatrixLiteral>,
    },
    Samples { values: Vec<SampleLiteral> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Scalar,
    CommutingMatrix,
}

#[derive(Debug, Clone, PartialEq)]
enum KernelSamples {
    Scalar(Vec<f64>),
    Matrix(Vec<Mat>),
}

/// Memory kernel sampled on the grid nodes of `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryKernel {
    spec: KernelSpec,
    n: usize,
    samples: KernelSamples,
}

impl MemoryKernel {
    pub fn from_spec(spec: &KernelSpec, n: usize, grid: &TimeGrid) -> Result<Self> {
        let nodes = grid.steps() + 1;
        if n > MAX_DIM {
            return Err(Error::Validation(format!("state dimension exceeds {MAX_DIM}")));
        }
        let has_matrix = match spec {
            KernelSpec::Constant { matrix, .. } | KernelSpec::Exponential { matrix, .. } => matrix.is_some(),
            KernelSpec::Samples { values } => values.iter().any(|v| matches!(v, SampleLiteral::Matrix(_))),
            KernelSpec::Zero => false,
        };
        if has_matrix && nodes * n * n > MAX_KERNEL_ENTRIES {
            return Err(Error::Validation("matrix kernel table too large".into()));
        }
        let closed_form = |f: &dyn Fn(f64) -> f64, matrix: &Option<MatrixLiteral>| -> Result<KernelSamples> {
            let scalars: Vec<f64> = (0..nodes).map(|i| f(grid.node(i))).collect();
            match matrix {
                None => Ok(KernelSamples::Scalar(scalars)),
                Some(lit) => {
                    let base = lit.to_matrix("kernel matrix", n, n)?;
                    Ok(KernelSamples::Matrix(scalars.iter().map(|c| &base * *c).collect()))
                }
            }
        };
        let samples = match spec {
            KernelSpec::Zero => KernelSamples::Scalar(vec![0.0; nodes]),
            KernelSpec::Constant { value, matrix } => closed_form(&|_| *value, matrix)?,
            KernelSpec::Exponential {
                amplitude,
                rate,
                matrix,
            } => closed_form(&|t| amplitude * (-rate * t).exp(), matrix)?,
            KernelSpec::Samples { values } => {
                if values.len() != nodes {
                    return Err(Error::Dimension(format!(
                        "kernel samples must cover all {nodes} grid nodes, got {}",
                        values.len()
                    )));
                }
                if values.iter().all(|v| matches!(v, SampleLiteral::Scalar(_))) {
                    KernelSamples::Scalar(
                        values
                            .iter()
                            .map(|v| match v {
                                SampleLiteral::Scalar(c) => *c,
                                SampleLiteral::Matrix(_) => unreachable!(),
                            })
                            .collect(),
                    )
                } else {
                    let mut out = Vec::with_capacity(nodes);
                    for v in values {
                        out.push(match v {
                            SampleLiteral::Scalar(c) => Mat::identity(n, n) * *c,
                            SampleLiteral::Matrix(m) => {
                                MatrixLiteral::Flat(m.clone()).to_matrix("kernel sample", n, n)?
                            }
                        });
                    }
                    KernelSamples::Matrix(out)
                }
            }
        };
        Ok(Self {
            spec: spec.clone(),
            n,
            samples,
        })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn kind(&self) -> KernelKind {
        match self.samples {
            KernelSamples::Scalar(_) => KernelKind::Scalar,
            KernelSamples::Matrix(_) => KernelKind::CommutingMatrix,
        }
    }

    pub fn len(&self) -> usize {
        match &self.samples {
            KernelSamples::Scalar(v) => v.len(),
            KernelSamples::Matrix(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when every sample is exactly zero.
    pub fn is_zero(&self) -> bool {
        match &self.samples {
            KernelSamples::Scalar(v) => v.iter().all(|c| *c == 0.0),
            KernelSamples::Matrix(v) => v.iter().all(|m| m.iter().all(|c| *c == 0.0)),
        }
    }

    /// Scalar sample at node `i`, or `None` for a matrix kernel.
    pub fn scalar(&self, i: usize) -> Option<f64> {
        match &self.samples {
            KernelSamples::Scalar(v) => Some(v[i]),
            KernelSamples::Matrix(_) => None,
        }
    }

    /// `K(t_i)` as an `n×n` block.
    pub fn block(&self, i: usize) -> Mat {
        match &self.samples {
            KernelSamples::Scalar(v) => Mat::identity(self.n, self.n) * v[i],
            KernelSamples::Matrix(v) => v[i].clone(),
        }
    }

    /// `K(t_i) · x`.
    pub fn left_mul(&self, i: usize, x: &Mat) -> Mat {
        match &self.samples {
            KernelSamples::Scalar(v) => x * v[i],
            KernelSamples::Matrix(v) => &v[i] * x,
        }
    }

    /// `K(t_i)ᵀ · x`.
    pub fn left_mul_transpose(&self, i: usize, x: &Mat) -> Mat {
        match &self.samples {
            KernelSamples::Scalar(v) => x * v[i],
            KernelSamples::Matrix(v) => v[i].tr_mul(x),
        }
    }

    /// `x · K(t_i)`.
    pub fn right_mul(&self, x: &Mat, i: usize) -> Mat {
        match &self.samples {
            KernelSamples::Scalar(v) => x * v[i],
            KernelSamples::Matrix(v) => x * &v[i],
        }
    }

    /// `K(t_i) · x` for a vector.
    pub fn apply(&self, i: usize, x: &Vector) -> Vector {
        match &self.samples {
            KernelSamples::Scalar(v) => x * v[i],
            KernelSamples::Matrix(v) => &v[i] * x,
        }
    }

    /// Largest absolute sample entry.
    pub fn max_abs(&self) -> f64 {
        match &self.samples {
            KernelSamples::Scalar(v) => v.iter().fold(0.0_f64, |a, c| a.max(c.abs())),
            KernelSamples::Matrix(v) => v.iter().fold(0.0_f64, |a, m| a.max(linalg::max_abs(m))),
        }
    }

    /// Short tag used in reports.
    pub fn tag(&self) -> String {
        match &self.spec {
            KernelSpec::Zero => "zero".into(),
            KernelSpec::Constant { value, matrix } => {
                format!("constant({value}){}", if matrix.is_some() { "*M" } else { "" })
            }
            KernelSpec::Exponential {
                amplitude,
                rate,
                matrix,
            } => format!(
                "exponential({amplitude},{rate}){}",
                if matrix.is_some() { "*M" } else { "" }
            ),
            KernelSpec::Samples { .. } => "samples".into(),
        }
    }

    fn all_finite(&self) -> bool {
        match &self.samples {
            KernelSamples::Scalar(v) => v.iter().all(|c| c.is_finite()),
            KernelSamples::Matrix(v) => v.iter().all(linalg::all_finite),
        }
    }
}

/// Initial time `τ` (a grid node), state `ξ0 = w(τ+)` and history `ξ` on `[0, τ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    tau: f64,
    tau_index: usize,
    xi0: Vector,
    history: Vec<Vector>,
}

impl InitialData {
    pub fn new(grid: &TimeGrid, tau: f64, xi0: Vector, history: Vec<Vector>) -> Result<Self> {
        let n = xi0.len();
        if !(tau.is_finite() && (0.0..grid.horizon()).contains(&tau)) {
            return Err(Error::Validation(format!("tau must lie in [0, T), got {tau}")));
        }
        let tau_index = grid
            .index_of(tau)
            .ok_or_else(|| Error::Validation(format!("tau = {tau} is not on a grid node")))?;
        if tau_index == 0 {
            if !history.is_empty() {
                return Err(Error::Validation("history must be empty when tau = 0".into()));
            }
        } else if history.len() != tau_index + 1 {
            return Err(Error::Validation(format!(
                "history must have {} samples on [0, tau], got {}",
                tau_index + 1,
                history.len()
            )));
        }
        if history.iter().any(|h| h.len() != n) {
            return Err(Error::Dimension(format!("history samples must be {n}-vectors")));
        }
        if !xi0.iter().chain(history.iter().flatten()).all(|x| x.is_finite()) {
            return Err(Error::Validation("initial data entries not finite".into()));
        }
        Ok(Self {
            tau,
            tau_index,
            xi0,
            history,
        })
    }

    /// Initial data at `τ = 0` with no history.
    pub fn at_origin(xi0: Vector) -> Self {
        Self {
            tau: 0.0,
            tau_index: 0,
            xi0,
            history: Vec::new(),
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn tau_index(&self) -> usize {
        self.tau_index
    }

    pub fn xi0(&self) -> &Vector {
        &self.xi0
    }

    /// History samples as given (empty for `τ = 0`).
    pub fn history(&self) -> &[Vector] {
        &self.history
    }

    /// History samples on nodes `0..=τ`; for `τ = 0` the single node carries `ξ0`.
    pub fn history_nodes(&self) -> Vec<Vector> {
        if self.history.is_empty() {
            vec![self.xi0.clone()]
        } else {
            self.history.clone()
        }
    }
}

/// A validated problem instance. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub n: usize,
    pub m: usize,
    pub a: Mat,
    pub b: Mat,
    pub q: Mat,
    pub kernel: MemoryKernel,
    pub grid: TimeGrid,
    pub init: InitialData,
    pub tolerances: Tolerances,
}

impl ProblemInstance {
    /// Assemble and validate an instance.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: Mat,
        b: Mat,
        q: Mat,
        kernel: &KernelSpec,
        horizon: f64,
        steps: usize,
        init: InitialSpec,
        tolerances: Tolerances,
    ) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::Dimension("A must be a non-empty square matrix".into()));
        }
        let m = b.ncols();
        if b.nrows() != n || m == 0 {
            return Err(Error::Dimension(format!("B must be {n}xm with m >= 1")));
        }
        if q.shape() != (n, n) {
            return Err(Error::Dimension(format!("Q must be {n}x{n}")));
        }
        let grid = TimeGrid::new(horizon, steps)?;
        let kernel = MemoryKernel::from_spec(kernel, n, &grid)?;
        let init = match init {
            InitialSpec::Origin(xi0) => InitialData::new(&grid, 0.0, xi0, Vec::new())?,
            InitialSpec::At { tau, xi0, history } => InitialData::new(&grid, tau, xi0, history)?,
        };
        if init.xi0().len() != n {
            return Err(Error::Dimension(format!("xi0 must be an {n}-vector")));
        }
        let instance = Self {
            n,
            m,
            a,
            b,
            q,
            kernel,
            grid,
            init,
            tolerances,
        };
        instance.validate()?;
        Ok(instance)
    }

    /// Check the instance invariants, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        if !(linalg::all_finite(&self.a) && linalg::all_finite(&self.b) && linalg::all_finite(&self.q)) {
            return Err(Error::Validation("matrix entries not finite".into()));
        }
        if !self.kernel.all_finite() {
            return Err(Error::Validation("kernel samples not finite".into()));
        }
        let tol = &self.tolerances;
        if linalg::symmetry_residual(&self.q) > tol.sym {
            return Err(Error::Validation("Q not symmetric".into()));
        }
        if linalg::min_sym_eigenvalue(&self.q) < -tol.psd {
            return Err(Error::Validation("Q not positive semidefinite".into()));
        }
        if self.kernel.kind() == KernelKind::CommutingMatrix {
            for i in 0..self.kernel.len() {
                let k = self.kernel.block(i);
                let c = &k * &self.a - &self.a * &k;
                if linalg::max_abs(&c) > tol.commute {
                    return Err(Error::Validation(format!(
                        "kernel does not commute with A (node {i})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Same dynamics and cost with different initial data.
    pub fn with_initial(&self, init: InitialData) -> Result<Self> {
        if init.xi0().len() != self.n {
            return Err(Error::Dimension(format!("xi0 must be an {}-vector", self.n)));
        }
        let mut out = self.clone();
        out.init = init;
        Ok(out)
    }

    /// Same problem with `Q` replaced.
    pub fn with_q(&self, q: Mat) -> Result<Self> {
        let mut out = self.clone();
        out.q = q;
        out.validate()?;
        Ok(out)
    }

    /// Same problem data on a grid with `steps` steps. Initial data are carried
    /// over by time; the history is resampled from a constant profile when the
    /// original history is constant, and rejected otherwise.
    pub fn refined(&self, steps: usize) -> Result<Self> {
        let grid = TimeGrid::new(self.grid.horizon(), steps)?;
        let kernel = MemoryKernel::from_spec(self.kernel.spec(), self.n, &grid)?;
        let tau = self.init.tau();
        let tau_index = grid
            .index_of(tau)
            .ok_or_else(|| Error::Validation(format!("tau = {tau} is not on a node of the N = {steps} grid")))?;
        let history = if tau_index == 0 {
            Vec::new()
        } else {
            let h = self.init.history();
            if h.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::Validation(
                    "refinement needs a constant history profile".into(),
                ));
            }
            vec![h[0].clone(); tau_index + 1]
        };
        let init = InitialData::new(&grid, tau, self.init.xi0().clone(), history)?;
        let out = Self {
            kernel,
            grid,
            init,
            ..self.clone()
        };
        out.validate()?;
        Ok(out)
    }

    /// Short description used in reports.
    pub fn digest(&self) -> String {
        format!(
            "n={} m={} N={} h={} kernel={}",
            self.n,
            self.m,
            self.grid.steps(),
            self.grid.step(),
            self.kernel.tag()
        )
    }
}

/// Initial data before the grid is known.
#[derive(Debug, Clone)]
pub enum InitialSpec {
    Origin(Vector),
    At {
        tau: f64,
        xi0: Vector,
        history: Vec<Vector>,
    },
}

// ---------------------------------------------------------------------------
// Problem file

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuilderKind {
    Heat,
    Random,
}

/// The JSON problem file, field-for-field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builder: Option<BuilderKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub a: Option<MatrixLiteral>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<MatrixLiteral>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<MatrixLiteral>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelSpec>,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "N")]
    pub steps: usize,
    #[serde(default)]
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerances: Option<Tolerances>,
}

/// Parameters of the semi-discretized heat equation with memory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatParams {
    /// Number of spatial intervals on `[0, 1]`; the state holds the `n_space - 1` interior nodes.
    pub n_space: usize,
    pub nu: f64,
    pub gamma: f64,
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomParams {
    pub n: usize,
    pub m: usize,
    pub seed: u64,
}

/// Parse a problem file from its JSON text.
pub fn parse_problem(text: &str) -> Result<ProblemInstance> {
    let file: ProblemFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    from_problem_file(&file)
}

pub fn load_problem(path: impl AsRef<Path>) -> Result<ProblemInstance> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
        Error::Parse(format!("cannot read {}: {e}", path.as_ref().display()))
    })?;
    parse_problem(&text)
}

/// Write an instance as an explicit (builder-free) problem file.
pub fn save_problem(instance: &ProblemInstance, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(&to_problem_file(instance))
        .map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn to_problem_file(p: &ProblemInstance) -> ProblemFile {
    let history = if p.init.history().is_empty() {
        None
    } else {
        Some(p.init.history().iter().map(|v| v.iter().copied().collect()).collect())
    };
    ProblemFile {
        builder: None,
        params: None,
        n: Some(p.n),
        m: Some(p.m),
        a: Some(MatrixLiteral::Flat(linalg::to_row_major(&p.a))),
        b: Some(MatrixLiteral::Flat(linalg::to_row_major(&p.b))),
        q: Some(MatrixLiteral::Flat(linalg::to_row_major(&p.q))),
        kernel: Some(p.kernel.spec().clone()),
        horizon: p.grid.horizon(),
        steps: p.grid.steps(),
        tau: p.init.tau(),
        xi0: Some(p.init.xi0().iter().copied().collect()),
        history,
        tolerances: Some(p.tolerances),
    }
}

pub fn from_problem_file(file: &ProblemFile) -> Result<ProblemInstance> {
    let tolerances = file.tolerances.unwrap_or_default();
    let (a, b, q, kernel, default_xi0) = match file.builder {
        Some(kind) => {
            if file.a.is_some() || file.b.is_some() || file.q.is_some() || file.kernel.is_some() {
                return Err(Error::Validation(
                    "builder files must not also give A, B, Q or kernel".into(),
                ));
            }
            let params = file
                .params
                .clone()
                .ok_or_else(|| Error::Parse("builder requires a params object".into()))?;
            let built = match kind {
                BuilderKind::Heat => {
                    let p: HeatParams =
                        serde_json::from_value(params).map_err(|e| Error::Parse(e.to_string()))?;
                    heat_data(&p)?
                }
                BuilderKind::Random => {
                    let p: RandomParams =
                        serde_json::from_value(params).map_err(|e| Error::Parse(e.to_string()))?;
                    random_data(&p)?
                }
            };
            if let Some(n) = file.n {
                if n != built.0.nrows() {
                    return Err(Error::Dimension(format!(
                        "n = {n} disagrees with builder state dimension {}",
                        built.0.nrows()
                    )));
                }
            }
            built
        }
        None => {
            let n = file.n.ok_or_else(|| Error::Parse("missing field `n`".into()))?;
            let m = file.m.ok_or_else(|| Error::Parse("missing field `m`".into()))?;
            if n == 0 || m == 0 {
                return Err(Error::Validation("n and m must be positive".into()));
            }
            if n > MAX_DIM || m > MAX_DIM {
                return Err(Error::Validation(format!("n and m must not exceed {MAX_DIM}")));
            }
            let get = |lit: &Option<MatrixLiteral>, name: &str, r: usize, c: usize| -> Result<Mat> {
                lit.as_ref()
                    .ok_or_else(|| Error::Parse(format!("missing field `{name}`")))?
                    .to_matrix(name, r, c)
            };
            let a = get(&file.a, "A", n, n)?;
            let b = get(&file.b, "B", n, m)?;
            let q = get(&file.q, "Q", n, n)?;
            let kernel = file
                .kernel
                .clone()
                .ok_or_else(|| Error::Parse("missing field `kernel`".into()))?;
            (a, b, q, kernel, None)
        }
    };
    if let Some(m) = file.m {
        if file.builder.is_some() && m != b.ncols() {
            return Err(Error::Dimension(format!(
                "m = {m} disagrees with builder control dimension {}",
                b.ncols()
            )));
        }
    }
    let n = a.nrows();
    let xi0 = match (&file.xi0, default_xi0) {
        (Some(v), _) => Vector::from_vec(v.clone()),
        (None, Some(d)) => d,
        (None, None) => return Err(Error::Parse("missing field `xi0`".into())),
    };
    if xi0.len() != n {
        return Err(Error::Dimension(format!("xi0 must be an {n}-vector")));
    }
    let history: Vec<Vector> = file
        .history
        .as_ref()
        .map(|h| h.iter().map(|v| Vector::from_vec(v.clone())).collect())
        .unwrap_or_default();
    let init = InitialSpec::At {
        tau: file.tau,
        xi0,
        history,
    };
    ProblemInstance::new(a, b, q, &kernel, file.horizon, file.steps, init, tolerances)
}

// ---------------------------------------------------------------------------
// Builders

type BuiltData = (Mat, Mat, Mat, KernelSpec, Option<Vector>);

fn heat_data(p: &HeatParams) -> Result<BuiltData> {
    if p.n_space < 2 || p.n_space > MAX_DIM + 1 {
        return Err(Error::Validation(format!("heat builder needs 2 <= n_space <= {}", MAX_DIM + 1)));
    }
    if !(p.nu.is_finite() && p.nu > 0.0) {
        return Err(Error::Validation("heat builder needs nu > 0".into()));
    }
    let n = p.n_space - 1;
    let dx = 1.0 / p.n_space as f64;
    let scale = p.nu / (dx * dx);
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = -2.0 * scale;
        if i + 1 < n {
            a[(i, i + 1)] = scale;
            a[(i + 1, i)] = scale;
        }
    }
    let b = Mat::identity(n, n);
    let q = Mat::identity(n, n) * dx;
    let kernel = KernelSpec::Exponential {
        amplitude: p.c,
        rate: p.gamma,
        matrix: None,
    };
    let xi0 = Vector::from_iterator(
        n,
        (1..=n).map(|k| (std::f64::consts::PI * k as f64 * dx).sin()),
    );
    Ok((a, b, q, kernel, Some(xi0)))
}

fn random_data(p: &RandomParams) -> Result<BuiltData> {
    if p.n == 0 || p.m == 0 || p.n > MAX_DIM || p.m > MAX_DIM {
        return Err(Error::Validation(format!("random builder needs 1 <= n, m <= {MAX_DIM}")));
    }
    let n = p.n;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut a = Mat::identity(n, n) * -(n as f64);
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = rng.gen_range(-1.0..1.0);
            a[(i, j)] += s;
            a[(j, i)] -= s;
        }
    }
    let b = Mat::from_fn(n, p.m, |_, _| rng.gen_range(-1.0..1.0));
    let c = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let q = c.tr_mul(&c);
    let amplitude: f64 = rng.gen_range(-1.0..1.0);
    let rate: f64 = rng.gen_range(0.5..2.0);
    let kernel = KernelSpec::Exponential {
        amplitude,
        rate,
        matrix: None,
    };
    Ok((a, b, q, kernel, Some(Vector::from_element(n, 1.0))))
}

/// Semi-discretized 1D heat equation with exponential memory, Dirichlet
/// ends, distributed control on every interior node and `Q = Δx·I`.
pub fn build_heat_system(params: HeatParams, horizon: f64, steps: usize) -> Result<ProblemInstance> {
    let (a, b, q, kernel, xi0) = heat_data(&params)?;
    ProblemInstance::new(
        a,
        b,
        q,
        &kernel,
        horizon,
        steps,
        InitialSpec::Origin(xi0.expect("heat builder provides xi0")),
        Tolerances::default(),
    )
}

/// Random stable system, deterministic in `seed`: `A = -n·I + S` with `S`
/// skew-symmetric, dense `B`, `Q = CᵀC`.
pub fn build_random_stable(n: usize, m: usize, seed: u64, horizon: f64, steps: usize) -> Result<ProblemInstance> {
    let (a, b, q, kernel, xi0) = random_data(&RandomParams { n, m, seed })?;
    ProblemInstance::new(
        a,
        b,
        q,
        &kernel,
        horizon,
        steps,
        InitialSpec::Origin(xi0.expect("random builder provides xi0")),
        Tolerances::default(),
    )
}

/// Scalar instance `w' = a w + ∫K w + b u`, cost weight `q`, `ξ0 = 1`, `τ = 0`.
pub fn scalar_instance(a: f64, b: f64, q: f64, kernel: KernelSpec, horizon: f64, steps: usize) -> Result<ProblemInstance> {
    ProblemInstance::new(
        Mat::from_element(1, 1, a),
        Mat::from_element(1, 1, b),
        Mat::from_element(1, 1, q),
        &kernel,
        horizon,
        steps,
        InitialSpec::Origin(Vector::from_element(1, 1.0)),
        Tolerances::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCALAR: &str = r#"{"n":1,"m":1,"A":[0],"B":[1],"Q":[1],
        "kernel":{"type":"zero"},"T":1,"N":100,"xi0":[1]}"#;

    #[test]
    fn scalar_file_loads() {
        let p = parse_problem(SCALAR).unwrap();
        assert_eq!(p.grid.steps() + 1, 101);
        assert_eq!(p.grid.node(100), 1.0);
        assert!(p.kernel.is_zero());
        assert_eq!(p.init.tau_index(), 0);
    }

    #[test]
    fn asymmetric_q_rejected() {
        let text = r#"{"n":2,"m":1,"A":[0,0,0,0],"B":[1,0],"Q":[[0,1],[0,0]],
            "kernel":{"type":"zero"},"T":1,"N":10,"xi0":[1,0]}"#;
        match parse_problem(text) {
            Err(Error::Validation(msg)) => assert_eq!(msg, "Q not symmetric"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn indefinite_q_rejected() {
        let text = r#"{"n":1,"m":1,"A":[0],"B":[1],"Q":[-1],
            "kernel":{"type":"zero"},"T":1,"N":10,"xi0":[1]}"#;
        assert!(matches!(parse_problem(text), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_and_mismatched_files() {
        assert!(matches!(parse_problem("{not json"), Err(Error::Parse(_))));
        let text = r#"{"n":2,"m":1,"A":[0,0,0],"B":[1,0],"Q":[1,0,0,1],
            "kernel":{"type":"zero"},"T":1,"N":10,"xi0":[1,0]}"#;
        assert!(matches!(parse_problem(text), Err(Error::Dimension(_))));
    }

    #[test]
    fn tau_must_sit_on_node() {
        let text = r#"{"n":1,"m":1,"A":[0],"B":[1],"Q":[1],
            "kernel":{"type":"zero"},"T":1,"N":10,"tau":0.25,"xi0":[1],
            "history":[[1],[1],[1]]}"#;
        assert!(matches!(parse_problem(text), Err(Error::Validation(_))));
        let text = r#"{"n":1,"m":1,"A":[0],"B":[1],"Q":[1],
            "kernel":{"type":"zero"},"T":1,"N":10,"tau":0.2,"xi0":[1],
            "history":[[1],[1]]}"#;
        assert!(matches!(parse_problem(text), Err(Error::Validation(_))));
        let text = r#"{"n":1,"m":1,"A":[0],"B":[1],"Q":[1],
            "kernel":{"type":"zero"},"T":1,"N":10,"tau":0.2,"xi0":[1],
            "history":[[1],[1],[1]]}"#;
        assert_eq!(parse_problem(text).unwrap().init.tau_index(), 2);
    }

    #[test]
    fn non_commuting_matrix_kernel_rejected() {
        let text = r#"{"n":2,"m":1,"A":[0,1,0,0],"B":[0,1],"Q":[1,0,0,1],
            "kernel":{"type":"constant","value":1,"matrix":[1,0,0,2]},
            "T":1,"N":10,"xi0":[1,0]}"#;
        match parse_problem(text) {
            Err(Error::Validation(msg)) => assert!(msg.contains("commute")),
            other => panic!("expected validation error, got {other:?}"),
        }
        let text = r#"{"n":2,"m":1,"A":[0,1,0,0],"B":[0,1],"Q":[1,0,0,1],
            "kernel":{"type":"constant","value":1,"matrix":[2,3,0,2]},
            "T":1,"N":10,"xi0":[1,0]}"#;
        let p = parse_problem(text).unwrap();
        assert_eq!(p.kernel.kind(), KernelKind::CommutingMatrix);
    }

    #[test]
    fn heat_builder_assembles_tridiagonal() {
        let p = build_heat_system(
            HeatParams {
                n_space: 3,
                nu: 1.0,
                gamma: 1.0,
                c: 0.0,
            },
            1.0,
            10,
        )
        .unwrap();
        let dx: f64 = 1.0 / 3.0;
        let s = 1.0 / (dx * dx);
        let expected = Mat::from_row_slice(2, 2, &[-2.0 * s, s, s, -2.0 * s]);
        assert_eq!(p.n, 2);
        assert!(linalg::max_abs_diff(&p.a, &expected) < 1e-12);
        assert!((0..=10).all(|i| p.kernel.scalar(i) == Some(0.0)));
        assert_eq!(p.b, Mat::identity(2, 2));
        assert!(linalg::max_abs_diff(&p.q, &(Mat::identity(2, 2) * dx)) < 1e-15);
    }

    #[test]
    fn heat_constant_kernel() {
        let p = build_heat_system(
            HeatParams {
                n_space: 4,
                nu: 1.0,
                gamma: 0.0,
                c: 1.0,
            },
            1.0,
            10,
        )
        .unwrap();
        assert!((0..=10).all(|i| p.kernel.scalar(i) == Some(1.0)));
    }

    #[test]
    fn random_builder_is_deterministic_and_stable() {
        let p1 = build_random_stable(2, 1, 7, 1.0, 10).unwrap();
        let p2 = build_random_stable(2, 1, 7, 1.0, 10).unwrap();
        assert_eq!(p1, p2);
        for seed in 0..20 {
            let p = build_random_stable(3, 2, seed, 1.0, 10).unwrap();
            assert!(linalg::min_sym_eigenvalue(&p.q) >= -1e-12);
            assert!(linalg::spectral_abscissa(&p.a) < 0.0);
        }
    }

    #[test]
    fn builder_file_matches_builder_function() {
        let text = r#"{"builder":"heat","params":{"n_space":33,"nu":0.1,"gamma":1,"c":-1},
            "T":1,"N":50}"#;
        let p = parse_problem(text).unwrap();
        assert_eq!(p.n, 32);
        let q = build_heat_system(
            HeatParams {
                n_space: 33,
                nu: 0.1,
                gamma: 1.0,
                c: -1.0,
            },
            1.0,
            50,
        )
        .unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = build_random_stable(3, 2, 11, 1.3, 13).unwrap();
        save_problem(&p, &path).unwrap();
        assert_eq!(load_problem(&path).unwrap(), p);
    }
}
