//! Discretized semigroup and the kernel family of the mild-solution
//! representation: `μ`, the resolvent `R`, the propagator `F` and the
//! history operators `G`, `M`.
//!
//! On a uniform grid every one of these depends on time differences only:
//! `F(t_i, t_j)` is a function of the lag `i - j`, and `G(t_i, s_j, τ)`,
//! `M(t_i, s_j, τ)` are functions of `(i - τ, τ - j)`. The tables below
//! store them that way; accessors take the full index triple.

use rayon::prelude::*;

use crate::linalg::{self, Mat};
use crate::model::{MemoryKernel, ProblemInstance, TimeGrid};
use crate::{Error, Result};

/// Norm above which the resolvent is flagged as large.
pub const RESOLVENT_GROWTH_FLAG: f64 = 1e6;

/// `E_i = exp(t_i A)`, `i = 0..=N`.
#[derive(Debug, Clone)]
pub struct SemigroupTable {
    pub blocks: Vec<Mat>,
}

/// `μ_i ≈ μ(t_i)`.
#[derive(Debug, Clone)]
pub struct MuTable {
    pub blocks: Vec<Mat>,
}

/// `R_i ≈ R(t_i)`.
#[derive(Debug, Clone)]
pub struct ResolventTable {
    pub blocks: Vec<Mat>,
}

/// `F(t_i, t_j)` stored by lag: `lags[d] = F(t_{j+d}, t_j)`.
#[derive(Debug, Clone)]
pub struct FTable {
    pub lags: Vec<Mat>,
}

impl FTable {
    pub fn get(&self, i: usize, j: usize) -> &Mat {
        debug_assert!(j <= i);
        &self.lags[i - j]
    }
}

/// `acc += w · a · b`.
#[inline]
fn add_product(acc: &mut Mat, w: f64, a: &Mat, b: &Mat) {
    acc.gemm(w, a, b, 1.0);
}

/// Powers of the single-step exponential `exp(hA)`.
pub fn compute_semigroup(a: &Mat, grid: &TimeGrid) -> Result<SemigroupTable> {
    let n = a.nrows();
    let step = (a * grid.step()).exp();
    if !linalg::all_finite(&step) {
        return Err(Error::numerical(Some(1), "matrix exponential overflowed"));
    }
    let mut blocks = Vec::with_capacity(grid.steps() + 1);
    blocks.push(Mat::identity(n, n));
    for i in 1..=grid.steps() {
        let next = &blocks[i - 1] * &step;
        if !linalg::all_finite(&next) {
            return Err(Error::numerical(Some(i), "semigroup overflowed"));
        }
        blocks.push(next);
    }
    Ok(SemigroupTable { blocks })
}

/// `μ_i = Σ_j w_j E_{i-j} K(t_j)` with trapezoid weights on `[0, t_i]`.
pub fn compute_mu(semigroup: &SemigroupTable, kernel: &MemoryKernel, grid: &TimeGrid) -> MuTable {
    let n = semigroup.blocks[0].nrows();
    let blocks = (0..=grid.steps())
        .into_par_iter()
        .map(|i| {
            let mut acc = Mat::zeros(n, n);
            for j in 0..=i {
                let w = grid.trap_weight(j, 0, i);
                if w != 0.0 {
                    acc += kernel.right_mul(&semigroup.blocks[i - j], j) * w;
                }
            }
            acc
        })
        .collect();
    MuTable { blocks }
}

/// Forward substitution for `R_i - Σ_j w_j μ_{i-j} R_j = -μ_i`. The `j = i`
/// term carries `μ_0 = 0`, so every step is explicit.
pub fn compute_resolvent(mu: &MuTable, grid: &TimeGrid) -> ResolventTable {
    let h = grid.step();
    let mut blocks: Vec<Mat> = Vec::with_capacity(mu.blocks.len());
    for i in 0..mu.blocks.len() {
        let mut r = -&mu.blocks[i];
        // j = 0 carries R_0 = 0 and j = i carries μ_0 = 0
        for j in 1..i {
            add_product(&mut r, h, &mu.blocks[i - j], &blocks[j]);
        }
        blocks.push(r);
    }
    ResolventTable { blocks }
}

/// `F(t_d, 0) = E_d - Σ_l w_l R_{d-l} E_l` for every lag `d`.
pub fn compute_f(semigroup: &SemigroupTable, resolvent: &ResolventTable, grid: &TimeGrid) -> FTable {
    let lags = (0..=grid.steps())
        .into_par_iter()
        .map(|d| {
            let mut acc = semigroup.blocks[d].clone();
            for l in 0..=d {
                let w = grid.trap_weight(l, 0, d);
                if w != 0.0 {
                    add_product(&mut acc, -w, &resolvent.blocks[d - l], &semigroup.blocks[l]);
                }
            }
            acc
        })
        .collect();
    FTable { lags }
}

/// `G` and `M` for one initial node `τ`: rows `i = τ..=N`, columns `j = 0..=τ`.
#[derive(Debug, Clone)]
pub struct GmTables {
    pub tau: usize,
    g: Vec<Mat>,
    m: Vec<Mat>,
}

impl GmTables {
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= self.tau && self.tau <= i);
        (i - self.tau) * (self.tau + 1) + j
    }

    pub fn g(&self, i: usize, j: usize) -> &Mat {
        &self.g[self.idx(i, j)]
    }

    pub fn m(&self, i: usize, j: usize) -> &Mat {
        &self.m[self.idx(i, j)]
    }
}

/// `G_{i,j} = μ_{i-j} - E_{i-τ} μ_{τ-j}` and
/// `M_{i,j} = G_{i,j} - Σ_k w_k R_{i-k} G_{k,j}` (trapezoid over `k = τ..=i`).
pub fn compute_gm(
    semigroup: &SemigroupTable,
    mu: &MuTable,
    resolvent: &ResolventTable,
    tau: usize,
    grid: &TimeGrid,
) -> GmTables {
    let steps = grid.steps();
    assert!(tau <= steps, "tau index beyond the grid");
    let cols = tau + 1;
    let mut g = Vec::with_capacity((steps - tau + 1) * cols);
    for i in tau..=steps {
        for j in 0..=tau {
            g.push(&mu.blocks[i - j] - &semigroup.blocks[i - tau] * &mu.blocks[tau - j]);
        }
    }
    let m = (tau..=steps)
        .into_par_iter()
        .flat_map_iter(|i| {
            let g = &g;
            (0..=tau).map(move |j| {
                let mut acc = g[(i - tau) * cols + j].clone();
                for k in tau..=i {
                    let w = grid.trap_weight(k, tau, i);
                    if w != 0.0 {
                        add_product(&mut acc, -w, &resolvent.blocks[i - k], &g[(k - tau) * cols + j]);
                    }
                }
                acc
            })
        })
        .collect();
    GmTables { tau, g, m }
}

/// `G` and `M` for all initial nodes at once, keyed by `(a, b) = (i - τ, τ - j)`
/// on the triangle `a + b ≤ N`.
#[derive(Debug, Clone)]
pub struct HistoryTriangle {
    steps: usize,
    zero: Option<Mat>,
    g: Vec<Mat>,
    m: Vec<Mat>,
}

impl HistoryTriangle {
    fn idx(&self, a: usize, b: usize) -> usize {
        debug_assert!(a + b <= self.steps);
        triangle_offset(self.steps, a) + b
    }

    /// `G(t_i, s_j, t_τ)` for `j ≤ τ ≤ i`.
    pub fn g(&self, i: usize, j: usize, tau: usize) -> &Mat {
        debug_assert!(j <= tau && tau <= i);
        match &self.zero {
            Some(z) => z,
            None => &self.g[self.idx(i - tau, tau - j)],
        }
    }

    /// `M(t_i, s_j, t_τ)` for `j ≤ τ ≤ i`.
    pub fn m(&self, i: usize, j: usize, tau: usize) -> &Mat {
        debug_assert!(j <= tau && tau <= i);
        match &self.zero {
            Some(z) => z,
            None => &self.m[self.idx(i - tau, tau - j)],
        }
    }
}

fn triangle_offset(steps: usize, a: usize) -> usize {
    // rows 0..a hold N+1, N, ..., N-a+2 entries
    a * (steps + 1) - a * a.saturating_sub(1) / 2
}

pub fn compute_history_triangle(
    semigroup: &SemigroupTable,
    mu: &MuTable,
    resolvent: &ResolventTable,
    kernel_is_zero: bool,
    grid: &TimeGrid,
) -> HistoryTriangle {
    let steps = grid.steps();
    let n = semigroup.blocks[0].nrows();
    if kernel_is_zero {
        return HistoryTriangle {
            steps,
            zero: Some(Mat::zeros(n, n)),
            g: Vec::new(),
            m: Vec::new(),
        };
    }
    let g: Vec<Mat> = (0..=steps)
        .into_par_iter()
        .flat_map_iter(|a| {
            (0..=steps - a).map(move |b| &mu.blocks[a + b] - &semigroup.blocks[a] * &mu.blocks[b])
        })
        .collect();
    let m: Vec<Mat> = (0..=steps)
        .into_par_iter()
        .flat_map_iter(|a| {
            let g = &g;
            (0..=steps - a).map(move |b| {
                let mut acc = g[triangle_offset(steps, a) + b].clone();
                for l in 0..=a {
                    let w = grid.trap_weight(l, 0, a);
                    if w != 0.0 {
                        add_product(&mut acc, -w, &resolvent.blocks[a - l], &g[triangle_offset(steps, l) + b]);
                    }
                }
                acc
            })
        })
        .collect();
    HistoryTriangle {
        steps,
        zero: None,
        g,
        m,
    }
}

/// Everything downstream needs from this module for one instance.
#[derive(Debug, Clone)]
pub struct PropagatorTables {
    pub grid: TimeGrid,
    pub semigroup: SemigroupTable,
    pub mu: MuTable,
    pub resolvent: ResolventTable,
    pub f: FTable,
    pub history: HistoryTriangle,
    /// Largest `‖R_i‖_max`.
    pub resolvent_peak: f64,
}

impl PropagatorTables {
    pub fn build(instance: &ProblemInstance) -> Result<Self> {
        let grid = instance.grid.clone();
        let semigroup = compute_semigroup(&instance.a, &grid)?;
        let mu = compute_mu(&semigroup, &instance.kernel, &grid);
        let resolvent = compute_resolvent(&mu, &grid);
        if let Some(i) = resolvent.blocks.iter().position(|r| !linalg::all_finite(r)) {
            return Err(Error::numerical(Some(i), "resolvent not finite"));
        }
        let f = compute_f(&semigroup, &resolvent, &grid);
        let history = compute_history_triangle(&semigroup, &mu, &resolvent, instance.kernel.is_zero(), &grid);
        let resolvent_peak = resolvent.blocks.iter().map(linalg::max_abs).fold(0.0, f64::max);
        Ok(Self {
            grid,
            semigroup,
            mu,
            resolvent,
            f,
            history,
            resolvent_peak,
        })
    }

    pub fn n(&self) -> usize {
        self.semigroup.blocks[0].nrows()
    }

    pub fn e(&self, i: usize) -> &Mat {
        &self.semigroup.blocks[i]
    }

    pub fn mu(&self, i: usize) -> &Mat {
        &self.mu.blocks[i]
    }

    pub fn r(&self, i: usize) -> &Mat {
        &self.resolvent.blocks[i]
    }

    /// `F(t_i, t_j)`, `j ≤ i`.
    pub fn f(&self, i: usize, j: usize) -> &Mat {
        self.f.get(i, j)
    }

    /// `M(t_i, s_j, t_τ)`, `j ≤ τ ≤ i`.
    pub fn m(&self, i: usize, j: usize, tau: usize) -> &Mat {
        self.history.m(i, j, tau)
    }

    pub fn g(&self, i: usize, j: usize, tau: usize) -> &Mat {
        self.history.g(i, j, tau)
    }

    pub fn resolvent_flagged(&self) -> bool {
        self.resolvent_peak > RESOLVENT_GROWTH_FLAG
    }
}

/// `max_i ‖R_i - Σ_j w_j μ_{i-j} R_j + μ_i‖_max` with the full trapezoid sum.
pub fn volterra_residual(mu: &MuTable, resolvent: &ResolventTable, grid: &TimeGrid) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..resolvent.blocks.len() {
        let mut r = &resolvent.blocks[i] + &mu.blocks[i];
        for j in 0..=i {
            let w = grid.trap_weight(j, 0, i);
            if w != 0.0 {
                add_product(&mut r, -w, &mu.blocks[i - j], &resolvent.blocks[j]);
            }
        }
        worst = worst.max(linalg::max_abs(&r));
    }
    worst
}

/// Discrete trapezoid convolution `(a ∗ b)_i = Σ_j w_j a_{i-j} b_j`.
pub fn convolve(a: &[Mat], b: &[Mat], grid: &TimeGrid) -> Vec<Mat> {
    let n = a[0].nrows();
    (0..a.len())
        .map(|i| {
            let mut acc = Mat::zeros(n, n);
            for j in 0..=i {
                let w = grid.trap_weight(j, 0, i);
                if w != 0.0 {
                    add_product(&mut acc, w, &a[i - j], &b[j]);
                }
            }
            acc
        })
        .collect()
}

/// The first `terms` terms of `R = -μ - μ∗μ - μ∗μ∗μ - …`, with discrete
/// convolutions. Only meaningful for small `‖μ‖`.
pub fn resolvent_series(mu: &MuTable, grid: &TimeGrid, terms: usize) -> ResolventTable {
    let mut power = mu.blocks.clone();
    let mut sum: Vec<Mat> = power.iter().map(|p| -p).collect();
    for _ in 1..terms {
        power = convolve(&mu.blocks, &power, grid);
        for (s, p) in sum.iter_mut().zip(&power) {
            *s -= p;
        }
    }
    ResolventTable { blocks: sum }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{scalar_instance, KernelSpec};

    fn scalar(a: f64, kernel: KernelSpec, steps: usize) -> PropagatorTables {
        PropagatorTables::build(&scalar_instance(a, 1.0, 1.0, kernel, 1.0, steps).unwrap()).unwrap()
    }

    fn constant(c: f64) -> KernelSpec {
        KernelSpec::Constant { value: c, matrix: None }
    }

    #[test]
    fn nilpotent_step_exponential() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = compute_semigroup(&a, &grid).unwrap();
        let expected = Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(linalg::max_abs_diff(&e.blocks[1], &expected) < 1e-15);
        assert_eq!(e.blocks[0], Mat::identity(2, 2));
    }

    #[test]
    fn scalar_semigroup_matches_exp() {
        let p = scalar(-0.7, KernelSpec::Zero, 50);
        for i in 0..=50 {
            let t = p.grid.node(i);
            assert!((p.e(i)[(0, 0)] - (-0.7 * t).exp()).abs() < 1e-13);
            assert_eq!(p.f(i, 0), p.e(i));
        }
    }

    #[test]
    fn mu_for_constant_kernel() {
        let p = scalar(0.0, constant(0.3), 40);
        for i in 0..=40 {
            assert!((p.mu(i)[(0, 0)] - 0.3 * p.grid.node(i)).abs() < 1e-14);
        }
        // closed form c (e^{at} - 1) / a, second order
        let err = |steps: usize| {
            let p = scalar(0.8, constant(0.3), steps);
            (0..=steps)
                .map(|i| {
                    let t = p.grid.node(i);
                    (p.mu(i)[(0, 0)] - 0.3 * ((0.8 * t).exp() - 1.0) / 0.8).abs()
                })
                .fold(0.0, f64::max)
        };
        let ratio = err(50) / err(100);
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn resolvent_oracles() {
        let p = scalar(0.0, constant(-1.0), 200);
        let mut worst = 0.0_f64;
        for i in 0..=200 {
            let t = p.grid.node(i);
            worst = worst.max((p.r(i)[(0, 0)] - t.sin()).abs());
            worst = worst.max((p.f(i, 0)[(0, 0)] - t.cos()).abs());
        }
        assert!(worst < 1e-4, "{worst}");
        assert_eq!(p.r(0)[(0, 0)], 0.0);
        assert!(volterra_residual(&p.mu, &p.resolvent, &p.grid) < 1e-14);
    }

    #[test]
    fn series_agrees_with_stepping() {
        let p = scalar(0.0, constant(0.25), 100);
        let series = resolvent_series(&p.mu, &p.grid, 3);
        let gap = series
            .blocks
            .iter()
            .zip(&p.resolvent.blocks)
            .map(|(a, b)| linalg::max_abs_diff(a, b))
            .fold(0.0, f64::max);
        assert!(gap < 1e-2, "{gap}");
    }

    #[test]
    fn history_tables_agree_with_direct_assembly() {
        let inst = crate::model::build_random_stable(2, 1, 3, 1.0, 12).unwrap();
        let p = PropagatorTables::build(&inst).unwrap();
        for tau in [0, 5, 12] {
            let gm = compute_gm(&p.semigroup, &p.mu, &p.resolvent, tau, &p.grid);
            for i in tau..=12 {
                for j in 0..=tau {
                    assert!(linalg::max_abs_diff(gm.g(i, j), p.g(i, j, tau)) < 1e-14);
                    assert!(linalg::max_abs_diff(gm.m(i, j), p.m(i, j, tau)) < 1e-14);
                }
            }
            for j in 0..=tau {
                assert_eq!(linalg::max_abs(gm.g(tau, j)), 0.0);
                assert_eq!(linalg::max_abs(gm.m(tau, j)), 0.0);
            }
        }
    }

    #[test]
    fn m_on_the_diagonal_is_minus_resolvent() {
        // discrete convolution commutes for scalar blocks, so this holds to roundoff
        let p = scalar(-0.4, constant(-1.0), 40);
        let tau = 20;
        for i in tau..=40 {
            assert!((p.m(i, tau, tau)[(0, 0)] + p.r(i - tau)[(0, 0)]).abs() < 1e-13);
        }
    }

    #[test]
    fn zero_kernel_has_no_memory() {
        let p = scalar(0.5, KernelSpec::Zero, 10);
        for i in 0..=10 {
            assert_eq!(p.r(i)[(0, 0)], 0.0);
            assert_eq!(p.mu(i)[(0, 0)], 0.0);
            assert_eq!(p.m(i, 0, 0)[(0, 0)], 0.0);
        }
    }
}
