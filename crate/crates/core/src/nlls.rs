//! Dense Levenberg–Marquardt over manifold parameter blocks.
//!
//! Residual blocks are whitened by the square root of their information
//! matrix and optionally wrapped in a Huber loss (applied by iteratively
//! reweighting). Jacobians come from central differences unless the cost
//! function supplies them. The normal equations are factored with an envelope
//! Cholesky, so banded chains (pose graphs, sliding windows) stay cheap as
//! long as blocks are added roughly in chain order.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;

use crate::geom::Pose;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamValue {
    Pose(Pose),
    /// Strictly positive; optimized as `ln s`.
    Scale(f64),
    Vector3(Vector3<f64>),
    Scalar(f64),
}

impl ParamValue {
    pub fn tangent_dim(&self) -> usize {
        match self {
            ParamValue::Pose(_) => 6,
            ParamValue::Scale(_) | ParamValue::Scalar(_) => 1,
            ParamValue::Vector3(_) => 3,
        }
    }

    pub fn retract(&self, delta: &[f64]) -> ParamValue {
        match self {
            ParamValue::Pose(p) => ParamValue::Pose(p.boxplus(&Vector6::from_column_slice(delta))),
            ParamValue::Scale(s) => ParamValue::Scale(s * delta[0].exp()),
            ParamValue::Vector3(v) => ParamValue::Vector3(v + Vector3::from_column_slice(delta)),
            ParamValue::Scalar(x) => ParamValue::Scalar(x + delta[0]),
        }
    }

    /// Panics if the block is not a pose; cost functions know their layout.
    pub fn pose(&self) -> &Pose {
        match self {
            ParamValue::Pose(p) => p,
            other => panic!("expected pose block, found {:?}", other),
        }
    }

    pub fn scalar(&self) -> f64 {
        match self {
            ParamValue::Scale(s) | ParamValue::Scalar(s) => *s,
            other => panic!("expected scalar block, found {:?}", other),
        }
    }

    pub fn vector3(&self) -> &Vector3<f64> {
        match self {
            ParamValue::Vector3(v) => v,
            other => panic!("expected vector block, found {:?}", other),
        }
    }

    fn magnitude(&self) -> f64 {
        match self {
            ParamValue::Pose(p) => p.translation.norm() + 1.0,
            ParamValue::Scale(_) => 1.0,
            ParamValue::Vector3(v) => v.norm(),
            ParamValue::Scalar(x) => x.abs(),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            ParamValue::Pose(p) => p.is_finite(),
            ParamValue::Scale(s) => s.is_finite() && *s > 0.0,
            ParamValue::Vector3(v) => v.iter().all(|x| x.is_finite()),
            ParamValue::Scalar(x) => x.is_finite(),
        }
    }
}

pub trait CostFunction {
    fn residual_dim(&self) -> usize;

    fn evaluate(&self, params: &[ParamValue], residual: &mut [f64]) -> Result<()>;

    /// Jacobians with respect to each attached block's tangent coordinates
    /// (`residual_dim × tangent_dim`). Return `false` to fall back to
    /// central differences.
    fn jacobians(&self, _params: &[ParamValue], _jacobians: &mut [DMatrix<f64>]) -> bool {
        false
    }
}

/// Adapter for closures.
pub struct FnCost<F> {
    dim: usize,
    f: F,
}

impl<F> FnCost<F>
where
    F: Fn(&[ParamValue], &mut [f64]) -> Result<()>,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> CostFunction for FnCost<F>
where
    F: Fn(&[ParamValue], &mut [f64]) -> Result<()>,
{
    fn residual_dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, params: &[ParamValue], residual: &mut [f64]) -> Result<()> {
        (self.f)(params, residual)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    Trivial,
    /// Huber with the solver's configured scale.
    Huber,
    HuberScaled(f64),
}

struct ResidualBlock<'a> {
    cost: Box<dyn CostFunction + 'a>,
    params: Vec<usize>,
    sqrt_info: DMatrix<f64>,
    loss: Loss,
}

#[derive(Debug, Clone, Copy)]
struct ParamBlock {
    value: ParamValue,
    frozen: bool,
}

#[derive(Default)]
pub struct Problem<'a> {
    blocks: Vec<ParamBlock>,
    residuals: Vec<ResidualBlock<'a>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub parameter_tolerance: f64,
    pub function_tolerance: f64,
    pub robust_loss_scale: f64,
    pub initial_lambda: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            gradient_tolerance: 1e-10,
            parameter_tolerance: 1e-12,
            function_tolerance: 1e-16,
            robust_loss_scale: 1.0,
            initial_lambda: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSummary {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Costs after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// The undamped normal matrix at the solution was numerically singular.
    pub rank_deficient: bool,
}

/// Square root `L` (with `LᵀL = info`) of a symmetric positive semi-definite
/// matrix.
pub fn sqrt_information(info: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = info.nrows();
    if info.ncols() != n {
        return Err(Error::Contract("information matrix is not square".into()));
    }
    for i in 0..n {
        for j in 0..i {
            if (info[(i, j)] - info[(j, i)]).abs() > 1e-12 {
                return Err(Error::Contract("information matrix is not symmetric".into()));
            }
        }
    }
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || info[(i, j)] == 0.0));
    if diagonal {
        let mut l = DMatrix::zeros(n, n);
        for i in 0..n {
            if info[(i, i)] < 0.0 {
                return Err(Error::Contract("information matrix has a negative weight".into()));
            }
            l[(i, i)] = info[(i, i)].sqrt();
        }
        return Ok(l);
    }
    let eig = info.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut l = eig.eigenvectors.transpose();
    for i in 0..n {
        let ev = eig.eigenvalues[i];
        if ev < -1e-9 * top.max(1.0) {
            return Err(Error::Contract(
                "information matrix is not positive semi-definite".into(),
            ));
        }
        let s = ev.max(0.0).sqrt();
        for j in 0..n {
            l[(i, j)] *= s;
        }
    }
    Ok(l)
}

impl<'a> Problem<'a> {
    pub fn new() -> Self {
        Self {
            blocks: Vec::new(),
            residuals: Vec::new(),
        }
    }

    pub fn add_parameter(&mut self, value: ParamValue) -> usize {
        self.blocks.push(ParamBlock { value, frozen: false });
        self.blocks.len() - 1
    }

    pub fn set_frozen(&mut self, block: usize, frozen: bool) {
        self.blocks[block].frozen = frozen;
    }

    pub fn is_frozen(&self, block: usize) -> bool {
        self.blocks[block].frozen
    }

    pub fn parameter(&self, block: usize) -> &ParamValue {
        &self.blocks[block].value
    }

    pub fn set_parameter(&mut self, block: usize, value: ParamValue) {
        self.blocks[block].value = value;
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_residuals(&self) -> usize {
        self.residuals.len()
    }

    pub fn add_residual(
        &mut self,
        cost: impl CostFunction + 'a,
        params: &[usize],
        information: &DMatrix<f64>,
        loss: Loss,
    ) -> Result<usize> {
        if let Some(&bad) = params.iter().find(|&&p| p >= self.blocks.len()) {
            return Err(Error::Contract(format!("residual references unknown block {}", bad)));
        }
        let dim = cost.residual_dim();
        if information.nrows() != dim {
            return Err(Error::Contract(format!(
                "information is {}x{} for a residual of dimension {}",
                information.nrows(),
                information.ncols(),
                dim
            )));
        }
        let sqrt_info = sqrt_information(information)?;
        self.residuals.push(ResidualBlock {
            cost: Box::new(cost),
            params: params.to_vec(),
            sqrt_info,
            loss,
        });
        Ok(self.residuals.len() - 1)
    }

    /// Convenience for diagonal weights.
    pub fn add_residual_weighted(
        &mut self,
        cost: impl CostFunction + 'a,
        params: &[usize],
        weights: &[f64],
        loss: Loss,
    ) -> Result<usize> {
        let info = DMatrix::from_diagonal(&DVector::from_column_slice(weights));
        self.add_residual(cost, params, &info, loss)
    }

    fn gather(&self, values: &[ParamValue], block: &ResidualBlock<'_>, buf: &mut Vec<ParamValue>) {
        buf.clear();
        buf.extend(block.params.iter().map(|&p| values[p]));
    }

    fn whitened(&self, block: &ResidualBlock<'_>, params: &[ParamValue], raw: &mut [f64]) -> Result<DVector<f64>> {
        block.cost.evaluate(params, raw)?;
        Ok(&block.sqrt_info * DVector::from_column_slice(raw))
    }

    fn huber_scale(&self, loss: Loss, config: &SolverConfig) -> Option<f64> {
        match loss {
            Loss::Trivial => None,
            Loss::Huber => Some(config.robust_loss_scale),
            Loss::HuberScaled(k) => Some(k),
        }
    }

    fn total_cost(&self, values: &[ParamValue], config: &SolverConfig) -> Result<f64> {
        let mut buf = Vec::new();
        let mut cost = 0.0;
        for block in &self.residuals {
            self.gather(values, block, &mut buf);
            let mut raw = vec![0.0; block.cost.residual_dim()];
            let r = self.whitened(block, &buf, &mut raw)?;
            let u = r.norm_squared();
            cost += 0.5 * huber_rho(u, self.huber_scale(block.loss, config));
        }
        Ok(cost)
    }

    /// Cost `½ Σ ρ(‖L e‖²)` at the current parameters.
    pub fn cost(&self, config: &SolverConfig) -> Result<f64> {
        let values: Vec<ParamValue> = self.blocks.iter().map(|b| b.value).collect();
        self.total_cost(&values, config)
    }

    /// Raw (unwhitened) residual vector of one block.
    pub fn residual(&self, index: usize) -> Result<Vec<f64>> {
        let block = &self.residuals[index];
        let values: Vec<ParamValue> = self.blocks.iter().map(|b| b.value).collect();
        let mut buf = Vec::new();
        self.gather(&values, block, &mut buf);
        let mut raw = vec![0.0; block.cost.residual_dim()];
        block.cost.evaluate(&buf, &mut raw)?;
        Ok(raw)
    }

    /// Central-difference Jacobians of one residual block, raw (unwhitened).
    pub fn numeric_jacobians(&self, index: usize) -> Result<Vec<DMatrix<f64>>> {
        let block = &self.residuals[index];
        let values: Vec<ParamValue> = self.blocks.iter().map(|b| b.value).collect();
        let mut buf = Vec::new();
        self.gather(&values, block, &mut buf);
        let dim = block.cost.residual_dim();
        let mut out = Vec::new();
        for slot in 0..buf.len() {
            out.push(central_difference(&*block.cost, &mut buf, slot, dim)?);
        }
        Ok(out)
    }

    /// Analytic Jacobians of one block, if its cost function provides them.
    pub fn analytic_jacobians(&self, index: usize) -> Option<Vec<DMatrix<f64>>> {
        let block = &self.residuals[index];
        let values: Vec<ParamValue> = self.blocks.iter().map(|b| b.value).collect();
        let mut buf = Vec::new();
        self.gather(&values, block, &mut buf);
        let dim = block.cost.residual_dim();
        let mut jac: Vec<DMatrix<f64>> = buf.iter().map(|p| DMatrix::zeros(dim, p.tangent_dim())).collect();
        block.cost.jacobians(&buf, &mut jac).then_some(jac)
    }
}

fn huber_rho(u: f64, k: Option<f64>) -> f64 {
    match k {
        Some(k) if u > k * k => 2.0 * k * u.sqrt() - k * k,
        _ => u,
    }
}

fn huber_weight(u: f64, k: Option<f64>) -> f64 {
    match k {
        Some(k) if u > k * k => k / u.sqrt(),
        _ => 1.0,
    }
}

fn step_size(value: &ParamValue, coord: usize) -> f64 {
    match value {
        ParamValue::Pose(p) if coord >= 3 => 1e-6 * p.translation.abs().max().max(1.0),
        ParamValue::Pose(_) | ParamValue::Scale(_) => 1e-6,
        ParamValue::Vector3(v) => 1e-6 * v.abs().max().max(1.0),
        ParamValue::Scalar(x) => 1e-6 * x.abs().max(1.0),
    }
}

fn central_difference(
    cost: &dyn CostFunction,
    buf: &mut [ParamValue],
    slot: usize,
    dim: usize,
) -> Result<DMatrix<f64>> {
    let base = buf[slot];
    let n = base.tangent_dim();
    let mut jac = DMatrix::zeros(dim, n);
    let mut plus = vec![0.0; dim];
    let mut minus = vec![0.0; dim];
    let mut delta = [0.0; 6];
    for c in 0..n {
        let h = step_size(&base, c);
        delta[c] = h;
        buf[slot] = base.retract(&delta[..n]);
        cost.evaluate(buf, &mut plus)?;
        delta[c] = -h;
        buf[slot] = base.retract(&delta[..n]);
        cost.evaluate(buf, &mut minus)?;
        delta[c] = 0.0;
        for r in 0..dim {
            jac[(r, c)] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
    buf[slot] = base;
    Ok(jac)
}

/// In-place envelope Cholesky of a symmetric positive definite matrix
/// (lower triangle is used and overwritten). Returns the smallest pivot
/// relative to the largest, or `None` if a pivot is not positive.
fn envelope_cholesky(a: &mut DMatrix<f64>, first: &[usize]) -> Option<f64> {
    let n = a.nrows();
    let mut min_pivot = f64::INFINITY;
    let mut max_pivot = 0.0f64;
    for i in 0..n {
        let fi = first[i];
        for j in fi..=i {
            let start = fi.max(first[j]);
            let mut sum = a[(i, j)];
            for k in start..j {
                sum -= a[(i, k)] * a[(j, k)];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                let d = sum.sqrt();
                min_pivot = min_pivot.min(sum);
                max_pivot = max_pivot.max(sum);
                a[(i, i)] = d;
            } else {
                a[(i, j)] = sum / a[(j, j)];
            }
        }
    }
    Some(if max_pivot > 0.0 { min_pivot / max_pivot } else { 0.0 })
}

fn envelope_solve(l: &DMatrix<f64>, first: &[usize], b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        let mut s = y[i];
        for k in first[i]..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        y[i] /= l[(i, i)];
        let yi = y[i];
        for k in first[i]..i {
            y[k] -= l[(i, k)] * yi;
        }
    }
    y
}

struct Linearization {
    hessian: DMatrix<f64>,
    gradient: DVector<f64>,
    first: Vec<usize>,
}

/// Maps each free block to its offset in the reduced tangent vector.
fn tangent_layout(blocks: &[ParamBlock]) -> (Vec<Option<usize>>, usize) {
    let mut offsets = Vec::with_capacity(blocks.len());
    let mut n = 0;
    for b in blocks {
        if b.frozen {
            offsets.push(None);
        } else {
            offsets.push(Some(n));
            n += b.value.tangent_dim();
        }
    }
    (offsets, n)
}

impl<'a> Problem<'a> {
    fn linearize(
        &self,
        values: &[ParamValue],
        offsets: &[Option<usize>],
        n: usize,
        config: &SolverConfig,
    ) -> Result<Linearization> {
        let mut hessian = DMatrix::zeros(n, n);
        let mut gradient = DVector::zeros(n);
        let mut first: Vec<usize> = (0..n).collect();
        let mut buf = Vec::new();
        for block in &self.residuals {
            self.gather(values, block, &mut buf);
            let dim = block.cost.residual_dim();
            let mut raw = vec![0.0; dim];
            let r = self.whitened(block, &buf, &mut raw)?;
            let w = huber_weight(r.norm_squared(), self.huber_scale(block.loss, config)).sqrt();
            let r = r * w;

            let mut jacs: Vec<DMatrix<f64>> = buf.iter().map(|p| DMatrix::zeros(dim, p.tangent_dim())).collect();
            let analytic = block.cost.jacobians(&buf, &mut jacs);
            let mut cols: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(buf.len());
            for (slot, &p) in block.params.iter().enumerate() {
                let Some(off) = offsets[p] else { continue };
                let j = if analytic {
                    core::mem::replace(&mut jacs[slot], DMatrix::zeros(0, 0))
                } else {
                    central_difference(&*block.cost, &mut buf, slot, dim)?
                };
                cols.push((off, (&block.sqrt_info * j) * w));
            }
            for (oa, ja) in &cols {
                let g = ja.transpose() * &r;
                for i in 0..g.len() {
                    gradient[oa + i] += g[i];
                }
                for (ob, jb) in &cols {
                    if ob > oa {
                        continue;
                    }
                    let h = ja.transpose() * jb;
                    for i in 0..h.nrows() {
                        for j in 0..h.ncols() {
                            hessian[(oa + i, ob + j)] += h[(i, j)];
                        }
                    }
                    for i in 0..h.nrows() {
                        let row = oa + i;
                        first[row] = first[row].min(*ob);
                    }
                }
            }
        }
        // Mirror the lower triangle so callers may read either half.
        for i in 0..n {
            for j in 0..i {
                hessian[(j, i)] = hessian[(i, j)];
            }
        }
        Ok(Linearization {
            hessian,
            gradient,
            first,
        })
    }

    fn apply_step(&self, values: &[ParamValue], offsets: &[Option<usize>], delta: &DVector<f64>) -> Vec<ParamValue> {
        values
            .iter()
            .zip(offsets)
            .map(|(v, off)| match off {
                Some(o) => v.retract(&delta.as_slice()[*o..*o + v.tangent_dim()]),
                None => *v,
            })
            .collect()
    }

    /// Minimizes the problem in place.
    pub fn solve(&mut self, config: &SolverConfig) -> Result<SolverSummary> {
        let mut values: Vec<ParamValue> = self.blocks.iter().map(|b| b.value).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite initial parameter".into()));
        }
        let initial_cost = self.total_cost(&values, config)?;
        if !initial_cost.is_finite() {
            return Err(Error::Numeric("non-finite residual at the initial point".into()));
        }
        let (offsets, n) = tangent_layout(&self.blocks);
        let mut summary = SolverSummary {
            initial_cost,
            final_cost: initial_cost,
            iterations: 0,
            converged: false,
            cost_history: vec![initial_cost],
            rank_deficient: false,
        };
        if n == 0 || initial_cost == 0.0 {
            summary.converged = true;
            return Ok(summary);
        }

        let mut cost = initial_cost;
        let mut lambda = config.initial_lambda;
        let mut lin = self.linearize(&values, &offsets, n, config)?;
        'outer: while summary.iterations < config.max_iterations {
            if lin.gradient.amax() <= config.gradient_tolerance {
                summary.converged = true;
                break;
            }
            summary.iterations += 1;
            let mut damped = lin.hessian.clone();
            for i in 0..n {
                let d = lin.hessian[(i, i)].clamp(1e-6, 1e32);
                damped[(i, i)] += lambda * d;
            }
            if envelope_cholesky(&mut damped, &lin.first).is_none() {
                lambda *= 10.0;
                if lambda > 1e32 {
                    break;
                }
                continue;
            }
            let delta = -envelope_solve(&damped, &lin.first, &lin.gradient);
            let scale: f64 = values.iter().map(|v| v.magnitude()).sum::<f64>();
            if delta.norm() <= config.parameter_tolerance * (scale + config.parameter_tolerance) {
                summary.converged = true;
                break;
            }
            let candidate = self.apply_step(&values, &offsets, &delta);
            let new_cost = match self.total_cost(&candidate, config) {
                Ok(c) if c.is_finite() && candidate.iter().all(|v| v.is_finite()) => c,
                _ => f64::INFINITY,
            };
            if new_cost < cost {
                let drop = cost - new_cost;
                values = candidate;
                cost = new_cost;
                summary.cost_history.push(cost);
                lambda = (lambda / 10.0).max(1e-15);
                if cost == 0.0 || drop <= config.function_tolerance * cost {
                    summary.converged = true;
                    break 'outer;
                }
                lin = self.linearize(&values, &offsets, n, config)?;
            } else {
                lambda *= 10.0;
                if lambda > 1e32 {
                    // No descent direction left at machine precision.
                    summary.converged = true;
                    break;
                }
            }
        }

        let mut undamped = lin.hessian.clone();
        if !summary.converged || summary.iterations > 0 {
            undamped = self.linearize(&values, &offsets, n, config)?.hessian;
        }
        let first: Vec<usize> = lin.first.clone();
        summary.rank_deficient = match envelope_cholesky(&mut undamped, &first) {
            Some(ratio) => ratio < 1e-14,
            None => true,
        };
        for (b, v) in self.blocks.iter_mut().zip(values) {
            b.value = v;
        }
        summary.final_cost = cost;
        Ok(summary)
    }
}

/// Free-function form of [`Problem::solve`].
pub fn solve_nlls(problem: &mut Problem<'_>, config: &SolverConfig) -> Result<SolverSummary> {
    problem.solve(config)
}
