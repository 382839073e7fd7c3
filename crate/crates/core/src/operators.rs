//! Extended forward/backward operators on the stacked iterate
//! `omega = col(x, z, lambda)` and the preconditioner that makes the backward
//! step computable agent by agent.
//!
//! With `A = blkdiag(A_1..A_N)`, `L = Lap (x) I_m` and `b_bar = col(b_1..b_N)`:
//!
//! ```text
//! forward :  A_bar(omega) = col(F(x), 0, L lambda + b_bar)
//! backward:  B_bar(omega) = N_Omega(x) x {0} x N_{R+}(lambda) + S omega
//!            S   = [[0, 0, A'], [0, 0, L], [-A, -L, 0]]
//!            Phi = [[alpha^-1, 0, -A'], [0, nu^-1, -L], [-A, -L, sigma^-1]]
//! ```
//!
//! `Phi + S` is block lower triangular, so the resolvent step
//! `-A_bar(omega) in B_bar(omega~) + Phi (omega~ - omega)` is solved exactly by
//!
//! ```text
//! x~_i      = proj_Omega_i[ x_i - alpha_i (F_i + A_i' lambda_i) ]
//! z~_i      = z_i - nu_i sum_j w_ij (lambda_i - lambda_j)
//! lambda~_i = proj_R+[ lambda_i + sigma_i ( A_i (2 x~_i - x_i) - b_i
//!                        + sum_j w_ij (2 (z~_i - z~_j) - (z_i - z_j))
//!                        - sum_j w_ij (lambda_i - lambda_j) ) ]
//! ```
//!
//! where the `lambda~` phase consumes the `x~`, `z~` phase of the same call.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::game::GameSpec;
use crate::graph::{agent_column_norm, agent_row_norm, laplacian, DualGraph};

/// Stacked iterate. `z` and `lam` hold one `m`-block per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateState {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub lam: Vec<f64>,
}

impl IterateState {
    pub fn zeros(spec: &GameSpec) -> Self {
        let nm = spec.n_agents() * spec.m();
        Self {
            x: vec![0.0; spec.n()],
            z: vec![0.0; nm],
            lam: vec![0.0; nm],
        }
    }

    pub fn check_dims(&self, spec: &GameSpec) -> Result<()> {
        let nm = spec.n_agents() * spec.m();
        check_len("iterate x", spec.n(), self.x.len())?;
        check_len("iterate z", nm, self.z.len())?;
        check_len("iterate lambda", nm, self.lam.len())
    }

    /// `col(x, z, lambda)` as one vector.
    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.x.len() + self.z.len() + self.lam.len(),
            self.x.iter().chain(&self.z).chain(&self.lam).copied(),
        )
    }

    pub fn from_stacked(spec: &GameSpec, v: &[f64]) -> Result<Self> {
        let n = spec.n();
        let nm = spec.n_agents() * spec.m();
        check_len("stacked iterate", n + 2 * nm, v.len())?;
        Ok(Self {
            x: v[..n].to_vec(),
            z: v[n..n + nm].to_vec(),
            lam: v[n + nm..].to_vec(),
        })
    }

    pub fn norm(&self) -> f64 {
        self.x
            .iter()
            .chain(&self.z)
            .chain(&self.lam)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        fn sq(a: &[f64], b: &[f64]) -> f64 {
            a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
        }
        (sq(&self.x, &other.x) + sq(&self.z, &other.z) + sq(&self.lam, &other.lam)).sqrt()
    }

    /// `(1 - delta) self + delta other`.
    pub fn damped_toward(&self, other: &Self, delta: f64) -> Self {
        fn mix(a: &[f64], b: &[f64], delta: f64) -> Vec<f64> {
            a.iter().zip(b).map(|(&p, &q)| (1.0 - delta) * p + delta * q).collect()
        }
        Self {
            x: mix(&self.x, &other.x, delta),
            z: mix(&self.z, &other.z, delta),
            lam: mix(&self.lam, &other.lam, delta),
        }
    }

    pub fn agent_dual(&self, i: usize, m: usize) -> &[f64] {
        &self.lam[i * m..(i + 1) * m]
    }

    /// Average of the per-agent dual blocks.
    pub fn mean_dual(&self, n_agents: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; m];
        for i in 0..n_agents {
            for (o, v) in out.iter_mut().zip(self.agent_dual(i, m)) {
                *o += v / n_agents as f64;
            }
        }
        out
    }
}

/// Per-agent step sizes `alpha_i`, `nu_i`, `sigma_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSizes {
    pub alpha: Vec<f64>,
    pub nu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl StepSizes {
    pub fn uniform(n_agents: usize, alpha: f64, nu: f64, sigma: f64) -> Self {
        Self {
            alpha: vec![alpha; n_agents],
            nu: vec![nu; n_agents],
            sigma: vec![sigma; n_agents],
        }
    }

    pub fn from_bounds(bounds: &crate::graph::StepSizeBounds) -> Self {
        Self {
            alpha: bounds.alpha_max.clone(),
            nu: bounds.nu_max.clone(),
            sigma: bounds.sigma_max.clone(),
        }
    }

    pub fn validate(&self, n_agents: usize) -> Result<()> {
        check_len("alpha", n_agents, self.alpha.len())?;
        check_len("nu", n_agents, self.nu.len())?;
        check_len("sigma", n_agents, self.sigma.len())?;
        let all = self.alpha.iter().chain(&self.nu).chain(&self.sigma);
        if all.into_iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("step sizes must be positive and finite".into()));
        }
        Ok(())
    }
}

/// How the per-agent updates inside one backward step are scheduled.
/// Both produce bit-identical results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Sequential,
    PhaseParallel,
}

/// Exact pseudo-gradient `F(x) = col_i E[grad_i J_i(x)]`.
pub fn pseudo_gradient(spec: &GameSpec, x: &[f64]) -> Result<Vec<f64>> {
    check_len("pseudo_gradient", spec.n(), x.len())?;
    let supply = spec.total_supply(x);
    let mut out = vec![0.0; spec.n()];
    for i in 0..spec.n_agents() {
        spec.gradient_with_slope_into(i, x, &supply, &spec.price().slope_mean, &mut out[spec.block(i)]);
    }
    Ok(out)
}

/// The pseudo-gradient of the benchmark family is affine: `F(x) = Q x + q`.
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineMap {
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x + &self.offset
    }
}

/// Assembles `Q` and `q` column by column from `F`.
pub fn pseudo_gradient_affine(spec: &GameSpec) -> AffineMap {
    let n = spec.n();
    let zero = vec![0.0; n];
    let offset = DVector::from_vec(pseudo_gradient(spec, &zero).expect("dims"));
    let mut matrix = DMatrix::zeros(n, n);
    let mut e = zero;
    for k in 0..n {
        e[k] = 1.0;
        let col = pseudo_gradient(spec, &e).expect("dims");
        for (r, v) in col.into_iter().enumerate() {
            matrix[(r, k)] = v - offset[r];
        }
        e[k] = 0.0;
    }
    AffineMap { matrix, offset }
}

/// Strong-monotonicity and Lipschitz constants of an affine map:
/// smallest eigenvalue of the symmetric part and spectral norm.
pub fn monotonicity_constants(map: &AffineMap) -> (f64, f64) {
    let q = &map.matrix;
    let sym = (q + q.transpose()) * 0.5;
    let eta = SymmetricEigen::new(sym).eigenvalues.min();
    let ell = q.clone().svd(false, false).singular_values.max();
    (eta, ell)
}

/// Sampling estimate of `(eta, ell)` for a map that is not known to be affine:
/// the smallest observed `<F(u)-F(v), u-v> / |u-v|^2` and the largest observed
/// `|F(u)-F(v)| / |u-v|` over Gaussian pairs. The estimate of `eta` is an
/// upper bound and that of `ell` a lower bound on the true constants.
pub fn estimate_monotonicity<F>(f: F, dim: usize, trials: usize, seed: u64) -> (f64, f64)
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eta = f64::INFINITY;
    let mut ell: f64 = 0.0;
    for _ in 0..trials {
        let u: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let (fu, fv) = (f(&u), f(&v));
        let mut dot = 0.0;
        let mut dd = 0.0;
        let mut df = 0.0;
        for k in 0..dim {
            let d = u[k] - v[k];
            let g = fu[k] - fv[k];
            dot += g * d;
            dd += d * d;
            df += g * g;
        }
        if dd == 0.0 {
            continue;
        }
        eta = eta.min(dot / dd);
        ell = ell.max((df / dd).sqrt());
    }
    (eta, ell)
}

/// Communication structure shared by the forward and backward evaluations.
#[derive(Debug, Clone)]
pub struct Network {
    neighbours: Vec<Vec<(usize, f64)>>,
    m: usize,
}

impl Network {
    pub fn new(spec: &GameSpec, g: &DualGraph) -> Result<Self> {
        check_len("graph size", spec.n_agents(), g.n_agents())?;
        Ok(Self {
            neighbours: g.neighbours(),
            m: spec.m(),
        })
    }

    /// `sum_j w_ij (v_i - v_j)` for agent `i` on an `m`-blocked vector.
    fn laplacian_row_into(&self, i: usize, v: &[f64], out: &mut [f64]) {
        let m = self.m;
        let vi = &v[i * m..(i + 1) * m];
        out.fill(0.0);
        for &(j, w) in &self.neighbours[i] {
            let vj = &v[j * m..(j + 1) * m];
            for c in 0..m {
                out[c] += w * (vi[c] - vj[c]);
            }
        }
    }

    /// `(L (x) I_m) v`.
    pub fn laplacian_apply(&self, v: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut out = vec![0.0; v.len()];
        for (i, chunk) in out.chunks_mut(m.max(1)).enumerate().take(self.neighbours.len()) {
            self.laplacian_row_into(i, v, chunk);
        }
        out
    }

    /// Largest `|lambda_i - lambda_j|_inf` over edges.
    pub fn consensus_gap(&self, lam: &[f64]) -> f64 {
        let m = self.m;
        let mut gap: f64 = 0.0;
        for (i, nbrs) in self.neighbours.iter().enumerate() {
            for &(j, _) in nbrs.iter().filter(|(j, _)| *j > i) {
                for c in 0..m {
                    gap = gap.max((lam[i * m + c] - lam[j * m + c]).abs());
                }
            }
        }
        gap
    }
}

/// `A_bar(omega)` with `fhat` in place of `F(x)`:
/// `col(fhat, 0, (L (x) I_m) lambda + b_bar)`.
pub fn forward_apply(spec: &GameSpec, g: &DualGraph, s: &IterateState, fhat: &[f64]) -> Result<Vec<f64>> {
    s.check_dims(spec)?;
    check_len("forward_apply gradient", spec.n(), fhat.len())?;
    let net = Network::new(spec, g)?;
    let m = spec.m();
    let mut out = Vec::with_capacity(spec.n() + 2 * s.lam.len());
    out.extend_from_slice(fhat);
    out.extend(std::iter::repeat_n(0.0, s.z.len()));
    let lap = net.laplacian_apply(&s.lam);
    for i in 0..spec.n_agents() {
        let b = &spec.coupling().slices[i];
        out.extend((0..m).map(|c| lap[i * m + c] + b[c]));
    }
    Ok(out)
}

/// Exact solution of the preconditioned resolvent step for one iterate and
/// one gradient estimate.
pub fn backward_step(
    spec: &GameSpec,
    g: &DualGraph,
    steps: &StepSizes,
    s: &IterateState,
    fhat: &[f64],
) -> Result<IterateState> {
    steps.validate(spec.n_agents())?;
    s.check_dims(spec)?;
    check_len("backward_step gradient", spec.n(), fhat.len())?;
    let net = Network::new(spec, g)?;
    Ok(backward_step_with(spec, &net, steps, s, fhat, Execution::Sequential))
}

/// Primal and auxiliary phase for agent `i`.
#[allow(clippy::too_many_arguments)]
fn primal_phase(
    spec: &GameSpec,
    net: &Network,
    steps: &StepSizes,
    s: &IterateState,
    fhat: &[f64],
    i: usize,
    x_out: &mut [f64],
    z_out: &mut [f64],
) {
    let m = spec.m();
    let block = spec.block(i);
    let agent = spec.agent(i);
    let alpha = steps.alpha[i];
    let lam_i = s.agent_dual(i, m);
    for (k, xo) in x_out.iter_mut().enumerate() {
        let dual = agent.markets[k].map_or(0.0, |j| lam_i[j]);
        *xo = s.x[block.start + k] - alpha * (fhat[block.start + k] + dual);
    }
    agent.omega.project_in_place(x_out);

    net.laplacian_row_into(i, &s.lam, z_out);
    let nu = steps.nu[i];
    for (c, zo) in z_out.iter_mut().enumerate() {
        *zo = s.z[i * m + c] - nu * *zo;
    }
}

/// Dual phase for agent `i`; reads the full `x~`, `z~` of the current call.
#[allow(clippy::too_many_arguments)]
fn dual_phase(
    spec: &GameSpec,
    net: &Network,
    steps: &StepSizes,
    s: &IterateState,
    x_new: &[f64],
    z_new: &[f64],
    i: usize,
    lam_out: &mut [f64],
) {
    let m = spec.m();
    let block = spec.block(i);
    let sigma = steps.sigma[i];
    let b_i = &spec.coupling().slices[i];

    let mut extrapolated = vec![0.0; m];
    for (k, col) in spec.agent(i).markets.iter().enumerate() {
        if let Some(j) = col {
            extrapolated[*j] += 2.0 * x_new[block.start + k] - s.x[block.start + k];
        }
    }
    let zi_new = &z_new[i * m..(i + 1) * m];
    let zi = &s.z[i * m..(i + 1) * m];
    let li = s.agent_dual(i, m);
    let mut coupling = vec![0.0; m];
    for &(j, w) in &net.neighbours[i] {
        let zj_new = &z_new[j * m..(j + 1) * m];
        let zj = &s.z[j * m..(j + 1) * m];
        let lj = s.agent_dual(j, m);
        for c in 0..m {
            coupling[c] += w * (2.0 * (zi_new[c] - zj_new[c]) - (zi[c] - zj[c]) - (li[c] - lj[c]));
        }
    }
    for c in 0..m {
        let v = li[c] + sigma * (extrapolated[c] - b_i[c] + coupling[c]);
        lam_out[c] = v.max(0.0);
    }
}

pub(crate) fn backward_step_with(
    spec: &GameSpec,
    net: &Network,
    steps: &StepSizes,
    s: &IterateState,
    fhat: &[f64],
    exec: Execution,
) -> IterateState {
    let m = spec.m();
    let n_agents = spec.n_agents();
    let mut x_new = vec![0.0; spec.n()];
    let mut z_new = vec![0.0; n_agents * m];
    let mut lam_new = vec![0.0; n_agents * m];

    // Split the stacked primal vector into per-agent mutable blocks.
    let mut x_blocks: Vec<&mut [f64]> = Vec::with_capacity(n_agents);
    let mut rest: &mut [f64] = &mut x_new;
    for i in 0..n_agents {
        let (head, tail) = rest.split_at_mut(spec.agent(i).dim());
        x_blocks.push(head);
        rest = tail;
    }
    let z_blocks = z_new.chunks_mut(m.max(1)).take(n_agents);

    match exec {
        Execution::Sequential => {
            for (i, (xb, zb)) in x_blocks.into_iter().zip(z_blocks).enumerate() {
                primal_phase(spec, net, steps, s, fhat, i, xb, zb);
            }
        }
        Execution::PhaseParallel => {
            let jobs: Vec<_> = x_blocks.into_iter().zip(z_blocks).enumerate().collect();
            jobs.into_par_iter()
                .for_each(|(i, (xb, zb))| primal_phase(spec, net, steps, s, fhat, i, xb, zb));
        }
    }

    let lam_blocks = lam_new.chunks_mut(m.max(1)).take(n_agents);
    match exec {
        Execution::Sequential => {
            for (i, lb) in lam_blocks.enumerate() {
                dual_phase(spec, net, steps, s, &x_new, &z_new, i, lb);
            }
        }
        Execution::PhaseParallel => {
            lam_blocks
                .enumerate()
                .collect::<Vec<_>>()
                .into_par_iter()
                .for_each(|(i, lb)| dual_phase(spec, net, steps, s, &x_new, &z_new, i, lb));
        }
    }

    IterateState {
        x: x_new,
        z: z_new,
        lam: lam_new,
    }
}

/// `blkdiag(A_1, ..., A_N)` as a dense `(N m) x n` matrix.
pub fn block_coupling_matrix(spec: &GameSpec) -> DMatrix<f64> {
    let m = spec.m();
    let mut a = DMatrix::zeros(spec.n_agents() * m, spec.n());
    for i in 0..spec.n_agents() {
        let block = spec.block(i);
        for (k, col) in spec.agent(i).markets.iter().enumerate() {
            if let Some(j) = col {
                a[(i * m + j, block.start + k)] = 1.0;
            }
        }
    }
    a
}

/// `A = [A_1, ..., A_N]` as a dense `m x n` matrix.
pub fn coupling_matrix(spec: &GameSpec) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(spec.m(), spec.n());
    for i in 0..spec.n_agents() {
        let block = spec.block(i);
        for (k, col) in spec.agent(i).markets.iter().enumerate() {
            if let Some(j) = col {
                a[(*j, block.start + k)] = 1.0;
            }
        }
    }
    a
}

/// `L (x) I_m`.
pub fn stacked_laplacian(g: &DualGraph, m: usize) -> DMatrix<f64> {
    laplacian(g).kronecker(&DMatrix::<f64>::identity(m, m))
}

/// Skew-symmetric linear part of the backward operator.
pub fn skew_coupling_matrix(spec: &GameSpec, g: &DualGraph) -> DMatrix<f64> {
    let n = spec.n();
    let nm = spec.n_agents() * spec.m();
    let a = block_coupling_matrix(spec);
    let l = stacked_laplacian(g, spec.m());
    let mut s = DMatrix::zeros(n + 2 * nm, n + 2 * nm);
    s.view_mut((0, n + nm), (n, nm)).copy_from(&a.transpose());
    s.view_mut((n, n + nm), (nm, nm)).copy_from(&l);
    s.view_mut((n + nm, 0), (nm, n)).copy_from(&(-&a));
    s.view_mut((n + nm, n), (nm, nm)).copy_from(&(-&l));
    s
}

/// Dense preconditioner, materialized only for diagnostics.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    pub matrix: DMatrix<f64>,
}

impl Preconditioner {
    /// Builds `Phi` without checking diagonal dominance.
    pub fn build(spec: &GameSpec, g: &DualGraph, steps: &StepSizes) -> Result<Self> {
        steps.validate(spec.n_agents())?;
        check_len("graph size", spec.n_agents(), g.n_agents())?;
        let n = spec.n();
        let m = spec.m();
        let nm = spec.n_agents() * m;
        let a = block_coupling_matrix(spec);
        let l = stacked_laplacian(g, m);
        let mut phi = DMatrix::zeros(n + 2 * nm, n + 2 * nm);
        for i in 0..spec.n_agents() {
            for k in spec.block(i) {
                phi[(k, k)] = 1.0 / steps.alpha[i];
            }
            for c in 0..m {
                phi[(n + i * m + c, n + i * m + c)] = 1.0 / steps.nu[i];
                phi[(n + nm + i * m + c, n + nm + i * m + c)] = 1.0 / steps.sigma[i];
            }
        }
        let at = -a.transpose();
        phi.view_mut((0, n + nm), (n, nm)).copy_from(&at);
        phi.view_mut((n + nm, 0), (nm, n)).copy_from(&(-&a));
        phi.view_mut((n, n + nm), (nm, nm)).copy_from(&(-&l));
        phi.view_mut((n + nm, n), (nm, nm)).copy_from(&(-&l));
        Ok(Self { matrix: phi })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Diagonal entry minus the absolute off-diagonal row sum, per row.
    pub fn row_margins(&self) -> Vec<f64> {
        self.matrix
            .row_iter()
            .enumerate()
            .map(|(r, row)| {
                let off: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|(c, _)| *c != r)
                    .map(|(_, v)| v.abs())
                    .sum();
                row[r] - off
            })
            .collect()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.matrix.clone()).eigenvalues.min()
    }

    pub fn max_asymmetry(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).amax()
    }

    /// `Phi^-1 v` via Cholesky; `None` when `Phi` is not positive definite.
    pub fn solve(&self, v: &DVector<f64>) -> Option<DVector<f64>> {
        self.matrix.clone().cholesky().map(|c| c.solve(v))
    }
}

/// Builds `Phi` and checks that every row is diagonally dominant with margin
/// at least `min_margin`, which holds whenever the step sizes respect the
/// bounds computed with `tau = min_margin`.
pub fn preconditioner_assemble(
    spec: &GameSpec,
    g: &DualGraph,
    steps: &StepSizes,
    min_margin: f64,
) -> Result<Preconditioner> {
    let phi = Preconditioner::build(spec, g, steps)?;
    let slack = 1e-9 * min_margin.abs().max(1.0);
    let rows: Vec<usize> = phi
        .row_margins()
        .into_iter()
        .enumerate()
        .filter(|(_, margin)| *margin < min_margin - slack)
        .map(|(r, _)| r)
        .collect();
    if rows.is_empty() {
        Ok(phi)
    } else {
        Err(Error::StepBounds { rows })
    }
}

/// Row-wise diagonal-dominance margins predicted from the step sizes alone:
/// `1/alpha_i - colsum(A_i)`, `1/nu_i - 2 d_i`, `1/sigma_i - rowsum(A_i) - 2 d_i`.
/// Returns the smallest of them.
pub fn predicted_margin(spec: &GameSpec, g: &DualGraph, steps: &StepSizes) -> f64 {
    let (deg, _) = crate::graph::degrees(g);
    (0..spec.n_agents())
        .flat_map(|i| {
            [
                1.0 / steps.alpha[i] - agent_column_norm(spec, i),
                1.0 / steps.nu[i] - 2.0 * deg[i],
                1.0 / steps.sigma[i] - agent_row_norm(spec, i) - 2.0 * deg[i],
            ]
        })
        .fold(f64::INFINITY, f64::min)
}

/// `A_bar` in dense affine form: `A_bar(omega) = M omega + c`.
pub fn forward_affine(spec: &GameSpec, g: &DualGraph) -> AffineMap {
    let n = spec.n();
    let nm = spec.n_agents() * spec.m();
    let f = pseudo_gradient_affine(spec);
    let l = stacked_laplacian(g, spec.m());
    let mut matrix = DMatrix::zeros(n + 2 * nm, n + 2 * nm);
    matrix.view_mut((0, 0), (n, n)).copy_from(&f.matrix);
    matrix.view_mut((n + nm, n + nm), (nm, nm)).copy_from(&l);
    let mut offset = DVector::zeros(n + 2 * nm);
    offset.rows_mut(0, n).copy_from(&f.offset);
    for (i, b) in spec.coupling().slices.iter().enumerate() {
        for (c, v) in b.iter().enumerate() {
            offset[n + nm + i * spec.m() + c] = *v;
        }
    }
    AffineMap { matrix, offset }
}

/// Cocoercivity ratio of `Phi^-1 A_bar` in the `Phi` norm for one pair:
/// `<A_bar u - A_bar v, u - v> / <Phi^-1 (A_bar u - A_bar v), A_bar u - A_bar v>`.
/// `None` for degenerate pairs with `A_bar u = A_bar v`.
pub fn cocoercivity_ratio(
    phi: &Preconditioner,
    forward: &AffineMap,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> Option<f64> {
    let diff = u - v;
    let delta = &forward.matrix * &diff;
    let scale = delta.norm();
    if scale <= f64::EPSILON * (u.norm() + v.norm()).max(1.0) {
        return None;
    }
    let solved = phi.solve(&delta)?;
    Some(delta.dot(&diff) / solved.dot(&delta))
}

/// Smallest cocoercivity ratio over `trials` random Gaussian pairs, using the
/// exact forward operator. Returns `+inf` when every pair was degenerate.
pub fn cocoercivity_probe(spec: &GameSpec, g: &DualGraph, steps: &StepSizes, trials: usize, seed: u64) -> Result<f64> {
    let phi = Preconditioner::build(spec, g, steps)?;
    let chol = phi
        .matrix
        .clone()
        .cholesky()
        .ok_or(Error::Degenerate("preconditioner is not positive definite"))?;
    let forward = forward_affine(spec, g);
    let dim = phi.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..trials {
        let u = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let diff = u - v;
        let delta = &forward.matrix * &diff;
        if delta.norm() <= f64::EPSILON * diff.norm() {
            continue;
        }
        let solved = chol.solve(&delta);
        worst = worst.min(delta.dot(&diff) / solved.dot(&delta));
    }
    Ok(worst)
}
