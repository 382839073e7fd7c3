//! Independent correctness checks and a centralized reference solver.
//!
//! Nothing here touches the distributed iteration: the KKT residuals use the
//! closed-form expected gradient directly, the projection onto the collective
//! feasible set is solved through its dual, and the reference equilibrium
//! comes from a projected extragradient method on the primal-dual KKT system.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::game::GameSpec;
use crate::operators::pseudo_gradient;

/// KKT residual of a candidate variational equilibrium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    /// Per agent: `|x_i - proj_Omega_i(x_i - (grad_i + A_i' lambda_i))|`.
    pub stationarity: Vec<f64>,
    /// `max(0, max_j (A x - b)_j)`.
    pub primal_violation: f64,
    /// `|lambda' (A x - b)|`, maximized over agents for per-agent duals.
    pub complementarity: f64,
    /// Largest componentwise spread between agents' duals; 0 for a common dual.
    pub consensus: f64,
}

impl KktResidual {
    pub fn max_stationarity(&self) -> f64 {
        self.stationarity.iter().copied().fold(0.0, f64::max)
    }

    /// Largest of all fields.
    pub fn max(&self) -> f64 {
        self.max_stationarity()
            .max(self.primal_violation)
            .max(self.complementarity)
            .max(self.consensus)
    }
}

fn stationarity_into(spec: &GameSpec, x: &[f64], grad: &[f64], lam: &dyn Fn(usize) -> Vec<f64>) -> Vec<f64> {
    (0..spec.n_agents())
        .map(|i| {
            let block = spec.block(i);
            let agent = spec.agent(i);
            let mut dual = vec![0.0; agent.dim()];
            spec.agent_transpose_into(i, &lam(i), &mut dual);
            let mut step: Vec<f64> = block.clone().zip(&dual).map(|(k, d)| x[k] - (grad[k] + d)).collect();
            agent.omega.project_in_place(&mut step);
            block
                .zip(&step)
                .map(|(k, p)| (x[k] - p) * (x[k] - p))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn slack(spec: &GameSpec, x: &[f64]) -> Vec<f64> {
    spec.total_supply(x)
        .into_iter()
        .zip(&spec.coupling().cap)
        .map(|(ax, b)| ax - b)
        .collect()
}

fn check_dual(lam: &[f64], m: usize) -> Result<()> {
    check_len("dual", m, lam.len())?;
    if lam.iter().any(|&l| !(l >= 0.0)) {
        return Err(Error::Config("dual variables must be nonnegative".into()));
    }
    Ok(())
}

/// KKT residual with one multiplier shared by all agents.
pub fn kkt_residual(spec: &GameSpec, x: &[f64], lam_common: &[f64]) -> Result<KktResidual> {
    check_len("kkt_residual decision", spec.n(), x.len())?;
    check_dual(lam_common, spec.m())?;
    let grad = pseudo_gradient(spec, x)?;
    let stationarity = stationarity_into(spec, x, &grad, &|_| lam_common.to_vec());
    let s = slack(spec, x);
    Ok(KktResidual {
        stationarity,
        primal_violation: s.iter().copied().fold(0.0, f64::max),
        complementarity: lam_common.iter().zip(&s).map(|(l, v)| l * v).sum::<f64>().abs(),
        consensus: 0.0,
    })
}

/// KKT residual where agent `i` uses its own multiplier `lam[i]`.
pub fn per_agent_kkt_residual(spec: &GameSpec, x: &[f64], lam: &[Vec<f64>]) -> Result<KktResidual> {
    check_len("kkt_residual decision", spec.n(), x.len())?;
    check_len("per-agent duals", spec.n_agents(), lam.len())?;
    for l in lam {
        check_dual(l, spec.m())?;
    }
    let grad = pseudo_gradient(spec, x)?;
    let stationarity = stationarity_into(spec, x, &grad, &|i| lam[i].clone());
    let s = slack(spec, x);
    let complementarity = lam
        .iter()
        .map(|l| l.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>().abs())
        .fold(0.0, f64::max);
    let mut consensus: f64 = 0.0;
    for c in 0..spec.m() {
        let (lo, hi) = lam.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), l| {
            (lo.min(l[c]), hi.max(l[c]))
        });
        consensus = consensus.max(hi - lo);
    }
    Ok(KktResidual {
        stationarity,
        primal_violation: s.iter().copied().fold(0.0, f64::max),
        complementarity,
        consensus,
    })
}

/// Euclidean projection onto `X = Omega cap {A y <= b}`.
///
/// Every column of `A` selects at most one market, so the Lagrangian
/// `1/2 |y - v|^2 + mu' (A y - b)` separates by market and each market's
/// dual variable is the root of a monotone piecewise-linear function, found
/// by bisection to machine precision.
pub fn project_feasible(spec: &GameSpec, v: &[f64]) -> Result<Vec<f64>> {
    check_len("project_feasible", spec.n(), v.len())?;
    let m = spec.m();
    let mut members: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); m];
    let mut y = v.to_vec();
    for i in 0..spec.n_agents() {
        let agent = spec.agent(i);
        for (k, col) in spec.block(i).zip(&agent.markets) {
            let (lo, hi) = (
                agent.omega.lower[k - spec.block(i).start],
                agent.omega.upper[k - spec.block(i).start],
            );
            match col {
                Some(j) => members[*j].push((k, lo, hi)),
                None => y[k] = v[k].clamp(lo, hi),
            }
        }
    }
    let cap = &spec.coupling().cap;
    for (j, cols) in members.iter().enumerate() {
        let supply = |mu: f64| -> f64 { cols.iter().map(|&(k, lo, hi)| (v[k] - mu).clamp(lo, hi)).sum() };
        let floor: f64 = cols.iter().map(|&(_, lo, _)| lo).sum();
        if floor > cap[j] + 1e-12 * cap[j].abs().max(1.0) {
            return Err(Error::Instance(format!(
                "projection subproblem infeasible: market {j} lower bounds exceed capacity"
            )));
        }
        let mut mu = 0.0;
        if supply(0.0) > cap[j] {
            // supply(mu) is nonincreasing; bracket the root then bisect.
            let mut hi = 1.0;
            while supply(hi) > cap[j] {
                hi *= 2.0;
            }
            let mut lo = 0.0;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if supply(mid) > cap[j] {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            mu = hi;
        }
        for &(k, lo, hi) in cols {
            y[k] = (v[k] - mu).clamp(lo, hi);
        }
    }
    Ok(y)
}

/// `|x - proj_X(x - step F(x))|`, zero exactly at solutions of the
/// variational inequality.
pub fn natural_residual(spec: &GameSpec, x: &[f64], step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("natural residual step {step} must be positive")));
    }
    let f = pseudo_gradient(spec, x)?;
    let moved: Vec<f64> = x.iter().zip(&f).map(|(a, g)| a - step * g).collect();
    let p = project_feasible(spec, &moved)?;
    Ok(x.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// `|x - x*| / |x*|`.
pub fn normalized_distance(x: &[f64], x_star: &[f64]) -> Result<f64> {
    check_len("normalized_distance", x_star.len(), x.len())?;
    let denom = x_star.iter().map(|v| v * v).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(Error::Degenerate("reference solution is zero"));
    }
    Ok(x.iter().zip(x_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub x_star: Vec<f64>,
    pub lam_star: Vec<f64>,
    pub residual: KktResidual,
    pub method: String,
    pub iterations: u64,
}

/// Target KKT residual of the reference solver.
pub const ORACLE_TOL: f64 = 1e-10;
const ORACLE_MAX_ITERS: u64 = 5_000_000;

/// Largest singular value of `[[Q, A'], [-A, 0]]` by power iteration on the
/// normal matrix, using only matrix-vector products through `F`.
fn kkt_operator_norm(spec: &GameSpec) -> f64 {
    let n = spec.n();
    let m = spec.m();
    let f0 = pseudo_gradient(spec, &vec![0.0; n]).expect("dims");
    let apply = |x: &[f64], l: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let fx = pseudo_gradient(spec, x).expect("dims");
        let mut top: Vec<f64> = fx.iter().zip(&f0).map(|(a, b)| a - b).collect();
        for i in 0..spec.n_agents() {
            let mut d = vec![0.0; spec.agent(i).dim()];
            spec.agent_transpose_into(i, l, &mut d);
            for (t, dv) in top[spec.block(i)].iter_mut().zip(d) {
                *t += dv;
            }
        }
        let bottom: Vec<f64> = spec.total_supply(x).into_iter().map(|v| -v).collect();
        (top, bottom)
    };
    let apply_t = |x: &[f64], l: &[f64]| -> (Vec<f64>, Vec<f64>) {
        // transpose of [[Q, A'], [-A, 0]] is [[Q', -A'], [A, 0]]; Q is symmetric here
        let fx = pseudo_gradient(spec, x).expect("dims");
        let mut top: Vec<f64> = fx.iter().zip(&f0).map(|(a, b)| a - b).collect();
        for i in 0..spec.n_agents() {
            let mut d = vec![0.0; spec.agent(i).dim()];
            spec.agent_transpose_into(i, l, &mut d);
            for (t, dv) in top[spec.block(i)].iter_mut().zip(d) {
                *t -= dv;
            }
        }
        (top, spec.total_supply(x))
    };
    let mut x = vec![1.0; n];
    let mut l = vec![1.0; m];
    let mut est = 0.0;
    for _ in 0..200 {
        let (ax, al) = apply(&x, &l);
        let (bx, bl) = apply_t(&ax, &al);
        let norm = bx.iter().chain(&bl).map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        est = norm.sqrt();
        x = bx.into_iter().map(|v| v / norm).collect();
        l = bl.into_iter().map(|v| v / norm).collect();
    }
    est
}

/// Centralized reference equilibrium from the lower corner of the boxes and
/// a zero multiplier.
pub fn solve_reference(spec: &GameSpec) -> Result<ReferenceSolution> {
    solve_reference_from(spec, &spec.lower_corner(), &vec![0.0; spec.m()])
}

/// Projected extragradient on the monotone KKT operator
/// `T(x, lambda) = (F(x) + A' lambda, b - A x)` over `Omega x R+^m`.
pub fn solve_reference_from(spec: &GameSpec, x0: &[f64], lam0: &[f64]) -> Result<ReferenceSolution> {
    check_len("reference start x", spec.n(), x0.len())?;
    check_len("reference start lambda", spec.m(), lam0.len())?;
    let norm = kkt_operator_norm(spec);
    // the power-iteration estimate approaches the norm from below
    let gamma = 0.9 / (1.05 * norm).max(1e-12);
    let cap = spec.coupling().cap.clone();

    let field = |x: &[f64], l: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut gx = pseudo_gradient(spec, x).expect("dims");
        for i in 0..spec.n_agents() {
            let mut d = vec![0.0; spec.agent(i).dim()];
            spec.agent_transpose_into(i, l, &mut d);
            for (g, dv) in gx[spec.block(i)].iter_mut().zip(d) {
                *g += dv;
            }
        }
        let gl: Vec<f64> = spec.total_supply(x).iter().zip(&cap).map(|(ax, b)| b - ax).collect();
        (gx, gl)
    };
    let project = |x: &mut [f64], l: &mut [f64]| {
        for i in 0..spec.n_agents() {
            spec.agent(i).omega.project_in_place(&mut x[spec.block(i)]);
        }
        l.iter_mut().for_each(|v| *v = v.max(0.0));
    };

    let mut x = x0.to_vec();
    let mut lam = lam0.to_vec();
    project(&mut x, &mut lam);
    let mut residual = kkt_residual(spec, &x, &lam)?;
    let mut iters = 0;
    while residual.max() > ORACLE_TOL {
        if iters >= ORACLE_MAX_ITERS {
            return Err(Error::OracleDiverged {
                iters: iters as usize,
                residual: residual.max(),
            });
        }
        for _ in 0..50 {
            let (gx, gl) = field(&x, &lam);
            let mut xb: Vec<f64> = x.iter().zip(&gx).map(|(a, g)| a - gamma * g).collect();
            let mut lb: Vec<f64> = lam.iter().zip(&gl).map(|(a, g)| a - gamma * g).collect();
            project(&mut xb, &mut lb);
            let (hx, hl) = field(&xb, &lb);
            for (a, g) in x.iter_mut().zip(&hx) {
                *a -= gamma * g;
            }
            for (a, g) in lam.iter_mut().zip(&hl) {
                *a -= gamma * g;
            }
            project(&mut x, &mut lam);
            iters += 1;
        }
        residual = kkt_residual(spec, &x, &lam)?;
    }
    Ok(ReferenceSolution {
        x_star: x,
        lam_star: lam,
        residual,
        method: "projected-extragradient-kkt".into(),
        iterations: iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{AgentSpec, BoxSet, CouplingConstraints, PriceModel};
    use approx::assert_abs_diff_eq;

    fn single(pi: f64, g: f64, lo: f64, hi: f64) -> GameSpec {
        GameSpec::new(
            vec![AgentSpec {
                omega: BoxSet::new(vec![lo], vec![hi]).unwrap(),
                quad_coeff: pi,
                lin_coeff: vec![g],
                markets: vec![None],
            }],
            CouplingConstraints::equal_split(vec![1.0], 1),
            PriceModel {
                base_price: vec![0.0],
                slope_mean: vec![1.0],
                slope_std: vec![0.0],
            },
        )
        .unwrap()
    }

    fn one_market(n: usize, cap: f64, base: f64) -> GameSpec {
        let agent = AgentSpec {
            omega: BoxSet::new(vec![0.0], vec![2.0]).unwrap(),
            quad_coeff: 1.0,
            lin_coeff: vec![0.2],
            markets: vec![Some(0)],
        };
        GameSpec::new(
            vec![agent; n],
            CouplingConstraints::equal_split(vec![cap], n),
            PriceModel {
                base_price: vec![base],
                slope_mean: vec![0.8],
                slope_std: vec![0.0],
            },
        )
        .unwrap()
    }

    #[test]
    fn interior_optimum_has_zero_residual() {
        let spec = single(2.0, 1.0, -5.0, 5.0);
        let r = kkt_residual(&spec, &[-0.25], &[0.0]).unwrap();
        assert!(r.max() <= 1e-12);
    }

    #[test]
    fn primal_violation_by_construction() {
        let spec = one_market(2, 1.0, 3.0);
        let r = kkt_residual(&spec, &[0.75, 0.75], &[0.0]).unwrap();
        assert_abs_diff_eq!(r.primal_violation, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn rejects_negative_dual() {
        let spec = one_market(2, 1.0, 3.0);
        assert!(kkt_residual(&spec, &[0.0, 0.0], &[-1.0]).is_err());
    }

    #[test]
    fn equal_duals_agree_with_common_dual() {
        let spec = one_market(3, 1.0, 3.0);
        let x = [0.2, 0.4, 0.1];
        let common = kkt_residual(&spec, &x, &[0.3]).unwrap();
        let per = per_agent_kkt_residual(&spec, &x, &vec![vec![0.3]; 3]).unwrap();
        assert_eq!(common, per);
        let spread = per_agent_kkt_residual(&spec, &x, &[vec![0.3], vec![0.5], vec![0.3]]).unwrap();
        assert_abs_diff_eq!(spread.consensus, 0.2, epsilon = 1e-15);
    }

    #[test]
    fn reference_of_decoupled_agent_is_clipped_minimizer() {
        let spec = single(2.0, 1.0, -5.0, 5.0);
        let sol = solve_reference(&spec).unwrap();
        assert_abs_diff_eq!(sol.x_star[0], -0.25, epsilon = 1e-10);
        let clipped = single(2.0, 1.0, 0.0, 5.0);
        assert_abs_diff_eq!(solve_reference(&clipped).unwrap().x_star[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn reference_is_symmetric_for_symmetric_duopoly() {
        let spec = one_market(2, 10.0, 3.0);
        let sol = solve_reference(&spec).unwrap();
        assert!(sol.residual.max() <= ORACLE_TOL);
        assert_abs_diff_eq!(sol.x_star[0], sol.x_star[1], epsilon = 1e-9);
        // loose cap: interior solution of (2 + 1.6) x + 0.8 x = 3 - 0.2
        assert_abs_diff_eq!(sol.x_star[0], 2.8 / 4.4, epsilon = 1e-9);
        assert_eq!(sol.lam_star, vec![0.0]);
    }

    #[test]
    fn reference_with_binding_cap() {
        let spec = one_market(3, 0.6, 4.0);
        let sol = solve_reference(&spec).unwrap();
        let total: f64 = sol.x_star.iter().sum();
        assert_abs_diff_eq!(total, 0.6, epsilon = 1e-9);
        assert!(sol.lam_star[0] > 0.0);
        assert!(natural_residual(&spec, &sol.x_star, 1.0).unwrap() <= 1e-8);
    }

    #[test]
    fn natural_residual_positive_away_from_solution() {
        let spec = one_market(2, 10.0, 3.0);
        assert!(natural_residual(&spec, &[0.0, 0.0], 1.0).unwrap() > 0.1);
        assert!(natural_residual(&spec, &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn projection_onto_feasible_set() {
        let spec = one_market(2, 1.0, 3.0);
        let p = project_feasible(&spec, &[1.5, 0.5]).unwrap();
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-14);
        let inside = project_feasible(&spec, &[0.2, 0.3]).unwrap();
        assert_eq!(inside, vec![0.2, 0.3]);
    }

    #[test]
    fn normalized_distance_cases() {
        let xs = [1.0, -2.0, 2.0];
        assert_eq!(normalized_distance(&xs, &xs).unwrap(), 0.0);
        let doubled: Vec<f64> = xs.iter().map(|v| 2.0 * v).collect();
        assert_abs_diff_eq!(normalized_distance(&doubled, &xs).unwrap(), 1.0, epsilon = 1e-15);
        assert!(normalized_distance(&xs, &[0.0; 3]).is_err());
    }
}
