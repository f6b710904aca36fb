//! Full Newton-Raphson AC power flow in polar coordinates with an analytic
//! Jacobian. This solver is a checker, not a dispatcher: generator voltage
//! and active-power setpoints are honored as given and reactive limits are
//! left to the OPF.

use crate::case_io::{BusType, CaseData};
use crate::grid::{build_admittance, power_injections, AdmittanceMatrix, StateVector};
use crate::linalg::{lu_solve, LinalgError};
use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Clone, Copy)]
pub struct PfConfig {
    /// Infinity-norm mismatch tolerance, p.u.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PfConfig {
    fn default() -> Self {
        PfConfig {
            tol: 1e-8,
            max_iter: 30,
        }
    }
}

#[derive(Debug, Error)]
pub enum PfError {
    #[error("NonConvergence: mismatch {mismatch:.3e} after {iterations} iterations")]
    NonConvergence { iterations: usize, mismatch: f64 },
    #[error("SingularJacobian")]
    SingularJacobian,
    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone)]
pub struct PfSolution {
    pub state: StateVector,
    pub iterations: usize,
    /// Final infinity-norm mismatch.
    pub mismatch: f64,
    /// Mismatch norm before each Newton step, then the final value.
    pub mismatch_history: Vec<f64>,
    /// Net active injection the slack bus had to absorb, p.u.
    pub slack_p: f64,
    /// Net reactive injection at the slack bus, p.u.
    pub slack_q: f64,
    /// Net reactive generation per bus at PV/slack buses (QG_i = q_inj + qd).
    pub qg_bus: Vec<f64>,
}

/// Solve the power flow for given demands and generator setpoints.
///
/// `pg_set[g]` is honored at every generator on a non-slack bus;
/// `v_set[g]` fixes the voltage of the bus generator `g` sits on (PV and
/// slack). Both are indexed like `case.gens`.
pub fn solve_power_flow(
    case: &CaseData,
    pd: &[f64],
    qd: &[f64],
    pg_set: &[f64],
    v_set: &[f64],
    cfg: &PfConfig,
) -> Result<PfSolution, PfError> {
    let y = build_admittance(case).map_err(|e| PfError::DimensionMismatch(e.to_string()))?;
    solve_power_flow_with(case, &y, pd, qd, pg_set, v_set, cfg)
}

/// Same as [`solve_power_flow`] with a prebuilt admittance matrix.
pub fn solve_power_flow_with(
    case: &CaseData,
    y: &AdmittanceMatrix,
    pd: &[f64],
    qd: &[f64],
    pg_set: &[f64],
    v_set: &[f64],
    cfg: &PfConfig,
) -> Result<PfSolution, PfError> {
    let n = case.n_bus();
    if pd.len() != n || qd.len() != n {
        return Err(PfError::DimensionMismatch(format!(
            "demand vectors must have {} entries",
            n
        )));
    }
    if pg_set.len() != case.n_gen() || v_set.len() != case.n_gen() {
        return Err(PfError::DimensionMismatch(format!(
            "setpoint vectors must have {} entries",
            case.n_gen()
        )));
    }
    if !pd.iter().chain(qd.iter()).all(|v| v.is_finite()) {
        return Err(PfError::DimensionMismatch("non-finite demand".into()));
    }

    let slack = case.slack_index();
    // bus-level specified injections and fixed voltages
    let mut p_spec: Vec<f64> = (0..n).map(|i| -pd[i]).collect();
    let mut v_fixed: Vec<Option<f64>> = vec![None; n];
    for (g, gen) in case.gens.iter().enumerate() {
        if gen.bus != slack {
            p_spec[gen.bus] += pg_set[g];
        }
        v_fixed[gen.bus] = Some(v_set[g]);
    }
    let q_spec: Vec<f64> = (0..n).map(|i| -qd[i]).collect();

    let pv_pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let pq: Vec<usize> = (0..n)
        .filter(|&i| case.buses[i].bus_type == BusType::Pq)
        .collect();

    // flat start, fixed voltages applied
    let mut state = StateVector::flat(n);
    for i in 0..n {
        if let Some(v) = v_fixed[i] {
            state.v[i] = v;
        }
    }

    let n_th = pv_pq.len();
    let n_v = pq.len();
    let n_unknown = n_th + n_v;
    let mut history = Vec::new();

    let mismatch_of = |p: &[f64], q: &[f64]| -> f64 {
        let mut m: f64 = 0.0;
        for &i in &pv_pq {
            m = m.max((p_spec[i] - p[i]).abs());
        }
        for &i in &pq {
            m = m.max((q_spec[i] - q[i]).abs());
        }
        m
    };

    let mut iterations = 0usize;
    loop {
        let (p, q) =
            power_injections(&state, y).map_err(|e| PfError::DimensionMismatch(e.to_string()))?;
        let norm = mismatch_of(&p, &q);
        history.push(norm);
        if norm <= cfg.tol {
            let qg_bus: Vec<f64> = (0..n)
                .map(|i| if v_fixed[i].is_some() { q[i] + qd[i] } else { 0.0 })
                .collect();
            return Ok(PfSolution {
                slack_p: p[slack] + pd[slack],
                slack_q: q[slack] + qd[slack],
                qg_bus,
                state,
                iterations,
                mismatch: norm,
                mismatch_history: history,
            });
        }
        if iterations >= cfg.max_iter || !norm.is_finite() {
            return Err(PfError::NonConvergence {
                iterations,
                mismatch: norm,
            });
        }

        // Jacobian of (P, Q) wrt (theta at pv+pq, V at pq)
        let mut jac = Array2::<f64>::zeros((n_unknown, n_unknown));
        let mut rhs = Array1::<f64>::zeros(n_unknown);
        for (r, &i) in pv_pq.iter().enumerate() {
            rhs[r] = p_spec[i] - p[i];
        }
        for (r, &i) in pq.iter().enumerate() {
            rhs[n_th + r] = q_spec[i] - q[i];
        }
        for (ci, &j) in pv_pq.iter().enumerate() {
            for (r, &i) in pv_pq.iter().enumerate() {
                jac[[r, ci]] = dp_dtheta(&state, y, i, j, &q);
            }
            for (r, &i) in pq.iter().enumerate() {
                jac[[n_th + r, ci]] = dq_dtheta(&state, y, i, j, &p);
            }
        }
        for (cj, &j) in pq.iter().enumerate() {
            for (r, &i) in pv_pq.iter().enumerate() {
                jac[[r, n_th + cj]] = dp_dv(&state, y, i, j, &p);
            }
            for (r, &i) in pq.iter().enumerate() {
                jac[[n_th + r, n_th + cj]] = dq_dv(&state, y, i, j, &q);
            }
        }

        let step = lu_solve(&jac, &rhs).map_err(|e| match e {
            LinalgError::Singular(_) => PfError::SingularJacobian,
            other => PfError::DimensionMismatch(other.to_string()),
        })?;
        for (ci, &j) in pv_pq.iter().enumerate() {
            state.theta[j] += step[ci];
        }
        for (cj, &j) in pq.iter().enumerate() {
            state.v[j] += step[n_th + cj];
        }
        iterations += 1;
    }
}

pub(crate) fn dp_dtheta(st: &StateVector, y: &AdmittanceMatrix, i: usize, j: usize, q: &[f64]) -> f64 {
    if i == j {
        -q[i] - y.b[[i, i]] * st.v[i] * st.v[i]
    } else {
        let th = st.theta[i] - st.theta[j];
        let (s, c) = th.sin_cos();
        st.v[i] * st.v[j] * (y.g[[i, j]] * s - y.b[[i, j]] * c)
    }
}

pub(crate) fn dp_dv(st: &StateVector, y: &AdmittanceMatrix, i: usize, j: usize, p: &[f64]) -> f64 {
    if i == j {
        p[i] / st.v[i] + y.g[[i, i]] * st.v[i]
    } else {
        let th = st.theta[i] - st.theta[j];
        let (s, c) = th.sin_cos();
        st.v[i] * (y.g[[i, j]] * c + y.b[[i, j]] * s)
    }
}

pub(crate) fn dq_dtheta(st: &StateVector, y: &AdmittanceMatrix, i: usize, j: usize, p: &[f64]) -> f64 {
    if i == j {
        p[i] - y.g[[i, i]] * st.v[i] * st.v[i]
    } else {
        let th = st.theta[i] - st.theta[j];
        let (s, c) = th.sin_cos();
        -st.v[i] * st.v[j] * (y.g[[i, j]] * c + y.b[[i, j]] * s)
    }
}

pub(crate) fn dq_dv(st: &StateVector, y: &AdmittanceMatrix, i: usize, j: usize, q: &[f64]) -> f64 {
    if i == j {
        q[i] / st.v[i] - y.b[[i, i]] * st.v[i]
    } else {
        let th = st.theta[i] - st.theta[j];
        let (s, c) = th.sin_cos();
        st.v[i] * (y.g[[i, j]] * s - y.b[[i, j]] * c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use approx::assert_abs_diff_eq;

    fn base_setpoints(case: &CaseData) -> (Vec<f64>, Vec<f64>) {
        let pg: Vec<f64> = case.gens.iter().map(|g| 0.5 * (g.pmin + g.pmax)).collect();
        let v: Vec<f64> = case.gens.iter().map(|_| 1.0).collect();
        (pg, v)
    }

    #[test]
    fn flat_start_is_exact_for_zero_demand_lossless_case() {
        let case = cases::load("case3");
        let pd = vec![0.0; 3];
        let qd = vec![0.0; 3];
        let pg = vec![0.0, 0.0];
        let v = vec![1.0, 1.0];
        let sol = solve_power_flow(&case, &pd, &qd, &pg, &v, &PfConfig::default()).unwrap();
        assert!(sol.iterations <= 1);
        for i in 0..3 {
            assert_abs_diff_eq!(sol.state.v[i], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(sol.state.theta[i], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_bus_matches_bisection_oracle() {
        let case = cases::load("case2");
        let pd = case.pd_vector();
        let qd = case.qd_vector();
        let sol =
            solve_power_flow(&case, &pd, &qd, &[0.0], &[1.0], &PfConfig::default()).unwrap();

        // Oracle: the lossless two-bus equations reduce to one unknown.
        //   P: -pd2 = 10 V2 sin(th2)        => V2 = -pd2 / (10 sin th2)
        //   Q: -qd2 = 10 V2^2 - 10 V2 cos(th2)
        // Bisect the Q residual in th2.
        let b = 10.0;
        let residual = |th2: f64| {
            let v2 = -pd[1] / (b * th2.sin());
            b * v2 * v2 - b * v2 * th2.cos() + qd[1]
        };
        let (mut lo, mut hi) = (-0.5, -1e-6);
        assert!(residual(lo) * residual(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if residual(lo) * residual(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let th2 = 0.5 * (lo + hi);
        let v2 = -pd[1] / (b * th2.sin());
        assert_abs_diff_eq!(sol.state.theta[1], th2, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.state.v[1], v2, epsilon = 1e-8);
        // slack picks up the full load (lossless line)
        assert_abs_diff_eq!(sol.slack_p, pd[1], epsilon = 1e-8);
    }

    #[test]
    fn converged_solution_reproduces_demands_at_pq_buses() {
        for name in ["case9", "case14"] {
            let case = cases::load(name);
            let pd = case.pd_vector();
            let qd = case.qd_vector();
            let (mut pg, v) = base_setpoints(&case);
            // scale non-slack dispatch to roughly half the load
            let total: f64 = pd.iter().sum();
            let scale = 0.5 * total / pg.iter().sum::<f64>().max(1e-9);
            for x in pg.iter_mut() {
                *x *= scale;
            }
            let cfg = PfConfig::default();
            let sol = solve_power_flow(&case, &pd, &qd, &pg, &v, &cfg)
                .unwrap_or_else(|e| panic!("{} failed: {}", name, e));
            assert!(sol.mismatch <= cfg.tol, "{}", name);
            let y = build_admittance(&case).unwrap();
            let (p, q) = power_injections(&sol.state, &y).unwrap();
            for (i, bus) in case.buses.iter().enumerate() {
                if bus.bus_type == BusType::Pq {
                    assert_abs_diff_eq!(p[i], -pd[i], epsilon = cfg.tol * 10.0);
                    assert_abs_diff_eq!(q[i], -qd[i], epsilon = cfg.tol * 10.0);
                }
            }
        }
    }

    #[test]
    fn mismatch_tail_is_nonincreasing_on_fixtures() {
        for name in ["case2", "case3", "case9", "case14"] {
            let case = cases::load(name);
            let pd = case.pd_vector();
            let qd = case.qd_vector();
            let (mut pg, v) = base_setpoints(&case);
            let total: f64 = pd.iter().sum();
            if case.n_gen() > 1 {
                let scale = 0.5 * total / pg.iter().sum::<f64>().max(1e-9);
                for x in pg.iter_mut() {
                    *x *= scale;
                }
            } else {
                pg[0] = 0.0;
            }
            let sol = solve_power_flow(&case, &pd, &qd, &pg, &v, &PfConfig::default()).unwrap();
            let h = &sol.mismatch_history;
            let tail = &h[h.len().saturating_sub(3)..];
            for w in tail.windows(2) {
                assert!(w[1] <= w[0], "{}: tail not monotone: {:?}", name, h);
            }
        }
    }

    #[test]
    fn identical_inputs_give_bit_identical_outputs() {
        let case = cases::load("case9");
        let pd = case.pd_vector();
        let qd = case.qd_vector();
        let (pg, v) = base_setpoints(&case);
        let a = solve_power_flow(&case, &pd, &qd, &pg, &v, &PfConfig::default()).unwrap();
        let b = solve_power_flow(&case, &pd, &qd, &pg, &v, &PfConfig::default()).unwrap();
        assert_eq!(a.state.v, b.state.v);
        assert_eq!(a.state.theta, b.state.theta);
        assert_eq!(a.slack_p, b.slack_p);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let case = cases::load("case9");
        let y = build_admittance(&case).unwrap();
        let mut st = StateVector::flat(case.n_bus());
        for i in 0..case.n_bus() {
            st.v[i] = 1.0 + 0.01 * (i as f64 * 0.7).sin();
            st.theta[i] = 0.05 * (i as f64 * 1.3).cos();
        }
        let (p, q) = power_injections(&st, &y).unwrap();
        let eps = 1e-7;
        for j in 0..case.n_bus() {
            let mut st2 = st.clone();
            st2.theta[j] += eps;
            let (p2, q2) = power_injections(&st2, &y).unwrap();
            for i in 0..case.n_bus() {
                let fd_p = (p2[i] - p[i]) / eps;
                let fd_q = (q2[i] - q[i]) / eps;
                assert_abs_diff_eq!(dp_dtheta(&st, &y, i, j, &q), fd_p, epsilon = 1e-5);
                assert_abs_diff_eq!(dq_dtheta(&st, &y, i, j, &p), fd_q, epsilon = 1e-5);
            }
            let mut st3 = st.clone();
            st3.v[j] += eps;
            let (p3, q3) = power_injections(&st3, &y).unwrap();
            for i in 0..case.n_bus() {
                let fd_p = (p3[i] - p[i]) / eps;
                let fd_q = (q3[i] - q[i]) / eps;
                assert_abs_diff_eq!(dp_dv(&st, &y, i, j, &p), fd_p, epsilon = 1e-5);
                assert_abs_diff_eq!(dq_dv(&st, &y, i, j, &q), fd_q, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn hopeless_demand_reports_nonconvergence() {
        let case = cases::load("case2");
        // 60 p.u. through a 0.1 p.u. line cannot be served
        let pd = vec![0.0, 60.0];
        let qd = vec![0.0, 0.0];
        match solve_power_flow(&case, &pd, &qd, &[0.0], &[1.0], &PfConfig::default()) {
            Err(PfError::NonConvergence { mismatch: _, .. }) => {}
            Err(PfError::SingularJacobian) => {}
            other => panic!("expected failure, got {:?}", other.map(|_| ())),
        }
    }
}
