//! Ground-truth generator: a primal-dual interior-point solver for the AC
//! optimal power flow, plus KKT residual evaluation and active-set
//! extraction.
//!
//! The decision vector is `z = [theta(non-slack) | V(all) | PG | QG]`; the
//! power balances at every bus are equality constraints and all operating
//! limits are inequalities with slack variables kept strictly positive by
//! a log barrier. Newton steps use a fraction-to-boundary rule (tau =
//! 0.995) and the barrier weight shrinks by 0.1 per step toward the
//! measured complementarity gap.
//!
//! The solver optimizes the cost in per-unit form (`F / base_mva`), which
//! keeps gradients, duals and KKT residuals O(1) regardless of the money
//! scale of the cost coefficients; the reported `objective` is the plain
//! cost evaluated on MW quantities.

use crate::case_io::CaseData;
use crate::grid::{branch_admittance, build_admittance, power_injections, AdmittanceMatrix, StateVector};
use crate::linalg::lu_solve;
use crate::powerflow::{dp_dtheta, dp_dv, dq_dtheta, dq_dv};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy)]
pub struct OpfConfig {
    pub max_iter: usize,
    /// Feasibility contract for a returned solution, p.u.
    pub feas_tol: f64,
    /// Complementarity contract `|sigma_j g_j|` for a returned solution.
    pub comp_tol: f64,
    /// Primal violation below which a constraint counts as active.
    pub active_tol: f64,
    /// Fraction-to-boundary factor.
    pub tau: f64,
    /// Barrier reduction per iteration.
    pub mu_shrink: f64,
}

impl Default for OpfConfig {
    fn default() -> Self {
        OpfConfig {
            max_iter: 150,
            feas_tol: 1e-6,
            comp_tol: 1e-6,
            active_tol: 1e-5,
            tau: 0.995,
            mu_shrink: 0.1,
        }
    }
}

// Internal targets; tighter than the contract so converged solutions clear
// the 1e-6 asserts with margin.
const TOL_STAT: f64 = 1e-8;
const TOL_EQ: f64 = 1e-9;
const TOL_INEQ: f64 = 1e-9;
const TOL_GAP: f64 = 1e-9;
// Acceptable fallback when progress stalls at max_iter.
const TOL_STAT_LOOSE: f64 = 1e-7;
const TOL_FEAS_LOOSE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct KktResiduals {
    /// Infinity norm of the Lagrangian gradient.
    pub stationarity: f64,
    /// Infinity norm of the power-balance residual.
    pub primal_eq: f64,
    /// Largest inequality violation, 0 when feasible.
    pub primal_ineq: f64,
    /// Largest `|sigma_j * g_j|`.
    pub complementarity: f64,
    /// Largest negative part of sigma, 0 when dual feasible.
    pub dual_feas: f64,
}

#[derive(Debug, Error)]
pub enum OpfError {
    #[error("Infeasible: {reason}")]
    Infeasible { reason: String },
    #[error("MaxIterations: stationarity {0:.3e}, eq {1:.3e}, ineq {2:.3e}", residuals.stationarity, residuals.primal_eq, residuals.primal_ineq)]
    MaxIterations { residuals: KktResiduals },
    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),
}

/// One solved operating point with duals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpfSolution {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
    pub pf: Vec<f64>,
    pub qf: Vec<f64>,
    /// Generation cost in money units (MW-quadratic curve).
    pub objective: f64,
    /// Equality duals: P balances for every bus, then Q balances.
    pub lambda: Vec<f64>,
    /// Inequality duals in [`ConstraintLayout`] order.
    pub sigma: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl OpfSolution {
    pub fn state(&self) -> StateVector {
        StateVector {
            v: self.v.clone(),
            theta: self.theta.clone(),
        }
    }
}

/// Fixed ordering of the inequality list for a case: for each generator an
/// upper/lower P pair, then upper/lower Q pairs, then per bus upper/lower
/// voltage pairs, then per branch upper/lower from-side flow pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintLayout {
    pub n_gen: usize,
    pub n_bus: usize,
    pub n_branch: usize,
}

impl ConstraintLayout {
    pub fn of(case: &CaseData) -> Self {
        ConstraintLayout {
            n_gen: case.n_gen(),
            n_bus: case.n_bus(),
            n_branch: case.n_branch(),
        }
    }
    pub fn len(&self) -> usize {
        4 * self.n_gen + 2 * self.n_bus + 2 * self.n_branch
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn gen_p_range(&self) -> std::ops::Range<usize> {
        0..2 * self.n_gen
    }
    pub fn gen_q_range(&self) -> std::ops::Range<usize> {
        2 * self.n_gen..4 * self.n_gen
    }
    pub fn voltage_range(&self) -> std::ops::Range<usize> {
        4 * self.n_gen..4 * self.n_gen + 2 * self.n_bus
    }
    pub fn flow_range(&self) -> std::ops::Range<usize> {
        4 * self.n_gen + 2 * self.n_bus..self.len()
    }
}

/// Which constraints hold with equality at a solution.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActiveSetSignature {
    pub bits: Vec<bool>,
}

impl ActiveSetSignature {
    pub fn hamming(&self, other: &ActiveSetSignature) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count()
    }

    pub fn restrict(&self, range: std::ops::Range<usize>) -> ActiveSetSignature {
        ActiveSetSignature {
            bits: self.bits[range].to_vec(),
        }
    }

    pub fn to_bitstring(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(s: &str) -> Option<ActiveSetSignature> {
        let mut bits = Vec::with_capacity(s.len());
        for ch in s.chars() {
            match ch {
                '0' => bits.push(false),
                '1' => bits.push(true),
                _ => return None,
            }
        }
        Some(ActiveSetSignature { bits })
    }
}

pub(crate) fn active_bits(g: &[f64], active_tol: f64) -> Vec<bool> {
    g.iter().map(|&gj| gj.abs() <= active_tol).collect()
}

/// Bit `j` is set iff `|g_j| <= active_tol` at the solution.
pub fn extract_active_set(sol: &OpfSolution, case: &CaseData, active_tol: f64) -> ActiveSetSignature {
    let zero = vec![0.0; case.n_bus()];
    let prob = OpfProblem::new(case, &zero, &zero)
        .expect("layout construction cannot fail on a valid case");
    let z = prob.pack(&sol.state(), &sol.pg, &sol.qg);
    let mut g = vec![0.0; prob.m];
    prob.eval_ineq(&z, &mut g);
    ActiveSetSignature {
        bits: active_bits(&g, active_tol),
    }
}

/// Evaluate the KKT residuals of a solution against a case and demand.
pub fn kkt_residuals(
    sol: &OpfSolution,
    case: &CaseData,
    pd: &[f64],
    qd: &[f64],
) -> Result<KktResiduals, OpfError> {
    let prob = OpfProblem::new(case, pd, qd)?;
    if sol.lambda.len() != 2 * case.n_bus() || sol.sigma.len() != prob.m {
        return Err(OpfError::DimensionMismatch(
            "dual vector length does not match the case".into(),
        ));
    }
    let z = prob.pack(&sol.state(), &sol.pg, &sol.qg);
    let lambda = Array1::from(sol.lambda.clone());
    let sigma = Array1::from(sol.sigma.clone());
    Ok(prob.residuals(&z, &lambda, &sigma))
}

/// Solve the AC OPF for the given demand vectors.
pub fn solve_acopf(
    case: &CaseData,
    pd: &[f64],
    qd: &[f64],
    cfg: &OpfConfig,
) -> Result<OpfSolution, OpfError> {
    let prob = OpfProblem::new(case, pd, qd)?;
    prob.solve(cfg)
}

// ---------------------------------------------------------------------------

struct OpfProblem<'a> {
    case: &'a CaseData,
    y: AdmittanceMatrix,
    pd: &'a [f64],
    qd: &'a [f64],
    n: usize,
    ng: usize,
    nbr: usize,
    /// z index of theta for each non-slack bus (None for slack).
    th_idx: Vec<Option<usize>>,
    nth: usize,
    nz: usize,
    m: usize,
    layout: ConstraintLayout,
}

impl<'a> OpfProblem<'a> {
    fn new(case: &'a CaseData, pd: &'a [f64], qd: &'a [f64]) -> Result<Self, OpfError> {
        let n = case.n_bus();
        if pd.len() != n || qd.len() != n {
            return Err(OpfError::DimensionMismatch(format!(
                "demand vectors must have {} entries",
                n
            )));
        }
        if !pd.iter().chain(qd.iter()).all(|v| v.is_finite()) {
            return Err(OpfError::DimensionMismatch("non-finite demand".into()));
        }
        let y = build_admittance(case).map_err(|e| OpfError::DimensionMismatch(e.to_string()))?;
        let slack = case.slack_index();
        let mut th_idx = vec![None; n];
        let mut k = 0usize;
        for i in 0..n {
            if i != slack {
                th_idx[i] = Some(k);
                k += 1;
            }
        }
        let ng = case.n_gen();
        let nbr = case.n_branch();
        let layout = ConstraintLayout::of(case);
        Ok(OpfProblem {
            case,
            y,
            pd,
            qd,
            n,
            ng,
            nbr,
            th_idx,
            nth: n - 1,
            nz: (n - 1) + n + 2 * ng,
            m: layout.len(),
            layout,
        })
    }

    fn v_at(&self, b: usize) -> usize {
        self.nth + b
    }
    fn pg_at(&self, g: usize) -> usize {
        self.nth + self.n + g
    }
    fn qg_at(&self, g: usize) -> usize {
        self.nth + self.n + self.ng + g
    }

    fn pack(&self, state: &StateVector, pg: &[f64], qg: &[f64]) -> Array1<f64> {
        let mut z = Array1::zeros(self.nz);
        for i in 0..self.n {
            if let Some(t) = self.th_idx[i] {
                z[t] = state.theta[i];
            }
            z[self.v_at(i)] = state.v[i];
        }
        for g in 0..self.ng {
            z[self.pg_at(g)] = pg[g];
            z[self.qg_at(g)] = qg[g];
        }
        z
    }

    fn state_of(&self, z: &Array1<f64>) -> StateVector {
        let mut st = StateVector::flat(self.n);
        for i in 0..self.n {
            st.theta[i] = match self.th_idx[i] {
                Some(t) => z[t],
                None => 0.0,
            };
            st.v[i] = z[self.v_at(i)];
        }
        st
    }

    fn obj_raw(&self, z: &Array1<f64>) -> f64 {
        let b = self.case.base_mva;
        self.case
            .gens
            .iter()
            .enumerate()
            .map(|(g, gen)| gen.cost.eval_pu(z[self.pg_at(g)], b))
            .sum()
    }

    fn grad_obj(&self, z: &Array1<f64>, out: &mut Array1<f64>) {
        out.fill(0.0);
        let b = self.case.base_mva;
        for (g, gen) in self.case.gens.iter().enumerate() {
            out[self.pg_at(g)] = 2.0 * gen.cost.a2 * b * z[self.pg_at(g)] + gen.cost.a1;
        }
    }

    /// Power-balance residuals `h = [PG - PD - p(th,V); QG - QD - q(th,V)]`.
    fn eval_eq(&self, z: &Array1<f64>, out: &mut Array1<f64>) -> (Vec<f64>, Vec<f64>, StateVector) {
        let st = self.state_of(z);
        let (p, q) = power_injections(&st, &self.y).expect("dimensions fixed by construction");
        for i in 0..self.n {
            out[i] = -self.pd[i] - p[i];
            out[self.n + i] = -self.qd[i] - q[i];
        }
        for (g, gen) in self.case.gens.iter().enumerate() {
            out[gen.bus] += z[self.pg_at(g)];
            out[self.n + gen.bus] += z[self.qg_at(g)];
        }
        (p, q, st)
    }

    /// Inequalities `g <= 0` in layout order; returns from-side flows too.
    fn eval_ineq(&self, z: &Array1<f64>, out: &mut [f64]) -> Vec<f64> {
        let lay = &self.layout;
        for (g, gen) in self.case.gens.iter().enumerate() {
            out[2 * g] = z[self.pg_at(g)] - gen.pmax;
            out[2 * g + 1] = gen.pmin - z[self.pg_at(g)];
            let qb = lay.gen_q_range().start;
            out[qb + 2 * g] = z[self.qg_at(g)] - gen.qmax;
            out[qb + 2 * g + 1] = gen.qmin - z[self.qg_at(g)];
        }
        let vb = lay.voltage_range().start;
        for (i, bus) in self.case.buses.iter().enumerate() {
            out[vb + 2 * i] = z[self.v_at(i)] - bus.vmax;
            out[vb + 2 * i + 1] = bus.vmin - z[self.v_at(i)];
        }
        let fb = lay.flow_range().start;
        let st = self.state_of(z);
        let mut pf = vec![0.0; self.nbr];
        for (k, br) in self.case.branches.iter().enumerate() {
            let ba = branch_admittance(br.r, br.x, br.b_charge, br.tap)
                .expect("validated branch");
            let vf = st.v[br.from];
            let vt = st.v[br.to];
            let th = st.theta[br.from] - st.theta[br.to];
            let (s, c) = th.sin_cos();
            let flow = vf * vf * ba.gff + vf * vt * (ba.gft * c + ba.bft * s);
            pf[k] = flow;
            out[fb + 2 * k] = flow - br.flow_limit;
            out[fb + 2 * k + 1] = -flow - br.flow_limit;
        }
        pf
    }

    /// Dense Jacobian of the equalities.
    fn jac_eq(&self, st: &StateVector, p: &[f64], q: &[f64]) -> Array2<f64> {
        let mut jh = Array2::zeros((2 * self.n, self.nz));
        for i in 0..self.n {
            for j in 0..self.n {
                let adjacent = i == j || self.y.g[[i, j]] != 0.0 || self.y.b[[i, j]] != 0.0;
                if !adjacent {
                    continue;
                }
                if let Some(t) = self.th_idx[j] {
                    jh[[i, t]] = -dp_dtheta(st, &self.y, i, j, q);
                    jh[[self.n + i, t]] = -dq_dtheta(st, &self.y, i, j, p);
                }
                jh[[i, self.v_at(j)]] = -dp_dv(st, &self.y, i, j, p);
                jh[[self.n + i, self.v_at(j)]] = -dq_dv(st, &self.y, i, j, q);
            }
        }
        for (g, gen) in self.case.gens.iter().enumerate() {
            jh[[gen.bus, self.pg_at(g)]] = 1.0;
            jh[[self.n + gen.bus, self.qg_at(g)]] = 1.0;
        }
        jh
    }

    /// Dense Jacobian of the inequalities.
    fn jac_ineq(&self, st: &StateVector) -> Array2<f64> {
        let lay = &self.layout;
        let mut jg = Array2::zeros((self.m, self.nz));
        for g in 0..self.ng {
            jg[[2 * g, self.pg_at(g)]] = 1.0;
            jg[[2 * g + 1, self.pg_at(g)]] = -1.0;
            let qb = lay.gen_q_range().start;
            jg[[qb + 2 * g, self.qg_at(g)]] = 1.0;
            jg[[qb + 2 * g + 1, self.qg_at(g)]] = -1.0;
        }
        let vb = lay.voltage_range().start;
        for i in 0..self.n {
            jg[[vb + 2 * i, self.v_at(i)]] = 1.0;
            jg[[vb + 2 * i + 1, self.v_at(i)]] = -1.0;
        }
        let fb = lay.flow_range().start;
        for (k, br) in self.case.branches.iter().enumerate() {
            let ba = branch_admittance(br.r, br.x, br.b_charge, br.tap)
                .expect("validated branch");
            let vf = st.v[br.from];
            let vt = st.v[br.to];
            let th = st.theta[br.from] - st.theta[br.to];
            let (s, c) = th.sin_cos();
            let d_vf = 2.0 * vf * ba.gff + vt * (ba.gft * c + ba.bft * s);
            let d_vt = vf * (ba.gft * c + ba.bft * s);
            let d_th = vf * vt * (-ba.gft * s + ba.bft * c);
            let row = fb + 2 * k;
            jg[[row, self.v_at(br.from)]] = d_vf;
            jg[[row, self.v_at(br.to)]] = d_vt;
            if let Some(t) = self.th_idx[br.from] {
                jg[[row, t]] = d_th;
            }
            if let Some(t) = self.th_idx[br.to] {
                jg[[row, t]] = -d_th;
            }
            for col in 0..self.nz {
                jg[[row + 1, col]] = -jg[[row, col]];
            }
        }
        jg
    }

    /// The (theta, V) part of `grad_z (lambda'h + sigma'g)` expressed through
    /// weights: `wp = -lambda_p`, `wq = -lambda_q`, `wf = sigma_up - sigma_lo`
    /// per branch. Used for finite-difference Hessian columns.
    fn weighted_thv_grad(
        &self,
        st: &StateVector,
        wp: &[f64],
        wq: &[f64],
        wf: &[f64],
        out: &mut [f64],
    ) {
        let (p, q) = power_injections(st, &self.y).expect("dimensions fixed");
        for e in out.iter_mut() {
            *e = 0.0;
        }
        for j in 0..self.n {
            let mut acc_th = 0.0;
            let mut acc_v = 0.0;
            for i in 0..self.n {
                let adjacent = i == j || self.y.g[[i, j]] != 0.0 || self.y.b[[i, j]] != 0.0;
                if !adjacent {
                    continue;
                }
                if self.th_idx[j].is_some() {
                    acc_th += wp[i] * dp_dtheta(st, &self.y, i, j, &q)
                        + wq[i] * dq_dtheta(st, &self.y, i, j, &p);
                }
                acc_v +=
                    wp[i] * dp_dv(st, &self.y, i, j, &p) + wq[i] * dq_dv(st, &self.y, i, j, &q);
            }
            if let Some(t) = self.th_idx[j] {
                out[t] = acc_th;
            }
            out[self.v_at(j)] = acc_v;
        }
        for (k, br) in self.case.branches.iter().enumerate() {
            if wf[k] == 0.0 {
                continue;
            }
            let ba = branch_admittance(br.r, br.x, br.b_charge, br.tap)
                .expect("validated branch");
            let vf = st.v[br.from];
            let vt = st.v[br.to];
            let th = st.theta[br.from] - st.theta[br.to];
            let (s, c) = th.sin_cos();
            let d_vf = 2.0 * vf * ba.gff + vt * (ba.gft * c + ba.bft * s);
            let d_vt = vf * (ba.gft * c + ba.bft * s);
            let d_th = vf * vt * (-ba.gft * s + ba.bft * c);
            out[self.v_at(br.from)] += wf[k] * d_vf;
            out[self.v_at(br.to)] += wf[k] * d_vt;
            if let Some(t) = self.th_idx[br.from] {
                out[t] += wf[k] * d_th;
            }
            if let Some(t) = self.th_idx[br.to] {
                out[t] -= wf[k] * d_th;
            }
        }
    }

    /// Hessian of the Lagrangian. PG block is analytic; the (theta, V)
    /// block comes from central differences of the weighted constraint
    /// gradient (the only nonlinear part); everything else is zero.
    fn hessian(&self, z: &Array1<f64>, lambda: &Array1<f64>, sigma: &Array1<f64>) -> Array2<f64> {
        let mut h = Array2::zeros((self.nz, self.nz));
        let b = self.case.base_mva;
        for (g, gen) in self.case.gens.iter().enumerate() {
            h[[self.pg_at(g), self.pg_at(g)]] = 2.0 * gen.cost.a2 * b;
        }
        let wp: Vec<f64> = (0..self.n).map(|i| -lambda[i]).collect();
        let wq: Vec<f64> = (0..self.n).map(|i| -lambda[self.n + i]).collect();
        let fb = self.layout.flow_range().start;
        let wf: Vec<f64> = (0..self.nbr)
            .map(|k| sigma[fb + 2 * k] - sigma[fb + 2 * k + 1])
            .collect();
        let nthv = self.nth + self.n;
        let eps = 1e-6;
        let mut rp = vec![0.0; nthv];
        let mut rm = vec![0.0; nthv];
        let mut zt = z.clone();
        for b_idx in 0..nthv {
            let orig = zt[b_idx];
            zt[b_idx] = orig + eps;
            let stp = self.state_of(&zt);
            self.weighted_thv_grad(&stp, &wp, &wq, &wf, &mut rp);
            zt[b_idx] = orig - eps;
            let stm = self.state_of(&zt);
            self.weighted_thv_grad(&stm, &wp, &wq, &wf, &mut rm);
            zt[b_idx] = orig;
            for a in 0..nthv {
                h[[a, b_idx]] += (rp[a] - rm[a]) / (2.0 * eps);
            }
        }
        // symmetrize the FD block
        for a in 0..nthv {
            for b_idx in (a + 1)..nthv {
                let v = 0.5 * (h[[a, b_idx]] + h[[b_idx, a]]);
                h[[a, b_idx]] = v;
                h[[b_idx, a]] = v;
            }
        }
        h
    }

    fn residuals(&self, z: &Array1<f64>, lambda: &Array1<f64>, sigma: &Array1<f64>) -> KktResiduals {
        let mut hvec = Array1::zeros(2 * self.n);
        let (p, q, st) = self.eval_eq(z, &mut hvec);
        let mut g = vec![0.0; self.m];
        self.eval_ineq(z, &mut g);
        let jh = self.jac_eq(&st, &p, &q);
        let jg = self.jac_ineq(&st);
        let mut rd = Array1::zeros(self.nz);
        self.grad_obj(z, &mut rd);
        rd = rd + jh.t().dot(lambda) + jg.t().dot(sigma);
        let stationarity = rd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let primal_eq = hvec.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let primal_ineq = g.iter().fold(0.0f64, |m, v| m.max(*v)).max(0.0);
        let complementarity = g
            .iter()
            .zip(sigma.iter())
            .fold(0.0f64, |m, (gj, sj)| m.max((gj * sj).abs()));
        let dual_feas = sigma.iter().fold(0.0f64, |m, v| m.max(-v)).max(0.0);
        KktResiduals {
            stationarity,
            primal_eq,
            primal_ineq,
            complementarity,
            dual_feas,
        }
    }

    fn solve(&self, cfg: &OpfConfig) -> Result<OpfSolution, OpfError> {
        // rough deliverability screen
        let total_pmax: f64 = self.case.gens.iter().map(|g| g.pmax).sum();
        let total_pd: f64 = self.pd.iter().sum();
        if total_pmax < total_pd {
            return Err(OpfError::Infeasible {
                reason: format!(
                    "total pmax {:.4} p.u. below total demand {:.4} p.u.",
                    total_pmax, total_pd
                ),
            });
        }

        // initialization: flat voltages, midpoint dispatch
        let mut z = Array1::zeros(self.nz);
        for i in 0..self.n {
            let bus = &self.case.buses[i];
            z[self.v_at(i)] = 1.0f64.clamp(bus.vmin + 1e-3, bus.vmax - 1e-3);
        }
        for (g, gen) in self.case.gens.iter().enumerate() {
            z[self.pg_at(g)] = 0.5 * (gen.pmin + gen.pmax);
            z[self.qg_at(g)] = 0.5 * (gen.qmin + gen.qmax);
        }
        let mut lambda = Array1::<f64>::zeros(2 * self.n);
        let mut sigma = Array1::<f64>::from_elem(self.m, 1.0);
        let mut g = vec![0.0; self.m];
        self.eval_ineq(&z, &mut g);
        let mut s =
            Array1::from_iter(g.iter().map(|&gj| (-gj).max(1e-2)));
        let mf = self.m as f64;
        let mut mu = cfg.mu_shrink * s.dot(&sigma) / mf;

        let mut hvec = Array1::zeros(2 * self.n);
        let mut iterations = 0usize;

        loop {
            let (p, q, st) = self.eval_eq(&z, &mut hvec);
            let pf = self.eval_ineq(&z, &mut g);
            let _ = pf;
            let jh = self.jac_eq(&st, &p, &q);
            let jg = self.jac_ineq(&st);

            let mut rd = Array1::zeros(self.nz);
            self.grad_obj(&z, &mut rd);
            rd = rd + jh.t().dot(&lambda) + jg.t().dot(&sigma);

            let stat = rd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let eq = hvec.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let ineq = g.iter().fold(0.0f64, |m, v| m.max(*v)).max(0.0);
            let gap = s.dot(&sigma) / mf;
            let last = KktResiduals {
                stationarity: stat,
                primal_eq: eq,
                primal_ineq: ineq,
                complementarity: g
                    .iter()
                    .zip(sigma.iter())
                    .fold(0.0f64, |m, (gj, sj)| m.max((gj * sj).abs())),
                dual_feas: sigma.iter().fold(0.0f64, |m, v| m.max(-v)).max(0.0),
            };
            if !stat.is_finite() || !eq.is_finite() {
                return Err(OpfError::Infeasible {
                    reason: "iterates diverged to non-finite values".into(),
                });
            }
            let tight = stat <= TOL_STAT && eq <= TOL_EQ && ineq <= TOL_INEQ && gap <= TOL_GAP;
            let loose = stat <= TOL_STAT_LOOSE
                && eq <= TOL_FEAS_LOOSE
                && ineq <= TOL_FEAS_LOOSE
                && last.complementarity <= TOL_FEAS_LOOSE;
            if tight || (iterations >= cfg.max_iter && loose) {
                return Ok(self.finish(&z, &lambda, &sigma, iterations));
            }
            if iterations >= cfg.max_iter {
                return Err(OpfError::MaxIterations { residuals: last });
            }

            // reduced KKT system
            let hmat = self.hessian(&z, &lambda, &sigma);
            let mut m_mat = hmat;
            // M += Jg' diag(sigma/s) Jg
            for j in 0..self.m {
                let w = sigma[j] / s[j];
                // exploit row sparsity: collect nonzero columns of row j
                for a in 0..self.nz {
                    let ja = jg[[j, a]];
                    if ja == 0.0 {
                        continue;
                    }
                    let wja = w * ja;
                    for b2 in 0..self.nz {
                        let jb = jg[[j, b2]];
                        if jb != 0.0 {
                            m_mat[[a, b2]] += wja * jb;
                        }
                    }
                }
            }
            // ghat = (sigma*(g+s) - (s*sigma - mu)) / s = (sigma*g + mu)/s
            let ghat: Vec<f64> = (0..self.m)
                .map(|j| (sigma[j] * g[j] + mu) / s[j])
                .collect();

            let dim = self.nz + 2 * self.n;
            let mut a_mat = Array2::zeros((dim, dim));
            let mut rhs = Array1::zeros(dim);
            for a in 0..self.nz {
                for b2 in 0..self.nz {
                    a_mat[[a, b2]] = m_mat[[a, b2]];
                }
            }
            for r in 0..2 * self.n {
                for c in 0..self.nz {
                    a_mat[[self.nz + r, c]] = jh[[r, c]];
                    a_mat[[c, self.nz + r]] = jh[[r, c]];
                }
            }
            for a in 0..self.nz {
                let mut v = -rd[a];
                for j in 0..self.m {
                    let ja = jg[[j, a]];
                    if ja != 0.0 {
                        v -= ja * ghat[j];
                    }
                }
                rhs[a] = v;
            }
            for r in 0..2 * self.n {
                rhs[self.nz + r] = -hvec[r];
            }

            let mut reg = 0.0;
            let step = loop {
                let attempt = if reg == 0.0 {
                    lu_solve(&a_mat, &rhs)
                } else {
                    let mut a2 = a_mat.clone();
                    for d in 0..self.nz {
                        a2[[d, d]] += reg;
                    }
                    lu_solve(&a2, &rhs)
                };
                match attempt {
                    Ok(sol) if sol.iter().all(|v| v.is_finite()) => break sol,
                    _ if reg < 1e-2 => {
                        reg = if reg == 0.0 { 1e-8 } else { reg * 100.0 };
                    }
                    _ => {
                        return Err(OpfError::MaxIterations { residuals: last });
                    }
                }
            };

            let dz = step.slice(ndarray::s![0..self.nz]).to_owned();
            let dlambda = step.slice(ndarray::s![self.nz..]).to_owned();
            // ds = -(g + s) - Jg dz
            let jg_dz = jg.dot(&dz);
            let ds: Array1<f64> =
                Array1::from_iter((0..self.m).map(|j| -(g[j] + s[j]) - jg_dz[j]));
            // dsigma = -(s.sigma - mu + sigma*ds)/s
            let dsigma: Array1<f64> = Array1::from_iter(
                (0..self.m).map(|j| -(s[j] * sigma[j] - mu + sigma[j] * ds[j]) / s[j]),
            );

            let mut alpha_p = 1.0f64;
            for j in 0..self.m {
                if ds[j] < 0.0 {
                    alpha_p = alpha_p.min(-cfg.tau * s[j] / ds[j]);
                }
            }
            // keep voltages physical while far from the solution
            for i in 0..self.n {
                let dv = dz[self.v_at(i)];
                if dv < 0.0 {
                    let vmin_guard = 0.05;
                    let room = z[self.v_at(i)] - vmin_guard;
                    if alpha_p * (-dv) > room {
                        alpha_p = (room / -dv).max(1e-3);
                    }
                }
            }
            let mut alpha_d = 1.0f64;
            for j in 0..self.m {
                if dsigma[j] < 0.0 {
                    alpha_d = alpha_d.min(-cfg.tau * sigma[j] / dsigma[j]);
                }
            }

            for a in 0..self.nz {
                z[a] += alpha_p * dz[a];
            }
            for j in 0..self.m {
                s[j] += alpha_p * ds[j];
            }
            for r in 0..2 * self.n {
                lambda[r] += alpha_d * dlambda[r];
            }
            for j in 0..self.m {
                sigma[j] += alpha_d * dsigma[j];
            }
            mu = cfg.mu_shrink * s.dot(&sigma) / mf;
            iterations += 1;
        }
    }

    fn finish(&self, z: &Array1<f64>, lambda: &Array1<f64>, sigma: &Array1<f64>, iterations: usize) -> OpfSolution {
        let st = self.state_of(z);
        let (pf, qf) = crate::grid::branch_flows(&st, self.case).expect("validated case");
        OpfSolution {
            pg: (0..self.ng).map(|g| z[self.pg_at(g)]).collect(),
            qg: (0..self.ng).map(|g| z[self.qg_at(g)]).collect(),
            pf,
            qf,
            objective: self.obj_raw(z),
            lambda: lambda.to_vec(),
            sigma: sigma.to_vec(),
            converged: true,
            iterations,
            v: st.v,
            theta: st.theta,
        }
    }
}
