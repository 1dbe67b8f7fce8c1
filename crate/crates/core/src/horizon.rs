//! Exact optimal control over a PWA horizon by branch and bound on mode
//! sequences.
//!
//! A node fixes the modes of the first `j` steps, so `x_0..x_j` are affine in
//! `u_0..u_{j-1}`. Its relaxation keeps every constraint and cost term that
//! only involves those states and inputs; all dropped terms are nonnegative
//! or constraints, so the node value is a valid lower bound. Leaves fix all
//! `N` modes and solve the exact convex subproblem.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::optkit::lp::{solve_lp, LinearProgram, LpStatus};
use crate::optkit::qcqp::{solve_qcqp, ConvexQcqp, QcqpStatus, QuadConstraint};
use crate::sysmodel::{InputVec, Polytope, PwaSystem, StateVec, REGION_TOL};

/// Absolute optimality gap of the search.
pub const GAP: f64 = 1e-9;

/// `a' x_t - rhs <= s_coef * s`.
#[derive(Clone, Debug)]
pub struct StateRow {
    pub a: DVector<f64>,
    pub rhs: f64,
    pub s_coef: f64,
}

/// `x_N' P x_N + offset <= s_coef * s`.
#[derive(Clone, Debug)]
pub struct TerminalQuad {
    pub p: DMatrix<f64>,
    pub offset: f64,
    pub s_coef: f64,
}

/// Feedback used to complete partial solutions into incumbents.
pub type Rollout<'a> = &'a (dyn Fn(&StateVec) -> InputVec + Sync);

/// Optimal control problem over `horizon` inputs of a PWA system.
#[derive(Clone)]
pub struct TrajectoryProgram<'a> {
    pub sys: &'a PwaSystem,
    pub x0: StateVec,
    pub horizon: usize,
    pub input_set: &'a Polytope,
    /// Lower bound on the epigraph variable; `None` means no epigraph term.
    pub epigraph_floor: Option<f64>,
    /// Rows indexed by time `0..=horizon`.
    pub state_rows: Vec<Vec<StateRow>>,
    pub terminal_quad: Option<TerminalQuad>,
    pub terminal_set: Option<&'a Polytope>,
    /// `x_t' Q_t x_t`, indexed by time `0..=horizon`.
    pub state_cost: Vec<Option<DMatrix<f64>>>,
    /// `(u_t - r_t)' R_t (u_t - r_t)`, indexed by time `0..horizon`.
    pub input_cost: Vec<Option<(DMatrix<f64>, DVector<f64>)>>,
    pub rollout: Option<Rollout<'a>>,
}

impl<'a> TrajectoryProgram<'a> {
    pub fn new(sys: &'a PwaSystem, x0: StateVec, horizon: usize, input_set: &'a Polytope) -> Self {
        Self {
            sys,
            x0,
            horizon,
            input_set,
            epigraph_floor: None,
            state_rows: vec![Vec::new(); horizon + 1],
            terminal_quad: None,
            terminal_set: None,
            state_cost: vec![None; horizon + 1],
            input_cost: vec![None; horizon],
            rollout: None,
        }
    }

    fn has_epigraph(&self) -> bool {
        self.epigraph_floor.is_some()
    }

    /// Objective of a complete trajectory, or `None` if it violates a constraint.
    pub fn evaluate(&self, states: &[StateVec], inputs: &[InputVec], tol: f64) -> Option<f64> {
        let mut s = f64::NEG_INFINITY;
        let mut cost = 0.0;
        for (t, x) in states.iter().enumerate() {
            for row in &self.state_rows[t] {
                let v = row.a.dot(x) - row.rhs;
                if row.s_coef > 0.0 {
                    s = s.max(v / row.s_coef);
                } else if v > tol {
                    return None;
                }
            }
            if let Some(q) = &self.state_cost[t] {
                cost += x.dot(&(q * x));
            }
        }
        for (t, u) in inputs.iter().enumerate() {
            if self.input_set.max_violation(u) > tol {
                return None;
            }
            if let Some((r, target)) = &self.input_cost[t] {
                let d = u - target;
                cost += d.dot(&(r * &d));
            }
        }
        let last = states.last()?;
        if let Some(tq) = &self.terminal_quad {
            let v = last.dot(&(&tq.p * last)) + tq.offset;
            if tq.s_coef > 0.0 {
                s = s.max(v / tq.s_coef);
            } else if v > tol {
                return None;
            }
        }
        if let Some(ts) = self.terminal_set {
            if ts.max_violation(last) > tol {
                return None;
            }
        }
        if self.has_epigraph() {
            cost += s;
        }
        Some(cost)
    }

    /// Solves one fixed mode sequence exactly (used as an enumeration oracle).
    pub fn solve_sequence(&self, modes: &[usize]) -> Result<Option<Trajectory>> {
        if modes.len() != self.horizon {
            return Err(Error::Dimension(
                "mode sequence length must equal the horizon".into(),
            ));
        }
        if !self.sys.modes()[modes[0]]
            .region
            .contains(&self.x0, REGION_TOL)
        {
            return Ok(None);
        }
        Ok(self.solve_node(modes, f64::INFINITY)?.map(|n| n.trajectory))
    }
}

/// Optimal trajectory and its objective.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub value: f64,
    pub states: Vec<StateVec>,
    pub inputs: Vec<InputVec>,
    pub modes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    /// Best trajectory with value below the cutoff, if any.
    pub best: Option<Trajectory>,
    pub node_count: usize,
}

struct NodeSolution {
    lower_bound: f64,
    trajectory: Trajectory,
}

struct SearchState {
    ub: f64,
    best: Option<Trajectory>,
    node_count: usize,
}

impl SearchState {
    fn offer(&mut self, t: Trajectory) {
        if t.value < self.ub {
            self.ub = t.value;
            self.best = Some(t);
        }
    }
}

struct Queued {
    lb: f64,
    depth: usize,
    modes: Vec<usize>,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    // max-heap: smallest bound first, deeper first on ties
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .lb
            .total_cmp(&self.lb)
            .then(self.depth.cmp(&other.depth))
    }
}

impl TrajectoryProgram<'_> {
    /// Affine state maps `x_t = c_t + G_t u` for a mode prefix.
    fn state_maps(&self, modes: &[usize]) -> Vec<(DVector<f64>, DMatrix<f64>)> {
        let n_u = self.sys.n_u();
        let nv = modes.len() * n_u;
        let mut maps = Vec::with_capacity(modes.len() + 1);
        maps.push((self.x0.clone(), DMatrix::zeros(self.sys.n_x(), nv)));
        for (t, &m) in modes.iter().enumerate() {
            let mode = self.sys.mode(m);
            let (c, g) = maps.last().expect("nonempty");
            let c1 = &mode.a * c + &mode.f;
            let mut g1 = &mode.a * g;
            let mut block = g1.view_mut((0, t * n_u), (self.sys.n_x(), n_u));
            block += &mode.b;
            maps.push((c1, g1));
        }
        maps
    }

    /// Relaxation of the node with the given mode prefix; `None` when infeasible
    /// or when its bound cannot go below `prune_at`.
    fn solve_node(&self, modes: &[usize], prune_at: f64) -> Result<Option<NodeSolution>> {
        let j = modes.len();
        let n_u = self.sys.n_u();
        let nu_vars = j * n_u;
        let epi = self.has_epigraph();
        let nz = nu_vars + usize::from(epi);
        let maps = self.state_maps(modes);
        let leaf = j == self.horizon;
        if !self.regions_reachable(modes, &maps) {
            return Ok(None);
        }

        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        let lift = |v: DVector<f64>, s: f64| -> DVector<f64> {
            let mut z = DVector::zeros(nz);
            z.rows_mut(0, nu_vars).copy_from(&v);
            if epi {
                z[nu_vars] = s;
            }
            z
        };
        for t in 0..j {
            let hu = &self.input_set.h_mat;
            for i in 0..hu.nrows() {
                let mut r = DVector::zeros(nz);
                for k in 0..n_u {
                    r[t * n_u + k] = hu[(i, k)];
                }
                rows.push((r, self.input_set.h_vec[i]));
            }
            let region = &self.sys.mode(modes[t]).region;
            let (c, g) = &maps[t];
            for i in 0..region.n_faces() {
                let h = region.h_mat.row(i).transpose();
                rows.push((lift(g.transpose() * &h, 0.0), region.h_vec[i] - h.dot(c)));
            }
        }
        for (t, (c, g)) in maps.iter().enumerate() {
            for row in &self.state_rows[t] {
                rows.push((
                    lift(g.transpose() * &row.a, -row.s_coef),
                    row.rhs - row.a.dot(c),
                ));
            }
        }
        if leaf {
            if let Some(ts) = self.terminal_set {
                let (c, g) = &maps[j];
                for i in 0..ts.n_faces() {
                    let h = ts.h_mat.row(i).transpose();
                    rows.push((lift(g.transpose() * &h, 0.0), ts.h_vec[i] - h.dot(c)));
                }
            }
        }
        if let Some(floor) = self.epigraph_floor {
            rows.push((lift(DVector::zeros(nu_vars), -1.0), -floor));
        }

        let mut p0 = DMatrix::zeros(nz, nz);
        let mut q0 = DVector::zeros(nz);
        let mut r0 = 0.0;
        let mut quadratic = false;
        for (t, (c, g)) in maps.iter().enumerate() {
            if let Some(q) = &self.state_cost[t] {
                let gq = g.transpose() * q;
                p0.view_mut((0, 0), (nu_vars, nu_vars))
                    .add_assign(&(&gq * g));
                q0.rows_mut(0, nu_vars).add_assign(&(2.0 * &gq * c));
                r0 += c.dot(&(q * c));
                quadratic = true;
            }
        }
        for t in 0..j {
            if let Some((r, target)) = &self.input_cost[t] {
                p0.view_mut((t * n_u, t * n_u), (n_u, n_u)).add_assign(r);
                q0.rows_mut(t * n_u, n_u).add_assign(&(-2.0 * r * target));
                r0 += target.dot(&(r * target));
                quadratic = true;
            }
        }
        if epi {
            q0[nu_vars] = 1.0;
        }
        let quad = if leaf {
            self.terminal_quad.as_ref().map(|tq| {
                let (c, g) = &maps[j];
                let gp = g.transpose() * &tq.p;
                let mut p = DMatrix::zeros(nz, nz);
                p.view_mut((0, 0), (nu_vars, nu_vars)).copy_from(&(&gp * g));
                let q = lift(2.0 * &gp * c, -tq.s_coef);
                QuadConstraint {
                    p: 0.5 * (&p + p.transpose()),
                    q,
                    r: c.dot(&(&tq.p * c)) + tq.offset,
                }
            })
        } else {
            None
        };

        let g_mat = DMatrix::from_fn(rows.len(), nz, |i, k| rows[i].0[k]);
        let g_vec = DVector::from_fn(rows.len(), |i, _| rows[i].1);

        let z = if nz == 0 {
            // everything is fixed: only constant rows remain
            if g_vec.iter().any(|v| *v < -1e-9 * (1.0 + v.abs())) {
                return Ok(None);
            }
            if let Some(qc) = &quad {
                if qc.r > 1e-9 {
                    return Ok(None);
                }
            }
            DVector::zeros(0)
        } else if !quadratic && quad.is_none() {
            let sol = solve_lp(&LinearProgram::new(q0.clone(), g_mat, g_vec))?;
            match sol.status {
                LpStatus::Optimal => sol.z,
                LpStatus::Infeasible => return Ok(None),
                LpStatus::Unbounded => {
                    return Err(Error::Solver("horizon node relaxation is unbounded".into()))
                }
            }
        } else {
            let lin_cost = if quadratic {
                DVector::zeros(nz)
            } else {
                q0.clone()
            };
            let relax = solve_lp(&LinearProgram::new(lin_cost, g_mat.clone(), g_vec.clone()))?;
            if relax.status == LpStatus::Infeasible {
                return Ok(None);
            }
            if !quadratic && relax.objective >= prune_at - GAP {
                return Ok(None);
            }
            if let Some(z) = self.floor_point(&maps, &g_mat, &g_vec, quadratic, &relax)? {
                return Ok(Some(self.node_solution(modes, &maps, z, &p0, &q0, r0)));
            }
            let mut prob = ConvexQcqp::new(0.5 * (&p0 + p0.transpose()), q0.clone(), r0)
                .with_linear(g_mat, g_vec);
            if let Some(qc) = quad.clone() {
                prob = prob.with_quad(qc);
            }
            let sol = solve_qcqp(&prob)?;
            match sol.status {
                QcqpStatus::Optimal => sol.z,
                QcqpStatus::Infeasible => return Ok(None),
            }
        };
        Ok(Some(self.node_solution(modes, &maps, z, &p0, &q0, r0)))
    }

    fn node_solution(
        &self,
        modes: &[usize],
        maps: &[(DVector<f64>, DMatrix<f64>)],
        z: DVector<f64>,
        p0: &DMatrix<f64>,
        q0: &DVector<f64>,
        r0: f64,
    ) -> NodeSolution {
        let j = modes.len();
        let n_u = self.sys.n_u();
        let nu_vars = j * n_u;
        let leaf = j == self.horizon;
        let lower_bound = z.dot(&(p0 * &z)) + q0.dot(&z) + r0;
        let inputs: Vec<InputVec> = (0..j).map(|t| z.rows(t * n_u, n_u).into_owned()).collect();
        let u_all = z.rows(0, nu_vars).into_owned();
        let states: Vec<StateVec> = maps.iter().map(|(c, g)| c + g * &u_all).collect();
        let value = if leaf {
            self.leaf_value(&states, &inputs)
        } else {
            lower_bound
        };
        NodeSolution {
            lower_bound,
            trajectory: Trajectory {
                value,
                states,
                inputs,
                modes: modes.to_vec(),
            },
        }
    }

    /// Interval test: each fixed region must be reachable with inputs in the input box.
    fn regions_reachable(&self, modes: &[usize], maps: &[(DVector<f64>, DMatrix<f64>)]) -> bool {
        let Some((lo, hi)) = self.input_set.as_box() else {
            return true;
        };
        let n_u = self.sys.n_u();
        for (t, &m) in modes.iter().enumerate() {
            let region = &self.sys.mode(m).region;
            let (c, g) = &maps[t];
            for i in 0..region.n_faces() {
                let h = region.h_mat.row(i);
                let mut v = h.dot(&c.transpose());
                for col in 0..g.ncols() {
                    let w = h.dot(&g.column(col).transpose());
                    let k = col % n_u;
                    v += if w >= 0.0 { w * lo[k] } else { w * hi[k] };
                }
                if v > region.h_vec[i] + 1e-9 * (1.0 + region.h_vec[i].abs()) {
                    return false;
                }
            }
        }
        true
    }

    /// At a leaf whose linear relaxation reaches the epigraph floor, the floor is
    /// attained only with the terminal barrier at its minimum `x_N = 0`. That point
    /// is degenerate for the quadratic constraint, so it is decided by an LP.
    fn floor_point(
        &self,
        maps: &[(DVector<f64>, DMatrix<f64>)],
        g_mat: &DMatrix<f64>,
        g_vec: &DVector<f64>,
        quadratic: bool,
        relax: &crate::optkit::lp::LpSolution,
    ) -> Result<Option<DVector<f64>>> {
        let (Some(floor), Some(tq)) = (self.epigraph_floor, &self.terminal_quad) else {
            return Ok(None);
        };
        let j = maps.len() - 1;
        if quadratic || j != self.horizon || tq.s_coef <= 0.0 || relax.objective > floor + 1e-9 {
            return Ok(None);
        }
        // floor = min of the terminal term, reached only at the quadratic's minimizer x_N = 0
        if (tq.offset / tq.s_coef - floor).abs() > 1e-12 * (1.0 + floor.abs()) {
            return Ok(None);
        }
        let nu_vars = g_mat.ncols() - 1;
        let g_u = g_mat.columns(0, nu_vars).into_owned();
        let g_rhs = g_vec - g_mat.column(nu_vars) * floor;
        let (c, g) = &maps[j];
        let lp =
            LinearProgram::new(DVector::zeros(nu_vars), g_u, g_rhs).with_equalities(g.clone(), -c);
        let sol = solve_lp(&lp)?;
        if sol.status != LpStatus::Optimal {
            return Ok(None);
        }
        let mut z = DVector::zeros(nu_vars + 1);
        z.rows_mut(0, nu_vars).copy_from(&sol.z);
        z[nu_vars] = floor;
        Ok(Some(z))
    }

    /// Objective recomputed from a leaf trajectory, ignoring solver-level slack on constraints.
    fn leaf_value(&self, states: &[StateVec], inputs: &[InputVec]) -> f64 {
        self.evaluate(states, inputs, f64::INFINITY)
            .unwrap_or(f64::INFINITY)
    }

    /// Completes a node solution with the rollout feedback under the true dynamics.
    fn complete(&self, partial: &Trajectory) -> Option<Trajectory> {
        let policy = self.rollout?;
        let mut states = partial.states.clone();
        let mut inputs = partial.inputs.clone();
        let mut modes = partial.modes.clone();
        // the fixed prefix must be consistent with the true mode selection
        for (t, &m) in modes.iter().enumerate() {
            if self.sys.mode_of(&states[t]) != Some(m) {
                return None;
            }
        }
        while inputs.len() < self.horizon {
            let x = states.last()?.clone();
            let u = policy(&x);
            let (next, m) = self.sys.step(&x, &u).ok()?;
            inputs.push(u);
            modes.push(m);
            states.push(next);
        }
        let value = self.evaluate(&states, &inputs, 1e-9)?;
        Some(Trajectory {
            value,
            states,
            inputs,
            modes,
        })
    }

    fn expand(&self, modes: Vec<usize>, st: &mut SearchState) -> Result<Option<Queued>> {
        st.node_count += 1;
        let Some(sol) = self.solve_node(&modes, st.ub)? else {
            return Ok(None);
        };
        if let Some(done) = self.complete(&sol.trajectory) {
            st.offer(done);
        }
        if modes.len() == self.horizon {
            st.offer(sol.trajectory);
            return Ok(None);
        }
        if sol.lower_bound >= st.ub - GAP {
            return Ok(None);
        }
        Ok(Some(Queued {
            lb: sol.lower_bound,
            depth: modes.len(),
            modes,
        }))
    }

    fn children(&self, node: &Queued, st: &mut SearchState) -> Result<Vec<Queued>> {
        let mut kids = Vec::new();
        for m in 0..self.sys.n_modes() {
            let mut modes = node.modes.clone();
            modes.push(m);
            if let Some(q) = self.expand(modes, st)? {
                kids.push(q);
            }
        }
        Ok(kids)
    }

    /// Branch and bound; only trajectories with value below `cutoff` are returned.
    pub fn search(&self, cutoff: f64) -> Result<SearchResult> {
        if self.horizon == 0 {
            let value = self.evaluate(std::slice::from_ref(&self.x0), &[], 1e-9);
            let best = value.filter(|v| *v < cutoff).map(|value| Trajectory {
                value,
                states: vec![self.x0.clone()],
                inputs: Vec::new(),
                modes: Vec::new(),
            });
            return Ok(SearchResult {
                best,
                node_count: 1,
            });
        }
        let Some(first_mode) = self.sys.mode_of(&self.x0) else {
            return Err(Error::Domain {
                state: self.x0.iter().copied().collect(),
            });
        };
        let mut st = SearchState {
            ub: cutoff,
            best: None,
            node_count: 0,
        };
        let mut queue: BinaryHeap<Queued> = BinaryHeap::new();

        // depth-first dive along the lowest bound seeds the incumbent
        let mut current = self.expand(vec![first_mode], &mut st)?;
        while let Some(node) = current.take() {
            if node.lb >= st.ub - GAP {
                break;
            }
            let mut kids = self.children(&node, &mut st)?;
            kids.sort_by(|a, b| a.lb.total_cmp(&b.lb));
            let mut it = kids.into_iter();
            current = it.next();
            queue.extend(it);
        }

        while let Some(node) = queue.pop() {
            if node.lb >= st.ub - GAP {
                break;
            }
            let kids = self.children(&node, &mut st)?;
            queue.extend(kids);
        }
        Ok(SearchResult {
            best: st.best,
            node_count: st.node_count,
        })
    }

    /// Enumerates every mode sequence (exhaustive oracle).
    pub fn enumerate(&self) -> Result<Option<Trajectory>> {
        let n_modes = self.sys.n_modes();
        let total = n_modes.pow(self.horizon as u32);
        let mut best: Option<Trajectory> = None;
        for code in 0..total {
            let mut modes = Vec::with_capacity(self.horizon);
            let mut c = code;
            for _ in 0..self.horizon {
                modes.push(c % n_modes);
                c /= n_modes;
            }
            if self.sys.mode_of(&self.x0) != Some(modes[0]) {
                continue;
            }
            if let Some(t) = self.solve_sequence(&modes)? {
                if best.as_ref().is_none_or(|b| t.value < b.value) {
                    best = Some(t);
                }
            }
        }
        Ok(best)
    }
}

trait AddAssignExt<R> {
    fn add_assign(&mut self, rhs: R);
}

impl<S> AddAssignExt<&DMatrix<f64>> for nalgebra::Matrix<f64, nalgebra::Dyn, nalgebra::Dyn, S>
where
    S: nalgebra::StorageMut<f64, nalgebra::Dyn, nalgebra::Dyn>,
{
    fn add_assign(&mut self, rhs: &DMatrix<f64>) {
        *self += rhs;
    }
}

impl<S> AddAssignExt<&DVector<f64>> for nalgebra::Matrix<f64, nalgebra::Dyn, nalgebra::U1, S>
where
    S: nalgebra::StorageMut<f64, nalgebra::Dyn, nalgebra::U1>,
{
    fn add_assign(&mut self, rhs: &DVector<f64>) {
        *self += rhs;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysmodel::pendulum_build;

    #[test]
    fn regulation_cost_at_origin_is_zero() {
        let (sys, _, input) = pendulum_build();
        let mut prog = TrajectoryProgram::new(&sys, DVector::zeros(2), 3, &input);
        for t in 0..=3 {
            prog.state_cost[t] = Some(DMatrix::identity(2, 2));
        }
        for t in 0..3 {
            prog.input_cost[t] = Some((DMatrix::identity(1, 1), DVector::zeros(1)));
        }
        let r = prog.search(f64::INFINITY).unwrap();
        let best = r.best.unwrap();
        assert!(best.value.abs() < 1e-9);
        assert!(best.inputs[0].amax() < 1e-6);
    }

    #[test]
    fn search_matches_enumeration_on_quadratic_costs() {
        let (sys, _, input) = pendulum_build();
        for x0 in [[0.09, 0.4], [-0.11, 0.2], [0.12, -0.6], [0.05, 0.9]] {
            let mut prog = TrajectoryProgram::new(&sys, DVector::from_row_slice(&x0), 3, &input);
            for t in 0..=3 {
                prog.state_cost[t] = Some(DMatrix::from_diagonal(&DVector::from_row_slice(&[
                    20.0, 1.0,
                ])));
            }
            for t in 0..3 {
                prog.input_cost[t] = Some((DMatrix::identity(1, 1), DVector::zeros(1)));
            }
            let b = prog.search(f64::INFINITY).unwrap().best.unwrap();
            let e = prog.enumerate().unwrap().unwrap();
            assert!((b.value - e.value).abs() < 1e-7, "{} {}", b.value, e.value);
        }
    }
}
