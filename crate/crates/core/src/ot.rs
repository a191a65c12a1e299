//! Entropy-regularized optimal transport between uniform empirical
//! distributions, plus an exact assignment solver used as an oracle.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_EPSILON: f64 = 5.0;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const DEFAULT_SUBSAMPLE_CAP: usize = 2048;
pub const EXACT_MAX_POINTS: usize = 256;

// Scalings beyond this magnitude are folded back into the log potentials.
const ABSORB_THRESHOLD: f64 = 1e50;
const DIRECT_KERNEL_MAX_EXPONENT: f64 = 500.0;

/// Dense row-major ground-cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    m: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if n == 0 || m == 0 {
            return Err(Error::Invalid("empty cost matrix".into()));
        }
        let mut values = Vec::with_capacity(n * m);
        for r in rows {
            if r.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    got: r.len(),
                });
            }
            values.extend(r);
        }
        Ok(CostMatrix { n, m, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn transpose(&self) -> CostMatrix {
        let mut values = Vec::with_capacity(self.values.len());
        for j in 0..self.m {
            for i in 0..self.n {
                values.push(self.get(i, j));
            }
        }
        CostMatrix {
            n: self.m,
            m: self.n,
            values,
        }
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Pairwise Euclidean distances `C[i][j] = ||x_i - y_j||`.
pub fn build_cost<X: AsRef<[f64]>, Y: AsRef<[f64]>>(xs: &[X], ys: &[Y]) -> Result<CostMatrix> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Invalid("cannot build a cost matrix for an empty point set".into()));
    }
    let d = xs[0].as_ref().len();
    for p in xs.iter().map(AsRef::as_ref).chain(ys.iter().map(AsRef::as_ref)) {
        if p.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: p.len(),
            });
        }
    }
    let mut values = Vec::with_capacity(xs.len() * ys.len());
    for x in xs {
        for y in ys {
            values.push(euclid(x.as_ref(), y.as_ref()));
        }
    }
    Ok(CostMatrix {
        n: xs.len(),
        m: ys.len(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornResult {
    /// `<P, C>` for the returned plan, entropy term excluded.
    pub transport_cost: f64,
    pub iterations: usize,
    /// L-infinity violation of the row marginals before rounding.
    pub marginal_error: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams {
    pub epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        SinkhornParams {
            epsilon: DEFAULT_EPSILON,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// Transport plan under uniform marginals, kept for inspection in tests.
#[derive(Debug, Clone)]
pub struct SinkhornPlan {
    pub result: SinkhornResult,
    pub n: usize,
    pub m: usize,
    pub plan: Vec<f64>,
}

impl SinkhornPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.chunks(self.m).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.m];
        for r in self.plan.chunks(self.m) {
            for (cj, p) in c.iter_mut().zip(r) {
                *cj += p;
            }
        }
        c
    }
}

/// Same result as [`sinkhorn_plan`] without materializing the plan: the
/// rounding is applied to the factored form `diag(u) K diag(v)`.
pub fn sinkhorn_cost(cost: &CostMatrix, params: SinkhornParams) -> Result<SinkhornResult> {
    let (solver, iterations, err) = run(cost, params)?;
    let (n, m) = (cost.n, cost.m);
    let (a, b) = (1.0 / n as f64, 1.0 / m as f64);
    let mut kv = vec![0.0; n];
    solver.k_v(&mut kv);
    let ux: Vec<f64> = solver
        .u
        .iter()
        .zip(&kv)
        .map(|(&u, &s)| if u * s > a { u * (a / (u * s)) } else { u })
        .collect();
    let mut ktu = vec![0.0; m];
    solver.kt_u_with(&ux, &mut ktu);
    let vy: Vec<f64> = solver
        .v
        .iter()
        .zip(&ktu)
        .map(|(&v, &s)| if v * s > b { v * (b / (v * s)) } else { v })
        .collect();
    let err_b: Vec<f64> = vy.iter().zip(&ktu).map(|(v, s)| b - v * s).collect();
    let mut scaled = 0.0;
    let mut err_a = vec![0.0; n];
    for i in 0..n {
        let k = &solver.kernel[i * m..(i + 1) * m];
        let (mut row, mut weighted) = (0.0, 0.0);
        for ((kij, cij), vj) in k.iter().zip(cost.row(i)).zip(&vy) {
            row += kij * vj;
            weighted += kij * cij * vj;
        }
        scaled += ux[i] * weighted;
        err_a[i] = a - ux[i] * row;
    }
    let mass: f64 = err_a.iter().sum();
    let mut correction = 0.0;
    if mass > 0.0 {
        for (i, ea) in err_a.iter().enumerate() {
            if *ea > 0.0 {
                correction += ea
                    * cost
                        .row(i)
                        .iter()
                        .zip(&err_b)
                        .map(|(c, eb)| c * eb.max(0.0))
                        .sum::<f64>();
            }
        }
        correction /= mass;
    }
    Ok(SinkhornResult {
        transport_cost: (scaled + correction).max(0.0),
        iterations,
        marginal_error: err,
        converged: err < params.tol,
    })
}

struct Solver<'a> {
    cost: &'a CostMatrix,
    eps: f64,
    log_a: f64,
    log_b: f64,
    // log-domain potentials
    f: Vec<f64>,
    g: Vec<f64>,
    // scalings on top of the potentials
    u: Vec<f64>,
    v: Vec<f64>,
    kernel: Vec<f64>,
}

impl<'a> Solver<'a> {
    fn new(cost: &'a CostMatrix, eps: f64) -> Self {
        let (n, m) = (cost.n, cost.m);
        let mut s = Solver {
            cost,
            eps,
            log_a: -(n as f64).ln(),
            log_b: -(m as f64).ln(),
            f: vec![0.0; n],
            g: vec![0.0; m],
            u: vec![1.0; n],
            v: vec![1.0; m],
            kernel: vec![0.0; n * m],
        };
        // the plain Gibbs kernel is safe unless some entries underflow
        if cost.values.iter().all(|&c| c / eps < DIRECT_KERNEL_MAX_EXPONENT) {
            s.refresh_kernel();
        } else {
            s.log_update();
        }
        s
    }

    /// Exact log-sum-exp half steps for f then g, with scalings reset.
    fn log_update(&mut self) {
        let (n, m, eps) = (self.cost.n, self.cost.m, self.eps);
        for (j, gj) in self.g.iter_mut().enumerate() {
            *gj += eps * self.v[j].ln();
        }
        for i in 0..n {
            let row = self.cost.row(i);
            let lse = log_sum_exp((0..m).map(|j| (self.g[j] - row[j]) / eps));
            self.f[i] = eps * (self.log_a - lse);
        }
        // column log-sum-exp, streamed row by row
        let mut mx = vec![f64::NEG_INFINITY; m];
        for i in 0..n {
            for ((x, c), fi) in mx.iter_mut().zip(self.cost.row(i)).zip(std::iter::repeat(self.f[i])) {
                *x = x.max((fi - c) / eps);
            }
        }
        let mut acc = vec![0.0; m];
        for i in 0..n {
            let fi = self.f[i];
            for ((a, c), x) in acc.iter_mut().zip(self.cost.row(i)).zip(&mx) {
                *a += ((fi - c) / eps - x).exp();
            }
        }
        for j in 0..m {
            let lse = if mx[j].is_finite() { mx[j] + acc[j].ln() } else { mx[j] };
            self.g[j] = eps * (self.log_b - lse);
        }
        self.u.fill(1.0);
        self.v.fill(1.0);
        self.refresh_kernel();
    }

    fn absorb(&mut self) {
        for (fi, ui) in self.f.iter_mut().zip(&self.u) {
            *fi += self.eps * ui.ln();
        }
        for (gj, vj) in self.g.iter_mut().zip(&self.v) {
            *gj += self.eps * vj.ln();
        }
        self.u.fill(1.0);
        self.v.fill(1.0);
        self.refresh_kernel();
    }

    fn refresh_kernel(&mut self) {
        let m = self.cost.m;
        for i in 0..self.cost.n {
            let row = self.cost.row(i);
            let k = &mut self.kernel[i * m..(i + 1) * m];
            for j in 0..m {
                k[j] = ((self.f[i] + self.g[j] - row[j]) / self.eps).exp();
            }
        }
    }

    fn k_v(&self, out: &mut [f64]) {
        let m = self.cost.m;
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.kernel[i * m..(i + 1) * m]
                .iter()
                .zip(&self.v)
                .map(|(k, v)| k * v)
                .sum();
        }
    }

    fn kt_u(&self, out: &mut [f64]) {
        self.kt_u_with(&self.u, out)
    }

    fn kt_u_with(&self, u: &[f64], out: &mut [f64]) {
        let m = self.cost.m;
        out.fill(0.0);
        for (i, ui) in u.iter().enumerate() {
            for (o, k) in out.iter_mut().zip(&self.kernel[i * m..(i + 1) * m]) {
                *o += k * ui;
            }
        }
    }

    /// One scaling sweep, with `kv` holding `K v` on entry. Returns false if
    /// a scaling degenerated and the state had to be rebuilt in the log
    /// domain.
    fn sweep(&mut self, kv: &mut [f64], ktu: &mut [f64]) -> bool {
        let (a, b) = (self.log_a.exp(), self.log_b.exp());
        for (ui, s) in self.u.iter_mut().zip(kv.iter()) {
            *ui = a / s;
        }
        self.kt_u(ktu);
        for (vj, s) in self.v.iter_mut().zip(ktu.iter()) {
            *vj = b / s;
        }
        let ok = self
            .u
            .iter()
            .chain(&self.v)
            .all(|x| x.is_finite() && *x > 0.0);
        if !ok {
            self.log_update();
            return false;
        }
        if self
            .u
            .iter()
            .chain(&self.v)
            .any(|&x| !(1.0 / ABSORB_THRESHOLD..=ABSORB_THRESHOLD).contains(&x))
        {
            self.absorb();
        }
        true
    }

    fn row_error(&self, kv: &mut [f64]) -> f64 {
        let a = self.log_a.exp();
        self.k_v(kv);
        self.u
            .iter()
            .zip(kv.iter())
            .map(|(u, s)| (u * s - a).abs())
            .fold(0.0, f64::max)
    }

    fn plan(&self) -> Vec<f64> {
        let m = self.cost.m;
        let mut p = self.kernel.clone();
        for (i, row) in p.chunks_mut(m).enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x *= self.u[i] * self.v[j];
            }
        }
        p
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + xs.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Project a near-feasible plan onto the transport polytope with uniform
/// marginals (row/column down-scaling plus a rank-one correction).
fn round_to_feasible(plan: &mut [f64], n: usize, m: usize) {
    let (a, b) = (1.0 / n as f64, 1.0 / m as f64);
    for row in plan.chunks_mut(m) {
        let r: f64 = row.iter().sum();
        if r > a {
            let x = a / r;
            row.iter_mut().for_each(|p| *p *= x);
        }
    }
    let mut c = vec![0.0; m];
    for row in plan.chunks(m) {
        for (cj, p) in c.iter_mut().zip(row) {
            *cj += p;
        }
    }
    let y: Vec<f64> = c.iter().map(|&cj| if cj > b { b / cj } else { 1.0 }).collect();
    for row in plan.chunks_mut(m) {
        for (p, yj) in row.iter_mut().zip(&y) {
            *p *= yj;
        }
    }
    let err_a: Vec<f64> = plan.chunks(m).map(|r| a - r.iter().sum::<f64>()).collect();
    let mut err_b = vec![b; m];
    for row in plan.chunks(m) {
        for (e, p) in err_b.iter_mut().zip(row) {
            *e -= p;
        }
    }
    let mass: f64 = err_a.iter().sum();
    if mass > 0.0 {
        for (row, ea) in plan.chunks_mut(m).zip(&err_a) {
            for (p, eb) in row.iter_mut().zip(&err_b) {
                *p += ea.max(0.0) * eb.max(0.0) / mass;
            }
        }
    }
}

/// Iterate to tolerance; returns the solver, sweep count and final row
/// violation.
fn run(cost: &CostMatrix, params: SinkhornParams) -> Result<(Solver<'_>, usize, f64)> {
    let SinkhornParams {
        epsilon,
        tol,
        max_iter,
    } = params;
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Invalid(format!("epsilon must be > 0, got {epsilon}")));
    }
    if let Some(x) = cost.values.iter().find(|x| !x.is_finite()) {
        return Err(Error::Invalid(format!("non-finite cost entry {x}")));
    }
    let mut solver = Solver::new(cost, epsilon);
    let mut kv = vec![0.0; cost.n];
    let mut ktu = vec![0.0; cost.m];

    let mut err = solver.row_error(&mut kv);
    let mut iterations = 0;
    while err >= tol && iterations < max_iter {
        solver.sweep(&mut kv, &mut ktu);
        iterations += 1;
        err = solver.row_error(&mut kv);
    }
    Ok((solver, iterations, err))
}

/// Log-stabilized Sinkhorn iterations with uniform marginals `1/n`, `1/m`.
///
/// Stops when the L-infinity row-marginal violation drops below `tol`
/// (columns are exact after each sweep) or after `max_iter` sweeps. The
/// final plan is rounded onto the feasible set before its cost is taken,
/// so the reported cost never undercuts the exact transport cost.
pub fn sinkhorn_plan(cost: &CostMatrix, params: SinkhornParams) -> Result<SinkhornPlan> {
    let (n, m) = (cost.n, cost.m);
    let (solver, iterations, err) = run(cost, params)?;
    let converged = err < params.tol;

    let mut plan = solver.plan();
    round_to_feasible(&mut plan, n, m);
    let transport_cost = plan
        .iter()
        .zip(&cost.values)
        .map(|(p, c)| p * c)
        .sum::<f64>()
        .max(0.0);
    Ok(SinkhornPlan {
        result: SinkhornResult {
            transport_cost,
            iterations,
            marginal_error: err,
            converged,
        },
        n,
        m,
        plan,
    })
}

/// Minimum-cost perfect matching on a square cost matrix (shortest
/// augmenting paths with dual potentials, O(n^3)). Returns `assign[i] = j`.
pub fn solve_assignment(cost: &CostMatrix) -> Result<Vec<usize>> {
    let n = cost.n;
    if cost.m != n {
        return Err(Error::Invalid(format!(
            "assignment needs a square matrix, got {}x{}",
            n, cost.m
        )));
    }
    // 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    Ok(assign)
}

/// Exact W1 between two equal-size uniform point sets: the mean matched
/// distance of an optimal assignment.
pub fn exact_w1<X: AsRef<[f64]>, Y: AsRef<[f64]>>(xs: &[X], ys: &[Y]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Invalid(format!(
            "exact W1 needs equal set sizes, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() > EXACT_MAX_POINTS {
        return Err(Error::Invalid(format!(
            "exact W1 limited to {EXACT_MAX_POINTS} points, got {}",
            xs.len()
        )));
    }
    let cost = build_cost(xs, ys)?;
    let assign = solve_assignment(&cost)?;
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
    Ok(total / xs.len() as f64)
}

/// Uniform sample without replacement of at most `max_n` points, keeping
/// the original relative order.
pub fn subsample_states<T: Clone>(states: &[T], max_n: usize, seed: u64) -> Vec<T> {
    let max_n = max_n.max(1);
    if states.len() <= max_n {
        return states.to_vec();
    }
    let mut idx = index::sample(&mut rng::substream(seed, "subsample", &[]), states.len(), max_n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| states[i].clone()).collect()
}
