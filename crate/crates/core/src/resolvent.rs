//! Exact λ-Green functions on the tree.
//!
//! For each oriented quotient edge `e`, the branch behind `e` is the component of
//! the tree beyond `i(e)` not containing `t(e)`, together with `e` itself. Its
//! minimal positive λ-harmonic function, normalized at `i(e)`, is
//! `u_e(s) = cos(√λ s) + M_e sin(√λ s)/√λ` along `e`, where `M_e` is the sum of
//! the Weyl coefficients `m_{e'}` of the branches entering `i(e)`. The Weyl
//! coefficient of `e` is `m_e = u_e'(l)/u_e(l)` and the hitting transform across
//! `e` is `F_e = 1/u_e(l)`. Green functions, hitting transforms and Martin and
//! Naïm kernels all factor through these per-edge quantities.

use crate::graph::{
    geodesic, point_along, random_point, tree_distance, walk_pieces, BoundaryRay,
    EdgeId, GraphError, Piece, QuotientGraph, TreePoint, TreeVertex,
};
use crate::jet::{gauss16, Jet, Scalar};
use crate::linalg::{line_fit, spectral_radius};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ResolventError {
    #[error("λ must be nonnegative, got {0}")]
    NegativeLambda(f64),
    #[error("Weyl recursion did not converge at λ = {0} (above the spectral bottom)")]
    NotConverged(f64),
    #[error("ray depth {depth} does not pass the median; need at least {needed}")]
    DepthTooSmall { depth: usize, needed: usize },
    #[error("boundary points coincide")]
    EqualBoundaryPoints,
    #[error("tail bound {bound:e} exceeds tolerance {tol:e}")]
    TailNotControlled { bound: f64, tol: f64 },
    #[error("linear system is singular at λ = {0}")]
    Singular(f64),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Debug)]
pub struct WeylOptions {
    /// Sup-norm residual tolerance of the fixed point.
    pub tol: f64,
    /// Plain iteration budget before switching to Newton steps.
    pub max_iter: usize,
    /// Iterations are declared divergent once some `F_e` exceeds this.
    pub blowup: f64,
    pub newton_steps: usize,
    /// Plain sweeps performed before Newton acceleration.
    pub warmup: usize,
}

impl Default for WeylOptions {
    fn default() -> Self {
        WeylOptions {
            tol: 1e-13,
            max_iter: 100_000,
            blowup: 1e6,
            newton_steps: 400,
            warmup: 64,
        }
    }
}

/// Branch data `(m_e, M_e, F_e)` at a fixed λ.
#[derive(Clone, Debug)]
pub struct WeylTable {
    graph: QuotientGraph,
    pub lambda: f64,
    pub m: Vec<f64>,
    pub big_m: Vec<f64>,
    pub f: Vec<f64>,
    /// `F_e` after a single sweep from the absorbing initialization.
    pub f_initial: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    /// Spectral radius of the Jacobian of the recursion at the solution.
    pub jacobian_radius: f64,
}

/// One sweep of the branch recursion; `None` when a denominator is nonpositive.
fn sweep(g: &QuotientGraph, lam: f64, m: &[f64]) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = g.num_edges();
    let mut big_m = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut f = vec![0.0; n];
    for e in 0..n {
        let mm: f64 = g.predecessors(e).map(|p| m[p]).sum();
        let (c, sk) = crate::jet::trig_f64(lam, g.len(e));
        let den = c + mm * sk;
        if !(den > 0.0) || !den.is_finite() {
            return None;
        }
        big_m[e] = mm;
        out[e] = (mm * c - lam * sk) / den;
        f[e] = 1.0 / den;
    }
    Some((out, big_m, f))
}

fn jacobian(g: &QuotientGraph, f: &[f64]) -> DMatrix<f64> {
    let n = g.num_edges();
    let mut j = DMatrix::zeros(n, n);
    for e in 0..n {
        for p in g.predecessors(e) {
            j[(e, p)] = f[e] * f[e];
        }
    }
    j
}

pub fn solve_weyl(g: &QuotientGraph, lambda: f64) -> Result<WeylTable, ResolventError> {
    solve_weyl_with(g, lambda, &WeylOptions::default())
}

/// Solves the branch recursion from the absorbing (Dirichlet) initialization.
///
/// Plain iterates decrease monotonically to the fixed point when `λ ≤ λ₀`;
/// since they slow down near `λ₀`, Newton steps take over after a warmup. The
/// iterates stay above the fixed point and the Jacobian keeps spectral radius
/// below one, so Newton failure (a nonpositive denominator or a Jacobian with
/// radius at least one) certifies `λ > λ₀`.
pub fn solve_weyl_with(
    g: &QuotientGraph,
    lambda: f64,
    opts: &WeylOptions,
) -> Result<WeylTable, ResolventError> {
    if !(lambda >= 0.0) {
        return Err(ResolventError::NegativeLambda(lambda));
    }
    let n = g.num_edges();
    let diverged = |iterations: usize, f_initial: Vec<f64>| WeylTable {
        graph: g.clone(),
        lambda,
        m: vec![f64::NAN; n],
        big_m: vec![f64::NAN; n],
        f: vec![f64::NAN; n],
        f_initial,
        converged: false,
        iterations,
        residual: f64::INFINITY,
        jacobian_radius: f64::NAN,
    };
    let mut m = Vec::with_capacity(n);
    for e in 0..n {
        let (c, sk) = crate::jet::trig_f64(lambda, g.len(e));
        if !(sk > 0.0) {
            return Ok(diverged(0, vec![f64::NAN; n]));
        }
        m.push(c / sk);
    }
    let scale = |m: &[f64]| 1.0 + m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut f_initial = vec![f64::NAN; n];
    let mut iterations = 0;
    let warmup = opts.warmup.min(opts.max_iter);
    for it in 0..warmup {
        let Some((next, _, f)) = sweep(g, lambda, &m) else {
            return Ok(diverged(iterations, f_initial));
        };
        if it == 0 {
            f_initial = f.clone();
        }
        if f.iter().any(|&x| x > opts.blowup) {
            return Ok(diverged(iterations, f_initial));
        }
        iterations += 1;
        let change = next.iter().zip(&m).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        m = next;
        if change < opts.tol * scale(&m) {
            break;
        }
    }
    for _ in 0..opts.newton_steps {
        let Some((next, _, f)) = sweep(g, lambda, &m) else {
            return Ok(diverged(iterations, f_initial));
        };
        if f.iter().any(|&x| x > opts.blowup) {
            return Ok(diverged(iterations, f_initial));
        }
        let r: Vec<f64> = next.iter().zip(&m).map(|(x, y)| x - y).collect();
        let res = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if res < opts.tol * scale(&m) {
            break;
        }
        iterations += 1;
        let a = DMatrix::identity(n, n) - jacobian(g, &f);
        let lu = a.lu();
        let ones = nalgebra::DVector::from_element(n, 1.0);
        match lu.solve(&ones) {
            Some(x) if x.iter().all(|&v| v > 0.0) => {}
            _ => return Ok(diverged(iterations, f_initial)),
        }
        let Some(step) = lu.solve(&nalgebra::DVector::from_vec(r)) else {
            return Ok(diverged(iterations, f_initial));
        };
        for e in 0..n {
            m[e] += step[e];
        }
    }
    let Some((next, big_m, f)) = sweep(g, lambda, &m) else {
        return Ok(diverged(iterations, f_initial));
    };
    let residual = next.iter().zip(&m).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    let converged = residual < 1e3 * opts.tol * scale(&m) && f.iter().all(|&x| x <= opts.blowup);
    if !converged {
        return Ok(diverged(iterations, f_initial));
    }
    let jr = spectral_radius(&jacobian(g, &f)).unwrap_or(f64::NAN);
    Ok(WeylTable {
        graph: g.clone(),
        lambda,
        m: next,
        big_m,
        f,
        f_initial,
        converged,
        iterations,
        residual,
        jacobian_radius: jr,
    })
}

/// A value with a reported relative error band.
#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct Banded {
    pub value: f64,
    pub band: f64,
}

impl WeylTable {
    pub fn graph(&self) -> &QuotientGraph {
        &self.graph
    }

    pub fn require_converged(&self) -> Result<(), ResolventError> {
        if self.converged {
            Ok(())
        } else {
            Err(ResolventError::NotConverged(self.lambda))
        }
    }

    pub fn kernel(&self) -> Kernel<'_, f64> {
        Kernel {
            g: &self.graph,
            lam: self.lambda,
            big_m: &self.big_m,
        }
    }

    pub fn green(&self, x: &TreePoint, y: &TreePoint) -> Result<f64, ResolventError> {
        self.require_converged()?;
        Ok(self.kernel().green(x, y))
    }

    /// `Φ_λ(x, y) = E_x[e^{λ t_y}; t_y < ∞]`.
    pub fn hitting_transform(&self, x: &TreePoint, y: &TreePoint) -> Result<f64, ResolventError> {
        self.require_converged()?;
        Ok(self.kernel().phi(x, y))
    }

    /// `k_λ(x0, x, ξ)` evaluated at the ray vertex after `depth` letters.
    pub fn martin_kernel(
        &self,
        x0: &TreePoint,
        x: &TreePoint,
        xi: &BoundaryRay,
        depth: usize,
    ) -> Result<Banded, ResolventError> {
        self.require_converged()?;
        let needed = x0.path_word().len().max(x.path_word().len()) + 1;
        if depth < needed {
            return Err(ResolventError::DepthTooSmall { depth, needed });
        }
        let k = self.kernel();
        let eval = |n: usize| {
            let z = TreePoint::vertex(xi.vertex(n));
            k.phi(x, &z) / k.phi(x0, &z)
        };
        let v = eval(depth);
        let w = eval(depth + 1);
        Ok(Banded {
            value: v,
            band: ((w - v) / v).abs().max(ROUNDOFF * depth as f64),
        })
    }

    /// Naïm kernel `θ_x(ξ, ζ) = lim G(y, z)/(G(y, x) G(x, z))` as `y → ξ`, `z → ζ`.
    pub fn naim_kernel(
        &self,
        x: &TreePoint,
        xi: &BoundaryRay,
        zeta: &BoundaryRay,
        depth: usize,
    ) -> Result<Banded, ResolventError> {
        self.require_converged()?;
        let split = xi
            .common_letters(zeta)
            .ok_or(ResolventError::EqualBoundaryPoints)?;
        let needed = split.max(x.path_word().len()) + 1;
        if depth < needed {
            return Err(ResolventError::DepthTooSmall { depth, needed });
        }
        let k = self.kernel();
        let eval = |n: usize| {
            let y = TreePoint::vertex(xi.vertex(n));
            let z = TreePoint::vertex(zeta.vertex(n));
            k.phi(&y, &z) / (k.phi(&y, x) * k.phi(x, &z) * k.green_diag(x))
        };
        let v = eval(depth);
        let w = eval(depth + 1);
        Ok(Banded {
            value: v,
            band: ((w - v) / v).abs().max(ROUNDOFF * depth as f64),
        })
    }

    /// Second-order λ-jets of the branch data, obtained by differentiating the
    /// fixed-point equation.
    pub fn jets(&self) -> Result<WeylJets, ResolventError> {
        self.require_converged()?;
        let g = &self.graph;
        let n = g.num_edges();
        let lam = Jet::var(self.lambda);
        let a = DMatrix::identity(n, n) - jacobian(g, &self.f);
        let lu = a.lu();
        let mut m: Vec<Jet> = self.m.iter().map(|&v| Jet::cst(v)).collect();
        for _ in 0..4 {
            let (next, _) = jet_sweep(g, lam, &m);
            let mut step = vec![[0.0; 3]; n];
            for k in 0..3 {
                let r = nalgebra::DVector::from_fn(n, |e, _| next[e].0[k] - m[e].0[k]);
                let s = lu.solve(&r).ok_or(ResolventError::Singular(self.lambda))?;
                for e in 0..n {
                    step[e][k] = s[e];
                }
            }
            for e in 0..n {
                m[e] += Jet(step[e]);
            }
        }
        let (_, big_m) = jet_sweep(g, lam, &m);
        Ok(WeylJets {
            graph: g.clone(),
            lam,
            m,
            big_m,
        })
    }

    /// `∫ G(x,z) G(z,y) dz` over the whole tree, which equals `∂G(x,y)/∂λ`.
    pub fn green_derivative(&self, x: &TreePoint, y: &TreePoint) -> Result<f64, ResolventError> {
        self.require_converged()?;
        self.kernel()
            .green_derivative(x, y)
            .ok_or(ResolventError::Singular(self.lambda))
    }

    /// Cone integrals `I_f = ∫_{cone(f)} Φ(z, i(f))² dz`.
    pub fn cone_integrals(&self) -> Result<Vec<f64>, ResolventError> {
        self.require_converged()?;
        self.kernel()
            .cone_integrals()
            .ok_or(ResolventError::Singular(self.lambda))
    }
}

/// Relative round-off floor used for bands of exactly stabilized limits.
pub const ROUNDOFF: f64 = 1e-15;

fn jet_sweep(g: &QuotientGraph, lam: Jet, m: &[Jet]) -> (Vec<Jet>, Vec<Jet>) {
    let n = g.num_edges();
    let mut out = Vec::with_capacity(n);
    let mut big_m = Vec::with_capacity(n);
    for e in 0..n {
        let mut mm = Jet::cst(0.0);
        for p in g.predecessors(e) {
            mm += m[p];
        }
        let (c, sk) = Jet::trig(lam, g.len(e));
        out.push((mm * c - lam * sk) / (c + mm * sk));
        big_m.push(mm);
    }
    (out, big_m)
}

/// Branch data as λ-jets.
#[derive(Clone, Debug)]
pub struct WeylJets {
    graph: QuotientGraph,
    pub lam: Jet,
    pub m: Vec<Jet>,
    pub big_m: Vec<Jet>,
}

impl WeylJets {
    pub fn kernel(&self) -> Kernel<'_, Jet> {
        Kernel {
            g: &self.graph,
            lam: self.lam,
            big_m: &self.big_m,
        }
    }
}

/// Green-function assembly from branch data, generic over plain values and jets.
#[derive(Clone, Copy)]
pub struct Kernel<'a, S> {
    pub g: &'a QuotientGraph,
    pub lam: S,
    pub big_m: &'a [S],
}

impl<'a, S: Scalar> Kernel<'a, S> {
    /// Branch function of `e` and its derivative at distance `s` from `i(e)`.
    pub fn u(&self, e: EdgeId, s: f64) -> (S, S) {
        let (c, sk) = S::trig(self.lam, s);
        let mm = self.big_m[e];
        (c + mm * sk, mm * c - self.lam * sk)
    }

    pub fn f(&self, e: EdgeId) -> S {
        S::cst(1.0) / self.u(e, self.g.len(e)).0
    }

    /// Hitting transform across a piece, in its direction of travel.
    pub fn phi_piece(&self, p: &Piece) -> S {
        self.u(p.edge, p.from).0 / self.u(p.edge, p.to).0
    }

    pub fn phi(&self, x: &TreePoint, y: &TreePoint) -> S {
        let seg = geodesic(self.g, x, y);
        let mut acc = S::cst(1.0);
        for p in &seg.pieces {
            acc = acc * self.phi_piece(p);
        }
        acc
    }

    /// Sum of outward Weyl coefficients of all branches at `y`.
    fn weyl_sum(&self, y: &TreePoint) -> S {
        match y.edge {
            None => {
                let v = y.anchor.project(self.g);
                let mut acc = S::cst(0.0);
                for &f in self.g.out_edges(v) {
                    let r = self.g.rev(f);
                    let (u, du) = self.u(r, self.g.len(r));
                    acc += du / u;
                }
                acc
            }
            Some(e) => {
                let l = self.g.len(e);
                let (u1, du1) = self.u(e, y.offset);
                let r = self.g.rev(e);
                let (u2, du2) = self.u(r, l - y.offset);
                du1 / u1 + du2 / u2
            }
        }
    }

    pub fn green_diag(&self, y: &TreePoint) -> S {
        S::cst(1.0) / self.weyl_sum(y)
    }

    pub fn green(&self, x: &TreePoint, y: &TreePoint) -> S {
        self.phi(x, y) * self.green_diag(y)
    }

    /// Cone integrals `I_f`, solving `I_f = b_f + F_{f̄}² Σ_{f' after f} I_{f'}`.
    pub fn cone_integrals(&self) -> Option<Vec<S>> {
        let g = self.g;
        let n = g.num_edges();
        let mut a = vec![vec![S::cst(0.0); n]; n];
        let mut b = Vec::with_capacity(n);
        for f in 0..n {
            let r = g.rev(f);
            let l = g.len(f);
            let fr = self.f(r);
            let d = fr * fr;
            b.push(d * gauss16(0.0, l, |s| {
                let u = self.u(r, s).0;
                u * u
            }));
            a[f][f] = S::cst(1.0);
            for s in g.successors(f) {
                a[f][s] = a[f][s] - d;
            }
        }
        let sol = S::solve(&a, &b)?;
        if sol.iter().all(|v| v.val() > 0.0 && v.val().is_finite()) {
            Some(sol)
        } else {
            None
        }
    }

    /// `∫ Φ(z, P)² dz` over everything beyond the point `P` at position `a` of
    /// oriented edge `h`, in the direction of `h`.
    pub fn half_cone(&self, h: EdgeId, a: f64, cones: &[S]) -> S {
        let g = self.g;
        let l = g.len(h);
        let r = g.rev(h);
        let ua = self.u(r, l - a).0;
        let edge_part = gauss16(a, l, |s| {
            let q = self.u(r, l - s).0 / ua;
            q * q
        });
        let mut beyond = S::cst(0.0);
        for f in g.successors(h) {
            beyond += cones[f];
        }
        edge_part + beyond / (ua * ua)
    }

    /// Directions leaving `p` as `(edge, position)` pairs.
    fn directions(&self, p: &TreePoint) -> Vec<(EdgeId, f64)> {
        match p.edge {
            None => self
                .g
                .out_edges(p.anchor.project(self.g))
                .iter()
                .map(|&f| (f, 0.0))
                .collect(),
            Some(e) => vec![(e, p.offset), (self.g.rev(e), self.g.len(e) - p.offset)],
        }
    }

    /// `∫ G(x,z) G(z,y) dz`, by Gauss–Legendre quadrature along `[x, y]` and exact
    /// cone sums for the subtrees hanging off it.
    pub fn green_derivative(&self, x: &TreePoint, y: &TreePoint) -> Option<S> {
        let g = self.g;
        let cones = self.cone_integrals()?;
        let seg = geodesic(g, x, y);
        let gxy = self.green(x, y);
        let hanging = |p: &TreePoint, skip: &[(EdgeId, f64)], weight: S| -> S {
            let mut acc = S::cst(0.0);
            for (h, a) in self.directions(p) {
                if skip
                    .iter()
                    .any(|&(e, b)| e == h && (b - a).abs() <= 1e-12 * g.len(h))
                {
                    continue;
                }
                acc += self.half_cone(h, a, &cones);
            }
            acc * weight
        };
        if seg.pieces.is_empty() {
            let gxx = self.green_diag(x);
            return Some(hanging(x, &[], gxx * gxx));
        }
        let mut total = S::cst(0.0);
        let first = seg.pieces[0];
        total += hanging(x, &[(first.edge, first.from)], self.green_diag(x) * gxy);
        let last = *seg.pieces.last().unwrap();
        let lr = last.reversed(g);
        total += hanging(y, &[(lr.edge, lr.from)], self.green_diag(y) * gxy);
        let mut at = x.clone();
        for (i, p) in seg.pieces.iter().enumerate() {
            let end = walk_pieces(g, &at, std::slice::from_ref(p), p.len());
            let gxa = self.green(x, &at);
            let gby = self.green(&end, y);
            let l = g.len(p.edge);
            let r = g.rev(p.edge);
            let ua = self.u(r, l - p.from).0;
            let ub = self.u(p.edge, p.to).0;
            total += gauss16(p.from, p.to, |s| {
                let left = self.u(r, l - s).0 / ua * gxa;
                let right = self.u(p.edge, s).0 / ub * gby;
                left * right
            });
            if i + 1 < seg.pieces.len() {
                let next = seg.pieces[i + 1];
                let back = (g.rev(p.edge), 0.0);
                let w = self.green(x, &end) * self.green(&end, y);
                total += hanging(&end, &[back, (next.edge, next.from)], w);
            }
            at = end;
        }
        Some(total)
    }
}

/// λ₀ by bisection on the convergence of the branch recursion.
pub fn lambda0_resolvent(g: &QuotientGraph, tol: f64) -> f64 {
    let mut lo = 0.0;
    let lmax = g.max_length();
    let mut hi = (std::f64::consts::PI / lmax).powi(2);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let ok = solve_weyl(g, mid).map(|w| w.converged).unwrap_or(false);
        if ok {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Largest λ certified below λ₀ by the bisection bracket.
pub fn lambda0_bracket(g: &QuotientGraph, tol: f64) -> (f64, f64) {
    let mut lo = 0.0;
    let mut hi = (std::f64::consts::PI / g.max_length()).powi(2);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if solve_weyl(g, mid).map(|w| w.converged).unwrap_or(false) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, hi)
}

/// Order and route of a λ-derivative of the Green function.
#[derive(Clone, Debug, Serialize)]
pub struct DerivativeReport {
    pub lambda: f64,
    pub order: u8,
    /// Integral representation: `∫GG` (order 1) or `2∫∂G(x,z)G(z,y)dz` (order 2).
    pub integral: f64,
    /// Differentiation of the assembled Green function through the fixed point.
    pub jet: f64,
    /// Tail bound when the integral was restricted to a ball.
    pub tail_bound: Option<f64>,
}

/// `∂^k G_λ(x,y)/∂λ^k` for `k ∈ {1, 2}` by two independent routes. With
/// `radius`, the order-1 integral is taken over the ball of that radius around
/// `x`, and the remaining tail is bounded by the cone sums at the ball boundary.
pub fn green_lambda_derivative(
    g: &QuotientGraph,
    lambda: f64,
    x: &TreePoint,
    y: &TreePoint,
    order: u8,
    radius: Option<f64>,
    tol: f64,
) -> Result<DerivativeReport, ResolventError> {
    let w = solve_weyl(g, lambda)?;
    w.require_converged()?;
    let jets = w.jets()?;
    let gj = jets.kernel().green(x, y);
    match order {
        1 => {
            let (integral, tail) = match radius {
                None => (w.green_derivative(x, y)?, None),
                Some(r) => {
                    let (v, t) = ball_derivative(&w, x, y, r)?;
                    if t > tol * v {
                        return Err(ResolventError::TailNotControlled { bound: t, tol: tol * v });
                    }
                    (v, Some(t))
                }
            };
            Ok(DerivativeReport {
                lambda,
                order,
                integral,
                jet: gj.d1(),
                tail_bound: tail,
            })
        }
        _ => {
            let integral = jets
                .kernel()
                .green_derivative(x, y)
                .ok_or(ResolventError::Singular(lambda))?
                .d1();
            Ok(DerivativeReport {
                lambda,
                order: 2,
                integral,
                jet: gj.d2(),
                tail_bound: None,
            })
        }
    }
}

/// Explicit quadrature of `∫_{B(x,R)} G(x,z)G(z,y) dz` over every edge lift in
/// the ball, with a bound on the omitted tail.
pub fn ball_derivative(
    w: &WeylTable,
    x: &TreePoint,
    y: &TreePoint,
    radius: f64,
) -> Result<(f64, f64), ResolventError> {
    w.require_converged()?;
    let g = w.graph();
    let k = w.kernel();
    let cones = k.cone_integrals().ok_or(ResolventError::Singular(w.lambda))?;
    let mut total = 0.0;
    let mut tail = 0.0;
    // Stack of (start point, oriented edge, start position, distance from x).
    let mut stack: Vec<(TreePoint, EdgeId, f64, f64)> = Vec::new();
    let start_dirs: Vec<(EdgeId, f64)> = match x.edge {
        None => g
            .out_edges(x.anchor.project(g))
            .iter()
            .map(|&f| (f, 0.0))
            .collect(),
        Some(e) => vec![(e, x.offset), (g.rev(e), g.len(e) - x.offset)],
    };
    for (h, a) in start_dirs {
        stack.push((x.clone(), h, a, 0.0));
    }
    while let Some((p, h, a, d0)) = stack.pop() {
        let l = g.len(h);
        let reach = (radius - d0).min(l - a);
        // Beyond the ball, G(x,·)G(·,y) = G(x,z)G(z,y)Φ(·,z)² when y lies in it.
        if reach <= 0.0 {
            tail += k.green(x, &p) * k.green(&p, y) * k.half_cone(h, a, &cones);
            continue;
        }
        let base = base_vertex_of(g, &p, h, a);
        total += gauss16(a, a + reach, |s| {
            let z = if s >= l {
                TreePoint::vertex(base.step(g, h))
            } else if s <= 0.0 {
                TreePoint::vertex(base.clone())
            } else {
                TreePoint::along(g, &base, h, s)
            };
            k.green(x, &z) * k.green(&z, y)
        });
        if a + reach < l {
            let z = TreePoint::along(g, &base, h, a + reach);
            tail += k.green(x, &z) * k.green(&z, y) * k.half_cone(h, a + reach, &cones);
            continue;
        }
        let v = base.step(g, h);
        let vp = TreePoint::vertex(v.clone());
        for f in g.out_edges(v.project(g)) {
            if *f == g.rev(h) {
                continue;
            }
            stack.push((vp.clone(), *f, 0.0, d0 + reach));
        }
    }
    Ok((total, tail))
}

/// Tree vertex at the origin of the tree edge of type `h` through the point `p`
/// located at position `a` along it.
fn base_vertex_of(g: &QuotientGraph, p: &TreePoint, h: EdgeId, a: f64) -> TreeVertex {
    match p.edge {
        None => p.anchor.clone(),
        Some(e) => {
            if h == e {
                p.anchor.clone()
            } else {
                debug_assert!((g.len(h) - p.offset - a).abs() < 1e-12);
                p.anchor.child(e)
            }
        }
    }
}

/// Central finite difference of `G_λ(x,y)` in λ.
pub fn green_fd(
    g: &QuotientGraph,
    lambda: f64,
    x: &TreePoint,
    y: &TreePoint,
    h: f64,
    order: u8,
) -> Result<f64, ResolventError> {
    let at = |l: f64| -> Result<f64, ResolventError> { solve_weyl(g, l)?.green(x, y) };
    let p = at(lambda + h)?;
    let m = at(lambda - h)?;
    Ok(match order {
        1 => (p - m) / (2.0 * h),
        _ => (p - 2.0 * at(lambda)? + m) / (h * h),
    })
}

/// Strong-Ancona deviations at one overlap length.
#[derive(Clone, Debug, Serialize)]
pub struct StrongAnconaPoint {
    pub overlap: f64,
    pub max_deviation: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StrongAnconaFit {
    pub points: Vec<StrongAnconaPoint>,
    pub max_deviation: f64,
    /// True when every deviation sits at the round-off floor, so no decay rate
    /// can be fitted and the bound holds for every ρ in (0, 1).
    pub exact: bool,
    pub rho: Option<f64>,
    pub c: Option<f64>,
    pub r2: Option<f64>,
}

impl StrongAnconaFit {
    /// Error band `C ρ^n` for overlap `n`; the round-off floor when exact.
    pub fn band(&self, n: f64) -> f64 {
        match (self.exact, self.rho, self.c) {
            (false, Some(r), Some(c)) => c * r.powf(n),
            _ => self.max_deviation.max(1e-12),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AnconaReport {
    pub lambda: f64,
    /// Smallest `C` with `G(x,y)G(y,z)/C ≤ G(x,z) ≤ C G(x,y)G(y,z)` over samples.
    pub c_ancona: f64,
    pub strong: StrongAnconaFit,
    /// Largest sampled `log f(y)/f(z)` for positive λ-harmonic `f` on `B(x, r+l)`.
    pub d_harnack_empirical: f64,
    /// `max_x √(2|S(x,r+l)| μ(B(x,r))/l)`.
    pub d_harnack_formula_a: f64,
    /// `max_x max_{0<s≤l} √(4|S(x,r+s)| μ(B(x,r))/l)`.
    pub d_harnack_formula_b: f64,
    pub harnack_r: f64,
    pub harnack_l: f64,
}

/// Empirical Ancona, strong-Ancona and Harnack constants.
pub fn ancona_diagnostics(
    w: &WeylTable,
    samples: usize,
    seed: u64,
) -> Result<AnconaReport, ResolventError> {
    w.require_converged()?;
    let g = w.graph();
    let k = w.kernel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c_anc: f64 = 1.0;
    let mut taken = 0;
    while taken < samples {
        let x = random_point(g, &mut rng, 6);
        let z = random_point(g, &mut rng, 6);
        let d = tree_distance(g, &x, &z);
        if d < 2.0 {
            continue;
        }
        let s = rng.gen_range(1.0..=d - 1.0);
        let y = point_along(g, &x, &z, s);
        let r = k.green(&x, &z) / (k.green(&x, &y) * k.green(&y, &z));
        c_anc = c_anc.max(r).max(1.0 / r);
        taken += 1;
    }
    let strong = strong_ancona(w, samples.max(10), &mut rng);
    let (r, l) = (g.max_length(), g.max_length());
    let (d_emp, da, db) = harnack(w, r, l, samples.max(10), &mut rng);
    Ok(AnconaReport {
        lambda: w.lambda,
        c_ancona: c_anc,
        strong,
        d_harnack_empirical: d_emp,
        d_harnack_formula_a: da,
        d_harnack_formula_b: db,
        harnack_r: r,
        harnack_l: l,
    })
}

/// Fork configurations: `[x, y]` and `[x', y']` share a segment of `n` edges,
/// with `x, x'` branching at one end and `y, y'` at the other.
fn strong_ancona(w: &WeylTable, samples: usize, rng: &mut ChaCha8Rng) -> StrongAnconaFit {
    let g = w.graph();
    let k = w.kernel();
    let mut points = Vec::new();
    for n in 1..=8usize {
        let mut worst: f64 = 0.0;
        let mut overlap = 0.0;
        for _ in 0..samples / 8 + 1 {
            // Shared segment from vertex a to vertex b.
            let a = crate::graph::random_vertex(g, rng, 2);
            let mut b = a.clone();
            for _ in 0..n {
                let ch: Vec<EdgeId> = b.child_edges(g).collect();
                b = b.child(ch[rng.gen_range(0..ch.len())]);
            }
            let first = b.word[a.depth()];
            let last = *b.word.last().unwrap();
            let at = |v: &TreeVertex, avoid: EdgeId, rng: &mut ChaCha8Rng| -> Vec<TreePoint> {
                let dirs: Vec<EdgeId> = g
                    .out_edges(v.project(g))
                    .iter()
                    .copied()
                    .filter(|&f| f != avoid)
                    .collect();
                dirs.iter()
                    .map(|&f| {
                        let off = rng.gen_range(0.3..1.0) * g.len(f);
                        TreePoint::along(g, v, f, off)
                    })
                    .collect()
            };
            let xs = at(&a, first, rng);
            let ys = at(&b, g.rev(last), rng);
            let (x, xp, y, yp) = (&xs[0], &xs[1], &ys[0], &ys[1]);
            let ratio =
                (k.green(x, y) / k.green(xp, y)) / (k.green(x, yp) / k.green(xp, yp));
            worst = worst.max((ratio - 1.0).abs());
            overlap = tree_distance(g, &TreePoint::vertex(a.clone()), &TreePoint::vertex(b));
        }
        points.push(StrongAnconaPoint {
            overlap,
            max_deviation: worst,
        });
    }
    let max_dev = points.iter().map(|p| p.max_deviation).fold(0.0, f64::max);
    let exact = max_dev <= 1e-12;
    let (mut rho, mut c, mut r2) = (None, None, None);
    if !exact {
        let xs: Vec<f64> = points.iter().map(|p| p.overlap).collect();
        let ys: Vec<f64> = points
            .iter()
            .map(|p| p.max_deviation.max(f64::MIN_POSITIVE).ln())
            .collect();
        if let Ok(fit) = line_fit(&xs, &ys) {
            rho = Some(fit.slope.exp());
            c = Some(fit.intercept.exp());
            r2 = Some(fit.r2);
        }
    }
    StrongAnconaFit {
        points,
        max_deviation: max_dev,
        exact,
        rho,
        c,
        r2,
    }
}

/// Sphere cardinality and ball measure around a point.
pub fn ball_stats(g: &QuotientGraph, x: &TreePoint, r: f64) -> (usize, f64) {
    let mut count = 0;
    let mut measure = 0.0;
    let mut stack: Vec<(TreePoint, EdgeId, f64, f64)> = Vec::new();
    let dirs: Vec<(EdgeId, f64)> = match x.edge {
        None => g
            .out_edges(x.anchor.project(g))
            .iter()
            .map(|&f| (f, 0.0))
            .collect(),
        Some(e) => vec![(e, x.offset), (g.rev(e), g.len(e) - x.offset)],
    };
    for (h, a) in dirs {
        stack.push((x.clone(), h, a, 0.0));
    }
    while let Some((p, h, a, d0)) = stack.pop() {
        let l = g.len(h);
        let left = l - a;
        if d0 + left >= r {
            measure += r - d0;
            count += 1;
            continue;
        }
        measure += left;
        let v = base_vertex_of(g, &p, h, a).step(g, h);
        let vp = TreePoint::vertex(v.clone());
        for &f in g.out_edges(v.project(g)) {
            if f != g.rev(h) {
                stack.push((vp.clone(), f, 0.0, d0 + left));
            }
        }
    }
    (count, measure)
}

fn harnack(
    w: &WeylTable,
    r: f64,
    l: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, f64, f64) {
    let g = w.graph();
    let k = w.kernel();
    // Formula values, maximized over centers in a fundamental domain (all
    // vertices and a grid of interior points of the quotient edges).
    let mut centers: Vec<TreePoint> = Vec::new();
    for v in 0..g.num_vertices() {
        let word = if v == g.base() {
            Vec::new()
        } else {
            let e = g.out_edges(g.base()).iter().copied().find(|&f| g.terminus(f) == v);
            match e {
                Some(e) => vec![e],
                None => continue,
            }
        };
        centers.push(TreePoint::vertex(TreeVertex { word }));
    }
    for &e in g.out_edges(g.base()) {
        for j in 1..4 {
            centers.push(TreePoint::along(g, &TreeVertex::root(), e, g.len(e) * j as f64 / 4.0));
        }
    }
    let mut da: f64 = 0.0;
    let mut db: f64 = 0.0;
    for c in &centers {
        let (_, mu) = ball_stats(g, c, r);
        let (s_rl, _) = ball_stats(g, c, r + l);
        da = da.max((2.0 * s_rl as f64 * mu / l).sqrt());
        for j in 1..=8 {
            let (s, _) = ball_stats(g, c, r + l * j as f64 / 8.0);
            db = db.max((4.0 * s as f64 * mu / l).sqrt());
        }
    }
    // Empirical: f = G(·, p) with p outside B(x, r + l), sampled over B(x, r).
    let mut d_emp: f64 = 0.0;
    for _ in 0..samples {
        let x = random_point(g, rng, 3);
        let mut p;
        loop {
            p = random_point(g, rng, 10);
            if tree_distance(g, &x, &p) >= r + l {
                break;
            }
        }
        let mut pts = Vec::new();
        while pts.len() < 6 {
            let y = random_point(g, rng, 8);
            if tree_distance(g, &x, &y) <= r {
                pts.push(y);
            }
        }
        let vals: Vec<f64> = pts.iter().map(|y| k.green(y, &p)).collect();
        let hi = vals.iter().cloned().fold(0.0, f64::max);
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        d_emp = d_emp.max((hi / lo).ln());
    }
    (d_emp, da, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theta_unit_at_zero_has_closed_form() {
        // Unit 3-regular tree at λ = 0: m = M/(1+M) with M = 2m gives m = 1/2, F = 1/2.
        let g = QuotientGraph::theta_unit();
        let w = solve_weyl(&g, 0.0).unwrap();
        assert!(w.converged);
        for e in 0..6 {
            assert!((w.m[e] - 0.5).abs() < 1e-13);
            assert!((w.f[e] - 0.5).abs() < 1e-13);
            assert!((w.f_initial[e] - 1.0 / 3.0).abs() < 1e-13);
        }
        let o = TreePoint::root();
        assert!((w.green(&o, &o).unwrap() - 2.0 / 3.0).abs() < 1e-13);
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let g = QuotientGraph::theta_unit();
        assert_eq!(
            solve_weyl(&g, -0.1).unwrap_err(),
            ResolventError::NegativeLambda(-0.1)
        );
    }

    #[test]
    fn theta_unit_lambda0_matches_vertex_reduction() {
        let g = QuotientGraph::theta_unit();
        let l0 = lambda0_resolvent(&g, 1e-12);
        let exact = (2.0 * 2f64.sqrt() / 3.0).acos().powi(2);
        assert!((l0 - exact).abs() < 1e-9, "{l0} vs {exact}");
        assert!(!solve_weyl(&g, l0 + 0.05).unwrap().converged);
        assert!(solve_weyl(&g, l0 - 1e-9).unwrap().converged);
    }

    #[test]
    fn interior_diagonal_is_continuous() {
        let g = QuotientGraph::theta_dio();
        let w = solve_weyl(&g, 0.05).unwrap();
        let k = w.kernel();
        let v = TreePoint::root();
        let near = TreePoint::along(&g, &TreeVertex::root(), 2, 1e-9);
        assert!((k.green_diag(&v) - k.green_diag(&near)).abs() < 1e-8);
    }

    #[test]
    fn jets_match_finite_differences() {
        let g = QuotientGraph::theta_dio();
        let lam = 0.03;
        let w = solve_weyl(&g, lam).unwrap();
        let j = w.jets().unwrap();
        let x = TreePoint::root();
        let y = TreePoint::vertex(TreeVertex::from_word(&g, g.parse_word("aB").unwrap()).unwrap());
        let gj = j.kernel().green(&x, &y);
        assert!((gj.val() - w.green(&x, &y).unwrap()).abs() < 1e-11);
        let fd1 = green_fd(&g, lam, &x, &y, 1e-5, 1).unwrap();
        assert!((gj.d1() - fd1).abs() / fd1 < 1e-6);
        let fd2 = green_fd(&g, lam, &x, &y, 1e-4, 2).unwrap();
        assert!((gj.d2() - fd2).abs() / fd2 < 1e-4);
    }

    #[test]
    fn derivative_integral_matches_jets() {
        let g = QuotientGraph::theta_dio();
        let w = solve_weyl(&g, 0.04).unwrap();
        let x = TreePoint::along(&g, &TreeVertex::root(), 0, 0.3);
        let y = TreePoint::vertex(TreeVertex::from_word(&g, g.parse_word("cA").unwrap()).unwrap());
        let j = w.jets().unwrap();
        let d = w.green_derivative(&x, &y).unwrap();
        let gj = j.kernel().green(&x, &y);
        assert!((d - gj.d1()).abs() / d < 1e-10, "{d} vs {}", gj.d1());
        let d2 = j.kernel().green_derivative(&x, &y).unwrap().d1();
        assert!((d2 - gj.d2()).abs() / d2 < 1e-9, "{d2} vs {}", gj.d2());
        let dxx = w.green_derivative(&x, &x).unwrap();
        assert!((dxx - j.kernel().green(&x, &x).d1()).abs() / dxx < 1e-10);
    }

    #[test]
    fn ball_derivative_converges_to_cone_sum() {
        let g = QuotientGraph::theta_unit();
        let w = solve_weyl(&g, 0.05).unwrap();
        let x = TreePoint::root();
        let y = TreePoint::vertex(TreeVertex::from_word(&g, vec![0]).unwrap());
        let exact = w.green_derivative(&x, &y).unwrap();
        let (v, tail) = ball_derivative(&w, &x, &y, 6.0).unwrap();
        assert!(v < exact);
        // With y inside the ball the tail formula is exact, not just a bound.
        assert!((exact - v - tail).abs() < 1e-10 * exact);
        let (v8, _) = ball_derivative(&w, &x, &y, 8.0).unwrap();
        assert!(exact - v8 < exact - v);
    }
}
