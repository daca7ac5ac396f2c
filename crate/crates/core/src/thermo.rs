//! Symbolic dynamics of the geodesic flow: the vertex cross-section coded by
//! the non-backtracking edge shift, the potential `F_λ`, the critical exponent
//! `δ_λ` and the pressure of k-cylinder approximations.

use crate::graph::{BoundaryRay, EdgeId, QuotientGraph, TreePoint, TreeVertex};
use crate::linalg::{line_fit, perron, spectral_radius, LinalgError, Perron};
use crate::resolvent::{ResolventError, WeylTable, ROUNDOFF};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::{HashMap, VecDeque};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ThermoError {
    #[error("transition graph is not strongly connected")]
    NotStronglyConnected,
    #[error("power iteration stalled: {0}")]
    PowerIterationStalled(#[from] LinalgError),
    #[error("root of {0} not bracketed")]
    NotBracketed(&'static str),
    #[error("regression failed: {0}")]
    Fit(String),
    #[error("word is not admissible")]
    NotAdmissible,
    #[error(transparent)]
    Resolvent(#[from] ResolventError),
}

/// Alphabet of oriented quotient edges with the non-backtracking transitions.
#[derive(Clone, Debug)]
pub struct CodingSystem {
    graph: QuotientGraph,
    pub transition: Vec<Vec<bool>>,
    /// Length of each letter's edge.
    pub roof: Vec<f64>,
}

impl CodingSystem {
    pub fn graph(&self) -> &QuotientGraph {
        &self.graph
    }

    pub fn size(&self) -> usize {
        self.roof.len()
    }

    pub fn admissible(&self, w: &[EdgeId]) -> bool {
        w.windows(2).all(|p| self.transition[p[0]][p[1]])
    }

    /// The word read backwards with every letter reversed.
    pub fn reverse_word(&self, w: &[EdgeId]) -> Vec<EdgeId> {
        w.iter().rev().map(|&e| self.graph.rev(e)).collect()
    }

    /// Code of a tree vertex: its address word.
    pub fn code_of(&self, v: &TreeVertex) -> Vec<EdgeId> {
        v.word.clone()
    }

    /// Tree vertex reached from the base lift by an admissible word starting at
    /// the base vertex.
    pub fn vertex_of(&self, w: &[EdgeId]) -> Result<TreeVertex, ThermoError> {
        if !self.admissible(w) {
            return Err(ThermoError::NotAdmissible);
        }
        TreeVertex::from_word(&self.graph, w.to_vec()).map_err(|_| ThermoError::NotAdmissible)
    }

    /// All admissible words of length `k`.
    pub fn words(&self, k: usize) -> Vec<Vec<EdgeId>> {
        let mut out: Vec<Vec<EdgeId>> = (0..self.size()).map(|e| vec![e]).collect();
        for _ in 1..k {
            let mut next = Vec::with_capacity(out.len() * 2);
            for w in &out {
                let last = *w.last().unwrap();
                for f in 0..self.size() {
                    if self.transition[last][f] {
                        let mut v = w.clone();
                        v.push(f);
                        next.push(v);
                    }
                }
            }
            out = next;
        }
        out
    }

    /// Smallest admissible successor, used to extend non-periodic words.
    fn first_successor(&self, e: EdgeId) -> EdgeId {
        (0..self.size()).find(|&f| self.transition[e][f]).expect("irreducible")
    }

    /// Periodic extension of `w` when `w` is cyclically admissible, else the
    /// greedy smallest-successor extension, which is eventually periodic.
    pub fn extension(&self, w: &[EdgeId]) -> (Vec<EdgeId>, Vec<EdgeId>) {
        let last = *w.last().expect("nonempty word");
        if self.transition[last][w[0]] {
            return (Vec::new(), w.to_vec());
        }
        let mut seen: HashMap<EdgeId, usize> = HashMap::new();
        let mut tail = Vec::new();
        let mut e = last;
        loop {
            e = self.first_successor(e);
            if let Some(&i) = seen.get(&e) {
                let period = tail[i..].to_vec();
                tail.truncate(i);
                return (tail, period);
            }
            seen.insert(e, tail.len());
            tail.push(e);
        }
    }

    /// A non-backtracking path from the base vertex whose continuation by `w`
    /// is non-backtracking.
    pub fn lift_prefix(&self, w: &[EdgeId]) -> Vec<EdgeId> {
        let g = &self.graph;
        let start = g.origin(w[0]);
        let ok_end = |p: &Vec<EdgeId>| {
            let at = p.last().map_or(g.base(), |&e| g.terminus(e));
            at == start && p.last().is_none_or(|&e| self.transition[e][w[0]])
        };
        let mut queue: VecDeque<Vec<EdgeId>> = VecDeque::new();
        queue.push_back(Vec::new());
        while let Some(p) = queue.pop_front() {
            if ok_end(&p) {
                return p;
            }
            let at = p.last().map_or(g.base(), |&e| g.terminus(e));
            for &f in g.out_edges(at) {
                if p.last().is_none_or(|&e| self.transition[e][f]) {
                    let mut q = p.clone();
                    q.push(f);
                    queue.push_back(q);
                }
            }
        }
        unreachable!("connected quotient")
    }

    /// Lift of the word `w` from a tree vertex, with the boundary point of its
    /// extension.
    pub fn lift(&self, w: &[EdgeId]) -> (TreeVertex, BoundaryRay) {
        let prefix = self.lift_prefix(w);
        let (tail, period) = self.extension(w);
        let mut pre = w.to_vec();
        pre.extend(tail);
        let start = TreeVertex {
            word: prefix.clone(),
        };
        let ray = BoundaryRay {
            prefix: start.clone(),
            pre,
            period,
        };
        (start, ray)
    }
}

pub fn build_coding(g: &QuotientGraph) -> Result<CodingSystem, ThermoError> {
    let n = g.num_edges();
    let mut transition = vec![vec![false; n]; n];
    for (e, row) in transition.iter_mut().enumerate() {
        for f in g.successors(e) {
            row[f] = true;
        }
    }
    let reach = |from: EdgeId, forward: bool| -> usize {
        let mut seen = vec![false; n];
        seen[from] = true;
        let mut stack = vec![from];
        let mut count = 1;
        while let Some(e) = stack.pop() {
            for f in 0..n {
                let edge = if forward { transition[e][f] } else { transition[f][e] };
                if edge && !seen[f] {
                    seen[f] = true;
                    count += 1;
                    stack.push(f);
                }
            }
        }
        count
    };
    if reach(0, true) != n || reach(0, false) != n {
        return Err(ThermoError::NotStronglyConnected);
    }
    Ok(CodingSystem {
        graph: g.clone(),
        transition,
        roof: (0..n).map(|e| g.len(e)).collect(),
    })
}

/// `B(λ, s)[e][e'] = A[e][e'] F_{e'}² e^{−s l_{e'}}`.
pub fn weighted_transition(w: &WeylTable, s: f64) -> DMatrix<f64> {
    let g = w.graph();
    let n = g.num_edges();
    let mut b = DMatrix::zeros(n, n);
    for e in 0..n {
        for f in g.successors(e) {
            b[(e, f)] = w.f[f] * w.f[f] * (-s * g.len(f)).exp();
        }
    }
    b
}

/// Root of a strictly decreasing function whose slope lies in `[−hi, −lo]`,
/// starting from its value at zero.
fn decreasing_root(
    what: &'static str,
    lo_slope: f64,
    hi_slope: f64,
    mut f: impl FnMut(f64) -> Result<f64, ThermoError>,
) -> Result<f64, ThermoError> {
    let f0 = f(0.0)?;
    let (mut a, mut b) = if f0 >= 0.0 {
        (f0 / hi_slope, f0 / lo_slope)
    } else {
        (f0 / lo_slope, f0 / hi_slope)
    };
    let pad = 1e-9 + 1e-6 * (b - a).abs();
    a -= pad;
    b += pad;
    let (fa, fb) = (f(a)?, f(b)?);
    if !(fa >= 0.0 && fb <= 0.0) {
        return Err(ThermoError::NotBracketed(what));
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if b - a < 1e-15 * (1.0 + m.abs()) {
            break;
        }
        if f(m)? > 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Critical exponent: the `s` with `ρ(B(λ, s)) = 1`.
pub fn delta_lambda(w: &WeylTable) -> Result<f64, ThermoError> {
    w.require_converged()?;
    let g = w.graph();
    decreasing_root("delta_lambda", g.min_length(), g.max_length(), |s| {
        Ok(spectral_radius(&weighted_transition(w, s))?.ln())
    })
}

/// Growth rate of the annulus sums `Σ G²(o, γo)` over lifts of the base vertex
/// with `R − width < d(o, γo) ≤ R`, fitted over `R` up to `max_radius`.
#[derive(Clone, Debug, Serialize)]
pub struct AnnulusRate {
    pub radii: Vec<f64>,
    pub log_sums: Vec<f64>,
    pub rate: f64,
    pub r2: f64,
}

pub fn annulus_rate(w: &WeylTable, max_radius: f64, width: f64) -> Result<AnnulusRate, ThermoError> {
    w.require_converged()?;
    let g = w.graph();
    let g00 = w.kernel().green_diag(&TreePoint::root());
    let bins = (max_radius / width).floor() as usize;
    let mut sums = vec![0.0; bins + 1];
    // Depth-first over (end vertex type, last edge, distance, Φ²).
    let mut stack: Vec<(EdgeId, f64, f64)> = g
        .out_edges(g.base())
        .iter()
        .map(|&e| (e, g.len(e), w.f[e] * w.f[e]))
        .collect();
    while let Some((e, d, phi2)) = stack.pop() {
        if d > max_radius {
            continue;
        }
        if g.terminus(e) == g.base() {
            let bin = ((d / width).ceil() as usize).min(bins);
            sums[bin] += phi2 * g00 * g00;
        }
        for f in g.successors(e) {
            stack.push((f, d + g.len(f), phi2 * w.f[f] * w.f[f]));
        }
    }
    let mut radii = Vec::new();
    let mut logs = Vec::new();
    for (i, &s) in sums.iter().enumerate().skip(1) {
        if s > 0.0 && (i as f64) * width > 0.4 * max_radius {
            radii.push(i as f64 * width);
            logs.push(s.ln());
        }
    }
    let fit = line_fit(&radii, &logs).map_err(|e| ThermoError::Fit(e.to_string()))?;
    Ok(AnnulusRate {
        radii,
        log_sums: logs,
        rate: fit.slope,
        r2: fit.r2,
    })
}

/// Values of `2 log k_λ(x₁, x₀, ξ_w)` on the admissible k-words.
#[derive(Clone, Debug, Serialize)]
pub struct PotentialGrid {
    pub lambda: f64,
    pub k: usize,
    pub words: Vec<Vec<EdgeId>>,
    pub values: Vec<f64>,
    /// Roof of the last letter of each word.
    pub last_roof: Vec<f64>,
    /// Relative Martin-kernel band per word.
    pub bands: Vec<f64>,
    /// Absolute error bound on the values.
    pub band: f64,
    #[serde(skip)]
    successors: Vec<Vec<usize>>,
}

pub fn potential_grid(
    coding: &CodingSystem,
    w: &WeylTable,
    k: usize,
) -> Result<PotentialGrid, ThermoError> {
    w.require_converged()?;
    assert!(k >= 2, "memory must be at least 2");
    let g = coding.graph();
    let words = coding.words(k);
    let evals: Vec<Result<(f64, f64), ThermoError>> = words
        .par_iter()
        .map(|word| {
            let (start, ray) = coding.lift(word);
            let x0 = TreePoint::vertex(start.clone());
            let x1 = TreePoint::vertex(start.child(word[0]));
            let depth = start.depth() + k + 2;
            let m = w.martin_kernel(&x1, &x0, &ray, depth)?;
            Ok((2.0 * m.value.ln(), m.band))
        })
        .collect();
    let mut values = Vec::with_capacity(words.len());
    let mut bands = Vec::with_capacity(words.len());
    for r in evals {
        let (v, b) = r?;
        values.push(v);
        bands.push(b);
    }
    let index: HashMap<&[EdgeId], usize> =
        words.iter().enumerate().map(|(i, w)| (w.as_slice(), i)).collect();
    let successors = words
        .iter()
        .map(|w| {
            (0..coding.size())
                .filter(|&f| coding.transition[*w.last().unwrap()][f])
                .map(|f| {
                    let mut v = w[1..].to_vec();
                    v.push(f);
                    index[v.as_slice()]
                })
                .collect()
        })
        .collect();
    let band = bands.iter().cloned().fold(0.0, f64::max) * 2.0 + ROUNDOFF * k as f64;
    Ok(PotentialGrid {
        lambda: w.lambda,
        k,
        last_roof: words.iter().map(|w| g.len(*w.last().unwrap())).collect(),
        words,
        values,
        bands,
        band,
        successors,
    })
}

impl PotentialGrid {
    /// Transfer matrix `M[w][w'] = e^{value(w') − s·roof(w')}` for overlapping words.
    pub fn operator(&self, s: f64) -> DMatrix<f64> {
        let n = self.words.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, succ) in self.successors.iter().enumerate() {
            for &j in succ {
                m[(i, j)] = (self.values[j] - s * self.last_roof[j]).exp();
            }
        }
        m
    }

    /// Sup-norm difference to the restriction of a finer grid.
    pub fn distance_to(&self, finer: &PotentialGrid) -> f64 {
        let index: HashMap<&[EdgeId], usize> = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_slice(), i))
            .collect();
        finer
            .words
            .iter()
            .zip(&finer.values)
            .map(|(w, v)| (v - self.values[index[&w[..self.k]]]).abs())
            .fold(0.0, f64::max)
    }
}

/// Shift pressure of the k-cylinder potential `value − s·roof`.
pub fn pressure(grid: &PotentialGrid, s: f64) -> Result<f64, ThermoError> {
    Ok(spectral_radius(&grid.operator(s))?.ln())
}

/// Zero of the pressure curve.
pub fn pressure_root(grid: &PotentialGrid) -> Result<f64, ThermoError> {
    let lo = grid.last_roof.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.last_roof.iter().cloned().fold(0.0, f64::max);
    decreasing_root("pressure", lo, hi, |s| pressure(grid, s))
}

/// A periodic geodesic: the axis of the cyclic word `period`, with `g(0)` at
/// distance `offset` along the first letter.
#[derive(Clone, Debug, Serialize)]
pub struct PeriodicGeodesic {
    pub period: Vec<EdgeId>,
    pub offset: f64,
}

impl PeriodicGeodesic {
    /// `g(0)` and `g₊` in the lift that starts after `prefix`.
    pub fn lift_with(
        &self,
        coding: &CodingSystem,
        prefix: Vec<EdgeId>,
    ) -> (TreePoint, BoundaryRay) {
        let g = coding.graph();
        let start = TreeVertex { word: prefix };
        let x = if self.offset == 0.0 {
            TreePoint::vertex(start.clone())
        } else {
            TreePoint::along(g, &start, self.period[0], self.offset)
        };
        let ray = BoundaryRay {
            prefix: start,
            pre: Vec::new(),
            period: self.period.clone(),
        };
        (x, ray)
    }

    pub fn lift(&self, coding: &CodingSystem) -> (TreePoint, BoundaryRay) {
        self.lift_with(coding, coding.lift_prefix(&self.period))
    }

    /// The geodesic flowed by `t` (within the first letter).
    pub fn flowed(&self, t: f64) -> PeriodicGeodesic {
        PeriodicGeodesic {
            period: self.period.clone(),
            offset: self.offset + t,
        }
    }
}

/// Point at distance `t` from `x` toward `ξ`.
fn toward(g: &QuotientGraph, x: &TreePoint, xi: &BoundaryRay, t: f64) -> TreePoint {
    let n = x.path_word().len() + 2 + (t / g.min_length()).ceil() as usize;
    let far = TreePoint::vertex(xi.vertex(n));
    crate::graph::point_along(g, x, &far, t)
}

fn martin_at(w: &WeylTable, x: &TreePoint, y: &TreePoint, xi: &BoundaryRay) -> Result<f64, ThermoError> {
    let depth = x.path_word().len().max(y.path_word().len()) + 3;
    Ok(w.martin_kernel(x, y, xi, depth)?.value)
}

/// `f_λ(g) = −2 lim_{t→0+} log k_λ(g(0), g(t), g₊)/t` by a Richardson-extrapolated
/// one-sided difference quotient with step `dt`.
pub fn f_lambda_pointwise(
    coding: &CodingSystem,
    w: &WeylTable,
    geo: &PeriodicGeodesic,
    dt: f64,
) -> Result<f64, ThermoError> {
    let (x, xi) = geo.lift(coding);
    f_lambda_at(coding, w, &x, &xi, dt)
}

fn f_lambda_at(
    coding: &CodingSystem,
    w: &WeylTable,
    x: &TreePoint,
    xi: &BoundaryRay,
    dt: f64,
) -> Result<f64, ThermoError> {
    let g = coding.graph();
    let q = |h: f64| -> Result<f64, ThermoError> {
        let y = toward(g, x, xi, h);
        Ok(-2.0 * martin_at(w, x, &y, xi)?.ln() / h)
    };
    let (a, b) = (q(dt)?, q(0.5 * dt)?);
    Ok(2.0 * b - a)
}

/// Ingredients of `f_λ(g) = −2 A_λ(g(0), g(2l_M)) k_λ(g(0), g(2l_M), g₊)`.
#[derive(Clone, Debug, Serialize)]
pub struct FLambdaIdentity {
    pub f: f64,
    /// One-sided derivative of the hitting transform of `g(2l_M)` along `g`.
    pub a: f64,
    pub k: f64,
    pub product: f64,
}

pub fn f_lambda_identity(
    coding: &CodingSystem,
    w: &WeylTable,
    geo: &PeriodicGeodesic,
    dt: f64,
) -> Result<FLambdaIdentity, ThermoError> {
    let g = coding.graph();
    let (x, xi) = geo.lift(coding);
    let f = f_lambda_at(coding, w, &x, &xi, dt)?;
    let y = toward(g, &x, &xi, 2.0 * g.max_length());
    let kern = w.kernel();
    // Φ(g(ε), y) = Φ(g(0), y) u_e(a + ε)/u_e(a) along the first letter e.
    let e = geo.period[0];
    let (u, du) = kern.u(e, geo.offset);
    let phi = kern.phi(&x, &y);
    let a = phi * du / u;
    let k = martin_at(w, &x, &y, &xi)?;
    Ok(FLambdaIdentity {
        f,
        a,
        k,
        product: -2.0 * a * k,
    })
}

/// `∫₀^τ (f_λ(φ_t g) − δ) dt` over the first letter versus the closed form
/// `2 log k_λ(π(Tg), π(g), g₊) − δ τ`.
#[derive(Clone, Debug, Serialize)]
pub struct ReturnIntegral {
    pub integral: f64,
    pub closed_form: f64,
}

pub fn return_integral(
    coding: &CodingSystem,
    w: &WeylTable,
    geo: &PeriodicGeodesic,
    delta: f64,
    dt: f64,
) -> Result<ReturnIntegral, ThermoError> {
    assert!(geo.offset == 0.0, "g must start on the cross-section");
    let g = coding.graph();
    let tau = g.len(geo.period[0]);
    let panels = 4;
    let mut integral = 0.0;
    for p in 0..panels {
        let (a, b) = (tau * p as f64 / panels as f64, tau * (p + 1) as f64 / panels as f64);
        let mut err = None;
        integral += crate::jet::gauss16(a, b, |t| {
            match f_lambda_pointwise(coding, w, &geo.flowed(t), dt) {
                Ok(v) => v - delta,
                Err(e) => {
                    err = Some(e);
                    0.0
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
    }
    let (x, xi) = geo.lift(coding);
    let next = toward(g, &x, &xi, tau);
    let closed_form = 2.0 * martin_at(w, &next, &x, &xi)?.ln() - delta * tau;
    Ok(ReturnIntegral {
        integral,
        closed_form,
    })
}

/// Entropy, roof integral and variational identity of the Markov measure built
/// from the leading eigendata of the pressure operator.
#[derive(Clone, Debug, Serialize)]
pub struct AbramovReport {
    pub s: f64,
    pub pressure: f64,
    pub entropy: f64,
    pub roof_integral: f64,
    pub potential_integral: f64,
    /// `h + ∫(value − s·roof) dm − pressure`.
    pub variational_gap: f64,
    /// Entropy of the suspension flow, `h / ∫ r dm`.
    pub flow_entropy: f64,
}

pub fn abramov_check(grid: &PotentialGrid, s: f64) -> Result<AbramovReport, ThermoError> {
    let m = grid.operator(s);
    let Perron {
        rho, right, left, ..
    } = perron(&m)?;
    let n = grid.words.len();
    let pi: Vec<f64> = (0..n).map(|i| left[i] * right[i]).collect();
    let total: f64 = pi.iter().sum();
    let (mut h, mut roof, mut pot) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let wi = pi[i] / total;
        roof += wi * grid.last_roof[i];
        pot += wi * (grid.values[i] - s * grid.last_roof[i]);
        for &j in &grid.successors[i] {
            let p = m[(i, j)] * right[j] / (rho * right[i]);
            if p > 0.0 {
                h -= wi * p * p.ln();
            }
        }
    }
    let pressure = rho.ln();
    Ok(AbramovReport {
        s,
        pressure,
        entropy: h,
        roof_integral: roof,
        potential_integral: pot,
        variational_gap: h + pot - pressure,
        flow_entropy: h / roof,
    })
}

/// One row of a pressure sweep.
#[derive(Clone, Debug, Serialize)]
pub struct PressureRow {
    pub lambda: f64,
    pub delta: f64,
    pub s_star: f64,
    pub band: f64,
}

pub fn pressure_sweep(
    g: &QuotientGraph,
    lambdas: &[f64],
    k: usize,
) -> Result<Vec<PressureRow>, ThermoError> {
    let coding = build_coding(g)?;
    lambdas
        .par_iter()
        .map(|&lam| {
            let w = crate::resolvent::solve_weyl(g, lam)?;
            let delta = delta_lambda(&w)?;
            let grid = potential_grid(&coding, &w, k)?;
            let s_star = pressure_root(&grid)?;
            // A potential perturbation of size b moves the root by at most b / l_m.
            let band = grid.band / g.min_length();
            Ok(PressureRow {
                lambda: lam,
                delta,
                s_star,
                band,
            })
        })
        .collect()
}
