//! Heat kernel on a Dirichlet-truncated ball of the tree.
//!
//! The ball is discretized by lumped-mass P1 finite elements. Since the mesh is
//! itself a tree, every linear solve is a leaves-to-root elimination in linear
//! time. Sibling cones that are isometric (same edge lengths, same remaining
//! radius) and contain no marked point carry identical solutions, so they are
//! merged into one weighted copy.

use crate::graph::{geodesic, tree_distance, EdgeId, QuotientGraph, TreePoint, TreeVertex};
use crate::linalg::least_squares;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum HeatError {
    #[error("source at distance {dist} from the center leaves less than one edge to the boundary at {radius}")]
    SourceTooCloseToBoundary { dist: f64, radius: f64 },
    #[error("time step {0} exceeds 0.05")]
    StepTooLarge(f64),
    #[error("point {0} is outside the ball")]
    OutsideBall(String),
    #[error("point {0} is not a marked node of the ball")]
    NotMarked(String),
    #[error("inverse iteration stalled after {0} iterations")]
    IterationStalled(usize),
    #[error("time-integral tail {tail:e} exceeds tolerance {tol:e}")]
    TailNotControlled { tail: f64, tol: f64 },
    #[error("invalid grid parameters: {0}")]
    BadGrid(String),
}

/// Lumped discretization of `B(center, radius)`.
#[derive(Clone, Debug)]
pub struct TruncatedBall {
    graph: QuotientGraph,
    pub center: TreePoint,
    pub radius: f64,
    pub h: f64,
    parent: Vec<u32>,
    /// Weighted conductance to the parent node.
    cond: Vec<f64>,
    /// Weighted conductance to Dirichlet boundary nodes.
    bcond: Vec<f64>,
    /// Weighted lumped mass.
    mass: Vec<f64>,
    /// Number of physical nodes represented by each lumped node.
    weight: Vec<f64>,
    marked: Vec<TreePoint>,
    marked_nodes: Vec<usize>,
    length: f64,
}

struct Task {
    start_node: usize,
    base: TreeVertex,
    edge: EdgeId,
    a: f64,
    d0: f64,
    weight: f64,
}

/// Interned isometry classes of truncated cones.
struct ConeIds {
    memo: HashMap<(EdgeId, i64), u32>,
    table: HashMap<Vec<i64>, u32>,
}

fn key(x: f64) -> i64 {
    (x * 1e9).round() as i64
}

impl ConeIds {
    fn id(&mut self, g: &QuotientGraph, f: EdgeId, r: f64) -> u32 {
        if let Some(&v) = self.memo.get(&(f, key(r))) {
            return v;
        }
        let l = g.len(f);
        let sig = if r <= l + 1e-12 {
            vec![-1, key(l), key(r)]
        } else {
            let mut kids: Vec<i64> = g
                .successors(f)
                .map(|s| self.id(g, s, r - l) as i64)
                .collect();
            kids.sort_unstable();
            let mut sig = vec![-2, key(l)];
            sig.extend(kids);
            sig
        };
        let n = self.table.len() as u32;
        let v = *self.table.entry(sig).or_insert(n);
        self.memo.insert((f, key(r)), v);
        v
    }
}

impl TruncatedBall {
    /// Builds the ball; `marked` points become exact nodes, and cones holding
    /// them are never merged.
    pub fn new(
        g: &QuotientGraph,
        center: &TreePoint,
        radius: f64,
        h: f64,
        marked: &[TreePoint],
    ) -> Result<Self, HeatError> {
        if !(h > 0.0) || !(radius > 0.0) || h > g.min_length() {
            return Err(HeatError::BadGrid(format!("h = {h}, radius = {radius}")));
        }
        for p in marked {
            if tree_distance(g, center, p) >= radius {
                return Err(HeatError::OutsideBall(p.label(g)));
            }
        }
        let mut ball = TruncatedBall {
            graph: g.clone(),
            center: center.clone(),
            radius,
            h,
            parent: vec![0],
            cond: vec![0.0],
            bcond: vec![0.0],
            mass: vec![0.0],
            weight: vec![1.0],
            marked: marked.to_vec(),
            marked_nodes: vec![usize::MAX; marked.len()],
            length: 0.0,
        };
        for (i, p) in marked.iter().enumerate() {
            if p == center {
                ball.marked_nodes[i] = 0;
            }
        }
        let mut ids = ConeIds {
            memo: HashMap::new(),
            table: HashMap::new(),
        };
        let mut queue = VecDeque::new();
        let dirs: Vec<(EdgeId, f64)> = match center.edge {
            None => g
                .out_edges(center.anchor.project(g))
                .iter()
                .map(|&f| (f, 0.0))
                .collect(),
            Some(e) => vec![(e, center.offset), (g.rev(e), g.len(e) - center.offset)],
        };
        ball.push_children(&mut queue, &mut ids, center, 0, &dirs, 0.0, 1.0);
        while let Some(t) = queue.pop_front() {
            ball.process(&mut queue, &mut ids, t);
        }
        Ok(ball)
    }

    fn holds_marked(&self, start: &TreePoint, h: EdgeId) -> bool {
        let g = &self.graph;
        self.marked.iter().any(|p| {
            let seg = geodesic(g, start, p);
            seg.pieces.first().is_some_and(|q| q.edge == h)
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn push_children(
        &self,
        queue: &mut VecDeque<Task>,
        ids: &mut ConeIds,
        start: &TreePoint,
        node: usize,
        dirs: &[(EdgeId, f64)],
        d0: f64,
        weight: f64,
    ) {
        let g = &self.graph;
        let base_for = |f: EdgeId| match start.edge {
            Some(e) if e != f => start.anchor.child(e),
            _ => start.anchor.clone(),
        };
        let mut groups: Vec<(u32, EdgeId, f64, usize)> = Vec::new();
        for &(f, a) in dirs {
            if self.holds_marked(start, f) {
                groups.push((u32::MAX, f, a, 1));
                continue;
            }
            // Partial edges (a > 0) only occur at the center and are never merged.
            let id = if a == 0.0 {
                ids.id(g, f, self.radius - d0)
            } else {
                u32::MAX
            };
            match groups.iter_mut().find(|gr| gr.0 == id && id != u32::MAX) {
                Some(gr) => gr.3 += 1,
                None => groups.push((id, f, a, 1)),
            }
        }
        for (_, f, a, count) in groups {
            queue.push_back(Task {
                start_node: node,
                base: base_for(f),
                edge: f,
                a,
                d0,
                weight: weight * count as f64,
            });
        }
    }

    fn new_node(&mut self, parent: usize, len: f64, w: f64) -> usize {
        let i = self.parent.len();
        self.parent.push(parent as u32);
        self.cond.push(w / len);
        self.bcond.push(0.0);
        self.mass.push(0.5 * w * len);
        self.weight.push(w);
        self.mass[parent] += 0.5 * w * len;
        i
    }

    fn process(&mut self, queue: &mut VecDeque<Task>, ids: &mut ConeIds, t: Task) {
        let g = self.graph.clone();
        let l = g.len(t.edge);
        let reach = self.radius - t.d0;
        let (end, at_boundary) = if t.a + reach <= l + 1e-12 {
            (t.a + reach, true)
        } else {
            (l, false)
        };
        // Marked points on this edge lift.
        let flip = t.base.last().map(|x| g.rev(x)) == Some(t.edge);
        let (anchor, host) = if flip {
            (t.base.parent().expect("nonempty"), t.base.last().expect("nonempty"))
        } else {
            (t.base.clone(), t.edge)
        };
        let mut stops: Vec<(f64, Option<usize>)> = Vec::new();
        for (i, p) in self.marked.iter().enumerate() {
            if p.edge == Some(host) && p.anchor == anchor {
                let s = if flip { l - p.offset } else { p.offset };
                if s > t.a && s < end {
                    stops.push((s, Some(i)));
                }
            }
        }
        self.length += t.weight * (end - t.a);
        stops.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        stops.push((end, None));
        let mut node = t.start_node;
        let mut pos = t.a;
        let last = stops.len() - 1;
        for (k, &(s, mark)) in stops.iter().enumerate() {
            let n = ((s - pos) / self.h).ceil().max(1.0) as usize;
            let hc = (s - pos) / n as f64;
            let interior = if k == last && at_boundary { n - 1 } else { n };
            for _ in 0..interior {
                node = self.new_node(node, hc, t.weight);
            }
            if k == last && at_boundary {
                self.bcond[node] += t.weight / hc;
                self.mass[node] += 0.5 * t.weight * hc;
            }
            if let Some(i) = mark {
                self.marked_nodes[i] = node;
            }
            pos = s;
        }
        if at_boundary {
            return;
        }
        let v = t.base.step(&g, t.edge);
        for (i, p) in self.marked.iter().enumerate() {
            if p.edge.is_none() && p.anchor == v {
                self.marked_nodes[i] = node;
            }
        }
        let vp = TreePoint::vertex(v.clone());
        let back = g.rev(t.edge);
        let dirs: Vec<(EdgeId, f64)> = g
            .out_edges(v.project(&g))
            .iter()
            .filter(|&&f| f != back)
            .map(|&f| (f, 0.0))
            .collect();
        let d = t.d0 + (l - t.a);
        self.push_children(queue, ids, &vp, node, &dirs, d, t.weight);
    }

    pub fn graph(&self) -> &QuotientGraph {
        &self.graph
    }

    /// Number of lumped unknowns.
    pub fn num_nodes(&self) -> usize {
        self.parent.len()
    }

    /// Number of physical grid nodes represented.
    pub fn num_physical_nodes(&self) -> f64 {
        self.weight.iter().sum()
    }

    /// Total length of the ball.
    pub fn total_length(&self) -> f64 {
        self.length
    }

    pub fn node_of(&self, p: &TreePoint) -> Result<usize, HeatError> {
        self.marked
            .iter()
            .position(|q| q == p)
            .map(|i| self.marked_nodes[i])
            .filter(|&n| n != usize::MAX)
            .ok_or_else(|| HeatError::NotMarked(p.label(&self.graph)))
    }

    pub fn marked(&self) -> &[TreePoint] {
        &self.marked
    }

    /// `∫ u dμ` for a nodal field.
    pub fn integrate(&self, u: &[f64]) -> f64 {
        self.mass.iter().zip(u).map(|(m, v)| m * v).sum()
    }

    /// `∫ u v dμ` for two nodal fields.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        self.mass
            .iter()
            .zip(u.iter().zip(v))
            .map(|(m, (a, b))| m * a * b)
            .sum()
    }

    fn stiffness_diag(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self
            .cond
            .iter()
            .zip(&self.bcond)
            .map(|(c, b)| c + b)
            .collect();
        d[0] = self.bcond[0];
        for i in 1..d.len() {
            let p = self.parent[i] as usize;
            d[p] += self.cond[i];
        }
        d
    }

    /// Factorization of `α M + β K`.
    fn factor(&self, alpha: f64, beta: f64) -> TreeFactor {
        let kd = self.stiffness_diag();
        let n = self.num_nodes();
        let mut piv: Vec<f64> = (0..n).map(|i| alpha * self.mass[i] + beta * kd[i]).collect();
        let off: Vec<f64> = self.cond.iter().map(|c| beta * c).collect();
        for i in (1..n).rev() {
            let p = self.parent[i] as usize;
            piv[p] -= off[i] * off[i] / piv[i];
        }
        TreeFactor { piv, off }
    }

    fn solve(&self, f: &TreeFactor, b: &mut [f64]) {
        let n = b.len();
        for i in (1..n).rev() {
            let p = self.parent[i] as usize;
            b[p] += f.off[i] / f.piv[i] * b[i];
        }
        b[0] /= f.piv[0];
        for i in 1..n {
            let p = self.parent[i] as usize;
            b[i] = (b[i] + f.off[i] * b[p]) / f.piv[i];
        }
    }

    /// `out = (α M − β K) u`.
    fn apply(&self, alpha: f64, beta: f64, kd: &[f64], u: &[f64], out: &mut [f64]) {
        for i in 0..u.len() {
            out[i] = (alpha * self.mass[i] - beta * kd[i]) * u[i];
        }
        for i in 1..u.len() {
            let p = self.parent[i] as usize;
            let c = beta * self.cond[i];
            out[i] += c * u[p];
            out[p] += c * u[i];
        }
    }

    /// Smallest Dirichlet eigenvalue of the discrete operator by inverse iteration.
    pub fn lowest_eigenvalue(&self, tol: f64, max_iter: usize) -> Result<(f64, Vec<f64>), HeatError> {
        let f = self.factor(0.0, 1.0);
        let kd = self.stiffness_diag();
        let n = self.num_nodes();
        let mut u = vec![1.0; n];
        let mut prev = f64::INFINITY;
        let mut ku = vec![0.0; n];
        for it in 0..max_iter {
            let mut b: Vec<f64> = (0..n).map(|i| self.mass[i] * u[i]).collect();
            self.solve(&f, &mut b);
            let norm = self.inner(&b, &b).sqrt();
            for v in b.iter_mut() {
                *v /= norm;
            }
            u = b;
            self.apply(0.0, -1.0, &kd, &u, &mut ku);
            let rq: f64 = u.iter().zip(&ku).map(|(a, b)| a * b).sum();
            if (rq - prev).abs() < tol * rq && it > 3 {
                return Ok((rq, u));
            }
            prev = rq;
        }
        Err(HeatError::IterationStalled(max_iter))
    }
}

struct TreeFactor {
    piv: Vec<f64>,
    off: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct HeatOptions {
    pub dt: f64,
    pub t_max: f64,
    /// Times at which the full nodal field is kept.
    pub snapshots: Vec<f64>,
}

/// `p(t, source, ·)` sampled at the marked nodes at every step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeatField {
    pub source: usize,
    pub dt: f64,
    pub times: Vec<f64>,
    /// Per marked point, the value at each time.
    pub probes: Vec<Vec<f64>>,
    /// Discrete mass `∫ p dμ` at each time.
    pub mass: Vec<f64>,
    /// Number of leading backward-Euler substeps.
    pub startup_steps: usize,
    #[serde(skip)]
    pub snapshots: Vec<(f64, Vec<f64>)>,
}

/// Crank–Nicolson time stepping from a unit-mass spike at the marked point
/// `source`, started with four backward-Euler quarter steps to damp the
/// nonsmooth initial data.
pub fn heat_solve(
    ball: &TruncatedBall,
    source: &TreePoint,
    opts: &HeatOptions,
) -> Result<HeatField, HeatError> {
    let g = ball.graph();
    if opts.dt > 0.05 || !(opts.dt > 0.0) {
        return Err(HeatError::StepTooLarge(opts.dt));
    }
    let dist = tree_distance(g, &ball.center, source);
    if ball.radius - dist < g.max_length() {
        return Err(HeatError::SourceTooCloseToBoundary {
            dist,
            radius: ball.radius,
        });
    }
    let src = ball.node_of(source)?;
    let sidx = ball.marked.iter().position(|q| q == source).unwrap();
    let n = ball.num_nodes();
    let mut u = vec![0.0; n];
    u[src] = 1.0 / ball.mass[src];
    let kd = ball.stiffness_diag();
    let record = |u: &[f64]| -> Vec<f64> { ball.marked_nodes.iter().map(|&i| u[i]).collect() };
    let mut times = vec![0.0];
    let mut rows = vec![record(&u)];
    let mut mass = vec![1.0];
    let mut snaps = Vec::new();
    let startup = 4;
    let qdt = opts.dt / startup as f64;
    let be = ball.factor(1.0, qdt);
    let mut b = vec![0.0; n];
    let mut t = 0.0;
    for _ in 0..startup {
        for i in 0..n {
            b[i] = ball.mass[i] * u[i];
        }
        ball.solve(&be, &mut b);
        std::mem::swap(&mut u, &mut b);
        t += qdt;
        times.push(t);
        rows.push(record(&u));
        mass.push(ball.integrate(&u));
    }
    let cn = ball.factor(1.0, 0.5 * opts.dt);
    let steps = (opts.t_max / opts.dt).round() as usize;
    let mut snap_iter = opts.snapshots.iter().peekable();
    let mut take_snaps = |t: f64, u: &[f64], snaps: &mut Vec<(f64, Vec<f64>)>| {
        while let Some(&&s) = snap_iter.peek() {
            if (s - t).abs() < 0.5 * opts.dt {
                snaps.push((t, u.to_vec()));
                snap_iter.next();
            } else if s < t {
                snap_iter.next();
            } else {
                break;
            }
        }
    };
    take_snaps(opts.dt, &u, &mut snaps);
    for k in 2..=steps {
        ball.apply(1.0, 0.5 * opts.dt, &kd, &u, &mut b);
        ball.solve(&cn, &mut b);
        std::mem::swap(&mut u, &mut b);
        t = k as f64 * opts.dt;
        times.push(t);
        rows.push(record(&u));
        mass.push(ball.integrate(&u));
        take_snaps(t, &u, &mut snaps);
    }
    let m = ball.marked.len();
    let probes = (0..m).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
    Ok(HeatField {
        source: sidx,
        dt: opts.dt,
        times,
        probes,
        mass,
        startup_steps: startup,
        snapshots: snaps,
    })
}

/// Long-time model `log p + 1.5 log t = c − λ t + a/t + b/t²` fitted on a window.
#[derive(Clone, Debug, Serialize)]
pub struct DecayFit {
    pub lambda: f64,
    pub log_c: f64,
    pub a: f64,
    pub b: f64,
    pub r2: f64,
    pub lambda_stderr: f64,
}

impl DecayFit {
    /// Model value of `log p(t)`.
    pub fn log_p(&self, t: f64) -> f64 {
        self.log_c - self.lambda * t + self.a / t + self.b / (t * t) - 1.5 * t.ln()
    }
}

pub fn decay_fit(field: &HeatField, probe: usize, t_min: f64, t_max: f64) -> Option<DecayFit> {
    let mut design = Vec::new();
    let mut y = Vec::new();
    for (i, &t) in field.times.iter().enumerate() {
        let p = field.probes[probe][i];
        if t >= t_min && t <= t_max && p > 0.0 {
            design.push(vec![1.0, -t, 1.0 / t, 1.0 / (t * t)]);
            y.push(p.ln() + 1.5 * t.ln());
        }
    }
    let ls = least_squares(&design, &y).ok()?;
    Some(DecayFit {
        lambda: ls.coef[1],
        log_c: ls.coef[0],
        a: ls.coef[2],
        b: ls.coef[3],
        r2: ls.r2,
        lambda_stderr: ls.stderr[1],
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GreenFromHeat {
    pub lambda: f64,
    pub value: f64,
    /// Contribution of `t > t_max` from the fitted long-time decay.
    pub tail: f64,
}

/// `∫₀^∞ e^{λt} p(t, source, y) dt` with step-consistent quadrature on the
/// simulated horizon and a fitted tail beyond it.
pub fn green_from_heat(
    field: &HeatField,
    probe: usize,
    lambda: f64,
    tail_tol: f64,
) -> Result<GreenFromHeat, HeatError> {
    let t = &field.times;
    let p = &field.probes[probe];
    let mut body = 0.0;
    for i in 0..t.len() - 1 {
        let w = t[i + 1] - t[i];
        let right = (lambda * t[i + 1]).exp() * p[i + 1];
        body += if i < field.startup_steps {
            w * right
        } else {
            0.5 * w * ((lambda * t[i]).exp() * p[i] + right)
        };
    }
    let t_end = *t.last().unwrap();
    let fit = decay_fit(field, probe, 0.5 * t_end, t_end).ok_or(HeatError::TailNotControlled {
        tail: f64::INFINITY,
        tol: tail_tol,
    })?;
    let rate = fit.lambda - lambda;
    if !(rate > 0.0) {
        return Err(HeatError::TailNotControlled {
            tail: f64::INFINITY,
            tol: tail_tol,
        });
    }
    let model = |s: f64| (fit.log_p(s) + lambda * s).exp();
    // Integrate the model over [t_end, t_end + 60/rate] in short panels.
    let span = 60.0 / rate;
    let panels = 200;
    let mut tail = 0.0;
    for k in 0..panels {
        let a = t_end + span * k as f64 / panels as f64;
        let b = t_end + span * (k + 1) as f64 / panels as f64;
        tail += crate::jet::gauss16(a, b, model);
    }
    let value = body + tail;
    if tail > tail_tol * value {
        return Err(HeatError::TailNotControlled {
            tail,
            tol: tail_tol * value,
        });
    }
    Ok(GreenFromHeat { lambda, value, tail })
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectralEstimate {
    /// `(R, λ_R)` for the three radii.
    pub radii: Vec<(f64, f64)>,
    pub extrapolated: f64,
    /// Offset `c` of the fitted model `λ_R = λ₀ + C/(R + c)²`.
    pub offset: f64,
    /// Dirichlet eigenvalues decrease with the radius.
    pub monotone: bool,
}

/// λ₀ of the tree from Dirichlet ball eigenvalues at radii `R/2, 3R/4, R`,
/// extrapolated with the model `λ_R = λ₀ + C/(R + c)²`.
pub fn lambda0_spectral(
    g: &QuotientGraph,
    center: &TreePoint,
    radius: f64,
    h: f64,
) -> Result<SpectralEstimate, HeatError> {
    let rs = [0.5 * radius, 0.75 * radius, radius];
    let mut vals = Vec::new();
    for &r in &rs {
        let ball = TruncatedBall::new(g, center, r, h, &[])?;
        let (mu, _) = ball.lowest_eigenvalue(1e-13, 20_000)?;
        vals.push((r, mu));
    }
    let monotone = vals.windows(2).all(|w| w[1].1 < w[0].1);
    let (offset, extrapolated) = extrapolate_inverse_square(&vals);
    Ok(SpectralEstimate {
        radii: vals,
        extrapolated,
        offset,
        monotone,
    })
}

/// Fits `μ = λ + C/(R + c)²` through three points; returns `(c, λ)`.
pub fn extrapolate_inverse_square(pts: &[(f64, f64)]) -> (f64, f64) {
    let [(r1, m1), (r2, m2), (r3, m3)] = [pts[0], pts[1], pts[2]];
    let target = (m1 - m2) / (m2 - m3);
    let ratio = |c: f64| {
        let q = |r: f64| (r + c).powi(-2);
        (q(r1) - q(r2)) / (q(r2) - q(r3))
    };
    let solve_lam = |c: f64| {
        let q = |r: f64| (r + c).powi(-2);
        let cc = (m2 - m3) / (q(r2) - q(r3));
        (c, m3 - cc * q(r3))
    };
    // The ratio is monotone in c on (−r1, ∞); bisect when the target is bracketed.
    let mut lo = -r1 + 1e-6 * r1;
    let mut hi = 1e3 * r3;
    let (flo, fhi) = (ratio(lo) - target, ratio(hi) - target);
    if !(flo * fhi < 0.0) {
        return solve_lam(0.0);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (ratio(mid) - target) * flo > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    solve_lam(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_tree_collapses_to_radial_chain() {
        let g = QuotientGraph::theta_unit();
        let b = TruncatedBall::new(&g, &TreePoint::root(), 6.0, 0.1, &[]).unwrap();
        assert_eq!(b.num_nodes(), 60);
        // Total length of the depth-6 ball: 3(2^6 − 1).
        assert!((b.total_length() - 189.0).abs() < 1e-9);
    }

    #[test]
    fn merged_and_full_balls_agree() {
        let g = QuotientGraph::theta_unit();
        let x = TreePoint::root();
        let y = TreePoint::along(&g, &TreeVertex::root(), 2, 0.5);
        let merged = TruncatedBall::new(&g, &x, 4.0, 0.05, &[x.clone(), y.clone()]).unwrap();
        let (lm, _) = merged.lowest_eigenvalue(1e-13, 10_000).unwrap();
        // Marking many points prevents most merging; the spectrum is unchanged.
        let many: Vec<TreePoint> = crate::graph::vertices_to_depth(&g, 2)
            .into_iter()
            .map(TreePoint::vertex)
            .collect();
        let full = TruncatedBall::new(&g, &x, 4.0, 0.05, &many).unwrap();
        assert!(full.num_nodes() > merged.num_nodes());
        let (lf, _) = full.lowest_eigenvalue(1e-13, 10_000).unwrap();
        assert!((lm - lf).abs() < 1e-10 * lm);
    }

    #[test]
    fn heat_conserves_mass_before_reaching_boundary() {
        let g = QuotientGraph::theta_unit();
        let x = TreePoint::root();
        let ball = TruncatedBall::new(&g, &x, 12.0, 0.05, std::slice::from_ref(&x)).unwrap();
        let f = heat_solve(
            &ball,
            &x,
            &HeatOptions {
                dt: 0.01,
                t_max: 1.0,
                snapshots: vec![],
            },
        )
        .unwrap();
        let m = *f.mass.last().unwrap();
        assert!(m <= 1.0 + 1e-12 && m > 0.999999, "{m}");
        assert!(f.probes[0].iter().all(|&v| v > 0.0));
    }

    #[test]
    fn extrapolation_recovers_model() {
        let pts: Vec<(f64, f64)> = [10.0, 15.0, 20.0]
            .iter()
            .map(|&r: &f64| (r, 0.3 + 2.0 / (r + 1.5).powi(2)))
            .collect();
        let (c, l) = extrapolate_inverse_square(&pts);
        assert!((c - 1.5).abs() < 1e-6 && (l - 0.3).abs() < 1e-10);
    }
}
