//! Monte Carlo Brownian motion on the metric tree.
//!
//! Each step adds a centered Gaussian of variance `2δ` (the generator is
//! `d²/ds²`). Displacement past a vertex continues into an incident edge
//! chosen uniformly, including the incoming one. Vertex touches inside a step
//! are detected with the Brownian-bridge crossing probability.

use crate::graph::{tree_distance, EdgeId, QuotientGraph, TreePoint, TreeVertex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum McError {
    #[error("invalid Monte Carlo configuration: {0}")]
    BadConfig(String),
    #[error("second moment grew from {half:e} at T/2 to {full:e} at T")]
    VarianceExplosion { half: f64, full: f64 },
    #[error("target {0} is not a vertex")]
    NotAVertex(String),
    #[error("bandwidth {bandwidth} is below 2√δ = {min}")]
    BandwidthTooSmall { bandwidth: f64, min: f64 },
}

#[derive(Clone, Debug, Serialize)]
pub struct McConfig {
    /// Time step.
    pub delta: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Horizon `T` for hitting-time estimates.
    pub horizon: f64,
    /// Paths farther than this many edges from the target are abandoned.
    pub kill_depth: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            delta: 1e-3,
            n_paths: 100_000,
            seed: 1,
            horizon: 40.0,
            kill_depth: 12,
        }
    }
}

impl McConfig {
    fn validate(&self) -> Result<(), McError> {
        if !(self.delta > 0.0 && self.delta <= 0.01) {
            return Err(McError::BadConfig(format!("delta = {}", self.delta)));
        }
        if self.n_paths == 0 || !(self.horizon > 0.0) {
            return Err(McError::BadConfig("empty ensemble or horizon".into()));
        }
        Ok(())
    }

    /// Generator for path `index`; independent of scheduling.
    pub fn rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Position on the tree: `s` along `edge`, which leaves the vertex `word`.
#[derive(Clone, Debug)]
pub struct Walker {
    pub word: Vec<EdgeId>,
    pub edge: EdgeId,
    pub s: f64,
    /// Target word and the length of its common prefix with `word`.
    target: Vec<EdgeId>,
    common: usize,
}

impl Walker {
    pub fn new(g: &QuotientGraph, x: &TreePoint) -> Self {
        let (word, edge, s) = match x.edge {
            Some(e) => (x.anchor.word.clone(), e, x.offset),
            None => {
                let v = x.anchor.project(g);
                (x.anchor.word.clone(), g.out_edges(v)[0], 0.0)
            }
        };
        Walker {
            word,
            edge,
            s,
            target: Vec::new(),
            common: 0,
        }
    }

    fn with_target(mut self, y: &TreeVertex) -> Self {
        self.target = y.word.clone();
        self.common = self
            .word
            .iter()
            .zip(&self.target)
            .take_while(|(a, b)| a == b)
            .count();
        self
    }

    pub fn position(&self, g: &QuotientGraph) -> TreePoint {
        let v = TreeVertex {
            word: self.word.clone(),
        };
        if self.s == 0.0 {
            TreePoint::vertex(v)
        } else {
            TreePoint::along(g, &v, self.edge, self.s)
        }
    }

    /// Combinatorial distance from the base vertex to the target.
    fn target_gap(&self) -> usize {
        self.word.len() + self.target.len() - 2 * self.common
    }

    fn at_target(&self) -> bool {
        self.s == 0.0 && self.common == self.word.len() && self.common == self.target.len()
    }

    fn cross(&mut self, g: &QuotientGraph) {
        let back = g.rev(self.edge);
        if self.word.last() == Some(&back) {
            if self.common == self.word.len() {
                self.common -= 1;
            }
            self.word.pop();
        } else {
            if self.common == self.word.len()
                && self.common < self.target.len()
                && self.target[self.common] == self.edge
            {
                self.common += 1;
            }
            self.word.push(self.edge);
        }
        self.edge = back;
        self.s = 0.0;
    }

    fn choose<R: Rng>(&mut self, g: &QuotientGraph, rng: &mut R) {
        let out = g.out_edges(g.origin(self.edge));
        self.edge = out[rng.gen_range(0..out.len())];
    }

    /// Applies the displacement `z`; `on_visit` sees the walker parked at each
    /// vertex reached and may stop the step by returning `true`.
    pub fn advance<R: Rng>(
        &mut self,
        g: &QuotientGraph,
        z: f64,
        delta: f64,
        rng: &mut R,
        on_visit: &mut impl FnMut(&Walker) -> bool,
    ) -> bool {
        let l = g.len(self.edge);
        let s0 = self.s;
        let mut s = s0 + z;
        if (0.0..l).contains(&s) {
            let expo = |a: f64| if a < 40.0 { (-a).exp() } else { 0.0 };
            let near = expo(s0 * s / delta);
            let far = expo((l - s0) * (l - s) / delta);
            if near == 0.0 && far == 0.0 {
                self.s = s;
                return false;
            }
            let u: f64 = rng.gen();
            if u < near {
                self.s = 0.0;
                if on_visit(self) {
                    return true;
                }
                self.choose(g, rng);
                self.s = s;
            } else if u < near + far {
                self.cross(g);
                if on_visit(self) {
                    return true;
                }
                self.choose(g, rng);
                self.s = l - s;
            } else {
                self.s = s;
            }
            return false;
        }
        loop {
            let r = if s >= l {
                let r = s - l;
                self.cross(g);
                r
            } else {
                self.s = 0.0;
                -s
            };
            if on_visit(self) {
                return true;
            }
            self.choose(g, rng);
            let l2 = g.len(self.edge);
            if r < l2 {
                self.s = r;
                return false;
            }
            s = r;
        }
    }
}

fn gaussian(delta: f64) -> Normal<f64> {
    Normal::new(0.0, (2.0 * delta).sqrt()).expect("positive variance")
}

/// Positions at the requested times plus the first vertex visit of each path.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub times: Vec<f64>,
    /// `positions[i][k]`: path `k` at `times[i]`.
    pub positions: Vec<Vec<TreePoint>>,
    /// Time, vertex word and chosen exit edge at the first vertex visit, if any.
    pub first_visits: Vec<Option<FirstVisit>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FirstVisit {
    pub time: f64,
    pub vertex: Vec<EdgeId>,
    pub exit_edge: EdgeId,
}

pub fn simulate_paths(
    g: &QuotientGraph,
    x: &TreePoint,
    times: &[f64],
    cfg: &McConfig,
) -> Result<Ensemble, McError> {
    cfg.validate()?;
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|&t| t < 0.0) {
        return Err(McError::BadConfig("times must be sorted and nonnegative".into()));
    }
    let normal = gaussian(cfg.delta);
    let paths: Vec<(Vec<TreePoint>, Option<FirstVisit>)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|k| {
            let mut rng = cfg.rng(k);
            let mut w = Walker::new(g, x);
            let mut out = Vec::with_capacity(times.len());
            let mut first: Option<(f64, Vec<EdgeId>)> = None;
            let mut exit: Option<EdgeId> = None;
            let mut step = 0usize;
            for &t in times {
                let target_steps = (t / cfg.delta).round() as usize;
                while step < target_steps {
                    let z = normal.sample(&mut rng);
                    step += 1;
                    let now = step as f64 * cfg.delta;
                    let pending = first.is_none();
                    w.advance(g, z, cfg.delta, &mut rng, &mut |v: &Walker| {
                        if first.is_none() {
                            first = Some((now, v.word.clone()));
                        }
                        false
                    });
                    if pending && first.is_some() && exit.is_none() {
                        exit = Some(w.edge);
                    }
                }
                out.push(w.position(g));
            }
            let fv = first.map(|(time, vertex)| FirstVisit {
                time,
                vertex,
                exit_edge: exit.unwrap_or(w.edge),
            });
            (out, fv)
        })
        .collect();
    let mut positions = vec![Vec::with_capacity(cfg.n_paths); times.len()];
    let mut first_visits = Vec::with_capacity(cfg.n_paths);
    for (pos, fv) in paths {
        for (i, p) in pos.into_iter().enumerate() {
            positions[i].push(p);
        }
        first_visits.push(fv);
    }
    Ok(Ensemble {
        times: times.to_vec(),
        positions,
        first_visits,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct HittingEstimate {
    pub lambda: f64,
    pub mean: f64,
    pub stderr: f64,
    pub hits: usize,
    /// Paths abandoned beyond the kill depth.
    pub killed: usize,
    /// Paths still alive at the horizon.
    pub censored: usize,
    /// Contribution of hits in `(T/2, T]`, a proxy for the truncation bias.
    pub late_contribution: f64,
}

/// First hitting time of the vertex `y`, or `None` if the path is abandoned
/// or reaches the horizon first; the flag reports abandonment.
fn hitting_time<R: Rng>(
    g: &QuotientGraph,
    x: &TreePoint,
    y: &TreeVertex,
    cfg: &McConfig,
    normal: &Normal<f64>,
    rng: &mut R,
) -> (Option<f64>, bool) {
    let mut w = Walker::new(g, x).with_target(y);
    if w.at_target() {
        return (Some(0.0), false);
    }
    let steps = (cfg.horizon / cfg.delta).round() as usize;
    for k in 1..=steps {
        let z = normal.sample(rng);
        let hit = w.advance(g, z, cfg.delta, rng, &mut |v: &Walker| v.at_target());
        if hit {
            return (Some(k as f64 * cfg.delta), false);
        }
        if w.target_gap() > cfg.kill_depth {
            return (None, true);
        }
    }
    (None, false)
}

/// Estimates `E_x[1_{t_y<∞} e^{λ t_y}]` for a vertex `y`.
pub fn estimate_hitting_transform(
    g: &QuotientGraph,
    x: &TreePoint,
    y: &TreePoint,
    lambda: f64,
    cfg: &McConfig,
) -> Result<HittingEstimate, McError> {
    cfg.validate()?;
    let yv = y.as_vertex().ok_or_else(|| McError::NotAVertex(y.label(g)))?;
    if x == y {
        return Ok(HittingEstimate {
            lambda,
            mean: 1.0,
            stderr: 0.0,
            hits: cfg.n_paths,
            killed: 0,
            censored: 0,
            late_contribution: 0.0,
        });
    }
    let normal = gaussian(cfg.delta);
    let runs: Vec<(Option<f64>, bool)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|k| hitting_time(g, x, yv, cfg, &normal, &mut cfg.rng(k)))
        .collect();
    let n = cfg.n_paths as f64;
    let half = 0.5 * cfg.horizon;
    let (mut sum, mut sq, mut sq_half, mut late) = (0.0, 0.0, 0.0, 0.0);
    let (mut hits, mut killed, mut censored) = (0, 0, 0);
    for (t, k) in &runs {
        match t {
            Some(t) => {
                let v = (lambda * t).exp();
                hits += 1;
                sum += v;
                sq += v * v;
                if *t <= half {
                    sq_half += v * v;
                } else {
                    late += v;
                }
            }
            None if *k => killed += 1,
            None => censored += 1,
        }
    }
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0);
    if sq_half > 0.0 && sq > 1.25 * sq_half {
        return Err(McError::VarianceExplosion {
            half: sq_half / n,
            full: sq / n,
        });
    }
    Ok(HittingEstimate {
        lambda,
        mean,
        stderr: (var / (n - 1.0)).sqrt(),
        hits,
        killed,
        censored,
        late_contribution: late / n,
    })
}

/// Epanechnikov profile on `[0, b]`.
fn epanechnikov(r: f64, b: f64) -> f64 {
    if r >= b {
        0.0
    } else {
        let u = r / b;
        0.75 * (1.0 - u * u) / b
    }
}

/// `∫_a^c` of the Epanechnikov profile in the radial variable.
fn profile_integral(a: f64, c: f64, b: f64) -> f64 {
    let prim = |r: f64| {
        let r = r.min(b);
        0.75 * (r / b - r * r * r / (3.0 * b * b * b))
    };
    prim(c) - prim(a)
}

/// `∫ K_b(d(y, z)) dμ(z)` over the tree: the local normalizer of the kernel.
pub fn kernel_normalizer(g: &QuotientGraph, y: &TreePoint, b: f64) -> f64 {
    // Each (edge, distance to its start) leaves a point at radial distance `r0`.
    fn spread(g: &QuotientGraph, e: EdgeId, start: f64, r0: f64, b: f64) -> f64 {
        if r0 >= b {
            return 0.0;
        }
        let l = g.len(e) - start;
        let mut acc = profile_integral(r0, r0 + l, b);
        if r0 + l < b {
            for f in g.successors(e) {
                acc += spread(g, f, 0.0, r0 + l, b);
            }
        }
        acc
    }
    match y.edge {
        Some(e) => spread(g, e, y.offset, 0.0, b) + spread(g, g.rev(e), g.len(e) - y.offset, 0.0, b),
        None => {
            let v = y.anchor.project(g);
            g.out_edges(v).iter().map(|&e| spread(g, e, 0.0, 0.0, b)).sum()
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DensityEstimate {
    pub t: f64,
    pub value: f64,
    pub stderr: f64,
    pub bandwidth: f64,
    pub normalizer: f64,
}

/// Kernel density estimate of `p(t, x, y)` from ensemble positions.
pub fn density_from_positions(
    g: &QuotientGraph,
    positions: &[TreePoint],
    y: &TreePoint,
    bandwidth: f64,
) -> (f64, f64, f64) {
    let z = kernel_normalizer(g, y, bandwidth);
    let vals: Vec<f64> = positions
        .iter()
        .map(|p| epanechnikov(tree_distance(g, p, y), bandwidth) / z)
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt(), z)
}

pub fn estimate_density(
    g: &QuotientGraph,
    x: &TreePoint,
    y: &TreePoint,
    t: f64,
    cfg: &McConfig,
    bandwidth: f64,
) -> Result<DensityEstimate, McError> {
    let min = 2.0 * cfg.delta.sqrt();
    if bandwidth < min {
        return Err(McError::BandwidthTooSmall { bandwidth, min });
    }
    let ens = simulate_paths(g, x, &[t], cfg)?;
    let (value, stderr, normalizer) = density_from_positions(g, &ens.positions[0], y, bandwidth);
    Ok(DensityEstimate {
        t,
        value,
        stderr,
        bandwidth,
        normalizer,
    })
}

/// Total mass `∫ p̂ dμ` of the kernel density estimate, integrated around
/// every sample point by Gauss–Legendre panels.
pub fn kde_total_mass(g: &QuotientGraph, positions: &[TreePoint], bandwidth: f64) -> f64 {
    let b = bandwidth;
    let mass_around = |p: &TreePoint| -> f64 {
        let mut pieces: Vec<(TreeVertex, EdgeId, f64, f64)> = Vec::new();
        // (anchor vertex, edge, start offset along edge, radial distance at start)
        let mut stack: Vec<(TreeVertex, EdgeId, f64, f64)> = Vec::new();
        match p.edge {
            Some(e) => {
                let far = p.anchor.child(e);
                stack.push((p.anchor.clone(), e, p.offset, 0.0));
                stack.push((far, g.rev(e), g.len(e) - p.offset, 0.0));
            }
            None => {
                let v = p.anchor.project(g);
                for &e in g.out_edges(v) {
                    stack.push((p.anchor.clone(), e, 0.0, 0.0));
                }
            }
        }
        while let Some((v, e, start, r0)) = stack.pop() {
            if r0 >= b {
                continue;
            }
            pieces.push((v.clone(), e, start, r0));
            let l = g.len(e) - start;
            if r0 + l < b {
                let w = v.step(g, e);
                for f in g.successors(e) {
                    stack.push((w.clone(), f, 0.0, r0 + l));
                }
            }
        }
        let mut acc = 0.0;
        for (v, e, start, r0) in pieces {
            let reach = (b - r0).min(g.len(e) - start);
            let panels = 8;
            for k in 0..panels {
                let a = reach * k as f64 / panels as f64;
                let c = reach * (k + 1) as f64 / panels as f64;
                acc += crate::jet::gauss16(a, c, |u| {
                    let off = start + u;
                    let y = if off <= 0.0 {
                        TreePoint::vertex(v.clone())
                    } else if off >= g.len(e) {
                        TreePoint::vertex(v.step(g, e))
                    } else {
                        TreePoint::along(g, &v, e, off)
                    };
                    epanechnikov(r0 + u, b) / kernel_normalizer(g, &y, b)
                });
            }
        }
        acc
    };
    let n = positions.len() as f64;
    let masses: Vec<f64> = positions.par_iter().map(mass_around).collect();
    masses.iter().sum::<f64>() / n
}

/// Fraction of time spent on each undirected quotient edge (indexed by the
/// smaller oriented id) along long paths.
pub fn occupation_fractions(
    g: &QuotientGraph,
    x: &TreePoint,
    horizon: f64,
    cfg: &McConfig,
) -> Result<Vec<(EdgeId, f64)>, McError> {
    cfg.validate()?;
    let normal = gaussian(cfg.delta);
    let steps = (horizon / cfg.delta).round() as usize;
    let counts: Vec<Vec<f64>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|k| {
            let mut rng = cfg.rng(k);
            let mut w = Walker::new(g, x);
            let mut c = vec![0.0; g.num_edges()];
            for _ in 0..steps {
                let z = normal.sample(&mut rng);
                w.advance(g, z, cfg.delta, &mut rng, &mut |_| false);
                c[w.edge.min(g.rev(w.edge))] += 1.0;
            }
            c
        })
        .collect();
    let mut total = vec![0.0; g.num_edges()];
    for c in &counts {
        for (t, v) in total.iter_mut().zip(c) {
            *t += v;
        }
    }
    let all: f64 = total.iter().sum();
    Ok((0..g.num_edges())
        .filter(|&e| e < g.rev(e))
        .map(|e| (e, total[e] / all))
        .collect())
}

/// Distances from `y` at time `tau` after the first hit of `y` by paths from
/// `x`, and of fresh paths started at `y`; used for the strong Markov splice test.
pub fn splice_samples(
    g: &QuotientGraph,
    x: &TreePoint,
    y: &TreeVertex,
    tau: f64,
    cfg: &McConfig,
) -> Result<(Vec<f64>, Vec<f64>), McError> {
    cfg.validate()?;
    let normal = gaussian(cfg.delta);
    let yp = TreePoint::vertex(y.clone());
    let tau_steps = (tau / cfg.delta).round() as usize;
    let run_from = |w: &mut Walker, rng: &mut ChaCha8Rng| {
        for _ in 0..tau_steps {
            let z = normal.sample(rng);
            w.advance(g, z, cfg.delta, rng, &mut |_| false);
        }
        tree_distance(g, &w.position(g), &yp)
    };
    let spliced: Vec<f64> = (0..cfg.n_paths)
        .into_par_iter()
        .filter_map(|k| {
            let mut rng = cfg.rng(k);
            let mut w = Walker::new(g, x).with_target(y);
            let steps = (cfg.horizon / cfg.delta).round() as usize;
            for _ in 0..steps {
                let z = normal.sample(&mut rng);
                if w.advance(g, z, cfg.delta, &mut rng, &mut |v: &Walker| v.at_target()) {
                    return Some(run_from(&mut w, &mut rng));
                }
                if w.target_gap() > cfg.kill_depth {
                    return None;
                }
            }
            None
        })
        .collect();
    let fresh: Vec<f64> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|k| {
            let mut rng = cfg.rng(cfg.n_paths + k);
            let mut w = Walker::new(g, &yp);
            run_from(&mut w, &mut rng)
        })
        .collect();
    Ok((spliced, fresh))
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lam = (en + 0.12 + 0.11 / en) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-1f64).powi(k + 1) * (-2.0 * kf * kf * lam * lam).exp();
        p += term;
        if term.abs() < 1e-12 {
            return (d, p.clamp(0.0, 1.0));
        }
    }
    // The series only fails to converge for tiny statistics.
    (d, 1.0)
}
