//! Patterson–Sullivan densities and Gibbs cylinder measures.
//!
//! Shadow masses are computed from cone sums over edge types instead of atom
//! lists. For an oriented edge `f`, `T_m(f)` sums `Φ²(i(f), z) e^{−s d(i(f), z)}`
//! over lifts `z` of the base vertex reached by non-backtracking paths of at
//! most `m` edges starting with `f`:
//! `T_m(f) = b_f (1_o(t(f)) + Σ_{f' after f} T_{m−1}(f'))` with `b_f = F_f² e^{−s l_f}`.
//! The common factor `G(o, o)²` cancels against the normalizer.

use crate::graph::{busemann, on_segment, tree_distance, BoundaryRay, EdgeId, QuotientGraph, TreePoint, TreeVertex};
use crate::linalg::{perron, LinalgError};
use crate::resolvent::{Banded, ResolventError, WeylTable, ROUNDOFF};
use crate::thermo::{build_coding, delta_lambda, CodingSystem, ThermoError};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("series tail {band:e} exceeds tolerance {tol:e}")]
    TailNotControlled { band: f64, tol: f64 },
    #[error("truncation depth {depth} is below the required {needed}")]
    DepthTooSmall { depth: usize, needed: usize },
    #[error("exponent {s} is not above the critical exponent {delta}")]
    ExponentTooSmall { s: f64, delta: f64 },
    #[error("shadow anchor must differ from the base point")]
    DegenerateShadow,
    #[error("shadow is not away from the geodesic between the base points")]
    ShadowNotAway,
    #[error(transparent)]
    Resolvent(#[from] ResolventError),
    #[error(transparent)]
    Thermo(#[from] ThermoError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// How the Poincaré series is summed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum PsRoute {
    /// Atoms within `depth` edges of the base point, at exponent `s > δ_λ`.
    Truncated { depth: usize },
    /// The full series at `s > δ_λ`, summed exactly by a linear solve.
    Series,
    /// The limit `s ↓ δ_λ`, given by the Perron vector of the cone operator.
    Limit,
}

/// Patterson–Sullivan density approximation normalized at the base lift.
#[derive(Clone, Debug)]
pub struct PsDensity {
    graph: QuotientGraph,
    weyl: WeylTable,
    pub lambda: f64,
    pub delta: f64,
    pub s: f64,
    pub route: PsRoute,
    /// Relative band tolerated before `TailNotControlled`.
    pub tol: f64,
    /// `T_m` for `m = 0..=N` (truncated route).
    table: Vec<Vec<f64>>,
    /// Full series `T_∞`, or the Perron vector in the limit route.
    full: Vec<f64>,
    normalizer: f64,
    normalizer_band: f64,
}

fn indicator(g: &QuotientGraph, f: EdgeId) -> f64 {
    if g.terminus(f) == g.base() {
        1.0
    } else {
        0.0
    }
}

impl PsDensity {
    pub fn new(w: &WeylTable, s: f64, route: PsRoute) -> Result<Self, MeasureError> {
        w.require_converged()?;
        let g = w.graph().clone();
        let delta = delta_lambda(w)?;
        let n = g.num_edges();
        let b: Vec<f64> = (0..n)
            .map(|f| w.f[f] * w.f[f] * (-s * g.len(f)).exp())
            .collect();
        let k = DMatrix::from_fn(n, n, |i, j| {
            if g.composable(i, j) && j != g.rev(i) {
                b[i]
            } else {
                0.0
            }
        });
        let out_base = g.out_edges(g.base()).to_vec();
        let series = |k: &DMatrix<f64>| -> Option<Vec<f64>> {
            let rhs = DVector::from_fn(n, |f, _| b[f] * indicator(&g, f));
            let a = DMatrix::identity(n, n) - k;
            let x = a.lu().solve(&rhs)?;
            x.iter().all(|v| *v > 0.0).then(|| x.iter().copied().collect())
        };
        let mut table = Vec::new();
        let (full, normalizer, normalizer_band) = match route {
            PsRoute::Limit => {
                let p = perron(&k)?;
                let r: Vec<f64> = p.right.iter().copied().collect();
                let z: f64 = out_base.iter().map(|&f| r[f]).sum();
                let band = (p.rho - 1.0).abs().max(ROUNDOFF);
                (r, z, band)
            }
            PsRoute::Series | PsRoute::Truncated { .. } => {
                if !(s > delta) {
                    return Err(MeasureError::ExponentTooSmall { s, delta });
                }
                let full = series(&k).ok_or(MeasureError::ExponentTooSmall { s, delta })?;
                let z_full = 1.0 + out_base.iter().map(|&f| full[f]).sum::<f64>();
                match route {
                    PsRoute::Truncated { depth } => {
                        table.push(vec![0.0; n]);
                        for m in 1..=depth {
                            let prev = &table[m - 1];
                            let next: Vec<f64> = (0..n)
                                .map(|f| {
                                    let beyond: f64 = g.successors(f).map(|h| prev[h]).sum();
                                    b[f] * (indicator(&g, f) + beyond)
                                })
                                .collect();
                            table.push(next);
                        }
                        let z = 1.0 + out_base.iter().map(|&f| table[depth][f]).sum::<f64>();
                        (full, z, (z_full - z) / z)
                    }
                    _ => (full, z_full, ROUNDOFF),
                }
            }
        };
        Ok(PsDensity {
            graph: g,
            weyl: w.clone(),
            lambda: w.lambda,
            delta,
            s,
            route,
            tol: 0.05,
            table,
            full,
            normalizer,
            normalizer_band,
        })
    }

    /// The Patterson–Sullivan density at the critical exponent.
    pub fn limit(w: &WeylTable) -> Result<Self, MeasureError> {
        let d = delta_lambda(w)?;
        Self::new(w, d, PsRoute::Limit)
    }

    pub fn weyl(&self) -> &WeylTable {
        &self.weyl
    }

    /// Cone sum of `f` with `m` edges of budget, and its relative tail.
    fn cone(&self, f: EdgeId, budget: usize) -> (f64, f64) {
        match self.route {
            PsRoute::Truncated { .. } => {
                let v = self.table[budget.min(self.table.len() - 1)][f];
                (v, (self.full[f] - v) / self.full[f])
            }
            _ => (self.full[f], 0.0),
        }
    }

    fn atom(&self, v: &TreeVertex) -> f64 {
        match self.route {
            PsRoute::Limit => 0.0,
            _ => {
                if v.project(&self.graph) == self.graph.base() {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn budget(&self, n: usize) -> Result<usize, MeasureError> {
        match self.route {
            PsRoute::Truncated { depth } => {
                if depth < n + 6 {
                    return Err(MeasureError::DepthTooSmall {
                        depth,
                        needed: n + 6,
                    });
                }
                Ok(depth - n)
            }
            _ => Ok(0),
        }
    }

    /// Mass of everything beyond vertex `v` entered through `back` (excluded).
    fn beyond(&self, v: &TreeVertex, back: Option<EdgeId>, budget: usize) -> (f64, f64) {
        let g = &self.graph;
        let mut sum = self.atom(v);
        let mut tail_abs = 0.0;
        for &f in g.out_edges(v.project(g)) {
            if Some(f) == back {
                continue;
            }
            let (c, t) = self.cone(f, budget);
            sum += c;
            tail_abs += t * c;
        }
        (sum, if sum > 0.0 { tail_abs / sum } else { 0.0 })
    }

    fn weight(&self, x: &TreePoint, y: &TreePoint) -> f64 {
        let phi = self.weyl.kernel().phi(x, y);
        phi * phi * (-self.s * tree_distance(&self.graph, x, y)).exp()
    }

    /// `μ_x(O_x(y))` for tree vertices `x ≠ y`.
    pub fn shadow_mass(&self, x: &TreeVertex, y: &TreeVertex) -> Result<Banded, MeasureError> {
        if x == y {
            return Err(MeasureError::DegenerateShadow);
        }
        let g = &self.graph;
        let (xp, yp) = (TreePoint::vertex(x.clone()), TreePoint::vertex(y.clone()));
        let seg = crate::graph::geodesic(g, &xp, &yp);
        let n = seg.pieces.len();
        let budget = self.budget(n)?;
        let back = g.rev(seg.pieces.last().unwrap().edge);
        let (sum, tail) = self.beyond(y, Some(back), budget);
        let value = self.weight(&xp, &yp) * sum / self.normalizer;
        let band = tail + self.normalizer_band;
        if band > self.tol {
            return Err(MeasureError::TailNotControlled {
                band,
                tol: self.tol,
            });
        }
        Ok(Banded {
            value,
            band: band.max(ROUNDOFF * n as f64),
        })
    }

    /// `μ_x(∂T)` for any point `x`.
    pub fn total_mass(&self, x: &TreePoint) -> f64 {
        let g = &self.graph;
        let budget = match self.route {
            PsRoute::Truncated { depth } => depth.saturating_sub(1),
            _ => 0,
        };
        match (&x.edge, x.as_vertex()) {
            (_, Some(v)) => self.beyond(v, None, budget).0 / self.normalizer,
            (Some(e), None) => {
                let near = x.anchor.clone();
                let far = near.step(g, *e);
                let mut acc = 0.0;
                for (v, back) in [(near, *e), (far, g.rev(*e))] {
                    let vp = TreePoint::vertex(v.clone());
                    acc += self.weight(x, &vp) * self.beyond(&v, Some(back), budget).0;
                }
                acc / self.normalizer
            }
            _ => unreachable!(),
        }
    }

    /// `∫_{T₀} μ_y(∂T) dμ(y)` over one lift of every quotient edge.
    pub fn fundamental_domain_integral(&self) -> f64 {
        let g = &self.graph;
        let coding = build_coding(g).expect("valid quotient");
        let mut acc = 0.0;
        for e in 0..g.num_edges() {
            if e > g.rev(e) {
                continue;
            }
            let start = TreeVertex {
                word: coding.lift_prefix(&[e]),
            };
            let l = g.len(e);
            acc += crate::jet::gauss16(0.0, l, |a| {
                self.total_mass(&TreePoint::along(g, &start, e, a))
            });
        }
        acc
    }
}

/// Vertices at combinatorial distance `n` from `x`.
pub fn sphere(g: &QuotientGraph, x: &TreeVertex, n: usize) -> Vec<TreeVertex> {
    let mut layer: Vec<(TreeVertex, Option<EdgeId>)> = vec![(x.clone(), None)];
    for _ in 0..n {
        let mut next = Vec::new();
        for (v, came) in &layer {
            for &f in g.out_edges(v.project(g)) {
                if Some(f) == *came {
                    continue;
                }
                next.push((v.step(g, f), Some(g.rev(f))));
            }
        }
        layer = next;
    }
    layer.into_iter().map(|(v, _)| v).collect()
}

/// A boundary ray through `v` extending its address away from the root.
pub fn ray_through(coding: &CodingSystem, v: &TreeVertex) -> BoundaryRay {
    if v.word.is_empty() {
        let g = coding.graph();
        let e = g.out_edges(g.base())[0];
        let (tail, period) = coding.extension(&[e]);
        let mut pre = vec![e];
        pre.extend(tail);
        return BoundaryRay {
            prefix: TreeVertex::root(),
            pre,
            period,
        };
    }
    let (tail, period) = coding.extension(&v.word);
    BoundaryRay {
        prefix: v.clone(),
        pre: tail,
        period,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConformalityReport {
    pub ratio: f64,
    /// `k_λ²(x, y, ξ_c) e^{s β_{ξ_c}(x, y)}` at the exponent of the density.
    pub factor: f64,
    /// The same factor with `s = δ_λ`.
    pub factor_critical: f64,
    pub deviation: f64,
    pub band: f64,
}

/// Compares `μ_y(O_x(w)) / μ_x(O_x(w))` with the Radon–Nikodym factor at the
/// central ray of the shadow; requires `O_x(w) = O_y(w)`.
pub fn conformality_check(
    ps: &PsDensity,
    coding: &CodingSystem,
    x: &TreeVertex,
    y: &TreeVertex,
    w: &TreeVertex,
) -> Result<ConformalityReport, MeasureError> {
    let g = coding.graph();
    let (xp, yp, wp) = (
        TreePoint::vertex(x.clone()),
        TreePoint::vertex(y.clone()),
        TreePoint::vertex(w.clone()),
    );
    if x == y {
        return Ok(ConformalityReport {
            ratio: 1.0,
            factor: 1.0,
            factor_critical: 1.0,
            deviation: 0.0,
            band: 0.0,
        });
    }
    // The median of x, y, w must differ from w.
    let dxy = tree_distance(g, &xp, &yp);
    let dxw = tree_distance(g, &xp, &wp);
    let dyw = tree_distance(g, &yp, &wp);
    let to_median = 0.5 * (dxw + dyw - dxy);
    if to_median <= 1e-9 {
        return Err(MeasureError::ShadowNotAway);
    }
    let mx = ps.shadow_mass(x, w)?;
    let my = ps.shadow_mass(y, w)?;
    let xi = ray_through(coding, w);
    let depth = w.depth() + 2;
    let k = ps.weyl().martin_kernel(&xp, &yp, &xi, depth)?;
    let beta = busemann(g, &xi, &xp, &yp);
    let factor = k.value * k.value * (ps.s * beta).exp();
    let factor_critical = k.value * k.value * (ps.delta * beta).exp();
    let ratio = my.value / mx.value;
    Ok(ConformalityReport {
        ratio,
        factor,
        factor_critical,
        deviation: (ratio / factor_critical - 1.0).abs(),
        band: mx.band + my.band + 2.0 * k.band,
    })
}

/// Shadow-lemma ratio `μ_x(O_x(y)) / (e^{−δ d(x,y)} G²(x, y))`.
pub fn shadow_lemma_ratio(ps: &PsDensity, x: &TreeVertex, y: &TreeVertex) -> Result<f64, MeasureError> {
    let g = ps.weyl().graph();
    let (xp, yp) = (TreePoint::vertex(x.clone()), TreePoint::vertex(y.clone()));
    let m = ps.shadow_mass(x, y)?;
    let gxy = ps.weyl().green(&xp, &yp)?;
    Ok(m.value / ((-ps.delta * tree_distance(g, &xp, &yp)).exp() * gxy * gxy))
}

/// Cylinder of geodesics crossing the lift of `word` starting at `start`.
#[derive(Clone, Debug, Serialize)]
pub struct CylinderSet {
    pub start: TreeVertex,
    pub word: Vec<EdgeId>,
}

impl CylinderSet {
    pub fn end(&self, g: &QuotientGraph) -> TreeVertex {
        let mut v = self.start.clone();
        for &e in &self.word {
            v = v.step(g, e);
        }
        v
    }

    pub fn extend(&self, e: EdgeId) -> CylinderSet {
        let mut word = self.word.clone();
        word.push(e);
        CylinderSet {
            start: self.start.clone(),
            word,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum CylinderRoute {
    /// Double integral of `θ²` over the product of shadows.
    ShadowProduct,
    /// `e^{S F_λ}` at the cylinder representative.
    GibbsFormula,
}

#[derive(Clone, Debug, Serialize)]
pub struct GibbsCylinderMeasure {
    pub lambda: f64,
    pub cylinder: CylinderSet,
    pub value: f64,
    pub band: f64,
    pub route: CylinderRoute,
}

/// Extra depth of the sub-shadow partition in the shadow-product route.
pub const SUBSHADOW_DEPTH: usize = 4;

pub fn cylinder_measure(
    ps: &PsDensity,
    coding: &CodingSystem,
    cyl: &CylinderSet,
    route: CylinderRoute,
) -> Result<GibbsCylinderMeasure, MeasureError> {
    let g = coding.graph();
    if cyl.word.len() < 2 || !coding.admissible(&cyl.word) {
        return Err(MeasureError::Thermo(ThermoError::NotAdmissible));
    }
    let a = cyl.start.clone();
    let b = cyl.end(g);
    let ap = TreePoint::vertex(a.clone());
    let bp = TreePoint::vertex(b.clone());
    let w = ps.weyl();
    let (value, band) = match route {
        CylinderRoute::GibbsFormula => {
            let xi = ray_through(coding, &b);
            let k = w.martin_kernel(&bp, &ap, &xi, b.depth() + 2)?;
            let d = tree_distance(g, &ap, &bp);
            (k.value * k.value * (-ps.delta * d).exp(), 2.0 * k.band)
        }
        CylinderRoute::ShadowProduct => {
            let forward: Vec<TreeVertex> = sphere(g, &b, SUBSHADOW_DEPTH)
                .into_iter()
                .filter(|v| on_segment(g, &ap, &bp, &TreePoint::vertex(v.clone())))
                .collect();
            let backward: Vec<TreeVertex> = sphere(g, &a, SUBSHADOW_DEPTH)
                .into_iter()
                .filter(|v| on_segment(g, &bp, &ap, &TreePoint::vertex(v.clone())))
                .collect();
            let mut acc = 0.0;
            let mut band: f64 = 0.0;
            let fw: Vec<(Banded, BoundaryRay)> = forward
                .iter()
                .map(|v| Ok((ps.shadow_mass(&a, v)?, ray_through(coding, v))))
                .collect::<Result<_, MeasureError>>()?;
            let bw: Vec<(Banded, BoundaryRay)> = backward
                .iter()
                .map(|v| Ok((ps.shadow_mass(&a, v)?, ray_through(coding, v))))
                .collect::<Result<_, MeasureError>>()?;
            let depth = a.depth().max(b.depth()) + SUBSHADOW_DEPTH + 2;
            for (mz, zeta) in &fw {
                for (mx, xi) in &bw {
                    let th = w.naim_kernel(&ap, xi, zeta, depth)?;
                    acc += th.value * th.value * mx.value * mz.value;
                    band = band.max(2.0 * th.band + mx.band + mz.band);
                }
            }
            (acc, band)
        }
    };
    Ok(GibbsCylinderMeasure {
        lambda: ps.lambda,
        cylinder: cyl.clone(),
        value,
        band,
        route,
    })
}

/// `c(x, y) = ∫ k_λ(x, y, ξ) dμ_x(ξ)` by piecewise-constant quadrature on the
/// shadows of the vertices at distance `depth` from `x`.
pub fn c_kernel(
    ps: &PsDensity,
    coding: &CodingSystem,
    x: &TreeVertex,
    y: &TreeVertex,
    depth: usize,
) -> Result<Banded, MeasureError> {
    let g = coding.graph();
    let xp = TreePoint::vertex(x.clone());
    let yp = TreePoint::vertex(y.clone());
    let needed = x.depth().max(y.depth()) + 1 + crate::graph::geodesic(g, &xp, &yp).pieces.len();
    if depth < needed {
        return Err(MeasureError::DepthTooSmall { depth, needed });
    }
    let eval = |n: usize| -> Result<(f64, f64), MeasureError> {
        let mut acc = 0.0;
        let mut band = 0.0;
        for v in sphere(g, x, n) {
            let m = ps.shadow_mass(x, &v)?;
            let xi = ray_through(coding, &v);
            let k = ps.weyl().martin_kernel(&xp, &yp, &xi, v.depth() + 2)?;
            acc += m.value * k.value;
            band += m.value * k.value * (m.band + k.band);
        }
        Ok((acc, band / acc))
    };
    let (v, b) = eval(depth)?;
    let (v2, _) = eval(depth + 2)?;
    Ok(Banded {
        value: v,
        band: (b + ((v2 - v) / v).abs()).max(ROUNDOFF * depth as f64),
    })
}
