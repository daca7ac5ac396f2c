use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treelab::graph::*;
use treelab::measures::*;
use treelab::resolvent::*;
use treelab::thermo::*;

fn lambda0(g: &QuotientGraph) -> f64 {
    lambda0_bracket(g, 1e-13).0
}

fn brute_shadow(g: &QuotientGraph, w: &WeylTable, s: f64, x: &TreeVertex, y: &TreeVertex, n: usize) -> f64 {
    let k = w.kernel();
    let xp = TreePoint::vertex(x.clone());
    let yp = TreePoint::vertex(y.clone());
    let root = TreePoint::root();
    let (mut num, mut den) = (0.0, 0.0);
    for z in vertices_to_depth(g, n + x.depth()) {
        if z.project(g) != g.base() {
            continue;
        }
        let zp = TreePoint::vertex(z.clone());
        if geodesic(g, &xp, &zp).pieces.len() <= n && on_segment(g, &xp, &yp, &zp) {
            num += k.phi(&xp, &zp).powi(2) * (-s * tree_distance(g, &xp, &zp)).exp();
        }
        if z.depth() <= n {
            den += k.phi(&root, &zp).powi(2) * (-s * tree_distance(g, &root, &zp)).exp();
        }
    }
    num / den
}

#[test]
fn cone_recursion_matches_atom_enumeration() {
    for g in [QuotientGraph::theta_unit(), QuotientGraph::theta_dio()] {
        let w = solve_weyl(&g, lambda0(&g) / 2.0).unwrap();
        let s = delta_lambda(&w).unwrap() + 0.3;
        let mut ps = PsDensity::new(&w, s, PsRoute::Truncated { depth: 10 }).unwrap();
        ps.tol = 1.0;
        let x = TreeVertex::root().child(g.out_edges(g.base())[1]);
        for y in sphere(&g, &x, 2) {
            let m = ps.shadow_mass(&x, &y).unwrap().value;
            let b = brute_shadow(&g, &w, s, &x, &y, 10);
            assert!((m - b).abs() < 1e-12 * b, "{m} vs {b}");
        }
    }
}

#[test]
fn truncation_depth_precondition() {
    let g = QuotientGraph::theta_unit();
    let w = solve_weyl(&g, 0.0).unwrap();
    let s = delta_lambda(&w).unwrap() + 0.5;
    let ps = PsDensity::new(&w, s, PsRoute::Truncated { depth: 7 }).unwrap();
    let y = sphere(&g, &TreeVertex::root(), 2)[0].clone();
    assert!(matches!(
        ps.shadow_mass(&TreeVertex::root(), &y),
        Err(MeasureError::DepthTooSmall { .. })
    ));
    let shallow = PsDensity::new(&w, s, PsRoute::Truncated { depth: 9 }).unwrap();
    let mut strict = shallow.clone();
    strict.tol = 1e-6;
    assert!(matches!(
        strict.shadow_mass(&TreeVertex::root(), &y),
        Err(MeasureError::TailNotControlled { .. })
    ));
    assert!(PsDensity::new(&w, s - 0.6, PsRoute::Series).is_err());
}

#[test]
fn truncated_series_converges_to_exact_series() {
    let g = QuotientGraph::theta_dio();
    let w = solve_weyl(&g, 0.02).unwrap();
    let s = delta_lambda(&w).unwrap() + 0.1;
    let exact = PsDensity::new(&w, s, PsRoute::Series).unwrap();
    let x = TreeVertex::root();
    let y = sphere(&g, &x, 3)[4].clone();
    let e = exact.shadow_mass(&x, &y).unwrap().value;
    let mut prev = f64::INFINITY;
    for depth in [20, 40, 80, 160] {
        let mut t = PsDensity::new(&w, s, PsRoute::Truncated { depth }).unwrap();
        t.tol = 1.0;
        let m = t.shadow_mass(&x, &y).unwrap();
        let err = (m.value - e).abs() / e;
        assert!(err <= m.band + 1e-12, "depth {depth}: {err} > {}", m.band);
        assert!(err < prev || err < 1e-13);
        prev = err;
    }
}

#[test]
fn shadow_masses_stabilize_as_exponent_decreases() {
    let g = QuotientGraph::theta_dio();
    let w = solve_weyl(&g, lambda0(&g) / 2.0).unwrap();
    let d = delta_lambda(&w).unwrap();
    let lim = PsDensity::limit(&w).unwrap();
    let x = TreeVertex::root();
    let y = sphere(&g, &x, 2)[1].clone();
    let target = lim.shadow_mass(&x, &y).unwrap().value;
    let mut prev = f64::INFINITY;
    for j in 2..12 {
        let ps = PsDensity::new(&w, d + 0.5f64.powi(j), PsRoute::Series).unwrap();
        let err = (ps.shadow_mass(&x, &y).unwrap().value - target).abs() / target;
        assert!(err < prev);
        prev = err;
    }
    assert!(prev < 2e-3, "{prev}");
}

#[test]
fn shadows_are_nested_and_positive() {
    let g = QuotientGraph::theta_dio();
    let w = solve_weyl(&g, 0.03).unwrap();
    let ps = PsDensity::limit(&w).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let ray = random_ray(&g, &mut rng, 12);
        let x = TreeVertex::root();
        let mut last = f64::INFINITY;
        for n in 1..10 {
            let m = ps.shadow_mass(&x, &ray.vertex(n)).unwrap().value;
            assert!(m > 0.0 && m <= last);
            last = m;
        }
    }
}

#[test]
fn first_edge_shadows_sum_to_total_mass_off_root() {
    let g = QuotientGraph::theta_unit();
    let w = solve_weyl(&g, 0.05).unwrap();
    let ps = PsDensity::limit(&w).unwrap();
    let x = sphere(&g, &TreeVertex::root(), 3)[2].clone();
    let parts: f64 = sphere(&g, &x, 1)
        .iter()
        .map(|y| ps.shadow_mass(&x, y).unwrap().value)
        .sum();
    let total = ps.total_mass(&TreePoint::vertex(x));
    assert!((parts - total).abs() < 1e-12 * total);
}

fn translate(g: &QuotientGraph, loop_word: &[EdgeId], v: &TreeVertex) -> TreeVertex {
    let mut u = TreeVertex::root();
    for &e in loop_word.iter().chain(&v.word) {
        u = u.step(g, e);
    }
    u
}

#[test]
fn masses_are_deck_equivariant() {
    let g = QuotientGraph::theta_dio();
    let coding = build_coding(&g).unwrap();
    let w = solve_weyl(&g, 0.04).unwrap();
    let ps = PsDensity::limit(&w).unwrap();
    let gamma = coding.words(4).into_iter().find(|w| coding.admissible(&[w.as_slice(), w.as_slice()].concat()) && g.origin(w[0]) == g.base()).unwrap();
    let x = TreeVertex::root().child(g.out_edges(g.base())[0]);
    for y in sphere(&g, &x, 3) {
        let a = ps.shadow_mass(&x, &y).unwrap().value;
        let b = ps
            .shadow_mass(&translate(&g, &gamma, &x), &translate(&g, &gamma, &y))
            .unwrap()
            .value;
        assert!((a - b).abs() <= 1e-13 * a, "{a} vs {b}");
    }
}

#[test]
fn conformality_identity_and_radon_nikodym_factor() {
    let g = QuotientGraph::theta_dio();
    let c = build_coding(&g).unwrap();
    let l0 = lambda0(&g);
    let w = solve_weyl(&g, l0).unwrap();
    let d = delta_lambda(&w).unwrap();
    let lim = PsDensity::limit(&w).unwrap();
    let root = TreeVertex::root();
    let same = conformality_check(&lim, &c, &root, &root, &sphere(&g, &root, 8)[3]).unwrap();
    assert_eq!((same.ratio, same.factor), (1.0, 1.0));
    let trunc = PsDensity::new(&w, d + 1.0 / 64.0, PsRoute::Truncated { depth: 2000 }).unwrap();
    for wv in sphere(&g, &root, 8).iter().step_by(17) {
        let ray = ray_through(&c, wv);
        let y = ray.vertex(2);
        for ps in [&lim, &trunc] {
            let r = conformality_check(ps, &c, &root, &y, wv).unwrap();
            assert!(r.deviation < 0.1, "{r:?}");
            assert!((r.ratio / r.factor - 1.0).abs() < 1e-10);
        }
        let xp = TreePoint::root();
        let yp = TreePoint::vertex(y.clone());
        let phi = w.kernel().phi(&xp, &yp);
        let r = conformality_check(&lim, &c, &root, &y, wv).unwrap();
        let reduced = (d * tree_distance(&g, &xp, &yp)).exp() / (phi * phi);
        assert!((r.factor_critical / reduced - 1.0).abs() < 1e-12);
    }
    let off = sphere(&g, &root, 3)[0].clone();
    let bad = off.clone();
    assert!(matches!(
        conformality_check(&lim, &c, &root, &off, &bad),
        Err(MeasureError::ShadowNotAway)
    ));
}

#[test]
fn shadow_lemma_constant_is_uniform_in_lambda() {
    let g = QuotientGraph::theta_dio();
    let l0 = lambda0(&g);
    let root = TreeVertex::root();
    let mut cs = Vec::new();
    for lam in [0.0, l0 / 2.0, l0] {
        let ps = PsDensity::limit(&solve_weyl(&g, lam).unwrap()).unwrap();
        let (mut lo, mut hi) = (f64::MAX, 0.0f64);
        for n in 1..=8 {
            for v in sphere(&g, &root, n) {
                let d = v.dist_from_root(&g);
                if (2.0..=8.0).contains(&d) {
                    let q = shadow_lemma_ratio(&ps, &root, &v).unwrap();
                    lo = lo.min(q);
                    hi = hi.max(q);
                }
            }
        }
        cs.push((hi / lo).sqrt());
    }
    let max = cs.iter().cloned().fold(0.0, f64::max);
    let min = cs.iter().cloned().fold(f64::MAX, f64::min);
    assert!(max / min < 3.0, "{cs:?}");
}

fn random_cylinder<R: Rng>(c: &CodingSystem, rng: &mut R, len: usize) -> CylinderSet {
    let g = c.graph();
    let depth = rng.gen_range(0..3);
    let start = random_vertex(g, rng, depth);
    let mut word = Vec::new();
    let mut at = start.project(g);
    let mut prev = start.last();
    while word.len() < len {
        let e = g.out_edges(at)[rng.gen_range(0..g.degree(at))];
        if prev.map(|p| g.rev(p)) == Some(e) {
            continue;
        }
        word.push(e);
        prev = Some(e);
        at = g.terminus(e);
    }
    CylinderSet { start, word }
}

#[test]
fn cylinder_measures_are_additive_and_monotone() {
    let g = QuotientGraph::theta_dio();
    let c = build_coding(&g).unwrap();
    let ps = PsDensity::limit(&solve_weyl(&g, 0.03).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let len = rng.gen_range(2..5);
        let cyl = random_cylinder(&c, &mut rng, len);
        let v = cylinder_measure(&ps, &c, &cyl, CylinderRoute::ShadowProduct).unwrap();
        let mut sum = 0.0;
        for e in g.successors(*cyl.word.last().unwrap()) {
            let ext = cylinder_measure(&ps, &c, &cyl.extend(e), CylinderRoute::ShadowProduct).unwrap();
            assert!(ext.value <= v.value);
            sum += ext.value;
        }
        assert!((sum - v.value).abs() <= 1e-10 * v.value + v.band);
    }
    let short = CylinderSet { start: TreeVertex::root(), word: vec![g.out_edges(g.base())[0]] };
    assert!(cylinder_measure(&ps, &c, &short, CylinderRoute::GibbsFormula).is_err());
}

#[test]
fn weak_gibbs_ratio_is_bounded_uniformly_in_lambda() {
    let g = QuotientGraph::theta_dio();
    let c = build_coding(&g).unwrap();
    let l0 = lambda0(&g);
    let mut cs = Vec::new();
    for lam in [0.0, l0 / 2.0, l0] {
        let ps = PsDensity::limit(&solve_weyl(&g, lam).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut lo, mut hi) = (f64::MAX, 0.0f64);
        for i in 0..50 {
            let cyl = random_cylinder(&c, &mut rng, 2 + i % 9);
            let a = cylinder_measure(&ps, &c, &cyl, CylinderRoute::ShadowProduct).unwrap();
            let b = cylinder_measure(&ps, &c, &cyl, CylinderRoute::GibbsFormula).unwrap();
            lo = lo.min(a.value / b.value);
            hi = hi.max(a.value / b.value);
        }
        cs.push((hi / lo).sqrt());
    }
    for cl in &cs {
        assert!(*cl < 10.0, "{cs:?}");
    }
}

#[test]
fn c_kernel_identities_at_lambda0() {
    let g = QuotientGraph::theta_dio();
    let c = build_coding(&g).unwrap();
    let w = solve_weyl(&g, lambda0(&g)).unwrap();
    let ps = PsDensity::limit(&w).unwrap();
    let o = TreeVertex::root();
    let x = sphere(&g, &o, 2)[1].clone();
    let cxx = c_kernel(&ps, &c, &x, &x, 6).unwrap();
    let total = ps.total_mass(&TreePoint::vertex(x.clone()));
    assert!((cxx.value - total).abs() < 1e-12 * total);
    let a = c_kernel(&ps, &c, &o, &x, 6).unwrap();
    let b = c_kernel(&ps, &c, &x, &o, 6).unwrap();
    assert!((a.value - b.value).abs() < 1e-6 * a.value, "{} vs {}", a.value, b.value);
    let deeper = c_kernel(&ps, &c, &o, &x, 8).unwrap();
    assert!((deeper.value - a.value).abs() <= a.band * a.value + 1e-12);
}

#[test]
fn masses_vary_continuously_in_lambda() {
    let g = QuotientGraph::theta_dio();
    let l0 = lambda0(&g);
    let x = TreeVertex::root();
    let y = sphere(&g, &x, 3)[5].clone();
    let mass = |n: usize| -> f64 {
        let ws: Vec<f64> = (0..=n)
            .map(|i| {
                let ps = PsDensity::limit(&solve_weyl(&g, l0 * i as f64 / n as f64).unwrap()).unwrap();
                ps.shadow_mass(&x, &y).unwrap().value
            })
            .collect();
        ws.windows(2).map(|p| (p[1] - p[0]).abs() / p[0]).fold(0.0, f64::max)
    };
    let (coarse, fine) = (mass(10), mass(40));
    assert!(fine < 0.05 && fine < 0.5 * coarse, "{coarse} {fine}");
}

#[test]
fn fundamental_domain_integral_is_finite_and_positive() {
    let g = QuotientGraph::theta_unit();
    let ps = PsDensity::limit(&solve_weyl(&g, lambda0(&g)).unwrap()).unwrap();
    let v = ps.fundamental_domain_integral();
    assert!(v.is_finite() && v > 0.0);
}

mod properties {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    proptest! {
        #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

        #[test]
        fn shadow_masses_are_nested(seed in any::<u64>(), frac in 0.0f64..=1.0) {
            let g = QuotientGraph::theta_dio();
            let ps = PsDensity::limit(&solve_weyl(&g, frac * lambda0(&g)).unwrap()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let depth = rng.gen_range(0..3);
            let x = random_vertex(&g, &mut rng, depth);
            let ray = random_ray(&g, &mut rng, 10);
            let mut last = f64::INFINITY;
            for n in depth + 1..10 {
                let y = ray.vertex(n);
                if y.word.starts_with(&x.word) && y.depth() > x.depth() {
                    let m = ps.shadow_mass(&x, &y).unwrap().value;
                    prop_assert!(m > 0.0 && m <= last * (1.0 + 1e-12));
                    last = m;
                }
            }
        }
    }
}
