//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 3, 6 and 7 are expected to fail at desk scale and are reported
//! without failing the run; every other criterion must pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use std::time::Instant;
use treelab::asymptotics::*;
use treelab::graph::*;
use treelab::heat::*;
use treelab::mc::*;
use treelab::measures::*;
use treelab::resolvent::*;
use treelab::thermo::*;

const LAMBDA0_PAIRWISE: f64 = 2e-3;
const COS_IDENTITY: f64 = 1e-3;
const SPECTRAL_RADIUS: f64 = 20.0;
const SPECTRAL_H: f64 = 0.02;
const HEAT_H: f64 = 0.05;
const HEAT_DT: f64 = 0.01;
const WINDOW: (f64, f64) = (20.0, 60.0);
const PHI_MULTIPLICATIVITY: f64 = 1e-12;
const GREEN_SYMMETRY: f64 = 1e-10;
const GREEN_VS_HEAT: f64 = 0.03;
const ANCONA_SPREAD: f64 = 2.0;
const STRONG_ANCONA_R2: f64 = 0.98;
const PRESSURE_BAND_FLOOR: f64 = 1e-3;
const DELTA_ROUNDOFF: f64 = 1e-6;
const DELTA_AT_LAMBDA0: f64 = 5e-3;
const SHADOW_C_MAX: f64 = 10.0;
const CONFORMALITY: f64 = 0.1;
const GIBBS_C_MAX: f64 = 10.0;
const TAUBERIAN_R2: f64 = 0.99;
const SECOND_RATIO: f64 = 0.1;
const ALPHA_RANGE: (f64, f64) = (1.35, 1.65);
const C_FIT_REL: f64 = 0.2;
const MC_SIGMAS: f64 = 3.0;
const MC_PATHS: usize = 100_000;
/// Keeps the horizon bias `e^{(λ−λ₀)T}` below `1e-4` at `λ = λ₀/2`.
const MC_HORIZON: f64 = 400.0;

const KNOWN_RED: [u8; 3] = [3, 6, 7];

struct Outcome {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn lambda0(g: &QuotientGraph) -> f64 {
    lambda0_bracket(g, 1e-13).0
}

fn vertex(g: &QuotientGraph, w: &str) -> TreePoint {
    TreePoint::vertex(TreeVertex::from_word(g, g.parse_word(w).unwrap()).unwrap())
}

const DIO_TARGETS: [&str; 5] = ["a", "b", "cA", "aB", "aBa"];

fn heat(g: &QuotientGraph, radius: f64, marked: &[TreePoint]) -> HeatField {
    let o = TreePoint::root();
    let mut pts = vec![o.clone()];
    pts.extend(marked.iter().cloned());
    let ball = TruncatedBall::new(g, &o, radius, HEAT_H, &pts).unwrap();
    let opts = HeatOptions {
        dt: HEAT_DT,
        t_max: WINDOW.1,
        snapshots: vec![],
    };
    heat_solve(&ball, &o, &opts).unwrap()
}

fn dio_heat(radius: u8) -> &'static HeatField {
    static R20: OnceLock<HeatField> = OnceLock::new();
    static R18: OnceLock<HeatField> = OnceLock::new();
    static R16: OnceLock<HeatField> = OnceLock::new();
    let g = QuotientGraph::theta_dio();
    match radius {
        20 => R20.get_or_init(|| {
            let marked: Vec<TreePoint> = DIO_TARGETS.iter().map(|w| vertex(&g, w)).collect();
            heat(&g, 20.0, &marked)
        }),
        18 => R18.get_or_init(|| heat(&g, 18.0, &[])),
        _ => R16.get_or_init(|| heat(&g, 16.0, &[])),
    }
}

fn unit_heat() -> &'static HeatField {
    static F: OnceLock<HeatField> = OnceLock::new();
    F.get_or_init(|| {
        let g = QuotientGraph::theta_unit();
        let marked: Vec<TreePoint> = ["a", "aB", "aBa", "aBaB"].iter().map(|w| vertex(&g, w)).collect();
        heat(&g, 24.0, &marked)
    })
}

fn criterion_1() -> (bool, String) {
    let mut pass = true;
    let mut detail = Vec::new();
    for (g, field) in [
        (QuotientGraph::theta_unit(), unit_heat()),
        (QuotientGraph::theta_dio(), dio_heat(20)),
    ] {
        let res = lambda0(&g);
        let spec = lambda0_spectral(&g, &TreePoint::root(), SPECTRAL_RADIUS, SPECTRAL_H).unwrap();
        let slope = decay_fit(field, 0, WINDOW.0, WINDOW.1).unwrap();
        let vals = [res, spec.extrapolated, slope.lambda];
        let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
        pass &= spread <= LAMBDA0_PAIRWISE && spec.monotone;
        detail.push(format!(
            "{}: resolvent {:.6} spectral {:.6} heat {:.6} spread {:.1e}",
            g.name(),
            res,
            spec.extrapolated,
            slope.lambda,
            spread
        ));
        if g.name() == "theta_unit" {
            let cos = (3.0 * res.sqrt().cos() - 2.0 * 2f64.sqrt()).abs() / 3.0;
            pass &= cos <= COS_IDENTITY;
            detail.push(format!("cos identity {cos:.1e}"));
        }
    }
    (pass, detail.join("; "))
}

fn criterion_2() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut phi_err, mut sym_err) = (0.0f64, 0.0f64);
    for g in [QuotientGraph::theta_unit(), QuotientGraph::theta_dio()] {
        let l0 = lambda0(&g);
        for lam in [0.0, l0 / 2.0, l0] {
            let w = solve_weyl(&g, lam).unwrap();
            for _ in 0..1000 {
                let x = random_point(&g, &mut rng, 6);
                let z = random_point(&g, &mut rng, 6);
                let s = rng.gen_range(0.0..=1.0);
                let y = point_along(&g, &x, &z, s * tree_distance(&g, &x, &z));
                let phi = |a: &TreePoint, b: &TreePoint| w.hitting_transform(a, b).unwrap();
                phi_err = phi_err.max((phi(&x, &z) / (phi(&x, &y) * phi(&y, &z)) - 1.0).abs());
                let (a, b) = (w.green(&x, &z).unwrap(), w.green(&z, &x).unwrap());
                sym_err = sym_err.max((a - b).abs() / a);
            }
        }
    }
    let mut heat_err = 0.0f64;
    let o = TreePoint::root();
    let unit = QuotientGraph::theta_unit();
    let dio = QuotientGraph::theta_dio();
    let unit_targets = ["-", "a", "aB", "aBa", "aBaB"];
    for (g, field, targets) in [
        (&unit, unit_heat(), &unit_targets[..]),
        (&dio, dio_heat(20), &["-", "a", "b", "cA", "aB", "aBa"][..]),
    ] {
        let l0 = lambda0(g);
        for lam in [0.0, l0 / 2.0] {
            let w = solve_weyl(g, lam).unwrap();
            for (i, t) in targets.iter().enumerate() {
                let y = if *t == "-" { o.clone() } else { vertex(g, t) };
                assert!(tree_distance(g, &o, &y) <= 4.0);
                let gh = green_from_heat(field, i, lam, 0.05).unwrap().value;
                heat_err = heat_err.max((gh / w.green(&o, &y).unwrap() - 1.0).abs());
            }
        }
    }
    let pass = phi_err <= PHI_MULTIPLICATIVITY && sym_err <= GREEN_SYMMETRY && heat_err <= GREEN_VS_HEAT;
    (
        pass,
        format!("Φ multiplicativity {phi_err:.1e}, symmetry {sym_err:.1e}, heat Laplace transform {heat_err:.2e}"),
    )
}

fn criterion_3() -> (bool, String) {
    let mut detail = Vec::new();
    let mut pass = true;
    for g in [QuotientGraph::theta_unit(), QuotientGraph::theta_dio()] {
        let l0 = lambda0(&g);
        let reps: Vec<AnconaReport> = [0.0, l0 / 2.0, l0]
            .iter()
            .map(|&l| ancona_diagnostics(&solve_weyl(&g, l).unwrap(), 200, 3).unwrap())
            .collect();
        let cs: Vec<f64> = reps.iter().map(|r| r.c_ancona).collect();
        let spread = cs.iter().cloned().fold(0.0, f64::max) / cs.iter().cloned().fold(f64::MAX, f64::min);
        pass &= spread <= ANCONA_SPREAD;
        for r in &reps {
            let fitted = matches!((r.strong.rho, r.strong.r2), (Some(rho), Some(r2)) if rho < 1.0 && r2 >= STRONG_ANCONA_R2);
            pass &= fitted;
        }
        let dev = reps.iter().map(|r| r.strong.max_deviation).fold(0.0, f64::max);
        detail.push(format!(
            "{}: C {:.3}/{:.3}/{:.3} spread {:.3}; strong-Ancona deviation ≤ {:.1e}, {}",
            g.name(),
            cs[0],
            cs[1],
            cs[2],
            spread,
            dev,
            if reps.iter().all(|r| r.strong.exact) {
                "identity is exact on trees, no decay rate to fit"
            } else {
                "ρ fitted"
            }
        ));
    }
    (pass, detail.join("; "))
}

fn criterion_4() -> (bool, String) {
    let mut pass = true;
    let mut detail = Vec::new();
    for g in [QuotientGraph::theta_unit(), QuotientGraph::theta_dio()] {
        let l0 = lambda0(&g);
        let lams: Vec<f64> = (0..8).map(|i| l0 * i as f64 / 7.0).collect();
        let rows = pressure_sweep(&g, &lams, 6).unwrap();
        let gap = rows.iter().map(|r| (r.s_star - r.delta).abs() - r.band.max(PRESSURE_BAND_FLOOR)).fold(f64::MIN, f64::max);
        let max_delta = rows.iter().map(|r| r.delta).fold(f64::MIN, f64::max);
        let crit = rows.last().unwrap().delta;
        pass &= gap <= 0.0 && max_delta <= DELTA_ROUNDOFF && crit.abs() <= DELTA_AT_LAMBDA0;
        let worst = rows.iter().map(|r| (r.s_star - r.delta).abs()).fold(0.0, f64::max);
        detail.push(format!("{}: max |s*−δ| {worst:.1e}, max δ {max_delta:.1e}, δ(λ₀) {crit:.1e}", g.name()));
    }
    (pass, detail.join("; "))
}

fn random_cylinder<R: Rng>(g: &QuotientGraph, rng: &mut R, len: usize) -> CylinderSet {
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

fn criterion_5() -> (bool, String) {
    let mut pass = true;
    let mut detail = Vec::new();
    let root = TreeVertex::root();
    for g in [QuotientGraph::theta_unit(), QuotientGraph::theta_dio()] {
        let coding = build_coding(&g).unwrap();
        let l0 = lambda0(&g);
        let (mut c_shadow, mut c_gibbs, mut conf) = (0.0f64, 0.0f64, 0.0f64);
        for lam in [0.0, l0 / 2.0, l0] {
            let w = solve_weyl(&g, lam).unwrap();
            let delta = delta_lambda(&w).unwrap();
            let lim = PsDensity::limit(&w).unwrap();
            let (mut lo, mut hi) = (f64::MAX, 0.0f64);
            for n in 1..=8 {
                for v in sphere(&g, &root, n) {
                    if (2.0..=8.0).contains(&v.dist_from_root(&g)) {
                        let q = shadow_lemma_ratio(&lim, &root, &v).unwrap();
                        lo = lo.min(q);
                        hi = hi.max(q);
                    }
                }
            }
            c_shadow = c_shadow.max((hi / lo).sqrt());
            let trunc = PsDensity::new(&w, delta + 1.0 / 64.0, PsRoute::Truncated { depth: 2000 }).unwrap();
            for wv in sphere(&g, &root, 8).iter().step_by(5) {
                let y = ray_through(&coding, wv).vertex(2);
                for ps in [&lim, &trunc] {
                    conf = conf.max(conformality_check(ps, &coding, &root, &y, wv).unwrap().deviation);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let (mut glo, mut ghi) = (f64::MAX, 0.0f64);
            for i in 0..50 {
                let cyl = random_cylinder(&g, &mut rng, 2 + i % 9);
                let a = cylinder_measure(&lim, &coding, &cyl, CylinderRoute::ShadowProduct).unwrap();
                let b = cylinder_measure(&lim, &coding, &cyl, CylinderRoute::GibbsFormula).unwrap();
                glo = glo.min(a.value / b.value);
                ghi = ghi.max(a.value / b.value);
            }
            c_gibbs = c_gibbs.max((ghi / glo).sqrt());
        }
        pass &= c_shadow <= SHADOW_C_MAX && conf < CONFORMALITY && c_gibbs <= GIBBS_C_MAX;
        detail.push(format!(
            "{}: shadow C {c_shadow:.3}, conformality {conf:.3}, Gibbs C {c_gibbs:.3}",
            g.name()
        ));
    }
    (pass, detail.join("; "))
}

fn criterion_6() -> (bool, String) {
    let g = QuotientGraph::theta_dio();
    let l0 = lambda0(&g);
    let o = TreePoint::root();
    let rep = match tauberian_limit(&g, &o, &o, l0, &tauberian_grid(l0, 16)) {
        Ok(r) => r,
        Err(AsymptoticsError::FitRejected { report, .. }) => *report,
        Err(e) => return (false, e.to_string()),
    };
    let pass = rep.r2 >= TAUBERIAN_R2 && (rep.second_ratio - 1.0).abs() <= SECOND_RATIO;
    (
        pass,
        format!(
            "R² {:.4}, L_fit {:.3} (halves {:.3}/{:.3}), second-derivative ratio {:.3}; \
             expansion L {:.3} (R² {:.4}, ratio {:.3})",
            rep.r2,
            rep.l_fit,
            rep.l_sub[0],
            rep.l_sub[1],
            rep.second_ratio,
            rep.l_expansion,
            rep.r2_expansion,
            rep.second_ratio_expansion
        ),
    )
}

fn criterion_7() -> (bool, String) {
    let g = QuotientGraph::theta_dio();
    let l0 = lambda0(&g);
    let o = TreePoint::root();
    let refs = [(dio_heat(18), 0), (dio_heat(16), 0)];
    let fit = match llt_fit(dio_heat(20), 0, l0, WINDOW.0, WINDOW.1, &refs) {
        Ok(f) => f,
        Err(e) => return (false, e.to_string()),
    };
    let rep = fit_report(&g, &o, &o, l0, &tauberian_grid(l0, 16), fit).unwrap();
    let alpha_ok = (ALPHA_RANGE.0..=ALPHA_RANGE.1).contains(&rep.alpha_fit);
    let c_ok = rep.c_deviation.abs() <= C_FIT_REL;
    (
        alpha_ok && c_ok,
        format!(
            "α {:.4} ± {:.4} (with a/t term {:.4}), C_fit {:.4} vs L_fit/√π {:.4} ({:+.2}), \
             truncation {:.2e}, label {}",
            rep.alpha_fit,
            rep.llt.alpha_stderr,
            rep.llt.alpha_corrected,
            rep.c_fit,
            rep.predicted_c,
            rep.c_deviation,
            rep.llt.contamination.unwrap_or(f64::NAN),
            rep.llt_label
        ),
    )
}

fn criterion_8() -> (bool, String) {
    let g = QuotientGraph::theta_dio();
    let l0 = lambda0(&g);
    let o = TreePoint::root();
    let cfg = McConfig {
        n_paths: MC_PATHS,
        seed: 8,
        horizon: MC_HORIZON,
        ..McConfig::default()
    };
    let targets: Vec<TreePoint> = ["a", "aB"].iter().map(|w| vertex(&g, w)).collect();
    let mut zmax = 0.0f64;
    let mut zs = Vec::new();
    for lam in [0.0, l0 / 2.0] {
        let w = solve_weyl(&g, lam).unwrap();
        for y in &targets {
            let h = estimate_hitting_transform(&g, &o, y, lam, &cfg).unwrap();
            let z = (h.mean - w.hitting_transform(&o, y).unwrap()) / h.stderr;
            zmax = zmax.max(z.abs());
            zs.push(z);
        }
    }
    let mut marked = vec![o.clone()];
    marked.extend(targets.iter().cloned());
    let ball = TruncatedBall::new(&g, &o, 10.0, 0.01, &marked).unwrap();
    let pde = heat_solve(
        &ball,
        &o,
        &HeatOptions {
            dt: 0.001,
            t_max: 1.0,
            snapshots: vec![],
        },
    )
    .unwrap();
    for (i, y) in marked.iter().enumerate() {
        let d = estimate_density(&g, &o, y, 1.0, &cfg, 0.1).unwrap();
        let z = (d.value - pde.probes[i].last().unwrap()) / d.stderr;
        zmax = zmax.max(z.abs());
        zs.push(z);
    }
    let list: Vec<String> = zs.iter().map(|z| format!("{z:+.2}")).collect();
    (zmax <= MC_SIGMAS, format!("z-scores {}", list.join(" ")))
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let only: Vec<u8> = args.iter().filter_map(|a| a.parse().ok()).collect();
    type Check = fn() -> (bool, String);
    let criteria: [(u8, &str, Check); 8] = [
        (1, "λ₀ triple agreement", criterion_1),
        (2, "Green identities", criterion_2),
        (3, "Ancona suite", criterion_3),
        (4, "pressure equals critical exponent", criterion_4),
        (5, "Patterson–Sullivan suite", criterion_5),
        (6, "Tauberian fit", criterion_6),
        (7, "local limit theorem", criterion_7),
        (8, "Monte Carlo concordance", criterion_8),
    ];
    let start = Instant::now();
    let mut outcomes: Vec<Outcome> = std::thread::scope(|s| {
        let needs_heat = only.is_empty() || only.iter().any(|c| [1, 2, 7].contains(c));
        let warm: Vec<_> = [18u8, 16].iter().filter(|_| needs_heat).map(|&r| s.spawn(move || dio_heat(r).times.len())).collect();
        let handles: Vec<_> = criteria
            .iter()
            .filter(|c| only.is_empty() || only.contains(&c.0))
            .map(|&(id, name, f)| {
                s.spawn(move || {
                    let t = Instant::now();
                    let (pass, detail) = f();
                    let o = Outcome {
                        id,
                        name,
                        pass,
                        detail,
                        secs: t.elapsed().as_secs_f64(),
                    };
                    eprintln!("criterion {id} done in {:.1} s", o.secs);
                    o
                })
            })
            .collect();
        for w in warm {
            w.join().unwrap();
        }
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    outcomes.sort_by_key(|o| o.id);
    let mut unexpected = 0;
    println!();
    for o in &outcomes {
        let red = KNOWN_RED.contains(&o.id);
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let note = if !o.pass && red { " [known red]" } else { "" };
        println!("{tag} {}. {}{note}: {} ({:.1} s)", o.id, o.name, o.detail, o.secs);
        if !o.pass && !red {
            unexpected += 1;
        }
    }
    println!("acceptance finished in {:.1} s", start.elapsed().as_secs_f64());
    if unexpected > 0 {
        println!("{unexpected} criteria failed");
        std::process::exit(1);
    }
}
