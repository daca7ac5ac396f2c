use treelab::graph::{QuotientGraph, TreePoint, TreeVertex};
use treelab::mc::*;
use treelab::resolvent::solve_weyl;

fn cfg(n: usize, seed: u64) -> McConfig {
    McConfig {
        n_paths: n,
        seed,
        ..McConfig::default()
    }
}

#[test]
fn mean_square_displacement_on_an_edge_is_two_t() {
    let g = QuotientGraph::theta_dio();
    let long = (0..g.num_edges()).find(|&e| g.len(e) == 2.0).unwrap();
    let x = TreePoint::along(&g, &TreeVertex::root(), long, 1.0);
    let t = 0.02;
    let ens = simulate_paths(&g, &x, &[t], &cfg(20_000, 3)).unwrap();
    assert!(ens.first_visits.iter().all(Option::is_none));
    let sq: Vec<f64> = ens.positions[0]
        .iter()
        .map(|p| (p.offset - 1.0).powi(2))
        .collect();
    let n = sq.len() as f64;
    let mean = sq.iter().sum::<f64>() / n;
    let sd = (sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt() / n.sqrt();
    assert!((mean - 2.0 * t).abs() < 2.0 * sd, "{mean} ± {sd}");
}

#[test]
fn occupation_is_proportional_to_length() {
    let g = QuotientGraph::theta_dio();
    let c = McConfig {
        n_paths: 40,
        seed: 5,
        delta: 2e-3,
        ..McConfig::default()
    };
    let occ = occupation_fractions(&g, &TreePoint::root(), 200.0, &c).unwrap();
    let total: f64 = occ.iter().map(|&(e, _)| g.len(e)).sum();
    for (e, f) in occ {
        let expect = g.len(e) / total;
        assert!((f - expect).abs() < 0.03, "edge {e}: {f} vs {expect}");
    }
}

#[test]
fn exit_edges_are_uniform() {
    let g = QuotientGraph::theta_unit();
    let ens = simulate_paths(&g, &TreePoint::root(), &[0.01], &cfg(30_000, 7)).unwrap();
    let mut counts = [0usize; 6];
    for v in ens.first_visits.iter().flatten() {
        counts[v.exit_edge] += 1;
    }
    let out = g.out_edges(g.base());
    let n: usize = out.iter().map(|&e| counts[e]).sum();
    assert_eq!(n, 30_000);
    let p = 1.0 / out.len() as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    for &e in out {
        let f = counts[e] as f64 / n as f64;
        assert!((f - p).abs() < 4.0 * se, "{f}");
    }
}

#[test]
fn splice_after_hit_matches_fresh_start() {
    let g = QuotientGraph::theta_unit();
    let y = TreeVertex::root().child(g.out_edges(g.base())[0]);
    let c = McConfig {
        horizon: 10.0,
        ..cfg(4_000, 11)
    };
    let (spliced, fresh) = splice_samples(&g, &TreePoint::root(), &y, 0.5, &c).unwrap();
    assert!(spliced.len() > 1_000);
    let (_, p) = ks_two_sample(&spliced, &fresh);
    assert!(p > 0.01, "KS p-value {p}");
}

#[test]
fn hitting_probability_matches_resolvent() {
    let g = QuotientGraph::theta_unit();
    let o = TreePoint::root();
    let y = TreePoint::vertex(TreeVertex::root().child(0));
    let h = estimate_hitting_transform(&g, &o, &y, 0.0, &cfg(20_000, 13)).unwrap();
    let exact = solve_weyl(&g, 0.0).unwrap().hitting_transform(&o, &y).unwrap();
    assert!((h.mean - exact).abs() < 3.0 * h.stderr, "{} vs {exact}", h.mean);
}

#[test]
fn kde_has_unit_mass() {
    let g = QuotientGraph::theta_dio();
    let ens = simulate_paths(&g, &TreePoint::root(), &[1.0], &cfg(2_000, 17)).unwrap();
    let m = kde_total_mass(&g, &ens.positions[0], 0.1);
    assert!((m - 1.0).abs() < 0.01, "{m}");
}

#[test]
fn hitting_near_lambda0_reports_variance_explosion() {
    let g = QuotientGraph::theta_unit();
    let o = TreePoint::root();
    let y = TreePoint::vertex(TreeVertex::root().child(0));
    let c = McConfig {
        horizon: 20.0,
        kill_depth: 20,
        ..cfg(20_000, 19)
    };
    let r = estimate_hitting_transform(&g, &o, &y, 0.115, &c);
    assert!(matches!(r, Err(McError::VarianceExplosion { .. })), "{r:?}");
    assert!(estimate_hitting_transform(&g, &o, &y, 0.03, &c).is_ok());
}
