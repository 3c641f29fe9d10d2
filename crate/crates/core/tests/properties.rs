use flexsum::containment::check_containment;
use flexsum::disaggregation::Disaggregator;
use flexsum::ev::{sample, SampleConfig, Scenario, ARRIVAL_WINDOW, DEADLINE_WINDOW};
use flexsum::experiments::{peak_power_profile, sample_base_points, sample_inner_points};
use flexsum::inner::{self, InnerMethod};
use flexsum::lp::{solve_lp, LinExpr, LinearProgram, LpStatus, Objective};
use flexsum::oracle2d::{minkowski_sum_polygons, support_value, vertices_of_hpolygon, Point};
use flexsum::outer::{self, dominance_margin, OuterMethod};
use flexsum::polytope::{
    battery_to_hpolytope, chebyshev_radius, contains_point, cumulative_matrix, log_abs_det, matrix_from_rows,
    support_point, volume_ratio, BatteryModel, HPolytope,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn scenario() -> impl Strategy<Value = Scenario> {
    // unhomogenized windows need a horizon past the latest arrival
    (2usize..5, 0usize..3, 0.0..1.0f64, any::<u64>(), any::<bool>()).prop_map(|(n, extra, sigma, seed, homog)| {
        let t = if homog { 4 + extra } else { 9 + extra };
        sample(&SampleConfig::new(n, t, 1.0, sigma, seed).homogenized(homog)).unwrap()
    })
}

fn polygon() -> impl Strategy<Value = HPolytope> {
    (4usize..8, prop::collection::vec((0.0..0.9f64, 0.3..1.5f64), 8), -0.4..0.4f64, -0.4..0.4f64).prop_map(
        |(m, draws, sx, sy)| {
            let mut rows = Vec::new();
            let mut b = Vec::new();
            for (k, (jitter, r)) in draws.into_iter().take(m).enumerate() {
                let th = std::f64::consts::TAU * (k as f64 + jitter) / m as f64;
                rows.push(vec![th.cos(), th.sin()]);
                b.push(r + th.cos() * sx + th.sin() * sy);
            }
            HPolytope::new(matrix_from_rows(&rows).unwrap(), DVector::from_vec(b)).unwrap()
        },
    )
}

fn matrix(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(lo..hi, n * n).prop_map(move |v| DMatrix::from_row_slice(n, n, &v))
}

fn nonsingular(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(n, -1.0, 1.0).prop_map(move |m| m + DMatrix::identity(n, n) * (n as f64 + 0.5))
}

fn as_vec(p: &Point) -> DVector<f64> {
    DVector::from_vec(vec![p.x, p.y])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lp_is_deterministic_and_feasible(
        a in prop::collection::vec(-1.0..1.0f64, 12),
        b in prop::collection::vec(0.1..2.0f64, 4),
        c in prop::collection::vec(-1.0..1.0f64, 3),
    ) {
        let mut lp = LinearProgram::new(Objective::Maximize);
        let x = lp.add_block("x", 3, 1, -1.0, 1.0);
        for j in 0..3 {
            lp.set_cost(x.get(j), c[j]);
        }
        for r in 0..4 {
            let mut e = LinExpr::new();
            for j in 0..3 {
                e.add(x.get(j), a[3 * r + j]);
            }
            lp.add_le(e, b[r]);
        }
        let tol = 1e-8;
        let s1 = solve_lp(&lp, tol);
        let s2 = solve_lp(&lp, tol);
        prop_assert_eq!(s1.status, LpStatus::Optimal);
        prop_assert_eq!(s1.status, s2.status);
        prop_assert!((s1.objective_value - s2.objective_value).abs() <= 10.0 * tol);
        prop_assert!(lp.max_violation(s1.x.as_ref().unwrap()) <= tol);
    }

    #[test]
    fn battery_membership_matches_direct_check(scen in scenario(), draws in prop::collection::vec(-12.0..12.0f64, 60)) {
        let m = &scen.models[0];
        let t = m.horizon();
        let h = battery_to_hpolytope(m);
        let l = cumulative_matrix(t, m.delta);
        for chunk in draws.chunks(t).filter(|c| c.len() == t) {
            let u = DVector::from_column_slice(chunk);
            let x = &l * &u;
            let direct = (0..t).all(|k| {
                u[k] >= m.u_lo[k] && u[k] <= m.u_hi[k] && x[k] >= m.x_lo[k] && x[k] <= m.x_hi[k]
            });
            prop_assert_eq!(contains_point(&h, &u, 0.0), direct);
        }
    }

    #[test]
    fn cumulative_matrix_is_scaled_prefix_sum(u in prop::collection::vec(-5.0..5.0f64, 1..12), delta in 0.1..2.0f64) {
        let x = cumulative_matrix(u.len(), delta) * DVector::from_column_slice(&u);
        let mut acc = 0.0;
        for k in 0..u.len() {
            acc += u[k];
            prop_assert!((x[k] - delta * acc).abs() <= 1e-12 * (1.0 + acc.abs()));
        }
    }

    #[test]
    fn volume_ratio_is_log_additive(p in nonsingular(4), q in nonsingular(4), r in nonsingular(4)) {
        let lhs = volume_ratio(&p, &q).unwrap() * volume_ratio(&q, &r).unwrap();
        let rhs = volume_ratio(&p, &r).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1e-300) * 10.0);
    }

    #[test]
    fn log_det_of_inverse_cancels(m in nonsingular(5)) {
        let inv = m.clone().try_inverse().unwrap();
        let (_, a) = log_abs_det(&m);
        let (_, b) = log_abs_det(&inv);
        prop_assert!(((a + b).exp() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn certificates_are_sound(x in polygon(), y in polygon(), gm in matrix(2, -1.2, 1.2), g in prop::collection::vec(-0.5..0.5f64, 2)) {
        let g = DVector::from_vec(g);
        let y = HPolytope { a: y.a.clone(), b: &y.b * 2.0 };
        if let Some(cert) = check_containment(&x, &y, &g, &gm, 1e-8).unwrap() {
            prop_assert!(cert.max_violation(&x, &y, &g, &gm) <= 1e-7);
            for k in 0..100 {
                let th = k as f64 * 0.0628;
                let p = support_point(&x, &DVector::from_vec(vec![th.cos(), th.sin()])).unwrap();
                prop_assert!(contains_point(&y, &(&g + &gm * p), 1e-7));
            }
        }
    }

    #[test]
    fn minkowski_sum_commutes_and_adds_support(p in polygon(), q in polygon()) {
        let vp = vertices_of_hpolygon(&p, 1e-9).unwrap();
        let vq = vertices_of_hpolygon(&q, 1e-9).unwrap();
        let pq = minkowski_sum_polygons(&vp, &vq);
        let qp = minkowski_sum_polygons(&vq, &vp);
        prop_assert_eq!(pq.len(), qp.len());
        prop_assert!(pq.iter().all(|a| qp.iter().any(|b| (a - b).norm() < 1e-9)));
        for k in 0..100 {
            let th = k as f64 * 0.0631;
            let c = Point::new(th.cos(), th.sin());
            let lhs = support_value(&pq, &c);
            let rhs = support_value(&vp, &c) + support_value(&vq, &c);
            prop_assert!((lhs - rhs).abs() <= 1e-9);
        }
        for v in &vp {
            prop_assert!(contains_point(&p, &as_vec(v), 1e-9));
        }
    }

    #[test]
    fn sampled_sets_are_nonempty_and_in_range(n in 1usize..20, sigma in 0.0..1.0f64, seed in any::<u64>()) {
        let scen = sample(&SampleConfig::new(n, 30, 2.0 / 3.0, sigma, seed)).unwrap();
        for (p, m) in scen.params.iter().zip(&scen.models) {
            prop_assert!(p.x_fin >= 40.0 - 30.0 * sigma - 1e-9 && p.x_fin <= 40.0 + 30.0 * sigma + 1e-9);
            prop_assert!(p.a <= p.d && p.d < 30);
            let arrival_latest = ((ARRIVAL_WINDOW.1 - ARRIVAL_WINDOW.0) / 40.0).ceil() as usize;
            prop_assert!(p.a <= arrival_latest);
            let deadline_earliest = ((DEADLINE_WINDOW.0 - ARRIVAL_WINDOW.0) / 40.0).floor() as usize;
            prop_assert!(p.d >= deadline_earliest.min(29));
            prop_assert!(chebyshev_radius(&battery_to_hpolytope(m)).is_ok());
        }
    }

    #[test]
    fn identical_sets_without_heterogeneity(n in 1usize..6, t in 3usize..8, seed in any::<u64>()) {
        let scen = sample(&SampleConfig::new(n, t, 1.0, 0.0, seed).homogenized(true)).unwrap();
        let h1 = scen.models[0].rhs();
        for m in &scen.models {
            prop_assert!((m.rhs() - &h1).amax() == 0.0);
        }
        prop_assert!((scen.base.h0() - &h1).amax() <= 1e-12 * h1.amax());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn inner_sets_lie_in_the_sum(scen in scenario(), seed in any::<u64>()) {
        let points = sample_base_points(&scen.base, 40, seed).unwrap();
        let sets: Vec<HPolytope> = scen.models.iter().map(battery_to_hpolytope).collect();
        for method in [InnerMethod::Structure, InnerMethod::Decomposed, InnerMethod::Homothet] {
            let r = inner::solve(method, &scen.models, &scen.base).unwrap();
            for u0 in &points {
                let parts: Vec<DVector<f64>> = r.per_set.iter().map(|s| &s.gamma + &s.gamma_map * u0).collect();
                for (p, s) in parts.iter().zip(&sets) {
                    prop_assert!(contains_point(s, p, 1e-7), "{:?}", method);
                }
                let total = parts.iter().fold(DVector::zeros(u0.len()), |a, p| a + p);
                prop_assert!((total - (&r.center + &r.map * u0)).amax() <= 1e-9);
            }
        }
    }

    #[test]
    fn inner_methods_are_ordered(scen in scenario()) {
        let h = inner::solve_homothet_baseline(&scen.models, &scen.base).unwrap();
        let s = inner::solve_structure_preserving(&scen.models, &scen.base).unwrap();
        let a = inner::solve_decomposed(&scen.models, &scen.base).unwrap();
        prop_assert!(h.objective <= s.objective + 1e-6);
        prop_assert!(scen.horizon as f64 * s.objective <= a.objective + 1e-6);
    }

    #[test]
    fn outer_sets_contain_the_sum(scen in scenario(), dirs in prop::collection::vec(-1.0..1.0f64, 6 * 40)) {
        let t = scen.horizon;
        let sets: Vec<HPolytope> = scen.models.iter().map(battery_to_hpolytope).collect();
        let inner_maps: Vec<DMatrix<f64>> = [InnerMethod::Structure, InnerMethod::Decomposed, InnerMethod::Homothet]
            .into_iter()
            .map(|m| inner::solve(m, &scen.models, &scen.base).unwrap().map)
            .collect();
        for method in [OuterMethod::Dilate, OuterMethod::Lp] {
            let o = outer::solve(method, &scen.models, &scen.base, outer::DEFAULT_EPSILON).unwrap();
            if method == OuterMethod::Lp {
                prop_assert!(dominance_margin(&o.z) >= o.epsilon - 1e-9);
            }
            for c in dirs.chunks(t).take(40).filter(|c| c.len() == t) {
                let c = DVector::from_column_slice(c);
                let point = sets.iter().fold(DVector::zeros(t), |a, s| a + support_point(s, &c).unwrap());
                prop_assert!(o.contains(&scen.base, &point, 1e-7));
            }
            for m in &inner_maps {
                let r = volume_ratio(m, &o.q_map).unwrap();
                prop_assert!((0.0..=1.0 + 1e-6).contains(&r), "{:?} ratio {}", method, r);
            }
        }
    }

    #[test]
    fn disaggregation_is_sound_and_affine(scen in scenario(), seed in any::<u64>(), lam in 0.0..1.0f64) {
        let r = inner::solve_decomposed(&scen.models, &scen.base).unwrap();
        let d = Disaggregator::new(&r, &scen.base).unwrap();
        let pts = sample_inner_points(&r, &scen.base, 20, seed).unwrap();
        let sets: Vec<HPolytope> = scen.models.iter().map(battery_to_hpolytope).collect();
        for u in &pts {
            let parts = d.split(u, 1e-7).unwrap();
            let total = parts.iter().fold(DVector::zeros(u.len()), |a, p| a + p);
            prop_assert!((total - u).amax() <= 1e-6 * (1.0 + u.amax()));
            for (p, s) in parts.iter().zip(&sets) {
                prop_assert!(contains_point(s, p, 1e-7));
            }
        }
        if d.uses_inverse() {
            let (u, v) = (&pts[0], &pts[1]);
            let mix = d.split(&(u * lam + v * (1.0 - lam)), 1e-7).unwrap();
            let (pu, pv) = (d.split(u, 1e-7).unwrap(), d.split(v, 1e-7).unwrap());
            for i in 0..mix.len() {
                prop_assert!((&mix[i] - (&pu[i] * lam + &pv[i] * (1.0 - lam))).amax() <= 1e-9 * (1.0 + u.amax()));
            }
        }
    }

    #[test]
    fn peak_profile_beats_random_points(scen in scenario(), seed in any::<u64>()) {
        let r = inner::solve_structure_preserving(&scen.models, &scen.base).unwrap();
        let peak = peak_power_profile(&r, &scen.base).unwrap();
        for u in sample_inner_points(&r, &scen.base, 100, seed).unwrap() {
            prop_assert!(peak.peak <= u.amax() + 1e-6);
        }
    }
}

#[test]
fn model_literal_round_trips_through_json() {
    let m = BatteryModel { u_lo: vec![-1.0, 0.0], u_hi: vec![1.0, 2.0], x_lo: vec![-1.0, 0.1], x_hi: vec![3.0, 4.0], delta: 0.5 };
    let back: BatteryModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    assert_eq!(back, m);
}
