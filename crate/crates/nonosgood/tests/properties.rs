//! Property tests for the invariants that hold at every sampled input.

use std::sync::OnceLock;

use nonosgood::fixpoint::ParamTable;
use nonosgood::geometry::SymbolString;
use nonosgood::traj_field::{ChiProfile, TrajConfig, TrajField};
use nonosgood::verify::CheckReport;
use nonosgood::{Modulus, ModulusPair};
use proptest::prelude::*;

fn table() -> &'static ParamTable {
    static T: OnceLock<ParamTable> = OnceLock::new();
    T.get_or_init(|| ParamTable::default_2d().unwrap())
}

fn cantor() -> &'static TrajField<f64> {
    static B: OnceLock<TrajField<f64>> = OnceLock::new();
    B.get_or_init(|| {
        TrajField::new(TrajConfig { dim: 2, pair: ModulusPair::default_pair(), n_max: 8, chi: ChiProfile::Sine }).unwrap()
    })
}

fn catalog() -> impl Strategy<Value = Modulus> {
    (1.5f64..4.0, 0.2f64..2.0).prop_map(|(a, e)| Modulus::catalog(a, e))
}

proptest! {
    #[test]
    fn catalog_is_increasing_and_concave(m in catalog(), l in -60.0f64..-0.5, d1 in 0.01f64..0.5, d2 in 0.01f64..0.5) {
        let (l1, l2, l3) = (l - d1 - d2, l - d2, l);
        let (r1, r2, r3) = (l1.exp(), l2.exp(), l3.exp());
        let (w1, w2, w3) = (m.eval(l1).unwrap(), m.eval(l2).unwrap(), m.eval(l3).unwrap());
        prop_assert!(w1 < w2 && w2 < w3);
        let (q1, q2) = ((w2 - w1) / (r2 - r1), (w3 - w2) / (r3 - r2));
        prop_assert!(q1 >= q2 * (1.0 - 1e-9), "{q1} < {q2}");
    }

    #[test]
    fn osgood_round_trip(m in catalog(), u in 1e-6f64..0.999) {
        let y = m.omega_int(m.ln_max().min(-1.0)).unwrap() * u;
        let l = m.inverse_osgood(y).unwrap();
        let back = m.omega_int(l).unwrap();
        prop_assert!(((back - y) / y).abs() <= 1e-12);
    }

    #[test]
    fn quadrature_agrees_with_closed_form(m in catalog(), a in -200.0f64..-2.0, w in 0.05f64..20.0) {
        let b = (a + w).min(m.ln_max().min(-1.0));
        prop_assume!(b > a);
        let q = m.osgood_quadrature(a, b).unwrap();
        let e = m.osgood(a, b).unwrap();
        prop_assert!(((q - e) / e).abs() <= 1e-8, "{q} vs {e}");
    }

    #[test]
    fn weight_is_nonincreasing_in_r(l in -500.0f64..0.0, d in 0.0f64..50.0) {
        let p = ModulusPair::default_pair();
        prop_assert!(p.weight(l - d) >= p.weight(l));
    }

    #[test]
    fn radii_follow_the_schedule(s in 0.0f64..1.0) {
        let b = cantor();
        let t = s * b.final_time();
        let rs = b.radii(t);
        prop_assert_eq!(rs.r[0], 0.5);
        for n in 1..=8 {
            if n <= 8 && t >= b.time(n) {
                prop_assert_eq!(rs.r[n - 1], 0.5f64.powi(n as i32));
            }
            if n < 8 {
                prop_assert!(rs.r[n] <= 0.5 * rs.r[n - 1]);
            }
        }
    }

    #[test]
    fn field_vanishes_outside_q(s in 0.0f64..1.0, x in -2.0f64..2.0, y in 0.5f64..2.0, flip in any::<bool>()) {
        let b = cantor();
        let p = if flip { [x, -y] } else { [y, x] };
        prop_assert!(b.field(s * b.final_time(), &p).iter().all(|v| *v == 0.0));
        let t = table();
        prop_assert!(t.field_b(0, s, &p, 3).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn field_at_centres_is_centre_velocity(s in 0.0f64..1.0, masks in proptest::collection::vec(0u64..4, 1..=5)) {
        let b = cantor();
        let t = s * b.final_time();
        let mut sigma = SymbolString::empty(2);
        for m in masks {
            sigma.push_mask(m);
        }
        let c = b.center(&sigma, t);
        let v = b.center_rate(&sigma, t);
        let f = b.field(t, &c);
        let scale = v.iter().fold(1e-300f64, |a, x| a.max(x.abs()));
        for i in 0..2 {
            prop_assert!((f[i] - v[i]).abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn snapshots_have_unit_mass_and_disjoint_cubes(t in 0.0f64..=1.0, depth in 0usize..=4) {
        let s = table().density_theta(0, t, depth).unwrap();
        prop_assert!((s.mass() - 1.0).abs() <= 1e-12);
        prop_assert!(s.disjoint());
    }

    #[test]
    fn report_pass_iff_statistic_within_threshold(stat in prop_oneof![any::<f64>(), Just(f64::NAN), Just(f64::INFINITY)], thr in -10.0f64..10.0) {
        let r = CheckReport::new(0, "p", 1, stat, thr, "test", 0);
        prop_assert_eq!(r.pass, stat <= thr);
    }
}
