use koopman_control::{MultiPoly, PolyMap};
use proptest::prelude::*;

const NV: usize = 3;

fn poly() -> impl Strategy<Value = MultiPoly> {
    prop::collection::vec((prop::collection::vec(0u32..3, NV), -2.0f64..2.0), 0..6)
        .prop_map(|terms| MultiPoly::from_terms(NV, terms).unwrap().with_prune_threshold(0.0))
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, NV)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn ring_operations_match_pointwise(p in poly(), q in poly(), r in poly(), z in point()) {
        let ev = |m: &MultiPoly| m.evaluate(&z).unwrap();
        prop_assert!(close(ev(&(&p + &q)), ev(&p) + ev(&q)));
        prop_assert!(close(ev(&(&p - &q)), ev(&p) - ev(&q)));
        prop_assert!(close(ev(&(&p * &q)), ev(&p) * ev(&q)));
        let left = &(&p * &q) * &r;
        let right = &p * &(&q * &r);
        prop_assert!(close(ev(&left), ev(&right)));
        let dist = &p * &(&q + &r);
        prop_assert!(close(ev(&dist), ev(&(&p * &q)) + ev(&(&p * &r))));
    }

    #[test]
    fn multiplication_commutes_exactly(p in poly(), q in poly()) {
        let a = &p * &q;
        let b = &q * &p;
        for (m, c) in a.terms() {
            prop_assert!(close(c, b.coefficient(m.exps())));
        }
    }

    #[test]
    fn horner_agrees_with_direct(p in poly(), z in point()) {
        prop_assert!(close(p.evaluate(&z).unwrap(), p.evaluate_horner(&z).unwrap()));
    }

    #[test]
    fn derivative_matches_finite_difference(p in poly(), z in point(), v in 0..NV) {
        let d = p.partial_derivative(v).unwrap().evaluate(&z).unwrap();
        let h = 1e-5;
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[v] += h;
        zm[v] -= h;
        let fd = (p.evaluate(&zp).unwrap() - p.evaluate(&zm).unwrap()) / (2.0 * h);
        prop_assert!((d - fd).abs() <= 1e-6 * (1.0 + d.abs()));
    }

    #[test]
    fn product_rule(p in poly(), q in poly(), v in 0..NV) {
        let lhs = (&p * &q).partial_derivative(v).unwrap();
        let rhs = &(&p.partial_derivative(v).unwrap() * &q) + &(&p * &q.partial_derivative(v).unwrap());
        let diff = &lhs - &rhs;
        prop_assert!(diff.max_abs_coefficient() <= 1e-9 * (1.0 + lhs.max_abs_coefficient()));
    }

    #[test]
    fn truncated_product_is_truncation_of_product(p in poly(), q in poly(), k in 0u32..6) {
        let full = (&p * &q).truncate(k);
        let trunc = p.try_mul(&q, Some(k)).unwrap();
        prop_assert!((&full - &trunc).max_abs_coefficient() <= 1e-12 * (1.0 + full.max_abs_coefficient()));
    }

    #[test]
    fn composition_evaluates_as_nested(ps in prop::collection::vec(poly(), NV), qs in prop::collection::vec(poly(), NV), z in point()) {
        let outer = PolyMap::new(NV, ps).unwrap();
        let inner = PolyMap::new(NV, qs).unwrap();
        let deg = outer.max_degree() * inner.max_degree().max(1);
        let comp = outer.compose(&inner, deg).unwrap();
        let nested = outer.evaluate(&inner.evaluate(&z).unwrap()).unwrap();
        let direct = comp.evaluate(&z).unwrap();
        for (a, b) in nested.iter().zip(&direct) {
            prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn identity_is_neutral_for_composition(ps in prop::collection::vec(poly(), NV)) {
        let m = PolyMap::new(NV, ps).unwrap();
        let deg = m.max_degree();
        let id = PolyMap::identity(NV);
        prop_assert_eq!(m.compose(&id, deg).unwrap().sub(&m).unwrap().max_abs_coefficient(), 0.0);
        prop_assert!(id.compose(&m, deg).unwrap().sub(&m).unwrap().max_abs_coefficient() <= 1e-15);
    }

    #[test]
    fn json_roundtrip(ps in prop::collection::vec(poly(), NV)) {
        let m = PolyMap::new(NV, ps).unwrap();
        let back: PolyMap = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }
}
