//! Shape properties of the pointwise surrogate families (symmetry, unit mass,
//! closed-form special cases) and a bit-level check that the spike node's
//! backward rule is exactly `upstream * surrogate(z)` for every pointwise
//! member of the attack grid.

mod common;

use common::TestRng;
use rsnn_core::{ensemble_grid, surrogate_value, Graph, SurrogateKind, SurrogateSpec, Tensor};

fn value(spec: &SurrogateSpec, z: f32) -> f32 {
    surrogate_value(spec, z).expect("pointwise spec")
}

/// f64 trapezoid quadrature of the f32 surrogate over [lo, hi].
fn quadrature(spec: &SurrogateSpec, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let z = lo + h * i as f64;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        acc += w * value(spec, z as f32) as f64;
    }
    acc * h
}

#[test]
fn families_are_even_functions() {
    let mut rng = TestRng(0x5eed_0001);
    for _ in 0..40 {
        let specs = [
            SurrogateSpec::piecewise_linear(rng.uniform(0.1, 4.0)).unwrap(),
            SurrogateSpec::exponential(rng.uniform(0.2, 2.0), rng.uniform(0.3, 3.0)).unwrap(),
            SurrogateSpec::rectangular(rng.uniform(0.1, 4.0)).unwrap(),
            SurrogateSpec::ste(),
        ];
        for spec in &specs {
            for _ in 0..50 {
                let z = rng.uniform(-5.0, 5.0);
                // |z| drives every family, so the symmetry must be bit-exact.
                assert_eq!(
                    value(spec, z).to_bits(),
                    value(spec, -z).to_bits(),
                    "{:?} not even at z={z}",
                    spec.kind
                );
            }
        }
    }
}

#[test]
fn piecewise_linear_has_unit_mass_for_every_width() {
    for gamma in [0.25f32, 0.5, 1.0, 2.0, 3.0, 0.7, 1.9] {
        let spec = SurrogateSpec::piecewise_linear(gamma).unwrap();
        let g = gamma as f64;
        // Support is exactly [-gamma, gamma]; closed form of the triangle
        // integral is 1 independent of the width.
        let mass = quadrature(&spec, -g, g, 200_000);
        assert!(
            (mass - 1.0).abs() < 1e-4,
            "PL gamma={gamma}: mass {mass} != 1"
        );
        assert_eq!(value(&spec, gamma), 0.0);
        assert_eq!(value(&spec, gamma + 1e-3), 0.0);
    }
}

#[test]
fn exponential_mass_matches_closed_form() {
    let mut rng = TestRng(0x5eed_0002);
    for _ in 0..6 {
        let (gd, gs) = (rng.uniform(0.2, 2.0), rng.uniform(0.4, 3.0));
        let spec = SurrogateSpec::exponential(gd, gs).unwrap();
        // Integral of gd * exp(-gs |z|) over the real line is 2 gd / gs; the
        // tail beyond |z| = 40/gs is below f64 quadrature resolution.
        let l = 40.0 / gs as f64;
        let mass = quadrature(&spec, -l, l, 400_000);
        let expect = 2.0 * gd as f64 / gs as f64;
        assert!(
            (mass - expect).abs() < 1e-3 * expect,
            "Exp({gd},{gs}): mass {mass} vs {expect}"
        );
    }
}

#[test]
fn rectangular_is_normalized_indicator() {
    let mut rng = TestRng(0x5eed_0003);
    for gamma in [0.25f32, 0.5, 1.0, 2.0, 4.0] {
        let spec = SurrogateSpec::rectangular(gamma).unwrap();
        let inside = 1.0f32 / gamma;
        for _ in 0..200 {
            let z = rng.uniform(-3.0 * gamma, 3.0 * gamma);
            let expect = if z.abs() < gamma / 2.0 { inside } else { 0.0 };
            assert_eq!(value(&spec, z).to_bits(), expect.to_bits());
        }
        // Window edge is excluded, so the mass is width * height = 1 exactly.
        assert_eq!(value(&spec, gamma / 2.0), 0.0);
        assert_eq!(value(&spec, 0.0), inside);
        let mass = quadrature(&spec, -(gamma as f64), gamma as f64, 100_000);
        assert!(
            (mass - 1.0).abs() < 1e-3,
            "Rect gamma={gamma}: mass {mass} != 1"
        );
    }
}

#[test]
fn unit_width_triangle_is_relu_hat() {
    let spec = SurrogateSpec::piecewise_linear(1.0).unwrap();
    let mut rng = TestRng(0x5eed_0004);
    for _ in 0..500 {
        let z = rng.uniform(-2.0, 2.0);
        let hat = (1.0f32 - z.abs()).max(0.0);
        assert_eq!(value(&spec, z).to_bits(), hat.to_bits());
    }
}

#[test]
fn straight_through_is_one_everywhere() {
    let spec = SurrogateSpec::ste();
    for z in [-100.0f32, -1.0, -1e-8, 0.0, 1e-8, 1.0, 100.0] {
        assert_eq!(value(&spec, z), 1.0);
    }
}

#[test]
fn grid_backward_matches_formula_bitwise_for_every_pointwise_member() {
    let grid = ensemble_grid();
    assert_eq!(grid.len(), 19);
    let pointwise: Vec<_> = grid.iter().filter(|s| s.is_pointwise()).collect();
    let structural: Vec<_> = grid.iter().filter(|s| !s.is_pointwise()).collect();
    assert_eq!(pointwise.len(), 17);
    assert_eq!(structural.len(), 2);

    let mut rng = TestRng(0x5eed_0005);
    for spec in pointwise {
        // Random pre-activations plus the exact kink locations of the family.
        let mut zs = rng.vec(300, -3.0, 3.0);
        zs.extend_from_slice(&[0.0, spec.gamma_w, -spec.gamma_w, spec.gamma_w / 2.0]);
        let c = rng.vec(zs.len(), -2.0, 2.0);

        let g = Graph::new();
        let zv = g.leaf(Tensor::new(vec![zs.len()], zs.clone()).unwrap(), true);
        let s = g.spike(zv, *spec).unwrap();
        let w = g.leaf(Tensor::new(vec![c.len()], c.clone()).unwrap(), false);
        let loss = g.sum(g.mul(s, w).unwrap()).unwrap();
        let grad = g.backward(loss).unwrap().take(zv).expect("z gradient");

        for (i, (&z, &ci)) in zs.iter().zip(&c).enumerate() {
            let expect = ci * value(spec, z);
            assert_eq!(
                grad.data()[i].to_bits(),
                expect.to_bits(),
                "{:?} grad[{i}] at z={z}",
                spec.kind
            );
        }
    }

    // The two structural members never flow through per-step spike nodes.
    for spec in structural {
        let g = Graph::new();
        let zv = g.leaf(Tensor::new(vec![2], vec![0.1, -0.1]).unwrap(), true);
        assert!(g.spike(zv, *spec).is_err());
        assert!(surrogate_value(spec, 0.0).is_err());
        assert!(matches!(
            spec.kind,
            SurrogateKind::Bptr | SurrogateKind::ConversionRelu
        ));
    }
}
