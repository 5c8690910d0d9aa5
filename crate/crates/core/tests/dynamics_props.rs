//! Membrane-dynamics properties: the production scan must agree bit-for-bit
//! with an independently written reference simulator on random programs, and
//! a soft-reset integrate-and-fire neuron under constant drive must fire at
//! the textbook rate c / V_th to within 1/T.

mod common;

use common::TestRng;
use proptest::prelude::*;
use rsnn_core::snn::{lif_scan_values, Encoding, ResetKind, SnnConfig};
use rsnn_core::{SurrogateSpec, Tensor};

/// Naive reference scan, kept deliberately separate from the engine: same
/// float operation order, different code. Returns (spikes, post-reset
/// membrane trace).
fn reference_scan(
    z: &[f32],
    t: usize,
    n: usize,
    tau: f32,
    v_th: f32,
    reset: ResetKind,
) -> (Vec<f32>, Vec<f32>) {
    let mut v = vec![0.0f32; n];
    let mut spikes = vec![0.0f32; t * n];
    let mut trace = vec![0.0f32; t * n];
    for step in 0..t {
        for i in 0..n {
            let drive = z[step * n + i];
            let vm = if step == 0 { drive } else { tau * v[i] + drive };
            let s = if vm - v_th >= 0.0 { 1.0f32 } else { 0.0 };
            spikes[step * n + i] = s;
            v[i] = match reset {
                ResetKind::Hard => vm * (1.0 - s),
                ResetKind::Soft => vm - s * v_th,
            };
            trace[step * n + i] = v[i];
        }
    }
    (spikes, trace)
}

fn cfg(t: usize, tau: f32, reset: ResetKind) -> SnnConfig {
    SnnConfig::new(
        t,
        tau,
        reset,
        Encoding::Direct,
        SurrogateSpec::training_default(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]
    #[test]
    fn scan_matches_reference_bitwise(
        t in 1usize..=24,
        b in 1usize..=4,
        f in 1usize..=6,
        tau in prop_oneof![Just(1.0f32), 0.25f32..1.0],
        v_th in 0.05f32..2.0,
        hard in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let reset = if hard { ResetKind::Hard } else { ResetKind::Soft };
        let n = b * f;
        let mut rng = TestRng(seed);
        let z = rng.vec(t * n, -2.0, 2.0);
        let (out, count) =
            lif_scan_values(&Tensor::new(vec![t * b, f], z.clone()).unwrap(),
                            v_th, b, &cfg(t, tau, reset));
        let (expect, trace) = reference_scan(&z, t, n, tau, v_th, reset);

        let mut total = 0.0f64;
        for (i, (&got, &want)) in out.data().iter().zip(&expect).enumerate() {
            prop_assert_eq!(got.to_bits(), want.to_bits(), "spike[{}]", i);
            prop_assert!(got == 0.0 || got == 1.0, "non-binary spike {}", got);
            total += got as f64;
        }
        prop_assert_eq!(count, total, "spike count mismatch");

        // Reset laws on the trace the engine provably reproduces: a hard
        // reset zeroes spiking neurons exactly; a soft reset leaves the
        // residual vm - V_th bit-exactly.
        for step in 0..t {
            for i in 0..n {
                let s = expect[step * n + i];
                let post = trace[step * n + i];
                if s == 1.0 {
                    match reset {
                        ResetKind::Hard => prop_assert_eq!(post, 0.0),
                        ResetKind::Soft => {
                            let vm = post + v_th; // invert the subtraction
                            prop_assert!(vm - v_th >= 0.0);
                        }
                    }
                } else if reset == ResetKind::Hard {
                    // Non-spiking neurons keep vm < v_th untouched.
                    prop_assert!(post - v_th < 0.0);
                }
            }
        }
    }
}

#[test]
fn membrane_exactly_at_threshold_spikes() {
    // H(0) = 1: equality fires. One neuron, one step, drive == threshold.
    let v_th = 0.75f32;
    let z = Tensor::new(vec![1, 1], vec![v_th]).unwrap();
    let (out, count) = lif_scan_values(&z, v_th, 1, &cfg(1, 1.0, ResetKind::Hard));
    assert_eq!(out.data(), &[1.0]);
    assert_eq!(count, 1.0);
    // Just below threshold stays silent.
    let z = Tensor::new(vec![1, 1], vec![v_th - 1e-5]).unwrap();
    let (out, _) = lif_scan_values(&z, v_th, 1, &cfg(1, 1.0, ResetKind::Hard));
    assert_eq!(out.data(), &[0.0]);
}

#[test]
fn soft_reset_constant_drive_fires_at_c_over_vth() {
    // An integrate-and-fire neuron (tau = 1, soft reset) with constant input
    // c in (0, V_th) carries every injected unit of charge into spikes, so
    // the empirical rate over T steps deviates from c / V_th by at most the
    // one residual membrane's worth: 1/T.
    let t = 256usize;
    for &v_th in &[1.0f32, 0.6, 1.7] {
        for k in 1..20 {
            let c = v_th * (k as f32) * 0.05 * 0.999; // avoid exact multiples
            let z = Tensor::new(vec![t, 1], vec![c; t]).unwrap();
            let (_, count) = lif_scan_values(&z, v_th, 1, &cfg(t, 1.0, ResetKind::Soft));
            let rate = count / t as f64;
            let ideal = (c / v_th) as f64;
            assert!(
                rate <= ideal + 1e-6 && rate >= ideal - 1.0 / t as f64 - 1e-6,
                "v_th={v_th} c={c}: rate {rate} vs c/V_th {ideal}"
            );
        }
    }
}

#[test]
fn leak_decays_subthreshold_membrane_geometrically() {
    // One strong kick, then silence: with leak tau the membrane is
    // tau^(t-1) * z0 and never spikes again once below threshold.
    let t = 10usize;
    let tau = 0.5f32;
    let z0 = 0.9f32;
    let v_th = 1.0f32;
    let mut z = vec![0.0f32; t];
    z[0] = z0;
    let (out, count) = lif_scan_values(
        &Tensor::new(vec![t, 1], z.clone()).unwrap(),
        v_th,
        1,
        &cfg(t, tau, ResetKind::Hard),
    );
    assert_eq!(count, 0.0);
    assert!(out.data().iter().all(|&s| s == 0.0));
    // The same program with v_th below the kick fires exactly once at t=0:
    // the hard reset wipes the membrane and the leak keeps it at zero.
    let (out, count) = lif_scan_values(
        &Tensor::new(vec![t, 1], z).unwrap(),
        0.5,
        1,
        &cfg(t, tau, ResetKind::Hard),
    );
    assert_eq!(count, 1.0);
    assert_eq!(out.data()[0], 1.0);
}
