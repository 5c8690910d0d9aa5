//! Shared test support: an independent f64 reference implementation of the op
//! semantics (naive loops, no shared code with the engine) and a central
//! finite-difference oracle built on top of it.

#![allow(dead_code)]

pub mod refmath;

/// Central finite differences of a scalar function, double precision.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// |a - b| <= tol * (1 + |b|) elementwise; the absolute floor keeps tiny
/// gradients from demanding impossible relative precision.
pub fn assert_close_rel(auto: &[f32], oracle: &[f64], tol: f64, ctx: &str) {
    assert_eq!(auto.len(), oracle.len(), "{ctx}: length mismatch");
    for i in 0..auto.len() {
        let a = auto[i] as f64;
        let b = oracle[i];
        let err = (a - b).abs();
        assert!(
            err <= tol * (1.0 + b.abs()),
            "{ctx}: grad[{i}] engine {a} vs oracle {b} (err {err:.3e})"
        );
    }
}

/// Deterministic pseudo-random f32 values in [lo, hi) for test inputs,
/// independent of any RNG crate (splitmix64 stream).
pub struct TestRng(pub u64);

impl TestRng {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        let u = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u as f32
    }

    pub fn vec(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}
