//! Reference implementations shared by the integration tests. None of
//! these reuse library numerics beyond plain polynomial evaluation.

#![allow(dead_code)]

use koopman_control::{MultiPoly, PolyMap};
use rand::Rng;

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on the
/// three-term recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Tensor Gauss-Legendre integral of `p * q` over [-1, 1]^d.
pub fn quadrature_inner(p: &MultiPoly, q: &MultiPoly, n: usize) -> f64 {
    let d = p.num_vars();
    let (x, w) = gauss_legendre(n);
    let mut idx = vec![0usize; d];
    let mut acc = 0.0;
    loop {
        let z: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let wt: f64 = idx.iter().map(|&i| w[i]).product();
        acc += wt * p.evaluate(&z).unwrap() * q.evaluate(&z).unwrap();
        let mut k = 0;
        while k < d {
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == d {
            return acc;
        }
    }
}

/// All exponent vectors of `d` variables with total degree in `lo..=hi`.
pub fn exponents(d: usize, lo: u32, hi: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut e = vec![0u32; d];
    fn rec(e: &mut Vec<u32>, i: usize, left: u32, lo: u32, hi: u32, out: &mut Vec<Vec<u32>>) {
        if i == e.len() {
            let deg = hi - left;
            if deg >= lo {
                out.push(e.clone());
            }
            return;
        }
        for k in 0..=left {
            e[i] = k;
            rec(e, i + 1, left - k, lo, hi, out);
        }
        e[i] = 0;
    }
    rec(&mut e, 0, hi, lo, hi, &mut out);
    out
}

/// Random origin-preserving map with linear part `I + B` (`|B_ij| <= 0.1`)
/// and nonlinear coefficients in [-0.5, 0.5].
pub fn random_map<R: Rng>(rng: &mut R, d: usize, order: u32) -> PolyMap {
    let nonlinear = exponents(d, 2, order);
    let comps = (0..d)
        .map(|i| {
            let mut terms: Vec<(Vec<u32>, f64)> = (0..d)
                .map(|j| {
                    let mut e = vec![0; d];
                    e[j] = 1;
                    (e, f64::from(u8::from(i == j)) + rng.gen_range(-0.1..0.1))
                })
                .collect();
            for e in &nonlinear {
                if rng.gen_bool(0.4) {
                    terms.push((e.clone(), rng.gen_range(-0.5..0.5)));
                }
            }
            MultiPoly::from_terms(d, terms).unwrap()
        })
        .collect();
    PolyMap::new(d, comps).unwrap()
}

/// Classical fixed-step RK4 on `f`.
pub fn rk4<F: Fn(&[f64]) -> Vec<f64>>(f: F, x0: &[f64], tf: f64, steps: usize) -> Vec<Vec<f64>> {
    let h = tf / steps as f64;
    let mut x = x0.to_vec();
    let mut out = vec![x.clone()];
    let axpy = |x: &[f64], a: f64, k: &[f64]| -> Vec<f64> { x.iter().zip(k).map(|(x, k)| x + a * k).collect() };
    for _ in 0..steps {
        let k1 = f(&x);
        let k2 = f(&axpy(&x, h / 2.0, &k1));
        let k3 = f(&axpy(&x, h / 2.0, &k2));
        let k4 = f(&axpy(&x, h, &k3));
        for i in 0..x.len() {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out.push(x.clone());
    }
    out
}

/// Duffing right-hand side `(q, p)` written out by hand.
pub fn duffing_rhs(a: f64, m: f64, k: f64, eps: f64) -> impl Fn(&[f64]) -> Vec<f64> {
    move |z: &[f64]| vec![z[1] / m, -k * z[0] - k * a * a * eps * z[0].powi(3)]
}
