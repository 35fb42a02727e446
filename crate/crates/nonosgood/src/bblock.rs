//! The building block `u^e`: divergence free, equal to `e` on `Q/2`, zero
//! outside `3Q/4`.
//!
//! The stream function is `ψ(x) = (ẽ·x) ∏_i g(x_i)` and
//! `u^e = ∂_ẽψ e − ∂_eψ ẽ`.

use crate::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlockError {
    #[error("building blocks need dimension at least 2, got {0}")]
    Dimension(usize),
    #[error("direction must be nonzero and finite")]
    Direction,
}

/// Transition profile `G(u) = B(u)/(B(u)+B(1−u))` with `B(u) = e^{−1/u}`,
/// returned with its first two derivatives.
pub fn smooth_step<T: Real>(u: T) -> (T, T, T) {
    if u <= T::zero() {
        return (T::zero(), T::zero(), T::zero());
    }
    if u >= T::one() {
        return (T::one(), T::zero(), T::zero());
    }
    // G = 1/(1+e^φ) with φ = 1/u − 1/(1−u).
    let v = T::one() - u;
    let phi = T::one() / u - T::one() / v;
    let dphi = -(T::one() / (u * u) + T::one() / (v * v));
    let two = T::lit(2.0);
    let ddphi = two / (u * u * u) - two / (v * v * v);
    let half = phi / two;
    let th = half.tanh();
    let ch = half.cosh();
    // G(1−G) = 1/(2 cosh(φ/2))², which underflows cleanly near the ends.
    let w = T::one() / (two * ch * two * ch);
    let g = (T::one() - th) / two;
    let g1 = -dphi * w;
    let g2 = -ddphi * w + dphi * dphi * w * th;
    (g, g1, g2)
}

/// One-dimensional cutoff `g(s) = G(3 − 8|s|)`: 1 on `[−1/4, 1/4]`, 0 off
/// `(−3/8, 3/8)`. Returns `(g, g′, g″)`.
pub fn cutoff<T: Real>(s: T) -> (T, T, T) {
    let a = s.abs();
    if a <= T::lit(0.25) {
        return (T::one(), T::zero(), T::zero());
    }
    if a >= T::lit(0.375) {
        return (T::zero(), T::zero(), T::zero());
    }
    let (g, g1, g2) = smooth_step(T::lit(3.0) - T::lit(8.0) * a);
    let sgn = if s < T::zero() { -T::one() } else { T::one() };
    (g, -T::lit(8.0) * sgn * g1, T::lit(64.0) * g2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildingBlock<T> {
    pub e: Vec<T>,
    pub e_tilde: Vec<T>,
}

impl<T: Real> BuildingBlock<T> {
    /// `ẽ = (−e₂, e₁, 0, …)/|(e₁, e₂)|`, or the first unit vector when
    /// `e₁ = e₂ = 0`.
    pub fn new(e: &[T]) -> Result<Self, BlockError> {
        let d = e.len();
        if d < 2 {
            return Err(BlockError::Dimension(d));
        }
        if e.iter().any(|v| !v.is_finite()) || e.iter().all(|v| *v == T::zero()) {
            return Err(BlockError::Direction);
        }
        let mut et = vec![T::zero(); d];
        let n = e[0].hypot(e[1]);
        if n > T::zero() {
            et[0] = -e[1] / n;
            et[1] = e[0] / n;
        } else {
            et[0] = T::one();
        }
        Ok(BuildingBlock { e: e.to_vec(), e_tilde: et })
    }

    pub fn dim(&self) -> usize {
        self.e.len()
    }

    fn region(x: &[T]) -> Region {
        let mut inner = true;
        for &v in x {
            let a = v.abs();
            if a >= T::lit(0.375) {
                return Region::Outside;
            }
            if a > T::lit(0.25) {
                inner = false;
            }
        }
        if inner {
            Region::Plateau
        } else {
            Region::Transition
        }
    }

    // (ẽ·x, P, ∇P, Hess P) for the product cutoff.
    fn parts(&self, x: &[T], want_hess: bool) -> (T, T, Vec<T>, Vec<Vec<T>>) {
        let d = self.dim();
        let cs: Vec<(T, T, T)> = x.iter().map(|&v| cutoff(v)).collect();
        let prod_except = |skip: &[usize]| -> T {
            (0..d).filter(|i| !skip.contains(i)).fold(T::one(), |p, i| p * cs[i].0)
        };
        let p = prod_except(&[]);
        let grad: Vec<T> = (0..d).map(|j| cs[j].1 * prod_except(&[j])).collect();
        let mut hess = vec![vec![T::zero(); d]; if want_hess { d } else { 0 }];
        if want_hess {
            for j in 0..d {
                for k in 0..d {
                    hess[j][k] = if j == k {
                        cs[j].2 * prod_except(&[j])
                    } else {
                        cs[j].1 * cs[k].1 * prod_except(&[j, k])
                    };
                }
            }
        }
        let ex = dot(&self.e_tilde, x);
        (ex, p, grad, hess)
    }

    /// `u^e(x)`.
    pub fn eval(&self, x: &[T]) -> Vec<T> {
        match Self::region(x) {
            Region::Plateau => self.e.clone(),
            Region::Outside => vec![T::zero(); self.dim()],
            Region::Transition => {
                let (ex, p, gp, _) = self.parts(x, false);
                // ∇ψ = ẽ P + (ẽ·x) ∇P
                let grad: Vec<T> = (0..self.dim()).map(|j| self.e_tilde[j] * p + ex * gp[j]).collect();
                let a = dot(&self.e_tilde, &grad);
                let b = dot(&self.e, &grad);
                (0..self.dim()).map(|i| a * self.e[i] - b * self.e_tilde[i]).collect()
            }
        }
    }

    /// Analytic Jacobian `J[i][k] = ∂_k u_i`.
    pub fn grad(&self, x: &[T]) -> Vec<Vec<T>> {
        let d = self.dim();
        if Self::region(x) != Region::Transition {
            return vec![vec![T::zero(); d]; d];
        }
        let (ex, _, gp, hp) = self.parts(x, true);
        // ∂_jk ψ = ẽ_j ∂_k P + ẽ_k ∂_j P + (ẽ·x) ∂_jk P
        let h = |j: usize, k: usize| self.e_tilde[j] * gp[k] + self.e_tilde[k] * gp[j] + ex * hp[j][k];
        let h_et: Vec<T> = (0..d).map(|k| (0..d).fold(T::zero(), |s, j| s + self.e_tilde[j] * h(j, k))).collect();
        let h_e: Vec<T> = (0..d).map(|k| (0..d).fold(T::zero(), |s, j| s + self.e[j] * h(j, k))).collect();
        (0..d)
            .map(|i| (0..d).map(|k| self.e[i] * h_et[k] - self.e_tilde[i] * h_e[k]).collect())
            .collect()
    }

    /// Trace of the analytic Jacobian.
    pub fn divergence(&self, x: &[T]) -> T {
        let j = self.grad(x);
        (0..self.dim()).fold(T::zero(), |s, i| s + j[i][i])
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Region {
    Plateau,
    Transition,
    Outside,
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y)
}

/// Measured `C_d` with `sup|u^e| + sup‖∇u^e‖_F ≤ C_d |e|`, sampled over unit
/// directions and the transition shell. Cached per dimension.
pub fn c1_constant(d: usize) -> f64 {
    static CACHE: Mutex<Option<HashMap<usize, f64>>> = Mutex::new(None);
    if let Some(v) = CACHE.lock().unwrap().get_or_insert_with(HashMap::new).get(&d) {
        return *v;
    }
    let v = measure_c1(d, 40_000, 0x005e_edc1);
    CACHE.lock().unwrap().get_or_insert_with(HashMap::new).insert(d, v);
    v
}

fn measure_c1(d: usize, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sup_u: f64 = 1.0;
    let mut sup_g: f64 = 0.0;
    let dirs: Vec<Vec<f64>> = (0..16)
        .map(|k| {
            let mut e: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if k < d {
                e = (0..d).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
            }
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            e.iter().map(|v| v / n).collect()
        })
        .collect();
    let blocks: Vec<BuildingBlock<f64>> = dirs.iter().map(|e| BuildingBlock::new(e).unwrap()).collect();
    for s in 0..samples {
        let b = &blocks[s % blocks.len()];
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.375..0.375)).collect();
        let u = b.eval(&x);
        sup_u = sup_u.max(u.iter().map(|v| v * v).sum::<f64>().sqrt());
        let j = b.grad(&x);
        let f = j.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        sup_g = sup_g.max(f);
    }
    sup_u + sup_g
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assume, proptest};

    fn fd_jacobian(b: &BuildingBlock<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
        let d = x.len();
        let mut j = vec![vec![0.0; d]; d];
        for k in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += h;
            xm[k] -= h;
            let (up, um) = (b.eval(&xp), b.eval(&xm));
            for i in 0..d {
                j[i][k] = (up[i] - um[i]) / (2.0 * h);
            }
        }
        j
    }

    #[test]
    fn examples() {
        let b = BuildingBlock::new(&[1.0, 0.0]).unwrap();
        assert_eq!(b.e_tilde, vec![0.0, 1.0]);
        assert_eq!(b.eval(&[0.0, 0.0]), vec![1.0, 0.0]);
        let e = [0.3, -0.7];
        let b = BuildingBlock::new(&e).unwrap();
        assert_eq!(b.eval(&[0.1, -0.2]), e.to_vec());
        assert_eq!(b.eval(&[0.5, 0.5]), vec![0.0, 0.0]);
        assert_eq!(b.eval(&[0.375, 0.0]), vec![0.0, 0.0]);
        assert!(BuildingBlock::new(&[1.0]).is_err());
        let b3 = BuildingBlock::new(&[0.0, 0.0, 2.0]).unwrap();
        assert_eq!(b3.e_tilde, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn profile_endpoints() {
        assert_eq!(cutoff(0.25f64), (1.0, 0.0, 0.0));
        assert_eq!(cutoff(-0.375f64), (0.0, 0.0, 0.0));
        let (g, _, _) = cutoff(0.3125f64);
        assert!((g - 0.5).abs() < 1e-15);
        // Derivatives against central differences of the profile itself.
        for &s in &[0.26f64, 0.29, 0.31, 0.33, 0.36, -0.3] {
            let h = 1e-6;
            let (_, g1, g2) = cutoff(s);
            let fd1 = (cutoff(s + h).0 - cutoff(s - h).0) / (2.0 * h);
            let fd2 = (cutoff(s + h).1 - cutoff(s - h).1) / (2.0 * h);
            assert!((g1 - fd1).abs() < 1e-6 * (1.0 + g1.abs()));
            assert!((g2 - fd2).abs() < 1e-5 * (1.0 + g2.abs()));
        }
    }

    #[test]
    fn fd_divergence_in_shell() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = BuildingBlock::new(&[0.6, 0.8]).unwrap();
        let scale = c1_constant(2);
        let h = 1e-5;
        let mut n = 0;
        while n < 1000 {
            let x: [f64; 2] = [rng.gen_range(-0.375..0.375), rng.gen_range(-0.375..0.375)];
            if x[0].abs() <= 0.25 && x[1].abs() <= 0.25 {
                continue;
            }
            n += 1;
            let j = fd_jacobian(&b, &x, h);
            assert!((j[0][0] + j[1][1]).abs() <= 1e-6 * scale);
        }
    }

    #[test]
    fn analytic_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = BuildingBlock::new(&[1.0, -2.0, 0.5]).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.37..0.37)).collect();
            let a = b.grad(&x);
            let f = fd_jacobian(&b, &x, 1e-6);
            let norm = a.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
            for i in 0..3 {
                for k in 0..3 {
                    assert!((a[i][k] - f[i][k]).abs() <= 1e-6 * norm, "{i}{k}");
                }
            }
        }
    }

    #[test]
    fn rigid_translation_of_half_cube() {
        // The plateau contains x0 + t e for |t| ≤ 1/8 when x0 is in Q/8.
        let e = [1.0, 0.0];
        let b = BuildingBlock::new(&e).unwrap();
        let x0 = [0.1, -0.05];
        let steps = 1000;
        let dt = 0.125 / steps as f64;
        let mut x = x0;
        for _ in 0..steps {
            let u = b.eval(&[x[0] - 0.0, x[1]]);
            x = [x[0] + dt * u[0], x[1] + dt * u[1]];
            assert!(x[0].abs() <= 0.25);
        }
        assert!((x[0] - (x0[0] + 0.125)).abs() < 1e-12);
        assert_eq!(x[1], x0[1]);
    }

    #[test]
    fn constant_is_reported() {
        let c = c1_constant(2);
        assert!(c > 1.0 && c.is_finite());
        assert_eq!(c, c1_constant(2));
    }

    proptest! {
        #[test]
        fn trace_vanishes(x in proptest::collection::vec(-0.4f64..0.4, 3), e in proptest::collection::vec(-2.0f64..2.0, 3)) {
            prop_assume!(e.iter().any(|v| v.abs() > 1e-3));
            let b = BuildingBlock::new(&e).unwrap();
            let j = b.grad(&x);
            let norm = j.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!(b.divergence(&x).abs() <= 1e-14 * norm);
        }

        #[test]
        fn linear_in_e(x in proptest::collection::vec(-0.4f64..0.4, 2), e in proptest::collection::vec(-2.0f64..2.0, 2)) {
            prop_assume!(e.iter().any(|v| v.abs() > 1e-3));
            let b1 = BuildingBlock::new(&e).unwrap();
            let e2: Vec<f64> = e.iter().map(|v| 2.0 * v).collect();
            let b2 = BuildingBlock::new(&e2).unwrap();
            let (u1, u2) = (b1.eval(&x), b2.eval(&x));
            for i in 0..2 {
                prop_assert!((u2[i] - 2.0 * u1[i]).abs() <= 1e-14 * (1.0 + u2[i].abs()));
            }
        }

        #[test]
        fn zero_grad_off_shell(x in proptest::collection::vec(-0.25f64..0.25, 2)) {
            let b = BuildingBlock::new(&[0.2, 0.9]).unwrap();
            prop_assert!(b.grad(&x).iter().flatten().all(|v| *v == 0.0));
        }
    }
}
