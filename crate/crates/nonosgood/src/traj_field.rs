//! The trajectory construction with `η ≡ 1`: time grid, radii, moving
//! centers, the parallelized field `b`, its time reversal and an RK45
//! integrator.
//!
//! On the window `[t_m, t_{m+1})` generations `k ≤ m` sit at their final
//! radius `2^{-k}` and every generation `k ≥ m+1` moves with
//! `r_k = 4^{m+1−k} r_{m+1}`.

use crate::bblock::{c1_constant, BuildingBlock};
use crate::geometry::SymbolString;
use crate::moc::{MocError, ModulusPair};
use crate::Real;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajError {
    #[error(transparent)]
    Modulus(#[from] MocError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("step size underflow at t = {t} (h = {h}, |x| = {x_norm})")]
    Stiffness { t: f64, h: f64, x_norm: f64 },
    #[error("integration interval [{t0}, {t1}] is empty")]
    Interval { t0: f64, t1: f64 },
    #[error("too many steps ({0})")]
    Steps(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrajError>;

/// Time profile of the radius pushforward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChiProfile {
    /// `χ(s) = s − sin(2πs)/(2π)`; `C¹` in time with `max χ′ = 2`.
    Sine,
    /// `χ(s) = s`; gives a field that is only bounded in time.
    Linear,
}

impl ChiProfile {
    /// `(χ(s), χ′(s))`, clamped to the constants outside `[0, 1]`.
    pub fn eval<T: Real>(self, s: T) -> (T, T) {
        if s <= T::zero() {
            return (T::zero(), T::zero());
        }
        if s >= T::one() {
            return (T::one(), T::zero());
        }
        match self {
            ChiProfile::Sine => {
                let tau = T::TAU();
                let a = tau * s;
                (s - a.sin() / tau, T::one() - a.cos())
            }
            ChiProfile::Linear => (s, T::one()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrajConfig<T> {
    pub dim: usize,
    pub pair: ModulusPair<T>,
    pub n_max: usize,
    pub chi: ChiProfile,
}

impl<T: Real> TrajConfig<T> {
    /// `d = 2`, the default catalog pair, `N_max = 8`.
    pub fn default_2d() -> Self {
        TrajConfig { dim: 2, pair: ModulusPair::default_pair(), n_max: 8, chi: ChiProfile::Sine }
    }
}

/// Radii and rates of generations `1..=N_max` at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct RadiusSnapshot<T> {
    /// Window index `m` with `t ∈ [t_m, t_{m+1})`, capped at `N_max`.
    pub window: usize,
    pub r: Vec<T>,
    pub rate: Vec<T>,
}

/// The field `b` truncated to generations `n ≤ N_max`.
#[derive(Clone, Debug)]
pub struct TrajField<T> {
    cfg: TrajConfig<T>,
    /// `Ω̃(2^{-j})` for `j = 0..=N_max+2`.
    omega_dyadic: Vec<T>,
    /// `t_n` for `n = 1..=N_max+1` (index `n-1`).
    times: Vec<T>,
    final_time: T,
    blocks: Vec<BuildingBlock<T>>,
}

impl<T: Real> TrajField<T> {
    pub fn new(cfg: TrajConfig<T>) -> Result<Self> {
        if cfg.n_max < 2 {
            return Err(TrajError::Config("N_max must be at least 2".into()));
        }
        if cfg.dim < 2 || cfg.dim > 16 {
            return Err(TrajError::Config(format!("dimension {} unsupported", cfg.dim)));
        }
        let mt = &cfg.pair.omega_tilde;
        let omega_dyadic: Vec<T> = (0..=cfg.n_max + 2)
            .map(|j| {
                if j == 0 && mt.ln_max() < T::zero() {
                    Ok(T::nan())
                } else {
                    mt.omega_int(-T::from_usize(j).unwrap() * T::LN_2())
                }
            })
            .collect::<std::result::Result<_, _>>()?;
        let final_time = omega_dyadic[2];
        let times = (1..=cfg.n_max + 1)
            .map(|n| if n == 1 { T::zero() } else { final_time - omega_dyadic[n + 1] })
            .collect();
        let blocks = (0..1u64 << cfg.dim)
            .map(|mask| {
                let e: Vec<T> =
                    (0..cfg.dim).map(|i| if mask >> i & 1 == 1 { T::one() } else { -T::one() }).collect();
                BuildingBlock::new(&e).expect("sign vectors are valid directions")
            })
            .collect();
        Ok(TrajField { cfg, omega_dyadic, times, final_time, blocks })
    }

    pub fn config(&self) -> &TrajConfig<T> {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn n_max(&self) -> usize {
        self.cfg.n_max
    }

    /// `T = Ω̃(1/4)`.
    pub fn final_time(&self) -> T {
        self.final_time
    }

    /// `t_n = T − Ω̃(2^{-n-1})`, `1 ≤ n ≤ N_max + 1`.
    pub fn time(&self, n: usize) -> T {
        self.times[n - 1]
    }

    /// `t_{m+1} − t_m` from the Ω̃ difference, without cancellation against `T`.
    pub fn window_length(&self, m: usize) -> T {
        self.omega_dyadic[m + 1] - self.omega_dyadic[m + 2]
    }

    /// Window index `m` with `t ∈ [t_m, t_{m+1})`; `N_max` once every
    /// modelled generation has arrived.
    pub fn window(&self, t: T) -> usize {
        let k = self.times.partition_point(|&s| s <= t);
        k.clamp(1, self.cfg.n_max)
    }

    /// `(χ_{m+1}(t), χ̇_{m+1}(t))`.
    pub fn chi_window(&self, m: usize, t: T) -> (T, T) {
        let len = self.window_length(m);
        let (c, dc) = self.cfg.chi.eval((t - self.time(m)) / len);
        (c * len, dc)
    }

    pub fn radii(&self, t: T) -> RadiusSnapshot<T> {
        let n = self.cfg.n_max;
        let m = self.window(t);
        let half = T::lit(0.5);
        let quarter = T::lit(0.25);
        let mut r = Vec::with_capacity(n);
        let mut rate = vec![T::zero(); n];
        let mut p = half;
        for _ in 1..=m.min(n) {
            r.push(p);
            p = p * half;
        }
        if m < n {
            let (chi, dchi) = self.chi_window(m, t);
            let base = half * p;
            let rho = if chi == T::zero() {
                base
            } else if chi >= self.window_length(m) {
                p
            } else {
                let y = self.omega_dyadic[m + 2] + chi;
                self.cfg.pair.omega_tilde.inverse_osgood(y).map(|l| l.exp()).unwrap_or(base)
            };
            let speed = if dchi == T::zero() {
                T::zero()
            } else {
                dchi * self.cfg.pair.omega_tilde.eval(rho.ln()).unwrap_or(T::zero())
            };
            let mut scale = T::one();
            for k in m + 1..=n {
                r.push(scale * rho);
                rate[k - 1] = scale * speed;
                scale = scale * quarter;
            }
        }
        RadiusSnapshot { window: m, r, rate }
    }

    /// `r_n(t)`.
    pub fn radius(&self, n: usize, t: T) -> T {
        self.radii(t).r[n - 1]
    }

    /// `ṙ_n(t)`.
    pub fn radius_rate(&self, n: usize, t: T) -> T {
        self.radii(t).rate[n - 1]
    }

    /// `c_{n,σ}(t) = Σ_k (r_k(t)/2) σ_k`.
    pub fn center(&self, sigma: &SymbolString, t: T) -> Vec<T> {
        let rs = self.radii(t);
        weighted_signs(sigma, &rs.r)
    }

    /// `ċ_{n,σ}(t) = Σ_k (ṙ_k(t)/2) σ_k`.
    pub fn center_rate(&self, sigma: &SymbolString, t: T) -> Vec<T> {
        let rs = self.radii(t);
        weighted_signs(sigma, &rs.rate)
    }

    /// `b(t, x)` by nested descent: one candidate cube per generation.
    pub fn field(&self, t: T, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        self.descend(t, x, |scale, block, y, _| {
            for (o, u) in out.iter_mut().zip(block.eval(y)) {
                *o = *o + scale * u;
            }
        });
        out
    }

    /// Jacobian `∂_k b_i(t, x)`.
    pub fn field_grad(&self, t: T, x: &[T]) -> Vec<Vec<T>> {
        let d = self.dim();
        let mut out = vec![vec![T::zero(); d]; d];
        self.descend(t, x, |scale, block, y, r| {
            let g = block.grad(y);
            for i in 0..d {
                for k in 0..d {
                    out[i][k] = out[i][k] + scale / r * g[i][k];
                }
            }
        });
        out
    }

    // Calls `visit(ṙ_n/2, u^{σ_n}, (x−c_n)/r_n, r_n)` for each active generation.
    fn descend<F: FnMut(T, &BuildingBlock<T>, &[T], T)>(&self, t: T, x: &[T], mut visit: F) {
        let half = T::lit(0.5);
        if x.iter().any(|v| v.abs() >= half) {
            return;
        }
        let rs = self.radii(t);
        let d = self.dim();
        let mut c = vec![T::zero(); d];
        let mut y = vec![T::zero(); d];
        for n in 1..=self.cfg.n_max {
            let r = rs.r[n - 1];
            let step = r * half;
            let mut mask = 0u64;
            let mut inside = true;
            for i in 0..d {
                if x[i] >= c[i] {
                    mask |= 1 << i;
                    c[i] = c[i] + step;
                } else {
                    c[i] = c[i] - step;
                }
                y[i] = (x[i] - c[i]) / r;
                // Deeper supports stay inside c_n + (r_n/2) Q.
                if y[i].abs() >= half {
                    inside = false;
                }
            }
            if !inside {
                return;
            }
            let rate = rs.rate[n - 1];
            if rate != T::zero() {
                visit(rate * half, &self.blocks[mask as usize], &y, r);
            }
        }
    }

    /// Sup-norm bound on the generations dropped by the truncation at `t`.
    pub fn truncation_bound(&self, t: T) -> T {
        let m = self.window(t);
        let n = self.cfg.n_max;
        if m >= n {
            return T::zero();
        }
        let rs = self.radii(t);
        let w = self.cfg.pair.omega_tilde.eval(rs.r[m].ln()).unwrap_or(T::zero());
        T::lit(c1_constant(self.dim())) * w * T::lit(4.0).powi(m as i32 + 1 - n as i32) * T::lit(4.0) / T::lit(3.0)
    }

    /// Window endpoints `t_1 < … < t_{N_max+1}` and `T`.
    pub fn breakpoints(&self) -> Vec<T> {
        let mut v = self.times.clone();
        if *v.last().unwrap() < self.final_time {
            v.push(self.final_time);
        }
        v
    }

    /// `v(t, x) = −b(T − t, x)`.
    pub fn reversed(&self) -> Reversed<'_, T> {
        Reversed { b: self }
    }
}

fn weighted_signs<T: Real>(sigma: &SymbolString, w: &[T]) -> Vec<T> {
    let half = T::lit(0.5);
    let mut c = vec![T::zero(); sigma.dim()];
    for j in 1..=sigma.len() {
        let s = w[j - 1] * half;
        for (i, ci) in c.iter_mut().enumerate() {
            *ci = if sigma.sign(j, i) > 0 { *ci + s } else { *ci - s };
        }
    }
    c
}

/// A time-dependent vector field that the integrator can follow.
pub trait VectorField<T>: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: T, x: &[T]) -> Vec<T>;
    /// Times where the field is only `C¹` in `t`; steps never straddle them.
    fn breakpoints(&self) -> Vec<T> {
        Vec::new()
    }
}

impl<T: Real> VectorField<T> for TrajField<T> {
    fn dim(&self) -> usize {
        self.cfg.dim
    }
    fn eval(&self, t: T, x: &[T]) -> Vec<T> {
        self.field(t, x)
    }
    fn breakpoints(&self) -> Vec<T> {
        TrajField::breakpoints(self)
    }
}

/// The time-reversed field `v`.
#[derive(Clone, Copy, Debug)]
pub struct Reversed<'a, T> {
    b: &'a TrajField<T>,
}

impl<T: Real> VectorField<T> for Reversed<'_, T> {
    fn dim(&self) -> usize {
        self.b.dim()
    }
    fn eval(&self, t: T, x: &[T]) -> Vec<T> {
        self.b.field(self.b.final_time - t, x).into_iter().map(|v| -v).collect()
    }
    fn breakpoints(&self) -> Vec<T> {
        let tf = self.b.final_time;
        let mut v: Vec<T> = self.b.breakpoints().into_iter().map(|s| tf - s).collect();
        v.reverse();
        v
    }
}

/// Wraps a closure as a field.
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<T, F: Fn(T, &[T]) -> Vec<T> + Sync> VectorField<T> for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: T, x: &[T]) -> Vec<T> {
        (self.f)(t, x)
    }
}

#[derive(Clone, Debug)]
pub struct RkOptions<T> {
    pub abs_tol: T,
    /// Each step is at most this fraction of its window.
    pub window_fraction: T,
    /// Extra times at which the path is recorded.
    pub sample_times: Vec<T>,
    pub max_steps: usize,
    /// Keep every accepted step in the path.
    pub record_steps: bool,
}

impl<T: Real> Default for RkOptions<T> {
    fn default() -> Self {
        RkOptions {
            abs_tol: T::lit(1e-10),
            window_fraction: T::lit(1.0 / 16.0),
            sample_times: Vec::new(),
            max_steps: 2_000_000,
            record_steps: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub points: Vec<Vec<T>>,
    pub steps: usize,
    pub rejected: usize,
}

impl<T: Real> Trajectory<T> {
    pub fn end(&self) -> &[T] {
        self.points.last().expect("trajectories hold at least the start")
    }

    /// Rows `t, x_1, …, x_d`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.points.first().map_or(0, |p| p.len());
        let header: Vec<String> = std::iter::once("t".to_string()).chain((1..=d).map(|i| format!("x_{i}"))).collect();
        writeln!(w, "{}", header.join(","))?;
        for (t, p) in self.times.iter().zip(&self.points) {
            write!(w, "{:.17e}", t.to_f64_lossy())?;
            for v in p {
                write!(w, ",{:.17e}", v.to_f64_lossy())?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive embedded RK45 from `(t0, x0)` to `t1 > t0`.
pub fn integrate<T: Real, F: VectorField<T> + ?Sized>(
    f: &F,
    x0: &[T],
    t0: T,
    t1: T,
    opts: &RkOptions<T>,
) -> Result<Trajectory<T>> {
    if !(t1 > t0) {
        return Err(TrajError::Interval { t0: t0.to_f64_lossy(), t1: t1.to_f64_lossy() });
    }
    // Stops: window breakpoints and sample times strictly inside (t0, t1), then t1.
    let mut bps: Vec<T> = f.breakpoints().into_iter().filter(|&s| s > t0 && s < t1).collect();
    bps.push(t1);
    bps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    bps.dedup();
    let mut samples: Vec<T> = opts.sample_times.iter().copied().filter(|&s| s > t0 && s < t1).collect();
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let d = x0.len();
    let mut t = t0;
    let mut x = x0.to_vec();
    let mut traj = Trajectory { times: vec![t0], points: vec![x.clone()], steps: 0, rejected: 0 };
    let mut h = T::zero();
    let mut k1 = f.eval(t, &x);
    let mut window_start = t0;
    let mut si = 0;
    for &stop in &bps {
        let cap = (stop - window_start) * opts.window_fraction;
        if h == T::zero() || h > cap {
            h = cap;
        }
        while t < stop {
            while si < samples.len() && samples[si] <= t {
                si += 1;
            }
            let mut target = stop;
            let mut hit_sample = false;
            if si < samples.len() && samples[si] <= stop && samples[si] < t + h {
                target = samples[si];
                hit_sample = true;
            }
            let last = t + h >= target;
            let hstep = if last { target - t } else { h };
            let mut ks: Vec<Vec<T>> = Vec::with_capacity(7);
            ks.push(k1.clone());
            for s in 1..7 {
                let xs: Vec<T> = (0..d)
                    .map(|i| {
                        let acc = (0..s).fold(T::zero(), |a, j| a + T::lit(A[s][j]) * ks[j][i]);
                        x[i] + hstep * acc
                    })
                    .collect();
                ks.push(f.eval(t + T::lit(C[s]) * hstep, &xs));
            }
            let x5: Vec<T> = (0..d)
                .map(|i| x[i] + hstep * (0..7).fold(T::zero(), |a, j| a + T::lit(B5[j]) * ks[j][i]))
                .collect();
            let err = (0..d)
                .map(|i| (hstep * (0..7).fold(T::zero(), |a, j| a + T::lit(B5[j] - B4[j]) * ks[j][i])).abs())
                .fold(T::zero(), T::max);
            let ratio = err / opts.abs_tol;
            if ratio <= T::one() {
                t = if last { target } else { t + hstep };
                x = x5;
                k1 = ks.swap_remove(6);
                traj.steps += 1;
                if opts.record_steps || (last && hit_sample) || t == t1 {
                    traj.times.push(t);
                    traj.points.push(x.clone());
                }
                if last && hit_sample {
                    si += 1;
                }
                let grow = if ratio == T::zero() {
                    T::lit(5.0)
                } else {
                    (T::lit(0.9) * ratio.powf(T::lit(-0.2))).min(T::lit(5.0))
                };
                if !last {
                    h = (hstep * grow).min(cap);
                } else {
                    h = h.min(cap);
                }
            } else {
                traj.rejected += 1;
                h = hstep * (T::lit(0.9) * ratio.powf(T::lit(-0.25))).max(T::lit(0.1));
                let floor = T::epsilon() * T::lit(16.0) * t.abs().max(T::one());
                if h < floor {
                    let xn = x.iter().fold(T::zero(), |a, v| a + *v * *v).sqrt();
                    return Err(TrajError::Stiffness {
                        t: t.to_f64_lossy(),
                        h: h.to_f64_lossy(),
                        x_norm: xn.to_f64_lossy(),
                    });
                }
            }
            if traj.steps + traj.rejected > opts.max_steps {
                return Err(TrajError::Steps(opts.max_steps));
            }
        }
        window_start = stop;
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cantor_center, dyadic_center, LengthSequence};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field() -> TrajField<f64> {
        TrajField::new(TrajConfig::default_2d()).unwrap()
    }

    fn random_word(rng: &mut ChaCha8Rng, d: usize, n: usize) -> SymbolString {
        let mut s = SymbolString::empty(d);
        for _ in 0..n {
            s.push_mask(rng.gen_range(0..1u64 << d));
        }
        s
    }

    #[test]
    fn time_grid_examples() {
        let b = field();
        let tf = 2.0 / (2.0 + 4f64.ln()).sqrt();
        assert!((b.final_time() - tf).abs() < 1e-15);
        assert!((b.final_time() - 1.086845).abs() < 5e-7);
        assert_eq!(b.time(1), 0.0);
        let t2 = tf - 2.0 / (2.0 + 8f64.ln()).sqrt();
        assert!((b.time(2) - t2).abs() < 1e-15);
        assert!((b.time(2) - 0.096630).abs() < 5e-7);
        for n in 1..=8 {
            assert!(b.time(n + 1) > b.time(n));
        }
    }

    #[test]
    fn chi_profile() {
        let p = ChiProfile::Sine;
        assert_eq!(p.eval(0.0f64), (0.0, 0.0));
        assert_eq!(p.eval(1.0f64), (1.0, 0.0));
        assert!((p.eval(0.5f64).0 - 0.5).abs() < 1e-16);
        assert!((p.eval(0.5f64).1 - 2.0).abs() < 1e-15);
        assert!(p.eval(1e-9f64).1 < 1e-15);
    }

    #[test]
    fn radius_examples() {
        let b = field();
        let tf = b.final_time();
        for &t in &[0.0, 0.3, tf] {
            assert_eq!(b.radius(1, t), 0.5);
        }
        for n in 1..=7 {
            assert_eq!(b.radius(n + 1, b.time(n + 1)), 2f64.powi(-(n as i32) - 1));
        }
        // Midpoint of the first window: χ₂ = t₂/2.
        let tm = b.time(2) / 2.0;
        let y = 2.0 / (2.0 + 8f64.ln()).sqrt() + b.time(2) / 2.0;
        let oracle = (2.0 - 4.0 / (y * y)).exp();
        assert!((b.radius(2, tm) - oracle).abs() < 1e-14);
        assert!((b.time(2) / 2.0 - 0.048315).abs() < 5e-7);
    }

    #[test]
    fn radii_are_c1_across_windows() {
        let b = field();
        for n in 2..=6 {
            let tn = b.time(n);
            let h = 1e-7 * b.window_length(n);
            for k in 1..=8 {
                let left = (b.radius(k, tn) - b.radius(k, tn - h)) / h;
                let right = (b.radius(k, tn + h) - b.radius(k, tn)) / h;
                let scale = b.radius(k, tn) / b.window_length(n);
                assert!((left - right).abs() <= 1e-6 * scale.max(1.0), "n={n} k={k}");
            }
        }
    }

    #[test]
    fn rate_matches_difference_quotient() {
        let b = field();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let m = rng.gen_range(1..8);
            let t = b.time(m) + rng.gen_range(0.05..0.95) * b.window_length(m);
            let h = 1e-6 * b.window_length(m);
            for k in 1..=8 {
                let fd = (b.radius(k, t + h) - b.radius(k, t - h)) / (2.0 * h);
                let an = b.radius_rate(k, t);
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(b.radius(k, t) / b.window_length(m) * 1e-3));
            }
        }
    }

    #[test]
    fn centers_at_endpoints_are_exact() {
        let b = field();
        let l = LengthSequence::<f64>::uniform(8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.gen_range(1..=8);
            let s = random_word(&mut rng, 2, n);
            assert_eq!(b.center(&s, 0.0), cantor_center(&l, &s).unwrap());
            assert_eq!(b.center(&s, b.final_time()), dyadic_center::<f64>(&s));
            let t = rng.gen_range(0.0..b.final_time());
            assert_eq!(b.center(&s.truncate(1), t), dyadic_center::<f64>(&s.truncate(1)));
        }
    }

    #[test]
    fn field_at_centers_is_center_velocity() {
        let b = field();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let n = rng.gen_range(1..=5);
            let s = random_word(&mut rng, 2, n);
            let t = rng.gen_range(0.0..b.final_time());
            let v = b.field(t, &b.center(&s, t));
            let c = b.center_rate(&s, t);
            let scale = c.iter().fold(1e-300f64, |m, x| m.max(x.abs()));
            for i in 0..2 {
                assert!((v[i] - c[i]).abs() <= 1e-8 * scale);
            }
        }
    }

    #[test]
    fn support_and_endpoints() {
        let b = field();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            assert_eq!(b.field(0.0, &x), vec![0.0, 0.0]);
            assert_eq!(b.field(b.final_time(), &x), vec![0.0, 0.0]);
            let t = rng.gen_range(0.0..b.final_time());
            let out = [0.5 + rng.gen_range(0.0..1.0), rng.gen_range(-2.0..2.0)];
            assert_eq!(b.field(t, &out), vec![0.0, 0.0]);
            let v = b.reversed();
            let w = v.eval(t, &x);
            let u = b.field(b.final_time() - t, &x);
            assert_eq!(w[0] + u[0], 0.0);
            assert_eq!(w[1] + u[1], 0.0);
        }
    }

    #[test]
    fn analytic_divergence_vanishes() {
        let b = field();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let t = rng.gen_range(0.0..b.final_time());
            let x = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            let g = b.field_grad(t, &x);
            let scale = g.iter().flatten().fold(1e-300f64, |m, v| m.max(v.abs()));
            assert!((g[0][0] + g[1][1]).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn nesting_in_time() {
        let b = field();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let n = rng.gen_range(1..8);
            let s = random_word(&mut rng, 2, n + 1);
            let t = rng.gen_range(0.0..b.time(n).max(1e-12));
            let child = b.center(&s, t);
            let parent = b.center(&s.prefix(), t);
            let (rc, rp) = (b.radius(n + 1, t), b.radius(n, t));
            for i in 0..2 {
                assert!((child[i] - parent[i]).abs() + rc / 2.0 <= rp / 4.0 * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn rk_zero_and_constant_fields() {
        let zero = FnField { dim: 2, f: |_t: f64, _x: &[f64]| vec![0.0, 0.0] };
        let tr = integrate(&zero, &[0.1, 0.2], 0.0, 1.0, &RkOptions::default()).unwrap();
        assert_eq!(tr.end(), &[0.1, 0.2]);
        let blk = BuildingBlock::new(&[1.0, 0.5]).unwrap();
        let frozen = FnField { dim: 2, f: move |_t: f64, x: &[f64]| blk.eval(x) };
        let tr = integrate(&frozen, &[0.0, 0.0], 0.0, 0.125, &RkOptions::default()).unwrap();
        assert!((tr.end()[0] - 0.125).abs() < 1e-10);
        assert!((tr.end()[1] - 0.0625).abs() < 1e-10);
        assert!(integrate(&zero, &[0.0, 0.0], 1.0, 1.0, &RkOptions::default()).is_err());
    }

    #[test]
    fn rk_step_underflow_is_reported() {
        let blow = FnField { dim: 1, f: |t: f64, _x: &[f64]| vec![1.0 / (1.0 - t).powi(3)] };
        let r = integrate(&blow, &[0.0], 0.0, 2.0, &RkOptions::default());
        assert!(matches!(r, Err(TrajError::Stiffness { .. }) | Err(TrajError::Steps(_))));
    }

    #[test]
    fn flow_reaches_dyadic_center() {
        let b = field();
        let l = LengthSequence::<f64>::uniform(8);
        let s = SymbolString::parse("+- -+ ++").unwrap();
        let p = cantor_center(&l, &s).unwrap();
        let tr = integrate(&b, &p, 0.0, b.time(3), &RkOptions::default()).unwrap();
        let target = dyadic_center::<f64>(&s);
        for i in 0..2 {
            assert!((tr.end()[i] - target[i]).abs() <= 1e-4 * l.len(3));
        }
    }

    #[test]
    fn reverse_flow_returns_to_cantor_center() {
        let b = field();
        let l = LengthSequence::<f64>::uniform(8);
        let s = SymbolString::parse("-- +-").unwrap();
        let v = b.reversed();
        let tr = integrate(&v, &dyadic_center::<f64>(&s), 0.0, b.final_time(), &RkOptions::default()).unwrap();
        let p = cantor_center(&l, &s).unwrap();
        for i in 0..2 {
            assert!((tr.end()[i] - p[i]).abs() <= 1e-4 * l.len(2));
        }
    }

    #[test]
    fn csv_rows() {
        let tr = Trajectory { times: vec![0.0f64, 1.0], points: vec![vec![0.0, 0.0], vec![0.5, -0.5]], steps: 1, rejected: 0 };
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("t,x_1,x_2\n"));
        assert_eq!(s.lines().count(), 3);
    }
}
