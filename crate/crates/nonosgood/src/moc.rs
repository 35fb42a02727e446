//! Moduli of continuity, their Osgood integrals and the auxiliary slower
//! modulus.
//!
//! Every length enters as its natural logarithm `λ = ln r`, so that the
//! deep scales used by the fixed-point construction never have to be formed.

use crate::Real;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MocError {
    #[error("log-length {log_r} is above the domain max {max}")]
    Domain { log_r: f64, max: f64 },
    #[error("value {y} is outside the range (0, {max}) of the Osgood integral")]
    Range { y: f64, max: f64 },
    #[error("Osgood integral diverges at 0 (gave up at ln r = {reached})")]
    Divergence { reached: f64 },
    #[error("quadrature did not converge on [{a}, {b}]")]
    Quadrature { a: f64, b: f64 },
    #[error("auxiliary modulus construction failed: {0}")]
    Construction(String),
    #[error("modulus table rejected: {0}")]
    Table(String),
    #[error("cannot parse modulus spec `{0}`")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, MocError>;

/// Target relative accuracy of every quadrature.
pub const QUAD_REL_TOL: f64 = 1e-10;
/// Absolute tolerance in `λ` for bisection inverses.
pub const INVERSE_ABS_TOL: f64 = 1e-13;
/// Slack allowed when validating concavity of tables and knot lists.
pub const CONCAVITY_SLACK: f64 = 1e-12;

/// Tabulated modulus: rows `(ln r, ln ω)` with `ln r` strictly decreasing.
#[derive(Clone, Debug, PartialEq)]
pub struct Table<T> {
    ln_r: Vec<T>,
    ln_w: Vec<T>,
}

impl<T: Real> Table<T> {
    /// Builds a table from `(ln r, ω)` rows, rejecting anything that is not
    /// increasing and concave once interpolated linearly in `(λ, ln ω)`.
    pub fn new(rows: &[(T, T)]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(MocError::Table("need at least two rows".into()));
        }
        let mut ln_r = Vec::with_capacity(rows.len());
        let mut ln_w = Vec::with_capacity(rows.len());
        for (i, &(l, w)) in rows.iter().enumerate() {
            if !(w > T::zero()) || !l.is_finite() {
                return Err(MocError::Table(format!("row {i}: need finite ln r and ω > 0")));
            }
            if i > 0 && !(l < ln_r[i - 1]) {
                return Err(MocError::Table(format!("row {i}: ln r must strictly decrease")));
            }
            ln_r.push(l);
            ln_w.push(w.ln());
        }
        let t = Table { ln_r, ln_w };
        let slack = T::lit(CONCAVITY_SLACK);
        let mut prev: Option<T> = None;
        for i in 0..t.ln_r.len() - 1 {
            let s = t.exponent(i);
            if !(s > T::zero()) {
                return Err(MocError::Table(format!("segment {i} is not increasing")));
            }
            if s > T::one() + slack {
                return Err(MocError::Table(format!("segment {i} is convex (exponent {s})")));
            }
            // Kinks are concave when the local exponent does not drop toward 0.
            if let Some(p) = prev {
                if s + slack < p {
                    return Err(MocError::Table(format!("concavity fails at row {i}")));
                }
            }
            prev = Some(s);
        }
        Ok(t)
    }

    /// Loads a two-column CSV of `(ln r, ω)`; `#` comments and a header row are skipped.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MocError::Table(format!("{}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split(',').map(str::trim);
            let (Some(a), Some(b)) = (it.next(), it.next()) else {
                return Err(MocError::Table(format!("bad row `{line}`")));
            };
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(a), Ok(b)) => rows.push((T::lit(a), T::lit(b))),
                _ if rows.is_empty() => continue,
                _ => return Err(MocError::Table(format!("bad row `{line}`"))),
            }
        }
        Self::new(&rows)
    }

    fn ln_r_over_omega(&self, l: T) -> T {
        let n = self.ln_r.len();
        let i = if l <= self.ln_r[n - 1] {
            n - 2
        } else {
            self.ln_r.partition_point(|&x| x >= l).saturating_sub(1).min(n - 2)
        };
        let s = self.exponent(i);
        (l - self.ln_r[i + 1]) * (T::one() - s) + (self.ln_r[i + 1] - self.ln_w[i + 1])
    }

    fn exponent(&self, i: usize) -> T {
        (self.ln_w[i] - self.ln_w[i + 1]) / (self.ln_r[i] - self.ln_r[i + 1])
    }

    /// Exact `∫ e^λ/ω dλ` over `[la, lb]`; every segment is a power law.
    fn osgood(&self, la: T, lb: T) -> Result<T> {
        let n = self.ln_r.len();
        let one = T::one();
        // Piece with exponent s through (λ0, g0 = λ0 - ln ω(λ0)) on [u, v].
        let piece = |s: T, l0: T, g0: T, u: T, v: T| -> T {
            let k = one - s;
            let top = g0 + k * (v - l0);
            if k.abs() <= T::lit(1e-15) {
                return top.exp() * (v - u);
            }
            if u == T::neg_infinity() {
                return top.exp() / k;
            }
            -top.exp() * (-k * (v - u)).exp_m1() / k
        };
        let mut total = T::zero();
        let mut hi = lb;
        for i in 0..n - 1 {
            let seg_lo = if i == n - 2 { T::neg_infinity() } else { self.ln_r[i + 1] };
            if hi <= seg_lo {
                continue;
            }
            let s = self.exponent(i);
            let lo = if la > seg_lo { la } else { seg_lo };
            if lo == T::neg_infinity() && !(s < one) {
                return Err(MocError::Divergence { reached: f64::NEG_INFINITY });
            }
            let l0 = self.ln_r[i + 1];
            total = total + piece(s, l0, l0 - self.ln_w[i + 1], lo, hi);
            hi = lo;
            if hi <= la {
                break;
            }
        }
        Ok(total)
    }

    fn ln_eval(&self, l: T) -> T {
        let n = self.ln_r.len();
        if l <= self.ln_r[n - 1] {
            // Power-law continuation with the last exponent.
            return self.ln_w[n - 1] + self.exponent(n - 2) * (l - self.ln_r[n - 1]);
        }
        // ln_r is decreasing; find i with ln_r[i+1] < l <= ln_r[i].
        let i = self.ln_r.partition_point(|&x| x >= l).saturating_sub(1).min(n - 2);
        self.ln_w[i + 1] + self.exponent(i) * (l - self.ln_r[i + 1])
    }
}

/// Piecewise-affine auxiliary modulus built from a base modulus.
#[derive(Clone, Debug, PartialEq)]
pub struct Auxiliary<T> {
    pub base: Modulus<T>,
    /// `ln r_n` for `n = 1..=D`, strictly decreasing, `r_1 = 1`.
    pub ln_knots: Vec<T>,
    /// `r_n` for `n = 1..=D`.
    pub knots: Vec<T>,
    /// `ω̃(r_n) = ω(r_n)/a_n`.
    pub values: Vec<T>,
    pub a: Vec<T>,
    pub abar: Vec<T>,
    /// `b_n = 2^n (r_n - r_{n+1})`, `n = 1..=D`.
    pub b: Vec<T>,
    /// Certified upper bound on `Σ_{n≥1} b_n`.
    pub b_total: T,
    /// Set when the knot list was cut short by the `f64` exponent range.
    pub truncated: bool,
}

impl<T: Real> Auxiliary<T> {
    pub fn depth(&self) -> usize {
        self.knots.len()
    }

    /// Slopes of the affine pieces on `[r_{n+1}, r_n]`, `n = 1..D-1`.
    pub fn slopes(&self) -> Vec<T> {
        (0..self.depth() - 1)
            .map(|i| (self.values[i] - self.values[i + 1]) / (self.knots[i] - self.knots[i + 1]))
            .collect()
    }

    /// Partial sums of `Σ 2^n (r_n - r_{n+1}) a_{n+1}`.
    pub fn certificate_partial_sums(&self) -> Vec<T> {
        let mut acc = T::zero();
        (0..self.depth() - 1)
            .map(|i| {
                acc = acc + self.b[i] * self.a[i + 1];
                acc
            })
            .collect()
    }

    /// Bound the certificate partial sums never exceed, from the tail-threshold
    /// choice of `ā`.
    pub fn certificate_bound(&self) -> T {
        T::lit(10.0) * self.b_total
    }

    fn ln_eval(&self, l: T) -> Result<T> {
        let d = self.depth();
        if l >= T::zero() {
            return self.base.ln_eval(l);
        }
        if l < self.ln_knots[d - 1] {
            return Ok(self.base.ln_eval(l)? - self.a[d - 1].ln());
        }
        let i = self.segment(l);
        let r = l.exp();
        let (r0, r1) = (self.knots[i], self.knots[i + 1]);
        let (v0, v1) = (self.values[i], self.values[i + 1]);
        Ok((v1 + (v0 - v1) * (r - r1) / (r0 - r1)).ln())
    }

    // Index i with ln_knots[i+1] <= l < ln_knots[i].
    fn segment(&self, l: T) -> usize {
        let d = self.depth();
        self.ln_knots.partition_point(|&x| x > l).saturating_sub(1).min(d - 2)
    }

    fn osgood(&self, la: T, lb: T) -> Result<T> {
        let d = self.depth();
        let mut total = T::zero();
        // Above r_1 = 1 the auxiliary modulus is the base one.
        if lb > T::zero() {
            total = total + self.base.osgood(la.max(T::zero()), lb)?;
        }
        let l_last = self.ln_knots[d - 1];
        if la < l_last {
            let top = lb.min(l_last);
            total = total + self.a[d - 1] * self.base.osgood(la, top)?;
        }
        let lo = la.max(l_last);
        let hi = lb.min(T::zero());
        if lo < hi {
            let mut i = self.segment(lo);
            loop {
                let seg_lo = lo.max(self.ln_knots[i + 1]);
                let seg_hi = hi.min(self.ln_knots[i]);
                if seg_lo < seg_hi {
                    let beta = (self.values[i] - self.values[i + 1]) / (self.knots[i] - self.knots[i + 1]);
                    let alpha = self.values[i + 1] - beta * self.knots[i + 1];
                    let (ra, rb) = (seg_lo.exp(), seg_hi.exp());
                    total = total + ((alpha + beta * rb) / (alpha + beta * ra)).ln() / beta;
                }
                if i == 0 || self.ln_knots[i] >= hi {
                    break;
                }
                i -= 1;
            }
        }
        Ok(total)
    }
}

/// A modulus of continuity, evaluated from `λ = ln r`.
#[derive(Clone, Debug, PartialEq)]
pub enum Modulus<T> {
    /// `z (a - ln z)^{1+ε}` on `z ≤ e^{a-1-ε}`.
    Catalog { a: T, eps: T },
    /// `slope · z`; Osgood, kept for the negative paths.
    Linear { slope: T },
    Tabulated(Table<T>),
    Auxiliary(Box<Auxiliary<T>>),
}

impl<T: Real> Modulus<T> {
    pub fn catalog(a: T, eps: T) -> Self {
        assert!(eps > T::zero(), "catalog exponent must be positive");
        Modulus::Catalog { a, eps }
    }

    /// Parses `catalog(a=2, eps=1)`, `linear(slope=1)` or `table("path.csv")`.
    /// Relative table paths resolve against `base_dir`.
    pub fn parse(spec: &str, base_dir: &Path) -> Result<Self> {
        let s = spec.trim();
        let err = || MocError::Parse(spec.to_string());
        let (head, rest) = s.split_once('(').ok_or_else(err)?;
        let body = rest.strip_suffix(')').ok_or_else(err)?.trim();
        let kv = |name: &str| -> Option<f64> {
            body.split(',').find_map(|part| {
                let (k, v) = part.split_once('=')?;
                (k.trim() == name).then(|| v.trim().parse::<f64>().ok()).flatten()
            })
        };
        match head.trim() {
            "catalog" => {
                let a = kv("a").ok_or_else(err)?;
                let eps = kv("eps").ok_or_else(err)?;
                if !(eps > 0.0) {
                    return Err(err());
                }
                Ok(Modulus::catalog(T::lit(a), T::lit(eps)))
            }
            "linear" => Ok(Modulus::Linear { slope: T::lit(kv("slope").unwrap_or(1.0)) }),
            "table" => {
                let p = body.trim_matches('"');
                let path = base_dir.join(p);
                Ok(Modulus::Tabulated(Table::from_csv(&path)?))
            }
            _ => Err(err()),
        }
    }

    /// Short textual form, stable across runs.
    pub fn describe(&self) -> String {
        match self {
            Modulus::Catalog { a, eps } => format!("catalog(a={a}, eps={eps})"),
            Modulus::Linear { slope } => format!("linear(slope={slope})"),
            Modulus::Tabulated(t) => format!("table({} rows)", t.ln_r.len()),
            Modulus::Auxiliary(x) => format!("auxiliary(depth={}, base={})", x.depth(), x.base.describe()),
        }
    }

    /// `ln r` of the domain max.
    pub fn ln_max(&self) -> T {
        match self {
            Modulus::Catalog { a, eps } => *a - T::one() - *eps,
            Modulus::Linear { .. } => T::infinity(),
            Modulus::Tabulated(t) => t.ln_r[0],
            Modulus::Auxiliary(x) => x.base.ln_max(),
        }
    }

    fn check_domain(&self, l: T) -> Result<()> {
        let max = self.ln_max();
        if l > max || l.is_nan() {
            return Err(MocError::Domain { log_r: l.to_f64_lossy(), max: max.to_f64_lossy() });
        }
        Ok(())
    }

    /// `ln ω(e^λ)`, finite for λ far below the `f64` exponent range.
    pub fn ln_eval(&self, l: T) -> Result<T> {
        self.check_domain(l)?;
        Ok(match self {
            Modulus::Catalog { a, eps } => l + (T::one() + *eps) * (*a - l).ln(),
            Modulus::Linear { slope } => slope.ln() + l,
            Modulus::Tabulated(t) => t.ln_eval(l),
            Modulus::Auxiliary(x) => x.ln_eval(l)?,
        })
    }

    /// `ln(r/ω(r))` at `r = e^λ`, formed without cancelling two large logs.
    pub fn ln_r_over_omega(&self, l: T) -> Result<T> {
        self.check_domain(l)?;
        Ok(match self {
            Modulus::Catalog { a, eps } => -(T::one() + *eps) * (*a - l).ln(),
            Modulus::Linear { slope } => -slope.ln(),
            Modulus::Tabulated(t) => t.ln_r_over_omega(l),
            Modulus::Auxiliary(x) => {
                let d = x.depth();
                if l >= T::zero() {
                    x.base.ln_r_over_omega(l)?
                } else if l < x.ln_knots[d - 1] {
                    x.base.ln_r_over_omega(l)? + x.a[d - 1].ln()
                } else {
                    l - x.ln_eval(l)?
                }
            }
        })
    }

    /// `ω(e^λ)`.
    pub fn eval(&self, l: T) -> Result<T> {
        if l == T::neg_infinity() {
            return Ok(T::zero());
        }
        Ok(self.ln_eval(l)?.exp())
    }

    /// `ω(r)` for a plain length.
    pub fn eval_r(&self, r: T) -> Result<T> {
        if r <= T::zero() {
            return Ok(T::zero());
        }
        self.eval(r.ln())
    }

    /// Closed-form antiderivative `Ω(e^λ)` when the family has one.
    fn closed_form(&self, l: T) -> Option<T> {
        match self {
            Modulus::Catalog { a, eps } => {
                if l == T::neg_infinity() {
                    Some(T::zero())
                } else {
                    Some((*a - l).powf(-*eps) / *eps)
                }
            }
            _ => None,
        }
    }

    /// `∫_{e^{la}}^{e^{lb}} ds / ω(s)`; `la` may be `-∞`.
    pub fn osgood(&self, la: T, lb: T) -> Result<T> {
        self.check_domain(lb)?;
        if !(la <= lb) {
            return Err(MocError::Domain { log_r: la.to_f64_lossy(), max: lb.to_f64_lossy() });
        }
        if la == lb {
            return Ok(T::zero());
        }
        if let Modulus::Catalog { a, eps } = self {
            let fb = self.closed_form(lb).unwrap_or_else(T::zero);
            if la == T::neg_infinity() {
                return Ok(fb);
            }
            // F(lb) - F(la) without cancellation when la and lb are close.
            let q = ((lb - la) / (*a - lb)).ln_1p();
            return Ok(-fb * (-*eps * q).exp_m1());
        }
        match self {
            Modulus::Tabulated(t) => t.osgood(la, lb),
            Modulus::Linear { slope } => {
                if la == T::neg_infinity() {
                    Err(MocError::Divergence { reached: f64::NEG_INFINITY })
                } else {
                    Ok((lb - la) / *slope)
                }
            }
            Modulus::Auxiliary(x) => x.osgood(la, lb),
            _ => self.osgood_quadrature(la, lb),
        }
    }

    /// Quadrature of `e^λ/ω(e^λ)` in `λ`, ignoring any closed form.
    pub fn osgood_quadrature(&self, la: T, lb: T) -> Result<T> {
        self.check_domain(lb)?;
        let f = |l: T| -> T {
            match self.ln_r_over_omega(l) {
                Ok(v) => v.exp(),
                Err(_) => T::nan(),
            }
        };
        let tol = T::lit(QUAD_REL_TOL).max(T::epsilon() * T::lit(64.0));
        if la > T::neg_infinity() {
            return adaptive(&f, la, lb, tol);
        }
        integrate_to_minus_infinity(&f, lb, tol)
    }

    /// `Ω(e^λ) = ∫_0^{e^λ} ds/ω(s)`.
    pub fn omega_int(&self, l: T) -> Result<T> {
        self.osgood(T::neg_infinity(), l)
    }

    /// `Δ ≥ 0` with `Ω(e^{l0+Δ}) − Ω(e^{l0}) = chi`, resolved relative to `l0`.
    pub fn osgood_step_up(&self, l0: T, chi: T) -> Result<T> {
        if !(chi > T::zero()) {
            return Ok(T::zero());
        }
        if let Modulus::Catalog { a, eps } = self {
            let f0 = self.closed_form(l0).unwrap_or_else(T::zero);
            let room = *a - l0;
            if f0 > T::zero() {
                let q = (chi / f0).ln_1p();
                let d = -room * (-q / *eps).exp_m1();
                if d < self.ln_max() - l0 {
                    return Ok(d);
                }
            }
        }
        let top = self.ln_max();
        let cap = if top.is_finite() { top - l0 } else { T::infinity() };
        if cap.is_finite() && self.osgood(l0, top)? < chi {
            return Err(MocError::Range { y: chi.to_f64_lossy(), max: self.osgood(l0, top)?.to_f64_lossy() });
        }
        let mut hi = T::one().min(cap);
        while self.osgood(l0, l0 + hi)? < chi {
            hi = (hi + hi).min(cap);
        }
        self.bisect_step(|d| self.osgood(l0, l0 + d), hi, chi)
    }

    /// `Ω(e^{base+rb}) − Ω(e^{base+ra})` for `ra ≤ rb`, without forming `base + r`.
    /// Keeps relative accuracy when `|base|` dwarfs the offsets.
    pub fn osgood_split(&self, base: T, ra: T, rb: T) -> Result<T> {
        if let Modulus::Catalog { a, eps } = self {
            if base + rb <= self.ln_max() && ra <= rb {
                if ra == T::neg_infinity() {
                    return self.omega_int(base + rb);
                }
                let vb = (*a - base) - rb;
                let q = (*eps * ((rb - ra) / vb).ln_1p()).neg();
                return Ok(-vb.powf(-*eps) / *eps * q.exp_m1());
            }
        }
        self.osgood(base + ra, base + rb)
    }

    /// `Δ ≥ 0` with `Ω(e^{l1}) − Ω(e^{l1−Δ}) = rem`; infinite when `rem ≥ Ω(e^{l1})`.
    pub fn osgood_step_down(&self, l1: T, rem: T) -> Result<T> {
        if !(rem > T::zero()) {
            return Ok(T::zero());
        }
        let total = self.omega_int(l1)?;
        if rem >= total {
            return Ok(T::infinity());
        }
        if let Modulus::Catalog { a, eps } = self {
            let q = (-rem / total).ln_1p();
            return Ok((*a - l1) * (-q / *eps).exp_m1());
        }
        let mut hi = T::one();
        while self.osgood(l1 - hi, l1)? < rem {
            hi = hi + hi;
        }
        self.bisect_step(|d| self.osgood(l1 - d, l1), hi, rem)
    }

    // Bisection for the increasing map `g` on `[0, hi]`.
    fn bisect_step<G: Fn(T) -> Result<T>>(&self, g: G, hi: T, y: T) -> Result<T> {
        let (mut lo, mut hi) = (T::zero(), hi);
        for _ in 0..200 {
            let mid = lo + (hi - lo) / T::lit(2.0);
            if mid <= lo || mid >= hi {
                break;
            }
            if g(mid)? < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(lo + (hi - lo) / T::lit(2.0))
    }

    /// `ln r` with `Ω(r) = y`.
    pub fn inverse_osgood(&self, y: T) -> Result<T> {
        let lmax = self.ln_max();
        let ymax = if lmax.is_finite() { self.omega_int(lmax)? } else { T::infinity() };
        if !(y > T::zero()) || !(y < ymax) {
            return Err(MocError::Range { y: y.to_f64_lossy(), max: ymax.to_f64_lossy() });
        }
        if let Modulus::Catalog { a, eps } = self {
            return Ok(*a - (*eps * y).powf(-T::one() / *eps));
        }
        // Bracket from the top, tracking Ω at the lower end so each bisection
        // step only integrates the increment.
        let mut hi = if lmax.is_finite() { lmax } else { T::zero() };
        let mut f_hi = self.omega_int(hi)?;
        while f_hi < y {
            hi = hi + T::one();
            f_hi = self.omega_int(hi)?;
        }
        let mut step = T::one();
        let mut lo = hi - step;
        let mut f_lo = self.omega_int(lo)?;
        while f_lo >= y {
            hi = lo;
            step = step + step;
            lo = hi - step;
            f_lo = self.omega_int(lo)?;
            if lo < T::lit(-1e300) {
                return Err(MocError::Range { y: y.to_f64_lossy(), max: ymax.to_f64_lossy() });
            }
        }
        let tol = T::lit(INVERSE_ABS_TOL).max(T::epsilon() * lo.abs().max(T::one()) * T::lit(4.0));
        while hi - lo > tol {
            let mid = lo + (hi - lo) / T::lit(2.0);
            if mid <= lo || mid >= hi {
                break;
            }
            let f_mid = f_lo + self.osgood(lo, mid)?;
            if f_mid < y {
                lo = mid;
                f_lo = f_mid;
            } else {
                hi = mid;
            }
        }
        Ok(lo + (hi - lo) / T::lit(2.0))
    }
}

// Gauss-Kronrod 7/15 nodes on [-1, 1].
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15<T: Real, F: Fn(T) -> T>(f: &F, a: T, b: T) -> (T, T) {
    let c = (a + b) / T::lit(2.0);
    let h = (b - a) / T::lit(2.0);
    let fc = f(c);
    let mut k = fc * T::lit(WGK[7]);
    let mut g = fc * T::lit(WG[3]);
    for j in 0..7 {
        let dx = h * T::lit(XGK[j]);
        let s = f(c - dx) + f(c + dx);
        k = k + s * T::lit(WGK[j]);
        if j % 2 == 1 {
            g = g + s * T::lit(WG[j / 2]);
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss-Kronrod quadrature to relative tolerance `tol`.
pub fn adaptive<T: Real, F: Fn(T) -> T>(f: &F, a: T, b: T, tol: T) -> Result<T> {
    let fail = || MocError::Quadrature { a: a.to_f64_lossy(), b: b.to_f64_lossy() };
    let mut pieces = vec![(a, b, gk15(f, a, b))];
    for _ in 0..4000 {
        let total: T = pieces.iter().fold(T::zero(), |s, p| s + p.2 .0);
        let err: T = pieces.iter().fold(T::zero(), |s, p| s + p.2 .1);
        if !total.is_finite() {
            return Err(fail());
        }
        if err <= tol * total.abs() || err <= T::min_positive_value() {
            return Ok(total);
        }
        let (idx, _) = pieces
            .iter()
            .enumerate()
            .fold((0, T::zero()), |best, (i, p)| if p.2 .1 > best.1 { (i, p.2 .1) } else { best });
        let (lo, hi, _) = pieces.swap_remove(idx);
        let mid = lo + (hi - lo) / T::lit(2.0);
        if mid <= lo || mid >= hi {
            return Err(fail());
        }
        pieces.push((lo, mid, gk15(f, lo, mid)));
        pieces.push((mid, hi, gk15(f, mid, hi)));
    }
    Err(fail())
}

// Chunks [lb - 2^{j+1}, lb - 2^j] until the contribution is negligible, with a
// geometric tail estimate once chunk ratios settle.
fn integrate_to_minus_infinity<T: Real, F: Fn(T) -> T>(f: &F, lb: T, tol: T) -> Result<T> {
    let mut total = adaptive(f, lb - T::one(), lb, tol)?;
    let mut width = T::one();
    let mut prev_chunk: Option<T> = None;
    let mut prev_ratio: Option<T> = None;
    loop {
        let hi = lb - width;
        let lo = lb - width * T::lit(2.0);
        if !lo.is_finite() || lo < T::lit(-1e300) {
            return Err(MocError::Divergence { reached: lo.to_f64_lossy() });
        }
        let chunk = adaptive(f, lo, hi, tol)?;
        total = total + chunk;
        if chunk <= tol * total * T::lit(0.01) {
            return Ok(total);
        }
        if let Some(p) = prev_chunk {
            let ratio = chunk / p;
            if let Some(q) = prev_ratio {
                // Geometric tail; its error is driven by how far the ratio still drifts.
                if ratio < T::lit(0.999) {
                    let gap = T::one() - ratio;
                    let tail = chunk * ratio / gap;
                    let drift = (ratio - q).abs() * chunk / (gap * gap);
                    if drift <= tol * total {
                        return Ok(total + tail);
                    }
                } else if width > T::lit(1e6) {
                    return Err(MocError::Divergence { reached: lo.to_f64_lossy() });
                }
            }
            prev_ratio = Some(ratio);
        }
        prev_chunk = Some(chunk);
        width = width * T::lit(2.0);
    }
}

/// Builds the piecewise-affine auxiliary modulus of a non-Osgood modulus.
///
/// `ā_n` uses tail thresholds scaled by the certified total `B = Σ b_n`:
/// `n_1 = 1` and, for `k ≥ 2`, `n_k` is the least index past `n_{k-1}` whose
/// certified tail is below `B 2^{1-k}`.
pub fn build_auxiliary<T: Real>(m: &Modulus<T>, depth: usize) -> Result<Modulus<T>> {
    if depth < 2 {
        return Err(MocError::Construction("depth must be at least 2".into()));
    }
    if m.ln_max() < T::zero() {
        return Err(MocError::Construction("base modulus must be defined on [0, 1]".into()));
    }
    // Non-Osgood check; propagates a divergence error otherwise.
    m.omega_int(T::zero())?;
    let ln_w1 = m.ln_eval(T::zero())?;
    let w1 = ln_w1.exp();
    let ln2 = T::LN_2();
    // Knots r_1..r_{D+1}: the extra one closes b_D.
    let mut ln_knots = vec![T::zero()];
    let mut truncated = false;
    let floor = T::lit(-700.0).max(T::min_positive_value().ln() + T::lit(40.0));
    for n in 2..=depth + 1 {
        let target = ln_w1 - T::from_usize(n - 1).unwrap() * ln2;
        let prev = *ln_knots.last().unwrap();
        match solve_ln_omega(m, target, prev) {
            Ok(l) if l > floor => ln_knots.push(l),
            Ok(_) => {
                truncated = true;
                break;
            }
            Err(e) => return Err(MocError::Construction(format!("root for r_{n}: {e}"))),
        }
    }
    if ln_knots.len() < 3 {
        return Err(MocError::Construction("knot list collapsed".into()));
    }
    let d = ln_knots.len() - 1;
    let knots: Vec<T> = ln_knots.iter().map(|l| l.exp()).collect();
    let pow2 = |n: usize| T::lit(2.0).powi(n as i32);
    let b: Vec<T> = (1..=d).map(|n| pow2(n) * (knots[n - 1] - knots[n])).collect();
    // tail(n) ≤ Σ_{j=n}^{d} b_j + 2 ω(1) Ω(r_{d+1}).
    let rest = T::lit(2.0) * w1 * m.omega_int(ln_knots[d])?;
    let mut tail = vec![T::zero(); d + 1];
    tail[d] = rest;
    for n in (1..=d).rev() {
        tail[n - 1] = tail[n] + b[n - 1];
    }
    let b_total = tail[0];
    let mut abar = vec![T::one(); d];
    let mut k = 1usize;
    let mut n_prev = 1usize;
    for n in 2..=d {
        // ā_n = k for n_{k-1} < n ≤ n_k; advance k once the threshold for the
        // current block has been reached at n_prev.
        if tail[n_prev - 1] < b_total * T::lit(2.0).powi(1 - k as i32) || k == 1 {
            k += 1;
        }
        abar[n - 1] = T::from_usize(k).unwrap();
        if tail[n - 1] < b_total * T::lit(2.0).powi(1 - k as i32) {
            n_prev = n;
        }
    }
    let mut a = vec![T::one(); d];
    for n in 1..d {
        let ratio = (b[n] + b[n - 1]) / (T::lit(2.0) * b[n]);
        a[n] = (ratio * a[n - 1]).min(abar[n]);
    }
    let values: Vec<T> = (0..d)
        .map(|i| (m.ln_eval(ln_knots[i]).map(|v| v.exp())).unwrap_or(T::zero()) / a[i])
        .collect();
    let aux = Auxiliary {
        base: m.clone(),
        ln_knots: ln_knots[..d].to_vec(),
        knots: knots[..d].to_vec(),
        values,
        a,
        abar,
        b,
        b_total,
        truncated,
    };
    let slopes = aux.slopes();
    let slack = T::lit(CONCAVITY_SLACK);
    for w in slopes.windows(2) {
        if w[1] + slack * w[1].abs().max(T::one()) < w[0] {
            return Err(MocError::Construction("affine slopes are not monotone".into()));
        }
    }
    Ok(Modulus::Auxiliary(Box::new(aux)))
}

// Solves ln ω(λ) = target for λ < start by bracketing downward and bisecting.
fn solve_ln_omega<T: Real>(m: &Modulus<T>, target: T, start: T) -> Result<T> {
    let mut hi = start;
    let mut step = T::one();
    let mut lo = hi - step;
    while m.ln_eval(lo)? > target {
        hi = lo;
        step = step + step;
        lo = hi - step;
        if lo < T::lit(-1e300) {
            return Err(MocError::Construction("no root above -1e300".into()));
        }
    }
    for _ in 0..400 {
        let mid = lo + (hi - lo) / T::lit(2.0);
        if mid <= lo || mid >= hi {
            break;
        }
        if m.ln_eval(mid)? > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(lo + (hi - lo) / T::lit(2.0))
}

/// `(ω, ω̃)` together with the weight `W(r) = inf_{s≤r} ω(s)/ω̃(s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulusPair<T> {
    pub omega: Modulus<T>,
    pub omega_tilde: Modulus<T>,
    /// Width in `λ` of the window searched by the sampled infimum.
    pub lambda_span: T,
}

/// Default search window for the sampled weight, in e-folds below `r`.
pub const DEFAULT_LAMBDA_SPAN: f64 = 200.0;

impl<T: Real> ModulusPair<T> {
    pub fn new(omega: Modulus<T>, omega_tilde: Modulus<T>) -> Result<Self> {
        let pair = ModulusPair { omega, omega_tilde, lambda_span: T::lit(DEFAULT_LAMBDA_SPAN) };
        // ω̃ ≤ ω on a λ grid over (e^{-60}, 1].
        let top = T::zero().min(pair.omega.ln_max()).min(pair.omega_tilde.ln_max());
        for i in 0..=240 {
            let l = top - T::lit(0.25) * T::from_usize(i).unwrap();
            let w = pair.omega.ln_eval(l)?;
            let wt = pair.omega_tilde.ln_eval(l)?;
            if wt > w + T::lit(1e-12) {
                return Err(MocError::Construction(format!(
                    "ω̃ exceeds ω at ln r = {}",
                    l.to_f64_lossy()
                )));
            }
        }
        Ok(pair)
    }

    /// The catalog pair `ω = ω_{2,1}`, `ω̃ = ω_{2,1/2}`.
    pub fn default_pair() -> Self {
        ModulusPair {
            omega: Modulus::catalog(T::lit(2.0), T::one()),
            omega_tilde: Modulus::catalog(T::lit(2.0), T::lit(0.5)),
            lambda_span: T::lit(DEFAULT_LAMBDA_SPAN),
        }
    }

    fn ln_ratio(&self, l: T) -> T {
        match (self.omega.ln_eval(l), self.omega_tilde.ln_eval(l)) {
            (Ok(a), Ok(b)) => a - b,
            _ => T::infinity(),
        }
    }

    /// `W(e^λ)`.
    pub fn weight(&self, l: T) -> T {
        self.ln_weight(l).exp()
    }

    /// `ln W(e^λ)`; stays finite where `W` itself would overflow.
    pub fn ln_weight(&self, l: T) -> T {
        if self.omega == self.omega_tilde {
            return T::zero();
        }
        if let (Modulus::Catalog { a, eps }, Modulus::Catalog { a: at, eps: et }) =
            (&self.omega, &self.omega_tilde)
        {
            // Same offset and a larger exponent on ω: the ratio (a-λ)^{ε-ε̃}
            // decreases in r, so the infimum sits at s = r.
            if a == at && eps >= et {
                return (*eps - *et) * (*a - l).ln();
            }
        }
        self.sampled_ln_weight(l)
    }

    /// Grid plus golden-section infimum of `ln(ω/ω̃)` over `[λ - span, λ]`.
    pub fn sampled_ln_weight(&self, l: T) -> T {
        let n = 2048usize;
        let lo = l - self.lambda_span;
        let h = self.lambda_span / T::from_usize(n).unwrap();
        let mut best = (l, self.ln_ratio(l));
        for i in 0..=n {
            let x = lo + h * T::from_usize(i).unwrap();
            let v = self.ln_ratio(x);
            if v < best.1 {
                best = (x, v);
            }
        }
        let (mut a, mut b) = ((best.0 - h).max(lo), (best.0 + h).min(l));
        let g = T::lit(0.618_033_988_749_894_9);
        for _ in 0..80 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if self.ln_ratio(c) < self.ln_ratio(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let mid = (a + b) / T::lit(2.0);
        best.1.min(self.ln_ratio(mid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cat(a: f64, eps: f64) -> Modulus<f64> {
        Modulus::catalog(a, eps)
    }

    #[test]
    fn catalog_values() {
        assert_relative_eq!(cat(2.0, 0.5).eval(0.0).unwrap(), 2.0f64.powf(1.5), max_relative = 1e-15);
        let v = cat(2.0, 1.0).eval((0.25f64).ln()).unwrap();
        assert_relative_eq!(v, 0.25 * (2.0 + 4f64.ln()).powi(2), max_relative = 1e-15);
        assert!((v - 2.866747).abs() < 5e-7);
    }

    #[test]
    fn deep_log_evaluation() {
        let m = cat(2.0, 0.5);
        let lw = m.ln_eval(-1e6).unwrap();
        assert_relative_eq!(lw, -1e6 + 1.5 * (2.0f64 + 1e6).ln(), max_relative = 1e-15);
        assert_eq!(m.eval(-1e6).unwrap(), 0.0);
        assert!(m.eval(1.0).is_err());
    }

    #[test]
    fn closed_form_integral_and_inverse() {
        let m = cat(2.0, 0.5);
        let y = m.omega_int((0.25f64).ln()).unwrap();
        assert!((y - 1.086845).abs() < 5e-7);
        let y8 = m.omega_int((0.125f64).ln()).unwrap();
        assert!((y8 - 0.990215).abs() < 5e-7);
        let l = m.inverse_osgood(0.990215).unwrap();
        assert!((l - (-2.079442)).abs() < 5e-6);
        assert_relative_eq!(l, 2.0 - 4.0 / (0.990215f64 * 0.990215), max_relative = 1e-14);
    }

    #[test]
    fn quadrature_matches_closed_form() {
        for &(a, eps) in &[(2.0, 0.5), (2.0, 1.0), (3.0, 0.25)] {
            let m = cat(a, eps);
            for &l in &[-0.3, -1.0, -5.0, -40.0] {
                let q = m.osgood_quadrature(f64::NEG_INFINITY, l).unwrap();
                let c = m.omega_int(l).unwrap();
                assert_relative_eq!(q, c, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn lipschitz_integral_over_one_efold() {
        let m = Modulus::Linear { slope: 1.0 };
        assert_relative_eq!(m.osgood(-1.0, 0.0).unwrap(), 1.0, max_relative = 1e-15);
        assert!(matches!(m.omega_int(0.0), Err(MocError::Divergence { .. })));
        assert!(matches!(m.osgood_quadrature(f64::NEG_INFINITY, 0.0), Err(MocError::Divergence { .. })));
    }

    #[test]
    fn table_interpolation_and_rejection() {
        let m = cat(2.0, 1.0);
        let rows: Vec<(f64, f64)> = (0..200).map(|i| {
            let l = -0.05 * i as f64;
            (l, m.eval(l).unwrap())
        }).collect();
        let t = Modulus::Tabulated(Table::new(&rows).unwrap());
        let l = -3.333;
        assert_relative_eq!(t.eval(l).unwrap(), m.eval(l).unwrap(), max_relative = 1e-4);
        let y = t.omega_int(-2.0).unwrap();
        let back = t.inverse_osgood(y).unwrap();
        assert!((back + 2.0).abs() < 1e-11);
        // A convex segment is rejected.
        let bad = [(0.0, 1.0), (-1.0, (-2.0f64).exp())];
        assert!(Table::new(&bad).is_err());
    }

    #[test]
    fn table_closed_form_matches_quadrature() {
        let m = cat(2.0, 1.0);
        let rows: Vec<(f64, f64)> = (0..60).map(|i| {
            let l = -0.25 * i as f64;
            (l, m.eval(l).unwrap())
        }).collect();
        let t = Modulus::Tabulated(Table::new(&rows).unwrap());
        for &(la, lb) in &[(-3.0, -0.5), (-20.0, -14.9), (-40.0, -2.0)] {
            let c = t.osgood(la, lb).unwrap();
            let q = t.osgood_quadrature(la, lb).unwrap();
            assert_relative_eq!(c, q, max_relative = 1e-9);
        }
        let full = t.omega_int(-1.0).unwrap();
        let q = t.osgood_quadrature(f64::NEG_INFINITY, -1.0).unwrap();
        assert_relative_eq!(full, q, max_relative = 1e-8);
    }

    #[test]
    fn deep_catalog_differences_keep_precision() {
        let m = cat(2.0, 0.5);
        // At λ ≈ -1e40 the two values agree to 40 digits; their gap is still resolved.
        let l = -1e40;
        let d = m.osgood(l - 1.0, l).unwrap();
        let exact = 2.0 * (2.0 - l).powf(-0.5) * 0.25 / (2.0 - l);
        assert_relative_eq!(d, exact, max_relative = 1e-10);
    }

    #[test]
    fn step_inverses_agree_with_differences() {
        let cat_m = cat(2.0, 0.5);
        let rows: Vec<(f64, f64)> = (0..80).map(|i| {
            let l = -0.25 * i as f64;
            (l, cat(2.0, 1.0).eval(l).unwrap())
        }).collect();
        let tab = Modulus::Tabulated(Table::new(&rows).unwrap());
        for m in [&cat_m, &tab] {
            for &(l0, frac) in &[(-5.0, 0.01), (-30.0, 0.2), (-1e3, 0.5)] {
                let chi = frac * m.omega_int(l0).unwrap();
                let d = m.osgood_step_up(l0, chi).unwrap();
                assert_relative_eq!(m.osgood(l0, l0 + d).unwrap(), chi, max_relative = 1e-9);
                let back = m.osgood_step_down(l0 + d, chi).unwrap();
                assert_relative_eq!(back, d, max_relative = 1e-8);
            }
        }
        // Deep in the log domain the step is still resolved.
        let d = cat_m.osgood_step_up(-1e40, 1e-61).unwrap();
        assert!(d > 0.0 && d.is_finite());
        assert!(cat_m.osgood_step_down(-3.0, 10.0).unwrap().is_infinite());
    }

    #[test]
    fn inverse_by_bisection_on_aux() {
        let aux = build_auxiliary(&cat(2.0, 1.0), 12).unwrap();
        for &y in &[0.05, 0.3, 0.7] {
            let l = aux.inverse_osgood(y).unwrap();
            let back = aux.omega_int(l).unwrap();
            assert_relative_eq!(back, y, max_relative = 1e-12);
        }
    }

    #[test]
    fn auxiliary_depth_20() {
        let base = cat(2.0, 1.0);
        let aux = build_auxiliary(&base, 20).unwrap();
        let Modulus::Auxiliary(x) = &aux else { panic!() };
        assert_eq!(x.a[0], 1.0);
        let w1 = base.eval(0.0).unwrap();
        let r5 = base.eval(x.ln_knots[4]).unwrap();
        assert!((r5 / w1 - 1.0 / 16.0).abs() < 1e-10);
        for w in x.slopes().windows(2) {
            assert!(w[1] >= w[0]);
        }
        for i in 0..x.depth() {
            assert!(x.values[i] <= base.eval(x.ln_knots[i]).unwrap());
        }
        for w in x.a.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let sums = x.certificate_partial_sums();
        assert!(sums.iter().all(|&s| s <= x.certificate_bound()));
    }

    #[test]
    fn auxiliary_rejects_osgood_base() {
        let r = build_auxiliary(&Modulus::Linear { slope: 1.0 }, 5);
        assert!(matches!(r, Err(MocError::Divergence { .. })));
    }

    #[test]
    fn weight_examples() {
        let p = ModulusPair::<f64>::default_pair();
        let w = p.weight((0.25f64).ln());
        assert_relative_eq!(w, (2.0 + 4f64.ln()).sqrt(), max_relative = 1e-14);
        assert!((w - 1.840189).abs() < 5e-7);
        let same = ModulusPair::new(cat(2.0, 1.0), cat(2.0, 1.0)).unwrap();
        assert_eq!(same.weight(-3.0), 1.0);
        // The sampled path agrees with the closed form on a monotone pair.
        let sampled = p.sampled_ln_weight(-2.0).exp();
        assert_relative_eq!(sampled, p.weight(-2.0), max_relative = 1e-9);
    }

    #[test]
    fn pair_rejects_larger_tilde() {
        assert!(ModulusPair::new(cat(2.0, 0.5), cat(2.0, 1.0)).is_err());
    }

    #[test]
    fn parse_specs() {
        let m: Modulus<f64> = Modulus::parse("catalog(a=2, eps=1)", Path::new(".")).unwrap();
        assert_eq!(m, cat(2.0, 1.0));
        assert!(Modulus::<f64>::parse("catalog(a=2)", Path::new(".")).is_err());
        assert!(matches!(Modulus::<f64>::parse("linear()", Path::new(".")), Ok(Modulus::Linear { .. })));
    }

    #[test]
    fn generic_f32_catalog() {
        let m: Modulus<f32> = Modulus::catalog(2.0, 0.5);
        let y = m.omega_int(0.25f32.ln()).unwrap();
        assert!((y - 1.086845).abs() < 1e-5);
    }

    #[test]
    fn split_difference_matches_plain_and_survives_deep_bases() {
        use std::f64::consts::LN_2;
        let m = Modulus::catalog(2.0, 0.5);
        let plain = m.osgood(-9.0, -3.0).unwrap();
        let split = m.osgood_split(-5.0, -4.0, 2.0).unwrap();
        assert_relative_eq!(plain, split, max_relative = 1e-13);
        // Base −1e13: Ω̃ ≈ 2u^{−1/2}, so one halving step is ≈ ln2·u^{−3/2}.
        let base = -1.0e13;
        let w = m.osgood_split(base, -3.0 * LN_2, -2.0 * LN_2).unwrap();
        let u: f64 = 2.0 - base;
        assert_relative_eq!(w, LN_2 * u.powf(-1.5), max_relative = 1e-9);
    }
}
