//! Cantor alphabet, generation lengths, cube centers and the target map.

use crate::Real;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is outside Cantor generation {generation} (coordinate {axis})")]
    Location { generation: usize, axis: usize },
    #[error("generation {generation} has side e^{ln_len}, below the resolvable scale")]
    Unresolvable { generation: usize, ln_len: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("bad symbol string `{0}`")]
    Parse(String),
    #[error("length sequence: {0}")]
    Lengths(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Smallest side length that is materialized as a plain coordinate.
pub const MIN_RESOLVED_LEN: f64 = 1e-300;

/// A word `σ₁ … σ_n` over `{−1, +1}^d`, one packed bit per sign (`1` is `+1`).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SymbolString {
    d: usize,
    bits: Vec<u64>,
}

impl SymbolString {
    pub fn empty(d: usize) -> Self {
        assert!((1..=64).contains(&d), "dimension must be in 1..=64");
        SymbolString { d, bits: Vec::new() }
    }

    /// Builds from rows of `±1` entries.
    pub fn from_signs(d: usize, rows: &[Vec<i8>]) -> Self {
        let mut s = Self::empty(d);
        for r in rows {
            s.push(r);
        }
        s
    }

    /// Symbol whose `i`-th sign is bit `i` of `mask`.
    pub fn push_mask(&mut self, mask: u64) {
        let m = if self.d == 64 { mask } else { mask & ((1u64 << self.d) - 1) };
        self.bits.push(m);
    }

    pub fn push(&mut self, signs: &[i8]) {
        assert_eq!(signs.len(), self.d);
        let mut m = 0u64;
        for (i, &s) in signs.iter().enumerate() {
            assert!(s == 1 || s == -1, "symbol entries must be ±1");
            if s > 0 {
                m |= 1 << i;
            }
        }
        self.bits.push(m);
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Sign of coordinate `i` in generation `j` (1-based).
    pub fn sign(&self, j: usize, i: usize) -> i8 {
        if self.bits[j - 1] >> i & 1 == 1 {
            1
        } else {
            -1
        }
    }

    pub fn mask(&self, j: usize) -> u64 {
        self.bits[j - 1]
    }

    /// `σ_j` as a real vector.
    pub fn symbol<T: Real>(&self, j: usize) -> Vec<T> {
        (0..self.d).map(|i| if self.sign(j, i) > 0 { T::one() } else { -T::one() }).collect()
    }

    /// `σ′`: drops the last generation.
    pub fn prefix(&self) -> Self {
        let mut s = self.clone();
        s.bits.pop();
        s
    }

    /// The first `n` generations.
    pub fn truncate(&self, n: usize) -> Self {
        SymbolString { d: self.d, bits: self.bits[..n.min(self.len())].to_vec() }
    }

    /// `self ⊂ other` in the prefix order.
    pub fn is_prefix_of(&self, other: &Self) -> bool {
        self.d == other.d && self.len() <= other.len() && other.bits[..self.len()] == self.bits[..]
    }

    pub fn parse(text: &str) -> Result<Self> {
        let groups: Vec<&str> = text.split_whitespace().collect();
        let d = groups.first().map_or(0, |g| g.len());
        if d == 0 || d > 64 {
            return Err(GeometryError::Parse(text.into()));
        }
        let mut s = Self::empty(d);
        for g in groups {
            if g.len() != d {
                return Err(GeometryError::Parse(text.into()));
            }
            let mut m = 0u64;
            for (i, c) in g.chars().enumerate() {
                match c {
                    '+' => m |= 1 << i,
                    '-' => {}
                    _ => return Err(GeometryError::Parse(text.into())),
                }
            }
            s.bits.push(m);
        }
        Ok(s)
    }

    /// All words of length `n` in dimension `d`, in lexicographic mask order.
    pub fn all(d: usize, n: usize) -> Vec<Self> {
        let per = 1u64 << d;
        let total = per.pow(n as u32);
        (0..total)
            .map(|mut k| {
                let mut s = Self::empty(d);
                for _ in 0..n {
                    s.push_mask(k % per);
                    k /= per;
                }
                s
            })
            .collect()
    }
}

impl fmt::Display for SymbolString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for j in 1..=self.len() {
            if j > 1 {
                f.write_str(" ")?;
            }
            for i in 0..self.d {
                f.write_str(if self.sign(j, i) > 0 { "+" } else { "-" })?;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for SymbolString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymbolString({self})")
    }
}

impl Serialize for SymbolString {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SymbolString {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        SymbolString::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Growth sequence `η`, its cumulative sums `ν` and `ln ℓ_n = −(n + ν_n) ln 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthSequence<T> {
    eta: Vec<T>,
    nu: Vec<T>,
    ln_len: Vec<T>,
}

impl<T: Real> LengthSequence<T> {
    /// From `η₁ … η_N`; each `η_n ≥ 1` keeps `ℓ_{n+1} ≤ ℓ_n / 4`.
    pub fn from_eta(eta: &[T]) -> Result<Self> {
        let mut nu = vec![T::zero()];
        let mut ln_len = vec![T::zero()];
        for (k, &e) in eta.iter().enumerate() {
            if !(e >= T::one()) || !e.is_finite() {
                return Err(GeometryError::Lengths(format!("η_{} = {e} is below 1", k + 1)));
            }
            let n = T::from_usize(k + 1).unwrap();
            let v = nu[k] + e;
            nu.push(v);
            ln_len.push(-(n + v) * T::LN_2());
        }
        Ok(LengthSequence { eta: eta.to_vec(), nu, ln_len })
    }

    /// The uniform sequence `η ≡ 1`, so `ℓ_n = 4^{−n}`.
    pub fn uniform(n: usize) -> Self {
        Self::from_eta(&vec![T::one(); n]).expect("η ≡ 1 is valid")
    }

    /// Number of generations described.
    pub fn generations(&self) -> usize {
        self.eta.len()
    }

    pub fn eta(&self, n: usize) -> T {
        self.eta[n - 1]
    }

    pub fn nu(&self, n: usize) -> T {
        self.nu[n]
    }

    pub fn ln_len(&self, n: usize) -> T {
        self.ln_len[n]
    }

    /// `ℓ_n = 2^{−n−ν_n}`, which underflows to 0 for deep generations.
    pub fn len(&self, n: usize) -> T {
        (-(T::from_usize(n).unwrap() + self.nu[n])).exp2()
    }

    fn resolved_len(&self, n: usize) -> Result<T> {
        let l = self.ln_len[n];
        if l < T::lit(MIN_RESOLVED_LEN.ln()) {
            return Err(GeometryError::Unresolvable { generation: n, ln_len: l.to_f64_lossy() });
        }
        Ok(self.len(n))
    }

    /// Deepest generation whose side is still materialized.
    pub fn resolved_generations(&self) -> usize {
        (0..=self.generations()).take_while(|&n| self.resolved_len(n).is_ok()).last().unwrap_or(0)
    }
}

/// `p_{n,σ} = Σ_j (ℓ_{j−1}/4) σ_j`.
pub fn cantor_center<T: Real>(lens: &LengthSequence<T>, sigma: &SymbolString) -> Result<Vec<T>> {
    let mut p = vec![T::zero(); sigma.dim()];
    let quarter = T::lit(0.25);
    for j in 1..=sigma.len() {
        let l = lens.resolved_len(j - 1)? * quarter;
        for (i, pi) in p.iter_mut().enumerate() {
            *pi = if sigma.sign(j, i) > 0 { *pi + l } else { *pi - l };
        }
    }
    Ok(p)
}

/// `s_{n,σ} = Σ_j 2^{−j−1} σ_j`.
pub fn dyadic_center<T: Real>(sigma: &SymbolString) -> Vec<T> {
    let mut p = vec![T::zero(); sigma.dim()];
    let mut w = T::lit(0.25);
    for j in 1..=sigma.len() {
        for (i, pi) in p.iter_mut().enumerate() {
            *pi = if sigma.sign(j, i) > 0 { *pi + w } else { *pi - w };
        }
        w = w * T::lit(0.5);
    }
    p
}

/// Reads the first `n` symbols of `x` by nested sign descent. Ties at a
/// coordinate equal to the moving center resolve to `+1`.
pub fn locate_symbols<T: Real>(lens: &LengthSequence<T>, x: &[T], n: usize) -> Result<SymbolString> {
    let d = x.len();
    let mut sigma = SymbolString::empty(d);
    let mut c = vec![T::zero(); d];
    let half = T::lit(0.5);
    for j in 1..=n {
        let step = lens.resolved_len(j - 1)? * T::lit(0.25);
        let half_side = lens.resolved_len(j)? * half;
        let mut mask = 0u64;
        for i in 0..d {
            if x[i] >= c[i] {
                mask |= 1 << i;
                c[i] = c[i] + step;
            } else {
                c[i] = c[i] - step;
            }
            if (x[i] - c[i]).abs() > half_side {
                return Err(GeometryError::Location { generation: j, axis: i });
            }
        }
        sigma.push_mask(mask);
    }
    Ok(sigma)
}

/// `n`-term truncation of `S^η(x)`.
pub fn target_map<T: Real>(lens: &LengthSequence<T>, x: &[T], n: usize) -> Result<Vec<T>> {
    Ok(dyadic_center(&locate_symbols(lens, x, n)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s2(rows: &[[i8; 2]]) -> SymbolString {
        SymbolString::from_signs(2, &rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn centers_examples() {
        let l = LengthSequence::<f64>::uniform(8);
        assert_eq!(cantor_center(&l, &s2(&[[1, 1]])).unwrap(), vec![0.25, 0.25]);
        let s = s2(&[[1, 1], [-1, 1]]);
        assert_eq!(cantor_center(&l, &s).unwrap(), vec![3.0 / 16.0, 5.0 / 16.0]);
        assert_eq!(dyadic_center::<f64>(&s), vec![0.125, 0.375]);
        let p = cantor_center(&l, &s).unwrap();
        assert_eq!(target_map(&l, &p, 2).unwrap(), vec![0.125, 0.375]);
    }

    #[test]
    fn origin_is_in_the_gap() {
        let l = LengthSequence::<f64>::uniform(3);
        assert_eq!(
            locate_symbols(&l, &[0.0, 0.0], 1),
            Err(GeometryError::Location { generation: 1, axis: 0 })
        );
    }

    #[test]
    fn uniform_lengths_are_powers_of_four() {
        let l = LengthSequence::<f64>::uniform(6);
        for n in 0..=6 {
            assert_eq!(l.len(n), 4f64.powi(-(n as i32)));
        }
        assert!(LengthSequence::<f64>::from_eta(&[1.0, 0.5]).is_err());
    }

    #[test]
    fn deep_generations_are_refused() {
        let l = LengthSequence::<f64>::from_eta(&[1.0, 2000.0]).unwrap();
        let s = s2(&[[1, 1], [1, 1], [1, -1]]);
        assert!(matches!(cantor_center(&l, &s), Err(GeometryError::Unresolvable { generation: 2, .. })));
        assert_eq!(l.resolved_generations(), 1);
        assert!(l.ln_len(2) < -1300.0);
    }

    #[test]
    fn display_roundtrip() {
        let s = s2(&[[1, -1], [-1, -1]]);
        assert_eq!(s.to_string(), "+- --");
        assert_eq!(SymbolString::parse("+- --").unwrap(), s);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, "\"+- --\"");
        assert_eq!(serde_json::from_str::<SymbolString>(&json).unwrap(), s);
        assert!(s.prefix().is_prefix_of(&s));
    }

    #[test]
    fn face_ties_read_plus_then_fall_in_the_gap() {
        let l = LengthSequence::<f64>::uniform(3);
        // x₀ sits on the dividing plane of generation 1; the tie reads +1 and
        // the point is then outside the (+, ·) child along that axis.
        assert_eq!(
            locate_symbols(&l, &[0.0, 0.25], 1),
            Err(GeometryError::Location { generation: 1, axis: 0 })
        );
        let x = [0.25 + 1.0 / 16.0, 0.25 + 1.0 / 16.0];
        assert_eq!(locate_symbols(&l, &x, 2).unwrap(), s2(&[[1, 1], [1, 1]]));
    }

    fn word(d: usize, n: usize) -> impl Strategy<Value = SymbolString> {
        proptest::collection::vec(0u64..(1 << d), n).prop_map(move |ms| {
            let mut s = SymbolString::empty(d);
            for m in ms {
                s.push_mask(m);
            }
            s
        })
    }

    fn etas() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(1.0f64..3.0, 8)
    }

    proptest! {
        #[test]
        fn locate_inverts_center(w in word(3, 8), n in 1usize..9, eta in etas()) {
            let l = LengthSequence::from_eta(&eta).unwrap();
            let w = w.truncate(n);
            let p = cantor_center(&l, &w).unwrap();
            prop_assert_eq!(locate_symbols(&l, &p, n).unwrap(), w);
        }

        #[test]
        fn perturbed_center_keeps_symbols(w in word(2, 3), dx in -0.49f64..0.49, dy in -0.49f64..0.49) {
            let l = LengthSequence::<f64>::uniform(3);
            let p = cantor_center(&l, &w).unwrap();
            let x = [p[0] + dx * l.len(3), p[1] + dy * l.len(3)];
            prop_assert_eq!(locate_symbols(&l, &x, 3).unwrap(), w);
        }

        #[test]
        fn generations_nest(w in word(2, 8), eta in etas()) {
            let l = LengthSequence::from_eta(&eta).unwrap();
            let n = w.len();
            let c = cantor_center(&l, &w).unwrap();
            let cp = cantor_center(&l, &w.prefix()).unwrap();
            for i in 0..2 {
                prop_assert!((c[i] - cp[i]).abs() + l.len(n) / 2.0 <= l.len(n - 1) / 2.0 * (1.0 + 1e-12));
            }
            for i in 0..2 {
                prop_assert!(c[i].abs() + l.len(n) / 2.0 < 0.5);
            }
        }

        #[test]
        fn distinct_words_are_disjoint(a in word(2, 4), b in word(2, 4)) {
            prop_assume!(a != b);
            let l = LengthSequence::<f64>::uniform(4);
            let ca = cantor_center(&l, &a).unwrap();
            let cb = cantor_center(&l, &b).unwrap();
            let sep = (0..2).map(|i| (ca[i] - cb[i]).abs()).fold(0.0, f64::max);
            prop_assert!(sep >= l.len(4));
        }

        #[test]
        fn truncation_step_is_one_dyadic_term(w in word(2, 6)) {
            let l = LengthSequence::<f64>::uniform(6);
            let p = cantor_center(&l, &w).unwrap();
            let a = target_map(&l, &p, 5).unwrap();
            let b = target_map(&l, &p, 6).unwrap();
            let dist = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            prop_assert!(dist <= 2f64.powi(-6) * 2f64.sqrt() * (1.0 + 1e-12));
        }
    }
}
