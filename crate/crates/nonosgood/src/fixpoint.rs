//! Fixed-point families `B̄^k` (velocity) and `Θ̄^k` (density) unrolled to a
//! finite depth, together with the parameter tables that clock them.
//!
//! Lengths `ℓ_k` underflow `f64` from `k = 1` on, so lengths are stored as
//! `ln ℓ_k`, radii at level `k` as offsets `ln r − ln ℓ_k`, and points handed to
//! the level-`k` field are frame coordinates `ξ = x/ℓ_k`. Frame velocities are
//! returned the same way: the physical value is `ℓ_k` times the result.

use std::f64::consts::LN_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bblock::BuildingBlock;
use crate::moc::{MocError, Modulus, ModulusPair};
use crate::traj_field::{ChiProfile, VectorField};
use crate::FORMAT_VERSION;

#[derive(Debug, thiserror::Error)]
pub enum FixError {
    #[error(transparent)]
    Modulus(#[from] MocError),
    #[error("η_{level} needs more than {doublings} doublings; binding constraint {binding}")]
    Growth { level: usize, doublings: usize, binding: String },
    #[error("construction failed: {0}")]
    Construction(String),
    #[error("parameter table corrupted: {0}")]
    Table(String),
    #[error("point unresolvable at level {level}: support scale e^{ln_scale:.3e} is below f64 spacing")]
    Resolution { level: usize, ln_scale: f64 },
    #[error("time {0} outside [0, 1]")]
    Time(f64),
    #[error("dimension {0} not supported (need 2 ≤ d ≤ 16)")]
    Dimension(usize),
}

pub type Result<T> = std::result::Result<T, FixError>;

/// Bump limit for `η_k`.
pub const MAX_DOUBLINGS: usize = 1000;
/// `δ = U/64` in the `N`-selection thresholds `θ_m = U − δ(1 + 2^{−m})`.
pub const DELTA_FRACTION: f64 = 1.0 / 64.0;
/// Explicit `N_m` are kept while `Ω̃(ℓ_k 2^{−N_m−1}) ≥ TERM_RESOLUTION·Ω̃(ℓ_k/4)`.
pub const TERM_RESOLUTION: f64 = 1e-15;
/// Generations listed per radius profile.
pub const GEN_CAP: usize = 1100;
/// Radii offsets below this are not resolvable in frame units.
pub const REL_FLOOR: f64 = -1100.0 * LN_2;
/// Default depth budget.
pub const DEFAULT_DEPTH: usize = 4;
/// Levels attempted before giving up on growth.
pub const DEFAULT_LEVEL_CAP: usize = 8;

/// One translation-interval block `m` of level `k`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Block {
    pub m: usize,
    /// `N_m`.
    pub n_lo: f64,
    /// `N_{m+1}`.
    pub n_hi: f64,
    /// `Ω̃(ℓ_k 2^{−N_m−1})`.
    pub term: f64,
    /// `Ω̃(ℓ_k 2^{−N_m−1}) − Ω̃(ℓ_{k+N_m}/2)`.
    pub special: f64,
    /// `Ω̃(ℓ_k 2^{−N_m−2}) − Ω̃(ℓ_k 2^{−N_{m+1}−1})`.
    pub expand: f64,
    /// `Ω̃(ℓ_{k+h−2}/8) − Ω̃(ℓ_{k+h−1}/2)` for `h = N_m+2, …` while `ℓ_{k+h−2}` is known.
    pub s_terms: Vec<f64>,
    pub tau_bar: f64,
    pub tau: f64,
    /// `Σ_{j<m} 2τ_j`.
    pub start: f64,
}

impl Block {
    fn s_total(&self) -> f64 {
        self.s_terms.iter().sum()
    }

    /// Number of splitting sub-intervals `N_{m+1} − N_m`.
    pub fn splits(&self) -> f64 {
        self.n_hi - self.n_lo
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Level {
    pub k: usize,
    /// `η_k` (0 at `k = 0`).
    pub eta: f64,
    /// `ν_k = Σ_{j≤k} η_j`.
    pub nu: f64,
    /// `ln ℓ_k = −(k + ν_k) ln 2`.
    pub ln_len: f64,
    /// `Ω̃(ℓ_k/4)`.
    pub omega_quarter: f64,
    /// Explicit `N_1, N_2, …`.
    pub n_seq: Vec<f64>,
    /// `Ω̃(ℓ_k 2^{−N_m−1})` for the explicit `N_m`.
    pub terms: Vec<f64>,
    /// Certified bound on the Ω̃-terms after the explicit list.
    pub tail_terms: f64,
    /// `T^k`: enumerated `Σ 2τ̄_m` plus the certified tail `6·Σ_{m≥M} terms`.
    pub total: f64,
    /// Share of `T^k` that comes from the tail bound.
    pub tail_time: f64,
    pub blocks: Vec<Block>,
}

impl Level {
    /// `Σ_{m≤M} 2τ_m`; times past this fall in the uncertified tail.
    pub fn end_time(&self) -> f64 {
        self.blocks.last().map(|b| b.start + 2.0 * b.tau).unwrap_or(0.0)
    }
}

/// Parameters of the fixed-point construction, built once and then read-only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamTable {
    pub format_version: u32,
    pub omega: String,
    pub omega_tilde: String,
    pub dim: usize,
    /// Highest level `K_max` whose `η` was fixed.
    pub horizon: usize,
    pub horizon_reason: String,
    pub levels: Vec<Level>,
    /// `ln` of a certified upper bound on `Ω̃(ℓ_j)` for all `j > K_max`.
    pub ln_beyond_bound: f64,
    #[serde(skip)]
    pair: Option<ModulusPair<f64>>,
}

/// Where a time falls inside level `k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Phase {
    /// Splitting sub-interval for generation `n` of block `m`; `local = (t̂^f − t)/Δ̂`.
    Split { m: usize, n: f64, t_hat_s: f64, dt_hat: f64, local: f64 },
    /// Translation interval of block `m`; `off = T^k (t − t^s_{N_{m+1}})` in Ω̃ units.
    Translate { m: usize, off: f64 },
    /// Past the enumerated blocks (length set by the tail certificate).
    Tail,
    /// `t = 1`.
    End,
}

/// Stage inside a translation interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sub {
    /// s-phase of generation `g`; `s_terms[idx]`.
    S { g: f64, idx: usize, frac: f64 },
    Special { frac: f64 },
    F { g: f64, frac: f64 },
}

/// Radii of the listed generations at one time, as offsets from `ln ℓ_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub rel: Vec<f64>,
    /// `ṙ_n/ℓ_k`.
    pub rate: Vec<f64>,
    /// Number of generations the profile stands for.
    pub generations: f64,
}

/// Splitting-rate constraint `(j, m)` landing on level `j + N_m^j`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ConstraintCheck {
    pub j: usize,
    pub m: usize,
    pub target: usize,
    /// `ln W(ℓ_target) − ln(4m(N_{m+1}−N_m) W(ℓ_j)/τ)` with the conservative τ.
    pub ln_margin_conservative: f64,
    /// Same with the tabulated τ.
    pub ln_margin_true: f64,
}

fn chi() -> ChiProfile {
    ChiProfile::Sine
}

impl ParamTable {
    /// Greedy left-to-right choice of `η_k` for `k = 1..=level_cap`, stopping early when
    /// a level cannot be fixed within [`MAX_DOUBLINGS`].
    pub fn choose_eta(pair: &ModulusPair<f64>, dim: usize, level_cap: usize) -> Result<ParamTable> {
        if !(2..=16).contains(&dim) {
            return Err(FixError::Dimension(dim));
        }
        let om = &pair.omega_tilde;
        let mut levels = vec![seq_level(om, 0, 0.0, 0.0)?];
        let mut reason = format!("level cap {level_cap} reached");
        for k in 1..=level_cap {
            let cons = constraints_for(&levels, k);
            let nu_prev = levels[k - 1].nu;
            let mut eta = 1.0f64;
            let mut fixed = None;
            let mut binding = String::new();
            for _ in 0..=MAX_DOUBLINGS {
                let ln_len = -(k as f64 + nu_prev + eta) * LN_2;
                if !ln_len.is_finite() {
                    break;
                }
                let mut ok = true;
                for &(j, m) in &cons {
                    let margin = conservative_margin(pair, &levels[j], m, ln_len)?;
                    if margin < 0.0 {
                        ok = false;
                        binding = format!("(j={j}, m={m})");
                        break;
                    }
                }
                if ok {
                    fixed = Some(eta);
                    break;
                }
                eta *= 2.0;
            }
            match fixed {
                Some(eta) => levels.push(seq_level(om, k, eta, nu_prev + eta)?),
                None => {
                    let e = FixError::Growth { level: k, doublings: MAX_DOUBLINGS, binding };
                    reason = e.to_string();
                    break;
                }
            }
        }
        let horizon = levels.len() - 1;
        let ln_beyond_bound = beyond_bound(pair, &levels[horizon])?;
        let mut tbl = ParamTable {
            format_version: FORMAT_VERSION,
            omega: pair.omega.describe(),
            omega_tilde: pair.omega_tilde.describe(),
            dim,
            horizon,
            horizon_reason: reason,
            levels,
            ln_beyond_bound,
            pair: Some(pair.clone()),
        };
        for k in 0..=horizon {
            tbl.build_time_table(k)?;
        }
        Ok(tbl)
    }

    /// Default pair, `d = 2`, default level cap.
    pub fn default_2d() -> Result<ParamTable> {
        Self::choose_eta(&ModulusPair::default_pair(), 2, DEFAULT_LEVEL_CAP)
    }

    /// Reloads a table written by [`ParamTable::to_json`]; the pair is re-attached and
    /// must describe the same moduli.
    pub fn from_json(text: &str, pair: &ModulusPair<f64>) -> Result<ParamTable> {
        let mut t: ParamTable = serde_json::from_str(text).map_err(|e| FixError::Table(e.to_string()))?;
        if t.omega != pair.omega.describe() || t.omega_tilde != pair.omega_tilde.describe() {
            return Err(FixError::Table("moduli in the table differ from the configured pair".into()));
        }
        if t.levels.len() != t.horizon + 1 {
            return Err(FixError::Table("horizon does not match the level list".into()));
        }
        t.pair = Some(pair.clone());
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn pair(&self) -> &ModulusPair<f64> {
        self.pair.as_ref().expect("pair attached")
    }

    fn om(&self) -> &Modulus<f64> {
        &self.pair().omega_tilde
    }

    pub fn level(&self, k: usize) -> &Level {
        &self.levels[k]
    }

    /// `ln ℓ_j`, or `None` past the horizon.
    pub fn ln_len(&self, j: usize) -> Option<f64> {
        self.levels.get(j).map(|l| l.ln_len)
    }

    /// `ln ℓ_j − ln ℓ_k`, exact while `ν` is an exact integer; `−∞` past the horizon.
    pub fn off_level(&self, k: usize, j: usize) -> f64 {
        match (self.levels.get(k), self.levels.get(j)) {
            (Some(a), Some(b)) => -((j as f64 - k as f64) + (b.nu - a.nu)) * LN_2,
            _ => f64::NEG_INFINITY,
        }
    }

    /// Upper bound on `ln ℓ_j − ln ℓ_k` that also holds past the horizon (`ℓ_{i+1} ≤ ℓ_i/4`).
    pub fn off_level_upper(&self, k: usize, j: usize) -> f64 {
        if j <= self.horizon {
            return self.off_level(k, j);
        }
        self.off_level(k, self.horizon) - 2.0 * LN_2 * (j - self.horizon) as f64
    }

    /// Fills `τ̄_m`, `T^k`, `τ_m` and block starts for level `k`.
    pub fn build_time_table(&mut self, k: usize) -> Result<()> {
        let lvl = self.levels[k].clone();
        let om = self.om().clone();
        let ln_l = lvl.ln_len;
        let mut blocks = Vec::new();
        let mut sum = 0.0;
        for m in 1..lvl.n_seq.len() {
            let n_lo = lvl.n_seq[m - 1];
            let n_hi = lvl.n_seq[m];
            let top = ln_l - (n_lo + 1.0) * LN_2;
            let special = match self.ln_len_f(k as f64 + n_lo) {
                Some(l) => om.osgood(l - LN_2, top)?,
                None => lvl.terms[m - 1],
            };
            let expand = if n_hi >= n_lo + 2.0 {
                om.osgood_split(ln_l, -(n_hi + 1.0) * LN_2, -(n_lo + 2.0) * LN_2)?
            } else {
                0.0
            };
            let mut s_terms = Vec::new();
            let mut h = n_lo + 2.0;
            while h <= n_hi {
                let Some(l_a) = self.ln_len_f(k as f64 + h - 2.0) else { break };
                let v = match self.ln_len_f(k as f64 + h - 1.0) {
                    Some(l_b) => om.osgood(l_b - LN_2, l_a - 3.0 * LN_2)?,
                    None => om.omega_int(l_a - 3.0 * LN_2)?,
                };
                s_terms.push(v);
                h += 1.0;
            }
            let tau_bar = s_terms.iter().sum::<f64>() + special + expand;
            blocks.push(Block { m, n_lo, n_hi, term: lvl.terms[m - 1], special, expand, s_terms, tau_bar, tau: 0.0, start: 0.0 });
            sum += 2.0 * tau_bar;
        }
        let last = *lvl.terms.last().unwrap();
        let tail_time = 6.0 * (last + lvl.tail_terms);
        let total = sum + tail_time;
        let mut start = 0.0;
        for b in &mut blocks {
            b.tau = b.tau_bar / total;
            b.start = start;
            start += 2.0 * b.tau;
        }
        let l = &mut self.levels[k];
        l.blocks = blocks;
        l.total = total;
        l.tail_time = tail_time;
        Ok(())
    }

    fn ln_len_f(&self, j: f64) -> Option<f64> {
        if j <= self.horizon as f64 {
            self.ln_len(j as usize)
        } else {
            None
        }
    }

    /// Locates `t` within level `k`.
    pub fn locate(&self, k: usize, t: f64) -> Result<Phase> {
        if !(0.0..=1.0).contains(&t) {
            return Err(FixError::Time(t));
        }
        if t == 1.0 {
            return Ok(Phase::End);
        }
        let lvl = &self.levels[k];
        if t >= lvl.end_time() {
            return Ok(Phase::Tail);
        }
        let i = lvl.blocks.partition_point(|b| b.start <= t).max(1) - 1;
        let b = &lvl.blocks[i];
        let u = t - b.start;
        if u < b.tau {
            let count = b.splits();
            let dt_hat = b.tau / count;
            let j = (u / dt_hat).floor().min(count - 1.0).max(0.0);
            let t_hat_s = b.start + j * dt_hat;
            let local = ((t_hat_s + dt_hat - t) / dt_hat).clamp(f64::MIN_POSITIVE, 1.0);
            return Ok(Phase::Split { m: b.m, n: b.n_lo + 1.0 + j, t_hat_s, dt_hat, local });
        }
        let off = ((u - b.tau) * lvl.total).clamp(0.0, b.tau_bar);
        Ok(Phase::Translate { m: b.m, off })
    }

    fn block(&self, k: usize, m: usize) -> &Block {
        &self.levels[k].blocks[m - 1]
    }

    pub fn sub_phase(&self, k: usize, m: usize, off: f64) -> Result<Sub> {
        let b = self.block(k, m);
        let mut acc = 0.0;
        for idx in (0..b.s_terms.len()).rev() {
            let s = b.s_terms[idx];
            if off < acc + s {
                let g = b.n_lo + 2.0 + idx as f64;
                return Ok(Sub::S { g, idx, frac: (off - acc) / s });
            }
            acc += s;
        }
        let off = off - acc;
        if off < b.special || b.n_hi < b.n_lo + 2.0 {
            return Ok(Sub::Special { frac: (off / b.special).min(1.0) });
        }
        let e = off - b.special;
        let ln_l = self.levels[k].ln_len;
        let top = ln_l - (b.n_lo + 2.0) * LN_2;
        let om = self.om();
        // F(g) = Ω̃(ℓ2^{−N_m−2}) − Ω̃(ℓ2^{−g−1}); generation g moves on [F(g−1), F(g)).
        let f_of = |g: f64| -> Result<f64> {
            if g <= b.n_lo + 1.0 {
                Ok(0.0)
            } else {
                Ok(om.osgood_split(ln_l, -(g + 1.0) * LN_2, -(b.n_lo + 2.0) * LN_2)?)
            }
        };
        let d = om.osgood_step_down(top, e)?;
        let mut g = (b.n_lo + 2.0 + (d / LN_2).floor()).clamp(b.n_lo + 2.0, b.n_hi);
        if g < 9.0e15 {
            while g > b.n_lo + 2.0 && f_of(g - 1.0)? > e {
                g -= 1.0;
            }
            while g < b.n_hi && f_of(g)? <= e {
                g += 1.0;
            }
        }
        let lo = f_of(g - 1.0)?;
        let width = om.osgood_split(ln_l, -(g + 1.0) * LN_2, -g * LN_2)?;
        Ok(Sub::F { g, frac: ((e - lo) / width).clamp(0.0, 1.0) })
    }

    /// Radius offsets `ln r_n^k − ln ℓ_k` and frame rates for `n ≤ limit`.
    pub fn profile(&self, k: usize, t: f64, limit: f64) -> Result<Profile> {
        let phase = self.locate(k, t)?;
        let (n_done, generations, driver) = match phase {
            Phase::End | Phase::Tail => (f64::INFINITY, f64::INFINITY, None),
            Phase::Split { m, .. } => (self.block(k, m).n_lo, self.block(k, m).n_lo, None),
            Phase::Translate { m, off } => {
                let b = self.block(k, m);
                let sub = self.sub_phase(k, m, off)?;
                (b.n_lo, b.n_hi, Some((m, sub)))
            }
        };
        self.profile_at(k, n_done, generations, driver, limit)
    }

    /// Profile at an explicit stage address: generations `≤ n_done` are final, the
    /// driver (if any) moves block `m`, everything else has not started.
    pub fn profile_at(
        &self,
        k: usize,
        n_done: f64,
        generations: f64,
        driver: Option<(usize, Sub)>,
        limit: f64,
    ) -> Result<Profile> {
        let cap = limit.min(GEN_CAP as f64);
        let mut rel = Vec::new();
        let mut rate = Vec::new();
        let start_rel = |n: f64| -> f64 {
            if k as f64 + n - 1.0 <= self.horizon as f64 {
                self.off_level(k, k + n as usize - 1) - LN_2
            } else {
                f64::NEG_INFINITY
            }
        };
        let mut drv: Option<(f64, f64, f64)> = None; // (g, rel_g, rate_g)
        let mut n = 1.0;
        while n <= cap {
            let (r, v) = if n <= n_done {
                (-n * LN_2, 0.0)
            } else if let Some((m, sub)) = driver.filter(|_| n <= generations) {
                let g = match sub {
                    Sub::S { g, .. } | Sub::F { g, .. } => g,
                    Sub::Special { .. } => self.block(k, m).n_lo + 1.0,
                };
                if n < g {
                    match sub {
                        Sub::F { .. } => (-n * LN_2, 0.0),
                        _ => (start_rel(n), 0.0),
                    }
                } else if n == g {
                    let (r, v) = self.driver(k, m, sub)?;
                    drv = Some((g, r, v));
                    (r, v)
                } else {
                    let (g, rg, vg) = drv.expect("driver precedes slaved generations");
                    let i = n - g;
                    (rg - 2.0 * LN_2 * i, vg * 0.25f64.powf(i))
                }
            } else {
                (start_rel(n), 0.0)
            };
            if !(r >= REL_FLOOR) {
                break;
            }
            rel.push(r);
            rate.push(v);
            n += 1.0;
        }
        Ok(Profile { rel, rate, generations })
    }

    // (rel, frame rate) of the generation driven by its own cutoff.
    fn driver(&self, k: usize, m: usize, sub: Sub) -> Result<(f64, f64)> {
        let b = self.block(k, m);
        let lvl = &self.levels[k];
        let ln_l = lvl.ln_len;
        // (height of the cutoff, start offset, top offset, frac)
        let (height, start_rel, top_rel, frac) = match sub {
            Sub::S { g, idx, frac } => {
                let s = b.s_terms[idx];
                let a = k + g as usize - 2;
                let top = self.off_level(k, a) - 3.0 * LN_2;
                let start = if a < self.horizon { self.off_level(k, a + 1) - LN_2 } else { f64::NEG_INFINITY };
                (s, start, top, frac)
            }
            Sub::Special { frac } => {
                let top = -(b.n_lo + 1.0) * LN_2;
                let start = match self.ln_len_f(k as f64 + b.n_lo) {
                    Some(_) => self.off_level(k, k + b.n_lo as usize) - LN_2,
                    None => f64::NEG_INFINITY,
                };
                (b.special, start, top, frac)
            }
            Sub::F { g, frac } => {
                let w = self.om().osgood_split(ln_l, -(g + 1.0) * LN_2, -g * LN_2)?;
                (w, -(g + 1.0) * LN_2, -g * LN_2, frac)
            }
        };
        let (c, dc) = chi().eval(frac);
        let om = self.om();
        let rel = if c <= 0.0 {
            start_rel
        } else if c >= 1.0 {
            top_rel
        } else {
            // Anchored at the top: a deep start offset would keep only its ulp.
            match om.osgood_step_down(ln_l + top_rel, height * (1.0 - c)) {
                Ok(v) if v.is_finite() || !start_rel.is_finite() => top_rel - v,
                _ => start_rel + om.osgood_step_up(ln_l + start_rel, height * c)?,
            }
        };
        let rate = if dc == 0.0 || !rel.is_finite() {
            0.0
        } else {
            // ṙ = χ̇ ω̃(r), χ̇ = T^k χ'(frac); divided by ℓ_k.
            let l = ln_l + rel;
            lvl.total * dc * (rel - om.ln_r_over_omega(l)?).exp()
        };
        Ok((rel, rate))
    }

    /// Frame velocity `B̄^k_t(ℓ_k ξ)/ℓ_k` unrolled to `depth`.
    pub fn field_b(&self, k: usize, t: f64, xi: &[f64], depth: usize) -> Result<Vec<f64>> {
        let d = self.dim;
        let zero = vec![0.0; d];
        if xi.iter().any(|v| v.abs() >= 0.5) {
            return Ok(zero);
        }
        match self.locate(k, t)? {
            Phase::End | Phase::Tail => Ok(zero),
            Phase::Translate { .. } => Ok(self.explicit(k, t, xi)?.0),
            Phase::Split { n, t_hat_s, dt_hat, local, .. } => {
                if depth == 0 {
                    return Ok(zero);
                }
                let Some((kk, y, scale)) = self.enter_split(k, n, t_hat_s, xi)? else { return Ok(zero) };
                let inner = self.field_b(kk, local, &y, depth - 1)?;
                Ok(inner.into_iter().map(|v| v * scale / dt_hat).collect())
            }
        }
    }

    // Maps ξ into the frame of level k+n−1 around its centre at t̂^s; None when outside.
    fn enter_split(&self, k: usize, n: f64, t_hat_s: f64, xi: &[f64]) -> Result<Option<(usize, Vec<f64>, f64)>> {
        let d = self.dim;
        let kk = k as f64 + n - 1.0;
        let prof = self.profile(k, t_hat_s, n - 1.0)?;
        let listed = prof.rel.len() as f64;
        let mut c = vec![0.0; d];
        for &r in &prof.rel {
            let h = 0.5 * r.exp();
            for i in 0..d {
                c[i] += if xi[i] >= c[i] { h } else { -h };
            }
        }
        // Unlisted generations move the centre by at most their first radius.
        let rest = if listed < n - 1.0 { (REL_FLOOR).exp() } else { 0.0 };
        let diff: Vec<f64> = (0..d).map(|i| xi[i] - c[i]).collect();
        let dmax = diff.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let ln_half = if kk <= self.horizon as f64 {
            self.off_level(k, kk as usize)
        } else {
            self.off_level_upper(k, self.horizon + 1).min(self.off_level_upper(k, kk.min(1e6) as usize))
        } - LN_2;
        let noise = 4.0 * f64::EPSILON * xi.iter().fold(1.0f64, |a, v| a.max(v.abs())) + rest;
        if dmax - noise > ln_half.exp() {
            return Ok(None);
        }
        let scale = (ln_half + LN_2).exp();
        if kk > self.horizon as f64 || scale <= 1e4 * noise || !(scale > 0.0) {
            return Err(FixError::Resolution { level: k, ln_scale: ln_half + LN_2 });
        }
        let y: Vec<f64> = diff.iter().map(|v| v / scale).collect();
        if y.iter().any(|v| v.abs() >= 0.5) {
            return Ok(None);
        }
        Ok(Some((kk as usize, y, scale)))
    }

    /// Explicit translation-branch field at level `k`: frame velocity and smallest active
    /// frame radius at `ξ` (`∞` when no block is active).
    pub fn explicit(&self, k: usize, t: f64, xi: &[f64]) -> Result<(Vec<f64>, f64)> {
        if xi.iter().any(|v| v.abs() >= 0.5) {
            return Ok((vec![0.0; self.dim], f64::INFINITY));
        }
        let prof = self.profile(k, t, f64::INFINITY)?;
        Ok(self.explicit_from(&prof, xi))
    }

    /// Explicit field for a given radius profile.
    pub fn explicit_from(&self, prof: &Profile, xi: &[f64]) -> (Vec<f64>, f64) {
        self.explicit_shifted(prof, xi, &vec![0.0; xi.len()])
    }

    /// Explicit field at `xi + delta`. The shift is added to `xi − c` cube by cube,
    /// so offsets far below the ulp of `xi` still move the point.
    pub fn explicit_shifted(&self, prof: &Profile, xi: &[f64], delta: &[f64]) -> (Vec<f64>, f64) {
        let d = self.dim;
        let mut out = vec![0.0; d];
        if xi.iter().zip(delta).any(|(v, e)| (v + e).abs() >= 0.5) {
            return (out, f64::INFINITY);
        }
        let mut c = vec![0.0; d];
        let mut y = vec![0.0; d];
        let mut smallest = f64::INFINITY;
        for (n, (&r, &v)) in prof.rel.iter().zip(&prof.rate).enumerate() {
            let rho = r.exp();
            if rho == 0.0 {
                break;
            }
            let mut sign = vec![0.0; d];
            let mut inside = true;
            for i in 0..d {
                let off = (xi[i] - c[i]) + delta[i];
                let s = if off >= 0.0 { 1.0 } else { -1.0 };
                sign[i] = s;
                y[i] = off / rho - 0.5 * s;
                if y[i].abs() >= 0.5 {
                    inside = false;
                }
            }
            if !inside {
                break;
            }
            for i in 0..d {
                c[i] += 0.5 * rho * sign[i];
            }
            if v != 0.0 {
                let blk = BuildingBlock::new(&sign).expect("sign vector");
                let u = blk.eval(&y);
                for i in 0..d {
                    out[i] += 0.5 * v * u[i];
                }
                if y.iter().any(|w| w.abs() > 0.25) || n + 1 == prof.rel.len() {
                    smallest = smallest.min(rho);
                }
            }
        }
        (out, smallest)
    }

    /// `c^k_{G,σ}(t)` in frame units for the listed generations of `σ`.
    pub fn center(&self, k: usize, t: f64, sigma: &crate::geometry::SymbolString) -> Result<(Vec<f64>, Vec<f64>)> {
        let prof = self.profile(k, t, sigma.len() as f64)?;
        Ok(self.center_from(&prof, sigma))
    }

    /// Centre and centre velocity for a given radius profile.
    pub fn center_from(&self, prof: &Profile, sigma: &crate::geometry::SymbolString) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let mut c = vec![0.0; d];
        let mut v = vec![0.0; d];
        for (j, (&r, &rt)) in prof.rel.iter().zip(&prof.rate).enumerate() {
            let rho = r.exp();
            for i in 0..d {
                let s = sigma.sign(j + 1, i) as f64;
                c[i] += 0.5 * rho * s;
                v[i] += 0.5 * rt * s;
            }
        }
        (c, v)
    }

    /// `Θ̄^k_t` unrolled to `depth`, in absolute log lengths.
    pub fn density_theta(&self, k: usize, t: f64, depth: usize) -> Result<DensitySnapshot> {
        let d = self.dim;
        let ln_l = self.levels[k].ln_len;
        let base = |ln_radii: Vec<f64>, generations: f64, ln_side: f64, side_is_bound: bool, approx: bool| DensitySnapshot {
            format_version: FORMAT_VERSION,
            time: t,
            level: k,
            dim: d,
            omitted_generations: (generations - ln_radii.len() as f64).max(0.0),
            ln_radii,
            generations,
            ln_side,
            side_is_bound,
            approximate: approx,
        };
        match self.locate(k, t)? {
            Phase::End => Ok(base(vec![], 0.0, ln_l, false, false)),
            Phase::Tail => Ok(base(vec![], 0.0, ln_l, false, true)),
            Phase::Translate { m, .. } => {
                let b = self.block(k, m);
                let prof = self.profile(k, t, b.n_hi)?;
                let radii = prof.rel.iter().map(|r| ln_l + r).collect();
                let (side, bound) = self.side_of(k as f64 + b.n_hi);
                Ok(base(radii, b.n_hi, side, bound, false))
            }
            Phase::Split { n, t_hat_s, local, .. } => {
                let outer = self.profile(k, t_hat_s, n - 1.0)?;
                let kk = k as f64 + n - 1.0;
                let inner = if depth > 0 && kk <= self.horizon as f64 {
                    self.density_theta(kk as usize, local, depth - 1)?
                } else {
                    // Nearest endpoint of the splitting interval; both are exact cube unions.
                    let (side_k, b_k) = self.side_of(kk);
                    let mut s = if local >= 0.5 {
                        base(vec![], 0.0, side_k, b_k, true)
                    } else {
                        let (side, bd) = self.side_of(kk + 1.0);
                        base(vec![side_k - LN_2], 1.0, side, bd || b_k, true)
                    };
                    s.level = kk.min(usize::MAX as f64) as usize;
                    s
                };
                let mut radii: Vec<f64> = outer.rel.iter().map(|r| ln_l + r).collect();
                let complete = outer.rel.len() as f64 >= n - 1.0;
                if complete {
                    radii.extend(inner.ln_radii.iter().copied());
                }
                let generations = n - 1.0 + inner.generations;
                let mut s = base(radii, generations, inner.ln_side, inner.side_is_bound, inner.approximate);
                s.level = k;
                s.omitted_generations = generations - s.ln_radii.len() as f64;
                Ok(s)
            }
        }
    }

    // ln ℓ_j, or an upper bound past the horizon.
    fn side_of(&self, j: f64) -> (f64, bool) {
        if j <= self.horizon as f64 {
            (self.levels[j as usize].ln_len, false)
        } else {
            let extra = (j - self.horizon as f64) * 2.0 * LN_2;
            (self.levels[self.horizon].ln_len - extra, true)
        }
    }

    /// Splitting-rate constraints for every `(j, m)` with `j + N_m^j ≤ K_max`.
    pub fn constraint_checks(&self) -> Result<Vec<ConstraintCheck>> {
        let pair = self.pair();
        let mut out = Vec::new();
        for lvl in &self.levels {
            for m in 1..lvl.n_seq.len() {
                let target = lvl.k as f64 + lvl.n_seq[m - 1];
                if target > self.horizon as f64 {
                    continue;
                }
                let target = target as usize;
                let ln_t = self.levels[target].ln_len;
                let cons = conservative_margin(pair, lvl, m, ln_t)?;
                let b = &lvl.blocks[m - 1];
                let need = (4.0 * m as f64 * b.splits()).ln() - b.tau.ln() + pair.ln_weight(lvl.ln_len);
                out.push(ConstraintCheck {
                    j: lvl.k,
                    m,
                    target,
                    ln_margin_conservative: cons,
                    ln_margin_true: pair.ln_weight(ln_t) - need,
                });
            }
        }
        Ok(out)
    }

    /// Machine checks of every table invariant; each entry is `(name, statistic, threshold)`
    /// with pass meaning `statistic ≤ threshold`.
    pub fn certify(&self) -> Result<Vec<(String, f64, f64)>> {
        let om = self.om();
        let mut out = Vec::new();
        let bad = |b: bool| if b { 1.0 } else { 0.0 };
        for lvl in &self.levels {
            let k = lvl.k;
            out.push((format!("k={k} N_1 = 1"), bad(lvl.n_seq.first() != Some(&1.0)), 0.0));
            let q = om.omega_int(lvl.ln_len - 2.0 * LN_2)?;
            let rel_q = ((q - lvl.omega_quarter) / q).abs();
            out.push((format!("k={k} stored Omega~(l/4)"), rel_q, 1e-12));
            out.push((format!("k={k} eta >= 1"), bad(k > 0 && !(lvl.eta >= 1.0)), 0.0));
            let mono = lvl.n_seq.windows(2).any(|w| !(w[1] > w[0]));
            out.push((format!("k={k} N increasing"), bad(mono), 0.0));
            // Recompute the terms from N and compare.
            let mut worst: f64 = 0.0;
            for (n, tm) in lvl.n_seq.iter().zip(&lvl.terms) {
                let v = om.omega_int(lvl.ln_len - (n + 1.0) * LN_2)?;
                worst = worst.max(((v - tm) / v).abs());
            }
            out.push((format!("k={k} terms match N"), worst, 1e-12));
            let s: f64 = lvl.terms.iter().sum();
            let hi = s + lvl.tail_terms;
            // Lower end is strict because N_1 = 1 already contributes Ω̃(ℓ_k/4).
            let lower_ok = s > q && lvl.terms.len() > 1;
            out.push((format!("k={k} sum > Omega~(l/4)"), bad(!lower_ok), 0.0));
            out.push((format!("k={k} sum + tail < 2 Omega~(l/4)"), hi / (2.0 * q), 1.0 - 1e-12));
            out.push((format!("k={k} T <= 12 Omega~(l/4)"), lvl.total / (12.0 * q), 1.0));
            let mut id: f64 = 0.0;
            let mut order = false;
            for b in &lvl.blocks {
                // Special interval, first f-phases, s-phases.
                let ln_l = lvl.ln_len;
                let special = match self.ln_len_f(k as f64 + b.n_lo) {
                    Some(l) => om.osgood(l - LN_2, ln_l - (b.n_lo + 1.0) * LN_2)?,
                    None => om.omega_int(ln_l - (b.n_lo + 1.0) * LN_2)?,
                };
                id = id.max(rel_err(special, b.special, b.special));
                if k == 0 {
                    // Time form, up to the spacing of f64 times near tf.
                    let (ts, tf) = self.special_interval(k, b);
                    let floor = 1e12 * f64::EPSILON * tf * lvl.total;
                    id = id.max(rel_err(lvl.total * (tf - ts), b.special, b.special.max(floor)));
                }
                if b.n_lo < 4.0e15 {
                    for i in 2..=12u32 {
                        let g = b.n_lo + i as f64;
                        if g > b.n_hi {
                            break;
                        }
                        let w = om.osgood_split(ln_l, -(g + 1.0) * LN_2, -g * LN_2)?;
                        let (_, a0) = self.f_time(k, b, g - 1.0)?;
                        let (_, a1) = self.f_time(k, b, g)?;
                        id = id.max(rel_err(a1 - a0, w, a1.max(w)));
                        order |= !(a1 >= a0) || !(w > 0.0);
                    }
                }
                let tau_sum = b.s_total() + b.special + b.expand;
                id = id.max(rel_err(tau_sum, b.tau_bar, b.tau_bar));
                id = id.max(rel_err(b.tau * lvl.total, b.tau_bar, b.tau_bar));
                order |= !(b.tau > 0.0);
            }
            out.push((format!("k={k} interval-length identities"), id, 1e-12));
            out.push((format!("k={k} time grid ordering"), bad(order), 0.0));
            let starts_ok = lvl.blocks.windows(2).all(|w| (w[1].start - (w[0].start + 2.0 * w[0].tau)).abs() <= 1e-15);
            out.push((format!("k={k} blocks tile [0, end)"), bad(!starts_ok || lvl.end_time() > 1.0), 0.0));
        }
        for c in self.constraint_checks()? {
            out.push((
                format!("rate (j={}, m={}) -> k={} conservative", c.j, c.m, c.target),
                -c.ln_margin_conservative,
                0.0,
            ));
            out.push((format!("rate (j={}, m={}) -> k={} true tau", c.j, c.m, c.target), -c.ln_margin_true, 0.0));
        }
        let lens_ok = self.levels.windows(2).all(|w| w[1].ln_len <= w[0].ln_len - 2.0 * LN_2 + 1e-9 * w[0].ln_len.abs().max(1.0));
        out.push(("l_{k+1} <= l_k/4".into(), bad(!lens_ok), 0.0));
        Ok(out)
    }

    /// `(t^s, t^f)` of the special generation `N_m + 1`.
    pub fn special_interval(&self, k: usize, b: &Block) -> (f64, f64) {
        let lvl = &self.levels[k];
        let ts = b.start + b.tau + b.s_total() / lvl.total;
        (ts, ts + b.special / lvl.total)
    }

    /// `t^f_g` as `(block base, offset in Ω̃ units)`; the time is `base + offset/T^k`.
    pub fn f_time(&self, k: usize, b: &Block, g: f64) -> Result<(f64, f64)> {
        let lvl = &self.levels[k];
        let ln_l = lvl.ln_len;
        let base = b.start + b.tau;
        let mut off = b.s_total() + b.special;
        if g >= b.n_lo + 2.0 {
            off += self.om().osgood_split(ln_l, -(g + 1.0) * LN_2, -(b.n_lo + 2.0) * LN_2)?;
        }
        Ok((base, off))
    }

    /// Sorted phase boundaries of level `k` up to `per_block` f-phases in each block.
    pub fn breakpoints(&self, k: usize, per_block: usize) -> Vec<f64> {
        let lvl = &self.levels[k];
        let mut v = vec![0.0, 1.0];
        for b in &lvl.blocks {
            v.push(b.start);
            v.push(b.start + b.tau);
            let (ts, tf) = self.special_interval(k, b);
            v.push(ts);
            v.push(tf);
            if b.n_lo < 4.0e15 {
                for i in 2..=(per_block as u32 + 1) {
                    let g = b.n_lo + i as f64;
                    if g > b.n_hi {
                        break;
                    }
                    if let Ok((base, off)) = self.f_time(k, b, g) {
                        v.push(base + off / lvl.total);
                    }
                }
            }
            if b.splits() <= per_block as f64 {
                for j in 0..b.splits() as usize {
                    v.push(b.start + b.tau * j as f64 / b.splits());
                }
            }
        }
        v.push(lvl.end_time());
        v.retain(|x| (0.0..=1.0).contains(x));
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup();
        v
    }

    /// Splitting choices `(m, j)` at level `k` that land on a level within the horizon.
    fn split_options(&self, k: usize) -> Vec<(usize, f64)> {
        let mut v = Vec::new();
        for b in &self.levels[k].blocks {
            let mut j = 0.0;
            while j < b.splits() && k as f64 + b.n_lo + j <= self.horizon as f64 {
                v.push((b.m, j));
                j += 1.0;
            }
        }
        v
    }

    /// Every chain of exactly `steps` splitting steps from level 0 that stays within the
    /// horizon, as `(levels, ln Π ℓ_{k'}/(ℓ_k Δ̂))`.
    pub fn chains(&self, steps: usize) -> Vec<(Vec<usize>, f64)> {
        let mut out = Vec::new();
        let mut stack = vec![(vec![0usize], 0.0f64)];
        while let Some((levels, ln_factor)) = stack.pop() {
            if levels.len() == steps + 1 {
                out.push((levels, ln_factor));
                continue;
            }
            let k = *levels.last().unwrap();
            for (m, j) in self.split_options(k) {
                let b = self.block(k, m);
                let dt_hat = b.tau / b.splits();
                let kk = k + (b.n_lo + j) as usize;
                let mut next = levels.clone();
                next.push(kk);
                stack.push((next, ln_factor - dt_hat.ln() + self.off_level(k, kk)));
            }
        }
        out
    }

    /// Sampled `sup |B̄⁰ at depth D+1 − B̄⁰ at depth D|` in log form. The two depths differ
    /// only on chains of exactly `D+1` splitting steps ending in a translation stage, so
    /// every such chain is visited and `per_chain` final stages and points are drawn on
    /// each. Returns the largest sample, or `None` when no chain fits in the horizon.
    pub fn depth_increment<R: Rng>(&self, depth: usize, per_chain: usize, rng: &mut R) -> Result<Option<ChainSample>> {
        let mut best: Option<ChainSample> = None;
        for chain in self.chains(depth + 1) {
            for _ in 0..per_chain {
                if let Some(s) = self.sample_on_chain(&chain, rng)? {
                    if best.as_ref().is_none_or(|b| s.ln_magnitude > b.ln_magnitude) {
                        best = Some(s);
                    }
                }
            }
        }
        Ok(best)
    }

    fn sample_on_chain<R: Rng>(&self, chain: &(Vec<usize>, f64), rng: &mut R) -> Result<Option<ChainSample>> {
        let (levels, ln_factor) = (chain.0.clone(), chain.1);
        let k = *levels.last().unwrap();
        // Final level: an f-phase of one of the first blocks, addressed directly since
        // f64 times cannot resolve these stages past level 2.
        let cands: Vec<&Block> = self.levels[k]
            .blocks
            .iter()
            .take(3)
            .filter(|b| b.n_hi >= b.n_lo + 2.0 && b.n_lo < 4.0e15)
            .collect();
        if cands.is_empty() {
            return Ok(None);
        }
        let b = cands[rng.gen_range(0..cands.len())];
        let top = (b.n_hi - b.n_lo).min(9.0) as u32;
        let g = b.n_lo + rng.gen_range(2..=top) as f64;
        let frac = rng.gen_range(0.02..0.98);
        let prof = self.profile_at(k, b.n_lo, b.n_hi, Some((b.m, Sub::F { g, frac })), f64::INFINITY)?;
        // Half the points at occupied cube centres (plateaus), half uniform in the frame.
        let xi: Vec<f64> = if rng.gen_bool(0.5) {
            let mut sig = crate::geometry::SymbolString::empty(self.dim);
            for _ in 0..prof.rel.len() {
                sig.push_mask(rng.gen_range(0..(1u64 << self.dim)));
            }
            self.center_from(&prof, &sig).0
        } else {
            (0..self.dim).map(|_| rng.gen_range(-0.5..0.5)).collect()
        };
        let (v, _) = self.explicit_from(&prof, &xi);
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        Ok(Some(ChainSample { levels, ln_factor, block: b.m, generation: g, frac, xi, ln_magnitude: ln_factor + norm.ln() }))
    }
}

/// A sampled depth increment: the chain of levels, the log of the accumulated
/// time-rescaling and length factors, and `ln |B^{(D+1)} − B^{(D)}|` at level 0.
#[derive(Clone, Debug, Serialize)]
pub struct ChainSample {
    pub levels: Vec<usize>,
    pub ln_factor: f64,
    /// Final-level stage: f-phase of `generation` in `block` at fraction `frac`.
    pub block: usize,
    pub generation: f64,
    pub frac: f64,
    pub xi: Vec<f64>,
    pub ln_magnitude: f64,
}

fn rel_err(got: f64, want: f64, scale: f64) -> f64 {
    if got == want {
        0.0
    } else {
        ((got - want) / scale.abs().max(f64::MIN_POSITIVE)).abs()
    }
}

// Constraints (j, m) with j + N_m^j = k.
fn constraints_for(levels: &[Level], k: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for lvl in levels {
        for (i, &n) in lvl.n_seq.iter().enumerate() {
            if lvl.k as f64 + n == k as f64 && i + 1 < lvl.n_seq.len() {
                v.push((lvl.k, i + 1));
            }
        }
    }
    v
}

// ln W(ℓ_k) − ln(4m(N_{m+1}−N_m) W(ℓ_j)/τ_low) with the computable lower bound on τ_m^j.
fn conservative_margin(pair: &ModulusPair<f64>, lvl: &Level, m: usize, ln_len_k: f64) -> Result<f64> {
    let om = &pair.omega_tilde;
    let ln_j = lvl.ln_len;
    let n_lo = lvl.n_seq[m - 1];
    let n_hi = lvl.n_seq[m];
    let head = om.osgood(ln_len_k - LN_2, ln_j - (n_lo + 1.0) * LN_2)?;
    let tail = if n_hi >= n_lo + 2.0 {
        om.osgood_split(ln_j, -(n_hi + 1.0) * LN_2, -(n_lo + 2.0) * LN_2)?
    } else {
        0.0
    };
    let tau_low = (head + tail) / (12.0 * lvl.omega_quarter);
    let need = (4.0 * m as f64 * (n_hi - n_lo)).ln() - tau_low.ln() + pair.ln_weight(ln_j);
    Ok(pair.ln_weight(ln_len_k) - need)
}

// Level with its N sequence; times are filled later.
fn seq_level(om: &Modulus<f64>, k: usize, eta: f64, nu: f64) -> Result<Level> {
    let ln_len = -(k as f64 + nu) * LN_2;
    let q = om.omega_int(ln_len - 2.0 * LN_2)?;
    let (n_seq, terms, tail_terms) = choose_n(om, ln_len)?;
    Ok(Level { k, eta, nu, ln_len, omega_quarter: q, n_seq, terms, tail_terms, total: 0.0, tail_time: 0.0, blocks: vec![] })
}

/// Greedy `N_m`: `N_1 = 1`, and `N_{m+1}` is the least integer above `N_m` with
/// `S_m + Ω̃(ℓ 2^{−N_{m+1}−1}) < θ_m = U − δ(1 + 2^{−m})`, `U = 2Ω̃(ℓ/4)`, `δ = U/64`.
/// Returns `(N, terms, tail bound)` where the tail bound covers all terms past the list.
pub fn choose_n(om: &Modulus<f64>, ln_len: f64) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let lq = ln_len - 2.0 * LN_2;
    let q = om.omega_int(lq)?;
    let delta = 2.0 * q * DELTA_FRACTION;
    let term = |n: f64| om.omega_int(ln_len - (n + 1.0) * LN_2);
    let mut ns = vec![1.0];
    let mut terms = vec![q];
    // Slack R_m = θ_m − S_m, tracked directly so it keeps relative precision.
    let mut slack = q - 1.5 * delta;
    let mut m = 1usize;
    loop {
        if !(slack > 0.0) {
            return Err(FixError::Construction(format!("N selection lost its slack at m = {m}")));
        }
        let n_prev = *ns.last().unwrap();
        // Ω̃(ℓ2^{−N−1}) < slack ⇔ N + 1 > 2 + Δ/ln 2 with Ω̃(λ_q) − Ω̃(λ_q − Δ) = q − slack.
        let dd = om.osgood_step_down(lq, q - slack)?;
        let mut n = (2.0 + dd / LN_2).floor().max(n_prev + 1.0);
        if n < 9.0e15 {
            while term(n)? >= slack {
                n += 1.0;
            }
            while n - 1.0 > n_prev && term(n - 1.0)? < slack {
                n -= 1.0;
            }
        }
        let tn = term(n)?;
        if tn < TERM_RESOLUTION * q || m > 400 {
            let tail = slack + delta * 0.5f64.powi(m as i32);
            return Ok((ns, terms, tail));
        }
        ns.push(n);
        terms.push(tn);
        slack = slack + delta * 0.5f64.powi(m as i32 + 1) - tn;
        m += 1;
    }
}

// ln of a bound on Ω̃(ℓ_j), j > K, from the constraint (K, 1) that any admissible η_{K+1}
// must meet, inverted in closed form for catalog pairs.
fn beyond_bound(pair: &ModulusPair<f64>, top: &Level) -> Result<f64> {
    let om = &pair.omega_tilde;
    let trivial = top.omega_quarter.ln();
    if top.n_seq.len() < 2 {
        return Ok(trivial);
    }
    if let (Modulus::Catalog { a, eps }, Modulus::Catalog { a: at, eps: et }) = (&pair.omega, &pair.omega_tilde) {
        if a == at && eps > et {
            let ln_j = top.ln_len;
            let n_hi = top.n_seq[1];
            // Ω̃(ℓ_j2^{−2}) − Ω̃(ℓ_{K+1}/2) ≥ Ω̃(ℓ_j/4) − Ω̃(ℓ_j/8).
            let head = om.osgood_split(ln_j, -3.0 * LN_2, -2.0 * LN_2)?;
            let tail = if n_hi >= 3.0 { om.osgood_split(ln_j, -(n_hi + 1.0) * LN_2, -3.0 * LN_2)? } else { 0.0 };
            let tau_low = (head + tail) / (12.0 * top.omega_quarter);
            let ln_x = (4.0 * (n_hi - 1.0)).ln() - tau_low.ln() + pair.ln_weight(ln_j);
            // (a + L)^{ε−ε̃} ≥ X and Ω̃(ℓ) = (a + L)^{−ε̃}/ε̃.
            let b = -et.ln() - et * ln_x / (eps - et);
            return Ok(b.min(trivial));
        }
    }
    Ok(trivial)
}

/// `Θ̄` at one time: the uniform mixture over sign strings `σ` of length `G` of the cubes
/// `Σ_j (R_j/2)σ_j + e^{ln_side} Q`, each carrying mass `2^{−Gd}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DensitySnapshot {
    pub format_version: u32,
    pub time: f64,
    pub level: usize,
    pub dim: usize,
    /// `ln R_j` for the listed generations, largest first.
    pub ln_radii: Vec<f64>,
    /// `G`, the number of sign generations.
    pub generations: f64,
    /// Generations whose radii are below the listing floor.
    pub omitted_generations: f64,
    pub ln_side: f64,
    /// `ln_side` is only an upper bound (side length past the horizon).
    pub side_is_bound: bool,
    /// Depth-exhausted fallback to an interval endpoint.
    pub approximate: bool,
}

/// One cube of an enumerated snapshot.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Cube {
    pub center: Vec<f64>,
    pub ln_side: f64,
    pub ln_density: f64,
}

impl DensitySnapshot {
    /// `ln` of the density value on every cube.
    pub fn ln_density(&self) -> f64 {
        -(self.generations * self.dim as f64 * LN_2) - self.dim as f64 * self.ln_side
    }

    /// `ln` of the total cube volume.
    pub fn ln_volume(&self) -> f64 {
        self.generations * self.dim as f64 * LN_2 + self.dim as f64 * self.ln_side
    }

    /// `2^{Gd}` cubes × density × side^d, in log form.
    pub fn mass(&self) -> f64 {
        (self.ln_volume() + self.ln_density()).exp()
    }

    /// Centre of the cube with the given signs (only listed generations contribute).
    pub fn center(&self, sigma: &crate::geometry::SymbolString) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        for (j, &lr) in self.ln_radii.iter().enumerate().take(sigma.len()) {
            let h = 0.5 * lr.exp();
            for (i, ci) in c.iter_mut().enumerate() {
                *ci += h * sigma.sign(j + 1, i) as f64;
            }
        }
        c
    }

    /// All cubes, when every generation is listed and there are at most `limit`.
    pub fn cubes(&self, limit: usize) -> Option<Vec<Cube>> {
        let g = self.generations;
        if self.omitted_generations > 0.0 || g * self.dim as f64 > (limit as f64).log2() {
            return None;
        }
        let g = g as usize;
        let ld = self.ln_density();
        Some(
            crate::geometry::SymbolString::all(self.dim, g)
                .iter()
                .map(|s| Cube { center: self.center(s), ln_side: self.ln_side, ln_density: ld })
                .collect(),
        )
    }

    /// Separation `R_j > Σ_{i>j} R_i + side` at every listed generation, which makes the
    /// cubes pairwise disjoint.
    pub fn disjoint(&self) -> bool {
        let n = self.ln_radii.len();
        for j in 0..n {
            let top = self.ln_radii[j];
            let mut rest = (self.ln_side - top).exp();
            for &r in &self.ln_radii[j + 1..] {
                rest += (r - top).exp();
            }
            // Dyadic endpoints touch; open cubes stay disjoint.
            if !(rest <= 1.0 + 1e-12) {
                return false;
            }
        }
        true
    }

    /// `‖Θ − 1_Q‖_{L¹}` for a uniform snapshot contained in `Q` with density at least 1.
    pub fn l1_to_uniform_cube(&self) -> f64 {
        let v = self.ln_volume();
        if v >= 0.0 {
            0.0
        } else {
            // (ρ − 1)V + (1 − V) with ρV = 1.
            -2.0 * v.exp_m1()
        }
    }

    /// Pixel-averaged density on `[-1/2,1/2]^2` (first two coordinates), row 0 at the top.
    /// Clusters smaller than a pixel are deposited at their centre. `None` when the
    /// listed radii do not resolve the grid.
    pub fn raster(&self, width: usize, height: usize) -> Option<Vec<f64>> {
        if self.dim < 2 {
            return None;
        }
        let mut img = vec![0.0; width * height];
        let px = 1.0 / width.max(height) as f64;
        let radii: Vec<f64> = self.ln_radii.iter().map(|r| r.exp()).collect();
        let side = self.ln_side.exp();
        if side >= px {
            // Resolved cubes are only handled for the single-cube case.
            if self.generations != 0.0 {
                return None;
            }
            let h = side / 2.0;
            let d = self.mass() / (side * side);
            for row in 0..height {
                for col in 0..width {
                    let x = -0.5 + (col as f64 + 0.5) / width as f64;
                    let y = 0.5 - (row as f64 + 0.5) / height as f64;
                    if x.abs() < h && y.abs() < h {
                        img[row * width + col] = d;
                    }
                }
            }
            return Some(img);
        }
        // Spread of all generations from j on.
        let mut spread = vec![side / 2.0; radii.len() + 1];
        for j in (0..radii.len()).rev() {
            spread[j] = spread[j + 1] + radii[j] / 2.0;
        }
        let mut stack = vec![(0usize, 0.0f64, 0.0f64, 1.0f64)];
        let area = 1.0 / (width * height) as f64;
        while let Some((j, cx, cy, mass)) = stack.pop() {
            if j == radii.len() || spread[j] < px / 2.0 || stack.len() > 4_000_000 {
                let col = ((cx + 0.5) * width as f64).floor();
                let row = ((0.5 - cy) * height as f64).floor();
                if col >= 0.0 && row >= 0.0 && (col as usize) < width && (row as usize) < height {
                    img[row as usize * width + col as usize] += mass / area;
                }
                continue;
            }
            let h = radii[j] / 2.0;
            // Only the first two coordinates matter for the image; the rest just split mass.
            let share = mass / 4.0;
            for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                stack.push((j + 1, cx + sx * h, cy + sy * h, share));
            }
        }
        Some(img)
    }
}

/// `v(t,x) = −B̄⁰(1−t, x)` and `μ(t) = Θ̄⁰(1−t)` at a fixed depth.
#[derive(Clone, Copy, Debug)]
pub struct FinalPair<'a> {
    pub table: &'a ParamTable,
    pub depth: usize,
}

pub fn final_pair(table: &ParamTable, depth: usize) -> FinalPair<'_> {
    FinalPair { table, depth }
}

impl FinalPair<'_> {
    pub fn velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.table.field_b(0, 1.0 - t, x, self.depth)?.into_iter().map(|v| -v).collect())
    }

    pub fn density(&self, t: f64) -> Result<DensitySnapshot> {
        let mut s = self.table.density_theta(0, 1.0 - t, self.depth)?;
        s.time = t;
        Ok(s)
    }
}

/// `B̄⁰` as an integrable field; unresolvable points evaluate to zero.
#[derive(Clone, Copy, Debug)]
pub struct LevelField<'a> {
    pub table: &'a ParamTable,
    pub depth: usize,
}

impl VectorField<f64> for LevelField<'_> {
    fn dim(&self) -> usize {
        self.table.dim
    }

    fn eval(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.table.field_b(0, t.clamp(0.0, 1.0), x, self.depth).unwrap_or_else(|_| vec![0.0; self.table.dim])
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.table.breakpoints(0, 64)
    }
}

/// Test functions for the weak form.
#[derive(Clone, Debug, PartialEq)]
pub enum TestFn {
    Constant,
    /// `φ(x) = a·x`.
    Linear(Vec<f64>),
    /// `φ(x) = x_i²`.
    Quadratic(usize),
}

impl TestFn {
    // Cube average of φ and of ∇φ for a cube centred at c with side s.
    fn averages(&self, c: &[f64], side: f64) -> (f64, Vec<f64>) {
        match self {
            TestFn::Constant => (1.0, vec![0.0; c.len()]),
            TestFn::Linear(a) => (a.iter().zip(c).map(|(a, c)| a * c).sum(), a.clone()),
            TestFn::Quadratic(i) => {
                let mut g = vec![0.0; c.len()];
                g[*i] = 2.0 * c[*i];
                (c[*i] * c[*i] + side * side / 12.0, g)
            }
        }
    }

    fn grad_sup(&self) -> f64 {
        match self {
            TestFn::Constant => 0.0,
            TestFn::Linear(a) => a.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            // 2|x_i| on Q.
            TestFn::Quadratic(_) => 1.0,
        }
    }
}

/// Weak-form residual on `[t0, t1]` inside one translation interval of level `k`:
/// max over sample times and cubes of `|d/dt ∫_cube φ − ∫_cube B·∇φ|`, normalized by
/// `‖∇φ‖_∞ · sup|B|`, with a fourth-order central difference of step `h` in time. Each cube moves rigidly, so the mixture residual is bounded by the
/// per-cube one; with more than `4096` cubes, `n_cubes` random cubes are checked.
#[allow(clippy::too_many_arguments)]
pub fn ce_check<R: Rng>(
    table: &ParamTable,
    k: usize,
    t0: f64,
    t1: f64,
    depth: usize,
    test: &TestFn,
    h: f64,
    n_times: usize,
    n_cubes: usize,
    rng: &mut R,
) -> Result<f64> {
    if *test == TestFn::Constant {
        return Ok(0.0);
    }
    let d = table.dim;
    let snap = table.density_theta(k, 0.5 * (t0 + t1), depth)?;
    let g = snap.ln_radii.len().min(GEN_CAP);
    let sigmas: Vec<crate::geometry::SymbolString> = if (g * d) as f64 <= 12.0 && snap.omitted_generations == 0.0 {
        crate::geometry::SymbolString::all(d, g)
    } else {
        (0..n_cubes)
            .map(|_| {
                let mut s = crate::geometry::SymbolString::empty(d);
                for _ in 0..g {
                    s.push_mask(rng.gen_range(0..(1u64 << d)));
                }
                s
            })
            .collect()
    };
    let side = snap.ln_side.exp();
    let mut worst: f64 = 0.0;
    let mut sup_b: f64 = 0.0;
    for i in 0..n_times {
        let t = t0 + 2.0 * h + (t1 - t0 - 4.0 * h) * (i as f64 + 0.5) / n_times as f64;
        for s in &sigmas {
            let (c, _) = table.center(k, t, s)?;
            let b = table.field_b(k, t, &c, depth)?;
            sup_b = sup_b.max(b.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            // Fourth-order central difference in time.
            let mut dphi = 0.0;
            for (j, w) in [(-2.0, 1.0), (-1.0, -8.0), (1.0, 8.0), (2.0, -1.0)] {
                let (cj, _) = table.center(k, t + j * h, s)?;
                dphi += w * test.averages(&cj, side).0;
            }
            let (_, g0) = test.averages(&c, side);
            let flux: f64 = b.iter().zip(&g0).map(|(b, g)| b * g).sum();
            worst = worst.max((dphi / (12.0 * h) - flux).abs());
        }
    }
    let scale = test.grad_sup() * sup_b;
    Ok(if scale > 0.0 { worst / scale } else { 0.0 })
}
