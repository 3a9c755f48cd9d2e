//! Compressor suite with exact bit accounting and contract validators.
//!
//! Two contract classes are tracked for every compressor:
//!
//! * **δ-contracted**: `E||Q(x) - x||^2 <= δ ||x||^2` for all `x`.
//! * **bounded-absolute**: `||Q(x) - x||_p <= δ` on the unit `p`-ball.
//!
//! Declared constants depend on the dimension `d`, so contracts are resolved
//! per dimension through [`CompressorSpec::contract`].

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::pnorm;

pub const DEFAULT_SCALAR_BITS: u32 = 32;

/// Dither used by the stochastic quantizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dither {
    /// `ξ ~ Uniform[0,1]^d`.
    Random,
    /// `ξ = c·1` for a fixed `c ∈ [0, 1]`.
    Fixed(f64),
}

/// Shrink factor of the biased quantizer `Q_u(x) / φ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shrink {
    Value(f64),
    /// `φ = 1 + d / (4u^2)`, the mean-square contracted choice.
    MeanSquare,
    /// `φ = 1 + d^{1/p} / u`, the unit-ball choice.
    UnitBall,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompressorKind {
    Identity,
    /// `Q(x) = 0.5` for `x >= 0`, `-0.5` otherwise.
    Binary,
    /// Coordinate-wise nearest level from a sorted level set.
    NearestRounding { levels: Vec<f64> },
    UnbiasedStochastic { u: f64, p: f64 },
    BiasedStochastic { u: f64, p: f64, phi: Shrink, xi: Dither },
    /// Keeps the `l` largest-magnitude coordinates; the unit-ball contract
    /// is declared for the norm `p`.
    TopK { l: usize, p: f64 },
    RandomK { l: usize },
}

/// A compressor together with its scalar precision `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressorSpec {
    pub kind: CompressorKind,
    pub scalar_bits: u32,
    alias: Option<String>,
}

/// Contract constants resolved for a given dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contract {
    /// `δ` of the mean-square (relative) contract, when it holds with `δ < 1`.
    pub contracted: Option<f64>,
    /// `(δ, p)` of the unit-ball (absolute) contract, when `δ < 1`.
    pub absolute: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMessage {
    pub payload: Vec<f64>,
    pub bits: u64,
}

impl CompressorSpec {
    pub fn new(kind: CompressorKind) -> Self {
        CompressorSpec {
            kind,
            scalar_bits: DEFAULT_SCALAR_BITS,
            alias: None,
        }
    }

    pub fn identity() -> Self {
        Self::new(CompressorKind::Identity)
    }

    pub fn binary() -> Self {
        Self::new(CompressorKind::Binary)
    }

    /// Unbiased stochastic quantizer with `u = 2^{l-1}`, `p = ∞` (table alias C1).
    pub fn c1() -> Self {
        let mut s = Self::new(CompressorKind::UnbiasedStochastic {
            u: 2.0,
            p: f64::INFINITY,
        });
        s.alias = Some("C1".into());
        s
    }

    /// Biased quantizer, `u = 2`, `p = ∞`, `ξ = 0.5·1` (table alias C2).
    pub fn c2() -> Self {
        let mut s = Self::new(CompressorKind::BiasedStochastic {
            u: 2.0,
            p: f64::INFINITY,
            phi: Shrink::UnitBall,
            xi: Dither::Fixed(0.5),
        });
        s.alias = Some("C2".into());
        s
    }

    /// Logarithmic quantizer over `{±2^i : i = -3..3}` (table alias C3).
    pub fn c3() -> Self {
        let mut s = Self::new(CompressorKind::NearestRounding {
            levels: log_levels(-3, 3),
        });
        s.alias = Some("C3".into());
        s
    }

    /// 1-bit binary quantizer (table alias C4).
    pub fn c4() -> Self {
        let mut s = Self::binary();
        s.alias = Some("C4".into());
        s
    }

    /// Uniform grid `lo, lo+step, ..., hi`.
    pub fn uniform_grid(lo: f64, step: f64, hi: f64) -> Result<Self> {
        Ok(Self::new(CompressorKind::NearestRounding {
            levels: grid_levels(lo, step, hi)?,
        }))
    }

    pub fn alias(&self) -> Option<&str> {
        self.alias.as_deref()
    }

    /// Whether the output is random (consumes the rng stream).
    pub fn is_stochastic(&self) -> bool {
        match &self.kind {
            CompressorKind::UnbiasedStochastic { .. } | CompressorKind::RandomK { .. } => true,
            CompressorKind::BiasedStochastic { xi, .. } => *xi == Dither::Random,
            _ => false,
        }
    }

    /// `E[Q(x)] = x` for every input.
    pub fn is_unbiased(&self) -> bool {
        matches!(
            self.kind,
            CompressorKind::Identity | CompressorKind::UnbiasedStochastic { .. }
        )
    }

    pub fn is_identity(&self) -> bool {
        self.kind == CompressorKind::Identity
    }

    /// Exact payload size in bits for a `d`-vector (no headers).
    pub fn bit_cost(&self, d: usize) -> u64 {
        let d64 = d as u64;
        let b = self.scalar_bits as u64;
        match &self.kind {
            CompressorKind::Identity => b * d64,
            CompressorKind::Binary => d64,
            CompressorKind::NearestRounding { levels } => ceil_log2(levels.len() as u64) * d64,
            CompressorKind::UnbiasedStochastic { u, .. }
            | CompressorKind::BiasedStochastic { u, .. } => {
                // sign bit plus magnitude levels 0..=floor(u); u = 2^{l-1} gives l+1 bits
                let per = ceil_log2(u.floor() as u64 + 1) + 1;
                per * d64 + b
            }
            CompressorKind::TopK { l, .. } | CompressorKind::RandomK { l } => {
                (*l.min(&d) as u64) * (b + ceil_log2(d64))
            }
        }
    }

    /// Applies the compressor to `x`.
    pub fn compress<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<CompressedMessage> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite compressor input".into()));
        }
        let mut payload = vec![0.0; x.len()];
        self.compress_into(x, &mut payload, rng);
        Ok(CompressedMessage {
            payload,
            bits: self.bit_cost(x.len()),
        })
    }

    /// Writes `Q(x)` into `out` without validation or allocation.
    pub fn compress_into<R: Rng + ?Sized>(&self, x: &[f64], out: &mut [f64], rng: &mut R) {
        debug_assert_eq!(x.len(), out.len());
        match &self.kind {
            CompressorKind::Identity => out.copy_from_slice(x),
            CompressorKind::Binary => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = if v >= 0.0 { 0.5 } else { -0.5 };
                }
            }
            CompressorKind::NearestRounding { levels } => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = nearest_level(levels, v);
                }
            }
            CompressorKind::UnbiasedStochastic { u, p } => {
                stochastic_quantize(x, out, *u, *p, 1.0, Dither::Random, rng)
            }
            CompressorKind::BiasedStochastic { u, p, phi, xi } => {
                let phi = resolve_phi(*phi, *u, *p, x.len());
                stochastic_quantize(x, out, *u, *p, phi, *xi, rng)
            }
            CompressorKind::TopK { l, .. } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for i in top_k_indices(x, *l) {
                    out[i] = x[i];
                }
            }
            CompressorKind::RandomK { l } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let l = (*l).min(x.len());
                for i in index::sample(rng, x.len(), l) {
                    out[i] = x[i];
                }
            }
        }
    }

    /// Resolves the declared contract constants for dimension `d`.
    pub fn contract(&self, d: usize) -> Contract {
        let df = d as f64;
        let (contracted, absolute) = match &self.kind {
            CompressorKind::Identity => (Some(0.0), Some((0.0, f64::INFINITY))),
            CompressorKind::Binary => (None, Some((0.5, f64::INFINITY))),
            CompressorKind::NearestRounding { levels } => {
                (None, Some((rounding_unit_ball_error(levels), f64::INFINITY)))
            }
            CompressorKind::UnbiasedStochastic { u, p } => {
                let c = if p.is_infinite() {
                    sup_mean_square_ratio_inf(*u, d, 1.0, Dither::Random).min(variance_bound(*u, *p, d))
                } else {
                    variance_bound(*u, *p, d)
                };
                (Some(c), Some((root(df, *p) / u, *p)))
            }
            CompressorKind::BiasedStochastic { u, p, phi, xi } => {
                let phi_v = resolve_phi(*phi, *u, *p, d);
                let c = match xi {
                    _ if p.is_infinite() => Some(sup_mean_square_ratio_inf(*u, d, phi_v, *xi)),
                    Dither::Random => {
                        let omega = variance_bound(*u, *p, d);
                        Some(omega / (phi_v * phi_v) + (1.0 - 1.0 / phi_v).powi(2))
                    }
                    Dither::Fixed(_) => None,
                };
                let generic = root(df, *p) * max_level_error(*u, phi_v, *xi) / u;
                let a = match (*phi, *xi) {
                    (Shrink::UnitBall, Dither::Fixed(c)) if c == 1.0 => {
                        let r = root(df, *p);
                        (r / (u + r)).min(generic)
                    }
                    _ => generic,
                };
                (c, Some((a, *p)))
            }
            CompressorKind::TopK { l, p } => {
                let frac = 1.0 - (*l).min(d) as f64 / df;
                let a = if p.is_infinite() { 1.0 } else { frac.powf(1.0 / p) };
                (Some(frac), Some((a, *p)))
            }
            CompressorKind::RandomK { l } => (Some(1.0 - (*l).min(d) as f64 / df), None),
        };
        Contract {
            contracted: contracted.filter(|&v| v < 1.0),
            absolute: absolute.filter(|&(v, _)| v < 1.0),
        }
    }

    pub fn require_contracted(&self, d: usize) -> Result<f64> {
        self.contract(d).contracted.ok_or_else(|| {
            Error::ContractMismatch(format!(
                "compressor `{self}` is not δ-contracted (mean-square relative contract) at d={d}"
            ))
        })
    }

    pub fn require_absolute(&self, d: usize) -> Result<(f64, f64)> {
        self.contract(d).absolute.ok_or_else(|| {
            Error::ContractMismatch(format!(
                "compressor `{self}` has no bounded-absolute (unit-ball) contract at d={d}"
            ))
        })
    }
}

fn ceil_log2(v: u64) -> u64 {
    if v <= 1 {
        0
    } else {
        64 - (v - 1).leading_zeros() as u64
    }
}

fn root(d: f64, p: f64) -> f64 {
    if p.is_infinite() {
        1.0
    } else {
        d.powf(1.0 / p)
    }
}

fn resolve_phi(phi: Shrink, u: f64, p: f64, d: usize) -> f64 {
    match phi {
        Shrink::Value(v) => v,
        Shrink::MeanSquare => 1.0 + d as f64 / (4.0 * u * u),
        Shrink::UnitBall => 1.0 + root(d as f64, p) / u,
    }
}

/// Variance bound `E||Q_u(x) - x||^2 <= ω ||x||^2` from the per-coordinate
/// bound `(||x||_p / u)^2 / 4`.
fn variance_bound(u: f64, p: f64, d: usize) -> f64 {
    let d = d as f64;
    if p >= 2.0 {
        d / (4.0 * u * u)
    } else {
        d.powf(2.0 / p) / (4.0 * u * u)
    }
}

fn stochastic_quantize<R: Rng + ?Sized>(
    x: &[f64],
    out: &mut [f64],
    u: f64,
    p: f64,
    phi: f64,
    xi: Dither,
    rng: &mut R,
) {
    let norm = pnorm(x, p);
    if norm == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let scale = norm / (u * phi);
    for (o, &v) in out.iter_mut().zip(x) {
        let dither = match xi {
            Dither::Random => rng.gen::<f64>(),
            Dither::Fixed(c) => c,
        };
        let level = (u * v.abs() / norm + dither).floor();
        *o = scale * v.signum() * level;
        if v == 0.0 {
            *o = 0.0;
        }
    }
}

/// Exact supremum of `E||Q(x) - x||^2 / ||x||^2` for the `p = ∞` quantizer
/// `Q_u(x)/φ`.
///
/// Writing `a_i = u|x_i| / ||x||_∞`, one coordinate sits at `a = u` and the
/// ratio is separable in the others, so the supremum is attained with all
/// remaining coordinates at a common `a`. On each piece where the level map
/// is fixed, numerator and denominator are quadratics in `a` and the
/// stationary points solve a quadratic.
fn sup_mean_square_ratio_inf(u: f64, d: usize, phi: f64, xi: Dither) -> f64 {
    let m = (d - 1) as f64;
    let c0 = match xi {
        Dither::Random => {
            let f = u.fract();
            f * (1.0 - f) / (phi * phi) + (u / phi - u).powi(2)
        }
        Dither::Fixed(c) => ((u + c).floor() / phi - u).powi(2),
    };
    let den0 = u * u;
    if d == 1 {
        return c0 / den0;
    }
    // pieces: (lo, hi, err(a) = e2 a^2 + e1 a + e0)
    let mut pieces: Vec<(f64, f64, [f64; 3])> = Vec::new();
    match xi {
        Dither::Random => {
            let mut k = 0.0;
            while k < u {
                let hi = (k + 1.0).min(u);
                // f = a - k; E err = f(1-f)/φ^2 + a^2 (1 - 1/φ)^2
                let s = (1.0 - 1.0 / phi).powi(2);
                let ip = 1.0 / (phi * phi);
                // f(1-f) = -(a^2) + (2k+1) a - k(k+1)
                pieces.push((k, hi, [s - ip, ip * (2.0 * k + 1.0), -ip * k * (k + 1.0)]));
                k += 1.0;
            }
        }
        Dither::Fixed(c) => {
            let mut lo = 0.0;
            while lo < u {
                let r = (lo + c).floor();
                let next = (r + 1.0 - c).min(u);
                let hi = if next <= lo { u } else { next };
                // err = (r/φ - a)^2 = a^2 - 2 (r/φ) a + (r/φ)^2
                let t = r / phi;
                pieces.push((lo, hi, [1.0, -2.0 * t, t * t]));
                lo = hi;
            }
        }
    }
    let ratio = |a: f64, e: &[f64; 3]| {
        (c0 + m * (e[0] * a * a + e[1] * a + e[2])) / (den0 + m * a * a)
    };
    let mut best = c0 / den0;
    for (lo, hi, e) in &pieces {
        let mut cands = vec![*lo, *hi];
        // N = n2 a^2 + n1 a + n0, D = d2 a^2 + d0
        let (n2, n1, n0) = (m * e[0], m * e[1], c0 + m * e[2]);
        let (d2, d0) = (m, den0);
        // -n1 d2 a^2 + 2 (n2 d0 - n0 d2) a + n1 d0 = 0
        let qa = -n1 * d2;
        let qb = 2.0 * (n2 * d0 - n0 * d2);
        let qc = n1 * d0;
        if qa.abs() < 1e-300 {
            if qb.abs() > 1e-300 {
                cands.push(-qc / qb);
            }
        } else {
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                cands.push((-qb + sq) / (2.0 * qa));
                cands.push((-qb - sq) / (2.0 * qa));
            }
        }
        for a in cands {
            if a >= *lo && a <= *hi {
                best = best.max(ratio(a, e));
            }
        }
    }
    best
}

/// `sup_{a in [0,u]} |r(a)/φ - a|` over the feasible integer levels `r(a)`.
fn max_level_error(u: f64, phi: f64, xi: Dither) -> f64 {
    let mut best = 0.0_f64;
    match xi {
        Dither::Random => {
            let mut k = 0.0;
            while k <= u {
                for r in [k - 1.0, k, k + 1.0] {
                    if r < 0.0 || (r > k && k + 1.0 > u && k >= u) {
                        continue;
                    }
                    best = best.max((r / phi - k).abs());
                }
                k += 1.0;
            }
            // pieces ending at u when u is not an integer
            let k = u.floor();
            for r in [k, k + 1.0] {
                best = best.max((r / phi - u).abs());
            }
        }
        Dither::Fixed(c) => {
            let mut points = vec![0.0, u];
            let mut m = 1.0;
            while m - c <= u {
                if m - c > 0.0 {
                    points.push(m - c);
                }
                m += 1.0;
            }
            for a in points {
                let r = (a + c).floor();
                best = best.max((r / phi - a).abs());
                if a > 0.0 && (a + c).fract() == 0.0 {
                    best = best.max(((r - 1.0) / phi - a).abs());
                }
            }
        }
    }
    best
}

fn nearest_level(levels: &[f64], v: f64) -> f64 {
    let idx = levels.partition_point(|&q| q < v);
    if idx == 0 {
        return levels[0];
    }
    if idx == levels.len() {
        return levels[levels.len() - 1];
    }
    let lo = levels[idx - 1];
    let hi = levels[idx];
    let dl = v - lo;
    let dh = hi - v;
    if dl < dh {
        lo
    } else if dh < dl {
        hi
    } else if lo.abs() <= hi.abs() {
        lo
    } else {
        hi
    }
}

/// `sup_{t in [-1,1]} min_q |t - q|`.
fn rounding_unit_ball_error(levels: &[f64]) -> f64 {
    let mut cands = vec![-1.0, 1.0];
    for w in levels.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        if (-1.0..=1.0).contains(&mid) {
            cands.push(mid);
        }
    }
    cands
        .into_iter()
        .map(|t| (t - nearest_level(levels, t)).abs())
        .fold(0.0, f64::max)
}

fn top_k_indices(x: &[f64], l: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    // ties broken toward the lower index
    idx.sort_by(|&a, &b| {
        x[b].abs()
            .partial_cmp(&x[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(l.min(x.len()));
    idx
}

pub fn log_levels(min_exp: i32, max_exp: i32) -> Vec<f64> {
    let mut v: Vec<f64> = (min_exp..=max_exp)
        .flat_map(|i| {
            let q = 2f64.powi(i);
            [q, -q]
        })
        .collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

pub fn grid_levels(lo: f64, step: f64, hi: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(hi > lo) {
        return Err(Error::InvalidParameter(format!(
            "bad grid {lo}:{step}:{hi}"
        )));
    }
    let count = ((hi - lo) / step).round() as usize;
    Ok((0..=count)
        .map(|k| lo + (hi - lo) * k as f64 / count as f64)
        .collect())
}

/// Monte Carlo estimate of a contract constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaEstimate {
    pub delta_hat: f64,
    /// Standard error of the maximizing direction's mean (0 for
    /// deterministic compressors or absolute estimates).
    pub std_error: f64,
}

fn sample_direction<R: Rng + ?Sized>(d: usize, family: usize, rng: &mut R) -> Vec<f64> {
    let gauss = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
    let mut x: Vec<f64> = match family % 4 {
        // unit sphere
        0 => (0..d).map(|_| gauss(rng)).collect(),
        // heavy-tailed: Cauchy-like ratio of normals
        1 => (0..d)
            .map(|_| gauss(rng) / gauss(rng).abs().max(1e-3))
            .collect(),
        // sparse support
        2 => {
            let k = rng.gen_range(1..=d);
            let mut v = vec![0.0; d];
            for i in index::sample(rng, d, k) {
                v[i] = gauss(rng);
            }
            v
        }
        // one spike over a uniform background
        _ => {
            let mut v: Vec<f64> = (0..d)
                .map(|_| rng.gen::<f64>() * if rng.gen() { 1.0 } else { -1.0 })
                .collect();
            let s = rng.gen_range(0..d);
            v[s] = if rng.gen() { 1.0 } else { -1.0 } * (1.0 + rng.gen::<f64>());
            v
        }
    };
    if x.iter().all(|&v| v == 0.0) {
        x[0] = 1.0;
    }
    x
}

/// Estimates `sup_x E||Q(x)-x||^2 / ||x||^2` over sampled directions.
pub fn estimate_delta_contraction<R: Rng + ?Sized>(
    spec: &CompressorSpec,
    d: usize,
    trials: usize,
    rng: &mut R,
) -> Result<DeltaEstimate> {
    spec.require_contracted(d)?;
    if trials < 1000 {
        return Err(Error::InvalidParameter("need at least 1000 trials".into()));
    }
    let reps = if spec.is_stochastic() { 200 } else { 1 };
    let directions = (trials / reps).max(1);
    let mut best = DeltaEstimate {
        delta_hat: 0.0,
        std_error: 0.0,
    };
    let mut out = vec![0.0; d];
    for t in 0..directions {
        let x = sample_direction(d, t, rng);
        let nx: f64 = x.iter().map(|v| v * v).sum();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..reps {
            spec.compress_into(&x, &mut out, rng);
            let e: f64 = out.iter().zip(&x).map(|(q, v)| (q - v).powi(2)).sum::<f64>() / nx;
            sum += e;
            sum_sq += e * e;
        }
        let mean = sum / reps as f64;
        if mean > best.delta_hat {
            let se = if reps > 1 {
                let var = (sum_sq / reps as f64 - mean * mean).max(0.0) * reps as f64
                    / (reps - 1) as f64;
                (var / reps as f64).sqrt()
            } else {
                0.0
            };
            best = DeltaEstimate {
                delta_hat: mean,
                std_error: se,
            };
        }
    }
    Ok(best)
}

/// Estimates `sup_{||x||_p <= 1} ||Q(x) - x||_p` over sampled points.
pub fn estimate_delta_absolute<R: Rng + ?Sized>(
    spec: &CompressorSpec,
    d: usize,
    p: f64,
    trials: usize,
    rng: &mut R,
) -> Result<DeltaEstimate> {
    spec.require_absolute(d)?;
    if trials < 1000 {
        return Err(Error::InvalidParameter("need at least 1000 trials".into()));
    }
    let mut best = 0.0_f64;
    let mut out = vec![0.0; d];
    for t in 0..trials {
        let mut x = sample_direction(d, t, rng);
        let radius = if t % 3 == 0 { 1.0 } else { rng.gen::<f64>() };
        let nx = pnorm(&x, p);
        x.iter_mut().for_each(|v| *v *= radius / nx);
        spec.compress_into(&x, &mut out, rng);
        let err: Vec<f64> = out.iter().zip(&x).map(|(q, v)| q - v).collect();
        best = best.max(pnorm(&err, p));
    }
    Ok(DeltaEstimate {
        delta_hat: best,
        std_error: 0.0,
    })
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}

impl fmt::Display for CompressorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(a) = &self.alias {
            return f.write_str(a);
        }
        let body = match &self.kind {
            CompressorKind::Identity => "identity".to_string(),
            CompressorKind::Binary => "binary".to_string(),
            CompressorKind::NearestRounding { levels } => {
                let list: Vec<String> = levels.iter().map(|v| format!("{v}")).collect();
                format!("round:levels={}", list.join(";"))
            }
            CompressorKind::UnbiasedStochastic { u, p } => {
                format!("unbiased:u={},p={}", fmt_num(*u), fmt_num(*p))
            }
            CompressorKind::BiasedStochastic { u, p, phi, xi } => {
                let phi = match phi {
                    Shrink::Value(v) => fmt_num(*v),
                    Shrink::MeanSquare => "mean_square".into(),
                    Shrink::UnitBall => "unit_ball".into(),
                };
                let xi = match xi {
                    Dither::Random => "random".into(),
                    Dither::Fixed(c) => fmt_num(*c),
                };
                format!("biased:u={},p={},phi={phi},xi={xi}", fmt_num(*u), fmt_num(*p))
            }
            CompressorKind::TopK { l, p } => format!("topk:l={l},p={}", fmt_num(*p)),
            CompressorKind::RandomK { l } => format!("randk:l={l}"),
        };
        f.write_str(&body)?;
        if self.scalar_bits != DEFAULT_SCALAR_BITS {
            write!(f, "{}bits={}", if body.contains(':') { "," } else { ":" }, self.scalar_bits)?;
        }
        Ok(())
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    match v {
        "inf" | "infinity" => Ok(f64::INFINITY),
        _ => v
            .parse::<f64>()
            .map_err(|_| Error::Parse(format!("bad value `{v}` for `{key}`"))),
    }
}

impl FromStr for CompressorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "C1" | "c1" => return Ok(Self::c1()),
            "C2" | "c2" => return Ok(Self::c2()),
            "C3" | "c3" => return Ok(Self::c3()),
            "C4" | "c4" => return Ok(Self::c4()),
            _ => {}
        }
        let (head, rest) = match s.split_once(':') {
            Some((h, r)) => (h, r),
            None => (s, ""),
        };
        let mut params: Vec<(String, String)> = Vec::new();
        for part in rest.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value in `{part}`")))?;
            params.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut used = vec![false; params.len()];
        let mut take = |key: &str| -> Option<String> {
            params.iter().enumerate().find_map(|(i, (k, v))| {
                if k == key {
                    used[i] = true;
                    Some(v.clone())
                } else {
                    None
                }
            })
        };
        let bits = match take("bits") {
            Some(v) => v
                .parse::<u32>()
                .map_err(|_| Error::Parse(format!("bad bits `{v}`")))?,
            None => DEFAULT_SCALAR_BITS,
        };
        let need = |v: Option<String>, key: &str| -> Result<String> {
            v.ok_or_else(|| Error::Parse(format!("`{head}` needs `{key}`")))
        };
        let kind = match head {
            "identity" => CompressorKind::Identity,
            "binary" => CompressorKind::Binary,
            "unbiased" => {
                let u = parse_f64("u", &need(take("u"), "u")?)?;
                let p = parse_f64("p", &take("p").unwrap_or_else(|| "inf".into()))?;
                CompressorKind::UnbiasedStochastic { u, p }
            }
            "biased" => {
                let u = parse_f64("u", &need(take("u"), "u")?)?;
                let p = parse_f64("p", &take("p").unwrap_or_else(|| "inf".into()))?;
                let phi = match take("phi").as_deref() {
                    None | Some("unit_ball") => Shrink::UnitBall,
                    Some("mean_square") => Shrink::MeanSquare,
                    Some(v) => Shrink::Value(parse_f64("phi", v)?),
                };
                let xi = match take("xi").as_deref() {
                    None | Some("random") => Dither::Random,
                    Some(v) => Dither::Fixed(parse_f64("xi", v)?),
                };
                CompressorKind::BiasedStochastic { u, p, phi, xi }
            }
            "round" => {
                if let Some(g) = take("grid") {
                    let parts: Vec<&str> = g.split(':').collect();
                    if parts.len() != 3 {
                        return Err(Error::Parse(format!("grid must be lo:step:hi, got `{g}`")));
                    }
                    CompressorKind::NearestRounding {
                        levels: grid_levels(
                            parse_f64("grid", parts[0])?,
                            parse_f64("grid", parts[1])?,
                            parse_f64("grid", parts[2])?,
                        )?,
                    }
                } else {
                    let list = need(take("levels"), "grid or levels")?;
                    let mut levels = list
                        .split(';')
                        .map(|v| parse_f64("levels", v))
                        .collect::<Result<Vec<_>>>()?;
                    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    levels.dedup();
                    CompressorKind::NearestRounding { levels }
                }
            }
            "log" => {
                let lo = parse_f64("min", &need(take("min"), "min")?)? as i32;
                let hi = parse_f64("max", &need(take("max"), "max")?)? as i32;
                CompressorKind::NearestRounding {
                    levels: log_levels(lo, hi),
                }
            }
            "topk" => {
                let l = need(take("l"), "l")?
                    .parse()
                    .map_err(|_| Error::Parse("bad l".into()))?;
                let p = parse_f64("p", &take("p").unwrap_or_else(|| "2".into()))?;
                CompressorKind::TopK { l, p }
            }
            "randk" => {
                let l = need(take("l"), "l")?
                    .parse()
                    .map_err(|_| Error::Parse("bad l".into()))?;
                CompressorKind::RandomK { l }
            }
            other => return Err(Error::Parse(format!("unknown compressor `{other}`"))),
        };
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(Error::Parse(format!(
                "unknown parameter `{}` for `{head}`",
                params[i].0
            )));
        }
        let spec = CompressorSpec {
            kind,
            scalar_bits: bits,
            alias: None,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl CompressorSpec {
    fn validate(&self) -> Result<()> {
        match &self.kind {
            CompressorKind::UnbiasedStochastic { u, p }
            | CompressorKind::BiasedStochastic { u, p, .. } => {
                if !(*u >= 1.0) {
                    return Err(Error::InvalidParameter(format!("u must be >= 1, got {u}")));
                }
                if !(*p >= 1.0) {
                    return Err(Error::InvalidParameter(format!("p must be >= 1, got {p}")));
                }
                if let CompressorKind::BiasedStochastic { phi, xi, .. } = &self.kind {
                    if let Shrink::Value(v) = phi {
                        if !(*v >= 1.0) {
                            return Err(Error::InvalidParameter(format!("phi must be >= 1, got {v}")));
                        }
                    }
                    if let Dither::Fixed(c) = xi {
                        if !(0.0..=1.0).contains(c) {
                            return Err(Error::InvalidParameter(format!("xi must be in [0,1], got {c}")));
                        }
                    }
                }
            }
            CompressorKind::NearestRounding { levels } if levels.is_empty() => {
                return Err(Error::InvalidParameter("empty level set".into()));
            }
            CompressorKind::TopK { l, .. } | CompressorKind::RandomK { l } if *l == 0 => {
                return Err(Error::InvalidParameter("l must be positive".into()));
            }
            _ => {}
        }
        Ok(())
    }
}
