//! Closed-form stepsize bounds, contraction factors and scaling schedules,
//! plus empirical certification of traces against them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::topology::MixingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TheoremId {
    /// CHOCO-GOSSIP under a mean-square contract.
    T1,
    /// COLD with an unbiased mean-square compressor.
    T2,
    /// COLD with a biased mean-square compressor.
    T3,
    /// CCS under a unit-ball contract.
    T4,
    /// Dyna-COLD under a unit-ball contract.
    T5,
}

impl fmt::Display for TheoremId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TheoremId::T1 => "t1",
            TheoremId::T2 => "t2",
            TheoremId::T3 => "t3",
            TheoremId::T4 => "t4",
            TheoremId::T5 => "t5",
        };
        f.write_str(s)
    }
}

impl FromStr for TheoremId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(TheoremId::T1),
            "t2" => Ok(TheoremId::T2),
            "t3" => Ok(TheoremId::T3),
            "t4" => Ok(TheoremId::T4),
            "t5" => Ok(TheoremId::T5),
            _ => Err(Error::Parse(format!("unknown theorem `{s}` (expected t1..t5)"))),
        }
    }
}

/// A rate certificate: the certified per-step factor and every constant
/// that went into it.
#[derive(Debug, Clone, PartialEq)]
pub struct RateCertificate {
    pub theorem: TheoremId,
    /// σ for t1..t3, β for t4/t5.
    pub rate: f64,
    pub gamma: f64,
    pub tau: Option<f64>,
    pub constants: BTreeMap<String, f64>,
    pub valid: bool,
    pub reasons: Vec<String>,
}

impl RateCertificate {
    fn new(theorem: TheoremId, gamma: f64) -> Self {
        RateCertificate {
            theorem,
            rate: f64::NAN,
            gamma,
            tau: None,
            constants: BTreeMap::new(),
            valid: true,
            reasons: Vec::new(),
        }
    }

    /// Adds or replaces a named constant.
    pub fn set(&mut self, key: &str, v: f64) {
        self.constants.insert(key.to_string(), v);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.constants.get(key).copied()
    }

    fn fail(&mut self, reason: impl Into<String>) {
        self.valid = false;
        self.reasons.push(reason.into());
    }

    fn finish(mut self) -> Self {
        if self.valid && !(self.rate > 0.0 && self.rate < 1.0) {
            let r = self.rate;
            self.fail(format!("certified factor {r} is not in (0, 1)"));
        }
        self
    }

    /// Flat `key=value` lines, stable order.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("theorem={}\n", self.theorem));
        out.push_str(&format!("rate={}\n", fmt_f(self.rate)));
        out.push_str(&format!("gamma={}\n", fmt_f(self.gamma)));
        if let Some(t) = self.tau {
            out.push_str(&format!("tau={}\n", fmt_f(t)));
        }
        out.push_str(&format!("valid={}\n", self.valid));
        for (k, v) in &self.constants {
            out.push_str(&format!("{k}={}\n", fmt_f(*v)));
        }
        for r in &self.reasons {
            out.push_str(&format!("reason={r}\n"));
        }
        out
    }

    pub fn from_key_values(text: &str) -> Result<RateCertificate> {
        let mut cert: Option<RateCertificate> = None;
        let mut rate = None;
        let mut gamma = None;
        let mut tau = None;
        let mut valid = None;
        let mut constants = BTreeMap::new();
        let mut reasons = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value, got `{line}`")))?;
            let num = || parse_f(v).ok_or_else(|| Error::Parse(format!("bad number `{v}` for `{k}`")));
            match k {
                "theorem" => cert = Some(RateCertificate::new(v.parse()?, 0.0)),
                "rate" => rate = Some(num()?),
                "gamma" => gamma = Some(num()?),
                "tau" => tau = Some(num()?),
                "valid" => {
                    valid = Some(v.parse::<bool>().map_err(|_| Error::Parse(format!("bad bool `{v}`")))?)
                }
                "reason" => reasons.push(v.to_string()),
                _ => {
                    constants.insert(k.to_string(), num()?);
                }
            }
        }
        let mut c = cert.ok_or_else(|| Error::Schema("certificate lacks `theorem`".into()))?;
        c.rate = rate.ok_or_else(|| Error::Schema("certificate lacks `rate`".into()))?;
        c.gamma = gamma.ok_or_else(|| Error::Schema("certificate lacks `gamma`".into()))?;
        c.tau = tau;
        c.valid = valid.unwrap_or(true);
        c.constants = constants;
        c.reasons = reasons;
        Ok(c)
    }
}

fn fmt_f(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

fn parse_f(s: &str) -> Option<f64> {
    match s {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

fn check_delta(cert: &mut RateCertificate, delta: f64) {
    if !(0.0..1.0).contains(&delta) {
        cert.fail(format!("delta={delta} outside [0, 1)"));
    }
}

fn record_graph(cert: &mut RateCertificate, m: &MixingMatrix) {
    cert.set("rho", m.rho);
    cert.set("lambda_n", m.lambda_n);
    cert.set("lambda_2", m.lambda2);
}

/// `q` weighting the consensus error in the CHOCO-GOSSIP Lyapunov function.
pub fn choco_lyapunov_weight(delta: f64, gamma: f64, lambda_n: f64) -> f64 {
    let g = gamma * (1.0 - lambda_n);
    (1.0 + g) * delta / (1.0 - g)
}

/// Rate of CHOCO-GOSSIP; `gamma = None` uses `(1-δ)/((3+δ)(1-λ_n))`.
pub fn choco_rate(delta: f64, m: &MixingMatrix, gamma: Option<f64>) -> RateCertificate {
    let one_m_ln = 1.0 - m.lambda_n;
    let default_gamma = (1.0 - delta) / ((3.0 + delta) * one_m_ln);
    let gamma_v = gamma.unwrap_or(default_gamma);
    let mut c = RateCertificate::new(TheoremId::T1, gamma_v);
    check_delta(&mut c, delta);
    record_graph(&mut c, m);
    c.set("delta", delta);
    let cap = (1.0 - delta) / ((1.0 + delta) * one_m_ln);
    c.set("gamma_max", cap);
    if !(gamma_v > 0.0 && gamma_v < cap) {
        c.fail(format!("gamma={gamma_v} outside (0, {cap})"));
    }
    let g = gamma_v * one_m_ln;
    let generic = f64::max(
        1.0 - 2.0 * gamma_v * m.rho / (1.0 + g),
        delta * (1.0 + g) / (1.0 - g),
    );
    c.set("sigma_generic", generic);
    c.set("q", choco_lyapunov_weight(delta, gamma_v, m.lambda_n));
    c.rate = match gamma {
        None => 1.0 - (1.0 - delta) * m.rho / (2.0 * one_m_ln),
        Some(_) => generic,
    };
    c.finish()
}

fn theta_bounds(c: &mut RateCertificate, gamma: f64, tau: f64, m: &MixingMatrix) {
    // eigenvalues of Θ = τ⁻¹(I-W)^† - γI on range(I-W)
    let lo = 1.0 / (tau * (1.0 - m.lambda_n)) - gamma;
    let hi = 1.0 / (tau * m.rho) - gamma;
    c.set("theta_min", lo);
    c.set("theta_max", hi);
    if !(tau * gamma * (1.0 - m.lambda_n) < 1.0) {
        c.fail(format!(
            "tau*gamma*(1-lambda_n) = {} >= 1: Theta is indefinite",
            tau * gamma * (1.0 - m.lambda_n)
        ));
    }
}

fn check_mu_l(c: &mut RateCertificate, mu: f64, l: f64) {
    c.set("mu", mu);
    c.set("L", l);
    if !(mu > 0.0 && mu <= l) {
        c.fail(format!("need 0 < mu <= L, got mu={mu}, L={l}"));
    }
}

/// Rate of COLD with an unbiased mean-square compressor; defaults
/// `γ = 1/(2L)`, `τ = (1-δ)²/(2γ(24δ+1))`.
///
/// Stepsize bounds are checked as closed inequalities: the defaults sit on
/// the boundary when `μ = L` or `δ = 0`.
pub fn cold_rate_unbiased(
    mu: f64,
    l: f64,
    delta: f64,
    m: &MixingMatrix,
    gamma: Option<f64>,
    tau: Option<f64>,
) -> RateCertificate {
    let gamma_v = gamma.unwrap_or(1.0 / (2.0 * l));
    let tau_v = tau.unwrap_or((1.0 - delta).powi(2) / (2.0 * gamma_v * (24.0 * delta + 1.0)));
    let mut c = RateCertificate::new(TheoremId::T2, gamma_v);
    c.tau = Some(tau_v);
    check_delta(&mut c, delta);
    check_mu_l(&mut c, mu, l);
    record_graph(&mut c, m);
    c.set("delta", delta);
    let gamma_max = 1.0 / (mu + l);
    let tau_max = (1.0 - delta).powi(2) / (2.0 * gamma_v * (24.0 * delta + (1.0 - delta).powi(2)));
    c.set("gamma_max", gamma_max);
    c.set("tau_max", tau_max);
    if !(gamma_v > 0.0 && gamma_v <= gamma_max) {
        c.fail(format!("gamma={gamma_v} outside (0, {gamma_max}]"));
    }
    if !(tau_v > 0.0 && tau_v <= tau_max) {
        c.fail(format!("tau={tau_v} outside (0, {tau_max}]"));
    }
    theta_bounds(&mut c, gamma_v, tau_v, m);
    c.rate = f64::max(
        1.0 - 2.0 * mu * l * gamma_v / (mu + l),
        1.0 - gamma_v * tau_v * m.rho / 2.0,
    );
    if gamma.is_none() && tau.is_none() {
        let closed = f64::max(
            l / (mu + l),
            1.0 - (1.0 - delta).powi(2) * m.rho / (4.0 * (1.0 + 24.0 * delta)),
        );
        c.set("sigma_closed_form", closed);
    }
    c.finish()
}

/// `δ' = 4√δ/(1-δ)` for biased mean-square compressors.
pub fn biased_delta_prime(delta: f64) -> f64 {
    4.0 * delta.sqrt() / (1.0 - delta)
}

/// Rate of COLD with a biased mean-square compressor.
pub fn cold_rate_biased(
    mu: f64,
    l: f64,
    delta: f64,
    m: &MixingMatrix,
    gamma: f64,
    tau: f64,
) -> RateCertificate {
    let mut c = RateCertificate::new(TheoremId::T3, gamma);
    c.tau = Some(tau);
    check_delta(&mut c, delta);
    check_mu_l(&mut c, mu, l);
    record_graph(&mut c, m);
    c.set("delta", delta);
    let dp = biased_delta_prime(delta);
    c.set("delta_prime", dp);
    if !(dp < 1.0) {
        c.fail(format!(
            "bias too large: delta'={dp} >= 1 (needs delta below about 0.0557)"
        ));
    }
    let gamma_max = (1.0 - delta) / (mu + l);
    let tau_max = (1.0 - delta) / (2.0 * gamma * (1.0 - m.lambda_n));
    c.set("gamma_max", gamma_max);
    c.set("tau_max", tau_max);
    if !(gamma > 0.0 && gamma < gamma_max) {
        c.fail(format!("gamma={gamma} outside (0, {gamma_max})"));
    }
    if !(tau > 0.0 && tau < tau_max) {
        c.fail(format!("tau={tau} outside (0, {tau_max})"));
    }
    theta_bounds(&mut c, gamma, tau, m);
    let root = if dp < 1.0 { dp.sqrt() } else { 1.0 };
    c.rate = f64::max(
        1.0 - 2.0 * mu * l * gamma / (mu + l),
        1.0 - gamma * tau * m.rho * (1.0 - root),
    );
    if delta > 0.0 && dp < 1.0 {
        c.set(
            "innovation_weight",
            (1.0 + delta - 4.0 * delta.sqrt()) / (2.0 * gamma * (delta * dp).sqrt()),
        );
    }
    c.finish()
}

/// Norm-equivalence constants `(c̄, c̲)` with `||A||_max <= c̄||A||` and
/// `||A|| <= c̲||A||_max`, where `||A||_max` is the largest row `p`-norm.
pub fn norm_constants(p: f64, n: usize, d: usize) -> (f64, f64) {
    let (n, d) = (n as f64, d as f64);
    let inv_p = if p.is_infinite() { 0.0 } else { 1.0 / p };
    if p < 2.0 {
        (d.powf(inv_p - 0.5), n.sqrt())
    } else {
        (1.0, n.sqrt() * d.powf(0.5 - inv_p))
    }
}

/// `c_p = √n d^{|1/2 - 1/p|}`.
pub fn c_p(p: f64, n: usize, d: usize) -> f64 {
    let inv_p = if p.is_infinite() { 0.0 } else { 1.0 / p };
    (n as f64).sqrt() * (d as f64).powf((0.5 - inv_p).abs())
}

fn ccs_beta_min(delta: f64, gamma: f64, rho: f64, cp: f64) -> f64 {
    let a = 1.0 - gamma * rho / 2.0 + 2.0 * delta * gamma * gamma * cp / (1.0 - (1.0 + 2.0 * gamma) * delta);
    let b = (1.0 + delta) / 2.0 + delta * gamma * (1.0 + 2.0 * cp / rho);
    a.max(b)
}

/// Schedule for CCS. `gamma = None` picks the stepsize in `(0, cap]`
/// minimizing `β̲` (golden-section search); `β = β̲`.
///
/// The initial scale depends on the starting point; see
/// [`ccs_initial_scale`].
pub fn ccs_schedule(
    delta: f64,
    p: f64,
    n: usize,
    d: usize,
    m: &MixingMatrix,
    gamma: Option<f64>,
) -> RateCertificate {
    let cp = c_p(p, n, d);
    let (c_bar, c_under) = norm_constants(p, n, d);
    let cap = if delta == 0.0 {
        1.0
    } else {
        ((1.0 - delta) * m.rho / (2.0 * delta * (1.0 + 2.0 * cp))).min(1.0)
    };
    let gamma_v = match gamma {
        Some(g) => g,
        None => golden_min(|g| ccs_beta_min(delta, g, m.rho, cp), cap * 1e-9, cap),
    };
    let mut c = RateCertificate::new(TheoremId::T4, gamma_v);
    check_delta(&mut c, delta);
    record_graph(&mut c, m);
    c.set("delta", delta);
    c.set("p", p);
    c.set("c_p", cp);
    c.set("c_bar", c_bar);
    c.set("c_under", c_under);
    c.set("gamma_max", cap);
    if !(gamma_v > 0.0 && gamma_v <= cap) {
        c.fail(format!("gamma={gamma_v} outside (0, {cap}]"));
    }
    let beta = ccs_beta_min(delta, gamma_v, m.rho, cp);
    c.set("beta_min", beta);
    let varsigma = delta * c_under / m.rho + (1.0 - (1.0 + 2.0 * gamma_v) * delta) / (4.0 * gamma_v);
    c.set("varsigma", varsigma);
    if !(1.0 - (1.0 + 2.0 * gamma_v) * delta > 0.0) {
        c.fail("1-(1+2γ)δ must be positive");
    }
    c.rate = beta;
    c.finish()
}

/// `c_s = max{||X⁰ - 1x̄ᵀ|| / ς, ||X⁰ - X̂⁰||_max}`; the second term is the
/// base case of the envelope induction.
pub fn ccs_initial_scale(cert: &RateCertificate, consensus_err0: f64, innovation0: f64) -> f64 {
    let varsigma = cert.get("varsigma").unwrap_or(f64::NAN);
    let s = (consensus_err0 / varsigma).max(innovation0);
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

/// `δ' = 64δ(1+δ)c_p / ((1-δ)³ρ)` for Dyna-COLD.
pub fn dyna_delta_prime(delta: f64, cp: f64, rho: f64) -> f64 {
    64.0 * delta * (1.0 + delta) * cp / ((1.0 - delta).powi(3) * rho)
}

/// Schedule for Dyna-COLD: `τ = 2μL/(ρ(μ+L))`, `γ` at the minimum of its
/// caps, then `ν`, `τ̃`, `β`, `ς`.
///
/// The certified `β` is the larger of the closed-form value and the value
/// the envelope induction requires, `max{(1+β₁)/2, (1+β₂)/2}`; both agree at
/// `δ = 0`. `τ̃ = ½` is accepted (the caps make it attainable). At `δ = 0`
/// the second scale constant is infinite and `ς = 2ς₁` is used instead.
pub fn dyna_cold_schedule(
    mu: f64,
    l: f64,
    delta: f64,
    p: f64,
    n: usize,
    d: usize,
    m: &MixingMatrix,
) -> RateCertificate {
    let cp = c_p(p, n, d);
    let (c_bar, c_under) = norm_constants(p, n, d);
    let one_m_ln = 1.0 - m.lambda_n;
    let tau = 2.0 * mu * l / (m.rho * (mu + l));
    let gamma = (2.0 / (mu + l))
        .min(1.0 / (2.0 * tau * one_m_ln))
        .min(tau * one_m_ln / (l * l));
    let mut c = RateCertificate::new(TheoremId::T5, gamma);
    c.tau = Some(tau);
    check_delta(&mut c, delta);
    check_mu_l(&mut c, mu, l);
    record_graph(&mut c, m);
    c.set("delta", delta);
    c.set("p", p);
    c.set("c_p", cp);
    c.set("c_bar", c_bar);
    c.set("c_under", c_under);
    let dp = dyna_delta_prime(delta, cp, m.rho);
    c.set("delta_prime", dp);
    if !(dp < 1.0) {
        // (64 c_p / ρ) δ(1+δ) < (1-δ)³, solved for the threshold by bisection
        let thr = bisect(|x| dyna_delta_prime(x, cp, m.rho) - 1.0, 0.0, 1.0);
        c.set("delta_max", thr);
        c.fail(format!("delta'={dp} >= 1: needs delta < {thr}"));
    }
    let tt = gamma * tau * one_m_ln;
    c.set("tau_tilde", tt);
    if tt > 0.5 {
        c.fail(format!("tau_tilde={tt} > 1/2"));
    }
    let nu = f64::max(
        1.0 - 2.0 * mu * l * gamma / (mu + l),
        1.0 - 0.5 * gamma * tau * m.rho,
    );
    c.set("nu", nu);
    let stated = 0.5
        + f64::max(
            2.0 * nu / (4.0 - dp * tt * m.rho),
            delta / (1.0 + delta) + 16.0 * delta * tt * cp / ((1.0 - delta).powi(2) * (1.0 - nu)),
        );
    c.set("beta_stated", stated);
    let a = (1.0 - delta).powi(3) * (1.0 - tt);
    let beta1 = nu * (a / (a - 16.0 * delta * tt * (1.0 + delta) * cp));
    let beta2 = 2.0 * delta / (1.0 + delta)
        + 16.0 * delta * tt * cp / ((1.0 - delta).powi(2) * (1.0 - nu) * (1.0 - tt));
    c.set("beta_1", beta1);
    c.set("beta_2", beta2);
    let beta = stated.max(0.5 * (1.0 + beta1)).max(0.5 * (1.0 + beta2));
    let vs1 = 8.0 * c_bar * gamma * tt * nu * (1.0 + delta)
        / (a - 16.0 * delta * (1.0 + delta) * tt * cp);
    c.set("varsigma_1", vs1);
    let varsigma = if delta > 0.0 {
        let vs2 = (1.0 - nu) * gamma / (2.0 * c_under * delta);
        c.set("varsigma_2", vs2);
        0.5 * (vs1 + vs2)
    } else {
        2.0 * vs1
    };
    c.set("varsigma", varsigma);
    c.rate = beta;
    c.finish()
}

/// `(c̃, c)` for Dyna-COLD from the initial `e₁⁰` and `e₂⁰`.
///
/// `c̃ >= max{e₁⁰, e₁⁰/ς, e₂⁰, e₂⁰/ς}` so that both the stated condition and
/// the one the induction base needs (`e₁⁰ <= c̃`, `e₂⁰ <= ςc̃`) hold.
pub fn dyna_cold_initial_constants(cert: &RateCertificate, e1_0: f64, e2_0: f64) -> (f64, f64) {
    let vs = cert.get("varsigma").unwrap_or(f64::NAN);
    let mut ct = e1_0.max(e1_0 / vs).max(e2_0).max(e2_0 / vs);
    if !(ct > 0.0) {
        ct = 1.0;
    }
    (ct, vs * ct)
}

fn golden_min<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - r * (b - a);
    let mut x2 = a + r * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = f(x2);
        }
    }
    let x = 0.5 * (a + b);
    // the minimum may sit at the cap
    if f(b) <= f(x) {
        b
    } else {
        x
    }
}

fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertMode {
    /// `value(k) <= scale · factor^k` for every `k`.
    PerStepEnvelope,
    /// Least-squares fit of `log value(k)` past the burn-in.
    FittedRate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertReport {
    pub passed: bool,
    pub factor: f64,
    /// Fitted per-step factor (fitted mode).
    pub fitted: Option<f64>,
    /// Largest `value(k) / bound(k)` (envelope mode).
    pub worst_ratio: Option<f64>,
    pub worst_k: Option<usize>,
    pub detail: String,
}

pub const FIT_FLOOR: f64 = 1e-13;

/// Per-step factor from ordinary least squares on `log value(k)`, skipping
/// the first `burn_in` entries, missing values and values below `1e-13`.
pub fn fitted_factor(values: &[Option<f64>], burn_in: usize) -> Option<f64> {
    let pts: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .skip(burn_in)
        .filter_map(|(k, v)| v.filter(|&v| v >= FIT_FLOOR).map(|v| (k as f64, v.ln())))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some((sxy / sxx).exp())
}

/// Checks a value sequence against a factor.
///
/// Envelope mode compares `value(k)` with `scale · factor^(k - first)` for
/// every present entry from the first present index on; `scale` defaults to
/// the first present value. Fitted mode passes when the fitted factor is at
/// most `factor + tolerance`.
pub fn certify_values(
    values: &[Option<f64>],
    factor: f64,
    scale: Option<f64>,
    burn_in: usize,
    tolerance: f64,
    mode: CertMode,
) -> Result<CertReport> {
    let first = values
        .iter()
        .position(|v| v.is_some())
        .ok_or_else(|| Error::Schema("no values to certify".into()))?;
    match mode {
        CertMode::PerStepEnvelope => {
            let s = scale.unwrap_or(values[first].unwrap());
            let mut worst = 0.0_f64;
            let mut worst_k = first;
            let mut passed = true;
            for (k, v) in values.iter().enumerate().skip(first) {
                let Some(v) = v else { continue };
                let bound = s * factor.powi((k - first) as i32);
                let ratio = if bound > 0.0 { v / bound } else if *v > 0.0 { f64::INFINITY } else { 0.0 };
                if ratio > worst {
                    worst = ratio;
                    worst_k = k;
                }
                if *v > bound * (1.0 + tolerance) + 1e-300 {
                    passed = false;
                }
            }
            Ok(CertReport {
                passed,
                factor,
                fitted: None,
                worst_ratio: Some(worst),
                worst_k: Some(worst_k),
                detail: format!("max value/bound = {worst:.6e} at k={worst_k}"),
            })
        }
        CertMode::FittedRate => {
            let fitted = fitted_factor(values, burn_in)
                .ok_or_else(|| Error::Schema("too few values above the floor to fit".into()))?;
            Ok(CertReport {
                passed: fitted <= factor + tolerance,
                factor,
                fitted: Some(fitted),
                worst_ratio: None,
                worst_k: None,
                detail: format!("fitted factor {fitted:.6} vs certified {factor:.6}"),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_graph, metropolis_weights, GraphKind};

    fn graph(kind: GraphKind, n: usize) -> MixingMatrix {
        metropolis_weights(&build_graph(kind, n, 0).unwrap()).unwrap()
    }

    #[test]
    fn choco_ring4_delta0() {
        let m = graph(GraphKind::Ring, 4);
        let c = choco_rate(0.0, &m, None);
        assert!((c.gamma - 0.25).abs() < 1e-12);
        assert!((c.rate - 0.75).abs() < 1e-12);
        assert!(c.valid);
    }

    #[test]
    fn choco_complete4_delta_half() {
        let m = graph(GraphKind::Complete, 4);
        let c = choco_rate(0.5, &m, None);
        assert!((c.gamma - 1.0 / 7.0).abs() < 1e-12);
        assert!((c.rate - 0.75).abs() < 1e-12);
        // the default stepsize makes both generic terms meet the closed form
        assert!((c.get("sigma_generic").unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn choco_gamma_out_of_range_is_invalid() {
        let m = graph(GraphKind::Ring, 4);
        assert!(!choco_rate(0.2, &m, Some(10.0)).valid);
        assert!(!choco_rate(0.2, &m, Some(0.0)).valid);
    }

    #[test]
    fn cold_unbiased_delta0_mu_eq_l() {
        let m = graph(GraphKind::Ring, 4);
        let c = cold_rate_unbiased(2.0, 2.0, 0.0, &m, None, None);
        assert!(c.valid, "{:?}", c.reasons);
        let exp = f64::max(0.5, 1.0 - m.rho / 4.0);
        assert!((c.rate - exp).abs() < 1e-12);
        assert!((c.get("sigma_closed_form").unwrap() - c.rate).abs() < 1e-12);
    }

    #[test]
    fn cold_unbiased_quarter_delta() {
        let m = graph(GraphKind::Ring, 5);
        let c = cold_rate_unbiased(1.0, 100.0, 0.25, &m, None, None);
        let second = 1.0 - (9.0 / 16.0) * m.rho / 28.0;
        assert!((c.rate - f64::max(100.0 / 101.0, second)).abs() < 1e-12);
    }

    #[test]
    fn cold_biased_thresholds() {
        let m = graph(GraphKind::Complete, 4);
        let c = cold_rate_biased(1.0, 2.0, 0.04, &m, 0.1, 0.1);
        assert!((c.get("delta_prime").unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert!(c.valid, "{:?}", c.reasons);
        let c = cold_rate_biased(1.0, 2.0, 0.1, &m, 0.1, 0.1);
        assert!(!c.valid);
        assert!(c.reasons[0].contains("bias too large"));
    }

    #[test]
    fn ccs_delta0() {
        let m = graph(GraphKind::Ring, 4);
        let c = ccs_schedule(0.0, f64::INFINITY, 4, 2, &m, Some(0.5));
        let exp = f64::max(1.0 - 0.5 * m.rho / 2.0, 0.5);
        assert!((c.rate - exp).abs() < 1e-12);
        assert!(c.get("varsigma").unwrap().is_finite());
    }

    #[test]
    fn ccs_binary_complete4() {
        let m = graph(GraphKind::Complete, 4);
        let c = ccs_schedule(0.5, f64::INFINITY, 4, 2, &m, None);
        assert!((c.get("c_p").unwrap() - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!(c.valid, "{:?}", c.reasons);
        assert!(c.rate < 1.0);
        let too_big = ccs_schedule(0.5, f64::INFINITY, 4, 2, &m, Some(0.9));
        assert!(!too_big.valid);
    }

    #[test]
    fn dyna_delta0_beta() {
        let m = graph(GraphKind::Ring, 6);
        let c = dyna_cold_schedule(1.0, 4.0, 0.0, f64::INFINITY, 6, 3, &m);
        let nu = c.get("nu").unwrap();
        assert_eq!(c.rate, (1.0 + nu) / 2.0);
    }

    #[test]
    fn dyna_grid_quantizer_complete4() {
        let m = graph(GraphKind::Complete, 4);
        let c = dyna_cold_schedule(2.0, 2.0, 0.005, f64::INFINITY, 4, 2, &m);
        let dp = 64.0 * 0.005 * 1.005 * 2.0 * 2f64.sqrt() / 0.995f64.powi(3);
        assert!((c.get("delta_prime").unwrap() - dp).abs() < 1e-12);
        assert!(c.valid, "{:?}", c.reasons);
        let b = dyna_cold_schedule(2.0, 2.0, 0.5, f64::INFINITY, 4, 2, &m);
        assert!(!b.valid);
        let thr = b.get("delta_max").unwrap();
        assert!(thr > 0.005 && thr < 0.006);
        assert!((dyna_delta_prime(thr, 2.0 * 2f64.sqrt(), 1.0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn norm_constants_branches() {
        assert_eq!(norm_constants(2.0, 4, 9), (1.0, 2.0));
        let (cb, cu) = norm_constants(1.0, 4, 9);
        assert!((cb - 3.0).abs() < 1e-12 && cu == 2.0);
        let (cb, cu) = norm_constants(f64::INFINITY, 4, 9);
        assert!(cb == 1.0 && (cu - 6.0).abs() < 1e-12);
        assert!((c_p(1.0, 4, 9) - cb.max(3.0) * 2.0).abs() < 1e-12);
    }

    #[test]
    fn key_value_round_trip() {
        let m = graph(GraphKind::Ring, 4);
        let c = cold_rate_biased(1.0, 2.0, 0.1, &m, 0.1, 0.1);
        let back = RateCertificate::from_key_values(&c.to_key_values()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn certify_modes() {
        let v: Vec<Option<f64>> = (0..50).map(|k| Some(0.5f64.powi(k))).collect();
        let r = certify_values(&v, 0.5, None, 0, 1e-12, CertMode::PerStepEnvelope).unwrap();
        assert!(r.passed);
        let r = certify_values(&v, 0.49, None, 0, 0.0, CertMode::PerStepEnvelope).unwrap();
        assert!(!r.passed);
        let r = certify_values(&v, 0.5, None, 5, 1e-9, CertMode::FittedRate).unwrap();
        assert!((r.fitted.unwrap() - 0.5).abs() < 1e-12);
        let flat = vec![Some(1.0); 30];
        let r = certify_values(&flat, 0.9, None, 0, 0.0, CertMode::FittedRate).unwrap();
        assert!(!r.passed);
        assert!(certify_values(&[None, None], 0.5, None, 0, 0.0, CertMode::FittedRate).is_err());
    }
}
