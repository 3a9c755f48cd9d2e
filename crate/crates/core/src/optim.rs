//! Decentralized optimization: NIDS, COLD and Dyna-COLD.
//!
//! Row `k` of a trace describes `X^k`. Every run starts with the local step
//! `X¹ = X⁰ - γ∇F(X⁰)` and `Ψ¹ = Ŷ¹ = Ỹ¹ = 0`, which needs no communication,
//! so `bits_cumulative` at row `k` counts `max(k-1, 0)` rounds.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::compress::CompressorSpec;
use crate::consensus::ScalingSchedule;
use crate::error::{Error, Result};
use crate::linalg::{broadcast_row, column_mean, max_row_distance, max_row_norm, pnorm, weighted_sq_norm, Mat};
use crate::objective::Objective;
use crate::stream_rng;
use crate::topology::MixingMatrix;
use crate::trace::{Trace, TraceRecord};

/// Iterate norm beyond which a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Nids,
    Cold,
    DynaCold,
}

impl Algorithm {
    /// Identifier stored in checkpoint headers.
    pub fn id(self) -> u64 {
        match self {
            Algorithm::Nids => 1,
            Algorithm::Cold => 2,
            Algorithm::DynaCold => 3,
        }
    }

    pub fn from_id(id: u64) -> Result<Self> {
        match id {
            1 => Ok(Algorithm::Nids),
            2 => Ok(Algorithm::Cold),
            3 => Ok(Algorithm::DynaCold),
            _ => Err(Error::Parse(format!("unknown algorithm id {id}"))),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Nids => "nids",
            Algorithm::Cold => "cold",
            Algorithm::DynaCold => "dyna_cold",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "nids" => Ok(Algorithm::Nids),
            "cold" => Ok(Algorithm::Cold),
            "dyna_cold" => Ok(Algorithm::DynaCold),
            other => Err(Error::Parse(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// Per-node variables of COLD / Dyna-COLD.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgoState {
    pub x: Mat,
    pub psi: Mat,
    pub y_hat: Mat,
    pub y_tilde: Mat,
    pub k: usize,
    pub bits_sent: Vec<f64>,
}

impl AlgoState {
    /// State at `k = 0`: `X = X⁰`, everything else zero.
    pub fn new(x0: &Mat) -> Self {
        let (n, d) = x0.shape();
        AlgoState {
            x: x0.clone(),
            psi: Mat::zeros(n, d),
            y_hat: Mat::zeros(n, d),
            y_tilde: Mat::zeros(n, d),
            k: 0,
            bits_sent: vec![0.0; n],
        }
    }

    pub fn mean_bits(&self) -> f64 {
        self.bits_sent.iter().sum::<f64>() / self.bits_sent.len().max(1) as f64
    }

    /// Flat little-endian dump: header `n, d, k, algorithm-id` as u64, then
    /// `X, Ψ, Ŷ, Ỹ` row-major as f64. Bit counters are not stored.
    pub fn write_checkpoint<W: Write>(&self, algo: Algorithm, w: &mut W) -> Result<()> {
        let (n, d) = self.x.shape();
        for h in [n as u64, d as u64, self.k as u64, algo.id()] {
            w.write_all(&h.to_le_bytes())?;
        }
        for m in [&self.x, &self.psi, &self.y_hat, &self.y_tilde] {
            for i in 0..n {
                for j in 0..d {
                    w.write_all(&m[(i, j)].to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(Algorithm, AlgoState)> {
        let mut b = [0u8; 8];
        let mut header = [0u64; 4];
        for h in header.iter_mut() {
            r.read_exact(&mut b)?;
            *h = u64::from_le_bytes(b);
        }
        let [n, d, k, id] = header;
        let algo = Algorithm::from_id(id)?;
        if n == 0 || d == 0 || n.saturating_mul(d) > 1 << 32 {
            return Err(Error::Parse(format!("bad checkpoint shape {n}x{d}")));
        }
        let (n, d) = (n as usize, d as usize);
        let mut read_mat = || -> Result<Mat> {
            let mut m = Mat::zeros(n, d);
            for i in 0..n {
                for j in 0..d {
                    r.read_exact(&mut b)?;
                    m[(i, j)] = f64::from_le_bytes(b);
                }
            }
            Ok(m)
        };
        let x = read_mat()?;
        let psi = read_mat()?;
        let y_hat = read_mat()?;
        let y_tilde = read_mat()?;
        Ok((
            algo,
            AlgoState {
                x,
                psi,
                y_hat,
                y_tilde,
                k: k as usize,
                bits_sent: vec![0.0; n],
            },
        ))
    }
}

/// Stepsizes of COLD; `schedule` is used by Dyna-COLD only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColdConfig {
    pub gamma: f64,
    pub tau: f64,
    pub schedule: Option<ScalingSchedule>,
}

impl ColdConfig {
    pub fn new(gamma: f64, tau: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) || !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "need gamma > 0 and tau > 0, got gamma={gamma}, tau={tau}"
            )));
        }
        Ok(ColdConfig {
            gamma,
            tau,
            schedule: None,
        })
    }

    /// Uncertified defaults: `γ = 1/(2L)`, `τ = 1/(2γ(1-λₙ))`.
    pub fn exploration(obj: &Objective, m: &MixingMatrix) -> Self {
        let gamma = 1.0 / (2.0 * obj.l());
        ColdConfig {
            gamma,
            tau: 1.0 / (2.0 * gamma * (1.0 - m.lambda_n)),
            schedule: None,
        }
    }

    pub fn with_schedule(mut self, schedule: ScalingSchedule) -> Self {
        self.schedule = Some(schedule);
        self
    }
}

/// Schedule `s^k = √(c β^{k-1})` for algorithm iteration `k >= 1`, which
/// makes `(s^k)²` follow the envelope `cβ^{k-1}`.
pub fn envelope_schedule(c: f64, beta: f64) -> Result<ScalingSchedule> {
    ScalingSchedule::new((c / beta).sqrt(), beta.sqrt())
}

/// `s^k = 3||X¹||_max · 0.99^k`.
pub fn default_decay_schedule(obj: &Objective, x0: &Mat, gamma: f64, p: f64) -> Result<ScalingSchedule> {
    let x1 = x0 - gamma * obj.stacked_grad(x0);
    let base = 3.0 * max_row_norm(&x1, p);
    ScalingSchedule::new(if base > 0.0 { base } else { 1.0 }, 0.99)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LyapunovVariant {
    /// Unbiased mean-square compressors.
    Unbiased,
    /// Biased mean-square compressors.
    Biased,
    /// Dyna-COLD; the value is `e₁`, and `e₂` is the squared innovation.
    Scaled,
}

impl FromStr for LyapunovVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "unbiased" | "t2" => Ok(LyapunovVariant::Unbiased),
            "biased" | "t3" => Ok(LyapunovVariant::Biased),
            "scaled" | "t5" => Ok(LyapunovVariant::Scaled),
            other => Err(Error::Parse(format!("unknown Lyapunov variant '{other}'"))),
        }
    }
}

/// Quantities a Lyapunov value depends on at row `k`.
#[derive(Debug, Clone, Copy)]
pub struct LyapunovInputs<'a> {
    pub x: &'a Mat,
    pub psi: &'a Mat,
    pub psi_prev: &'a Mat,
    pub y_hat: &'a Mat,
    pub y_prev: &'a Mat,
    /// `Y^k`, used by the split value.
    pub y: &'a Mat,
}

/// Weighted-norm Lyapunov function with precomputed weight matrices.
#[derive(Debug, Clone)]
pub struct Lyapunov {
    variant: LyapunovVariant,
    gamma: f64,
    x_star: Mat,
    psi_star: Mat,
    theta: Mat,
    psi_weight: Mat,
    lap: Mat,
    innovation_coef: f64,
    p: f64,
}

/// Value of the split Lyapunov function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovValue {
    pub total: f64,
    pub e1: f64,
    pub e2: f64,
}

impl Lyapunov {
    /// `Θ = τ⁻¹(I-W)† - γI` must be nonnegative on `range(I-W)`, i.e.
    /// `τγ(1-λₙ) < 1`. `delta` is the compressor's contract constant and `p`
    /// the norm of the max-norm innovation (Theorem-5 split).
    pub fn new(
        variant: LyapunovVariant,
        m: &MixingMatrix,
        obj: &Objective,
        cfg: &ColdConfig,
        delta: f64,
        p: f64,
        x_star: &[f64],
    ) -> Result<Self> {
        let (gamma, tau) = (cfg.gamma, cfg.tau);
        let t = tau * gamma * (1.0 - m.lambda_n);
        if !(t < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "Theta is indefinite: tau*gamma*(1-lambda_n) = {t} >= 1"
            )));
        }
        let n = m.n();
        let ident = Mat::identity(n, n);
        let theta = m.laplacian_pinv() / tau - gamma * &ident;
        let (psi_weight, innovation_coef) = match variant {
            LyapunovVariant::Unbiased => (
                &theta + gamma * &ident,
                2.0 * (1.0 + delta) * tau / (1.0 - delta),
            ),
            LyapunovVariant::Biased => {
                let dp = crate::theory::biased_delta_prime(delta);
                if !(dp < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "biased compressor with delta'={dp} >= 1"
                    )));
                }
                let coef = if delta > 0.0 {
                    (1.0 + delta - 4.0 * delta.sqrt()) / (2.0 * gamma * (delta * dp).sqrt())
                } else {
                    0.0
                };
                (&theta + (1.0 - dp.sqrt() / 2.0) * gamma * &ident, coef)
            }
            LyapunovVariant::Scaled => (&theta + 0.5 * gamma * &ident, 0.0),
        };
        let x_star = broadcast_row(n, x_star);
        let psi_star = -obj.stacked_grad(&x_star);
        Ok(Lyapunov {
            variant,
            gamma,
            x_star,
            psi_star,
            theta,
            psi_weight,
            lap: m.laplacian(),
            innovation_coef,
            p,
        })
    }

    pub fn variant(&self) -> LyapunovVariant {
        self.variant
    }

    pub fn psi_star(&self) -> &Mat {
        &self.psi_star
    }

    pub fn evaluate(&self, s: &LyapunovInputs<'_>) -> LyapunovValue {
        let ex = (s.x - &self.x_star).norm_squared() / self.gamma;
        // Ψ lives in range(I-W); projecting the difference removes the
        // consensual residue left by an inexact x*
        let mut dpsi = s.psi - &self.psi_star;
        let mean = column_mean(&dpsi);
        for i in 0..dpsi.nrows() {
            for (j, mj) in mean.iter().enumerate() {
                dpsi[(i, j)] -= mj;
            }
        }
        let epsi = weighted_sq_norm(&dpsi, &self.psi_weight);
        match self.variant {
            LyapunovVariant::Unbiased => {
                let e = ex
                    + epsi
                    + weighted_sq_norm(&(s.psi - s.psi_prev), &self.theta)
                    + self.innovation_coef * weighted_sq_norm(&(s.y_hat - s.y_prev), &self.lap);
                LyapunovValue { total: e, e1: e, e2: 0.0 }
            }
            LyapunovVariant::Biased => {
                let mut e = ex + epsi + weighted_sq_norm(&(s.psi - s.psi_prev), &self.theta);
                if self.innovation_coef != 0.0 {
                    e += self.innovation_coef * (s.y_hat - s.y_prev).norm_squared();
                }
                LyapunovValue { total: e, e1: e, e2: 0.0 }
            }
            LyapunovVariant::Scaled => {
                let e1 = ex + epsi;
                let e2 = max_row_norm(&(s.y_hat - s.y), self.p).powi(2);
                LyapunovValue { total: e1 + e2, e1, e2 }
            }
        }
    }
}

/// `(e₁, e₂)` at `X¹ = X⁰ - γ∇F(X⁰)`, `Ψ¹ = Ŷ¹ = 0`; these seed the
/// Dyna-COLD envelope constants.
pub fn initial_split_lyapunov(
    m: &MixingMatrix,
    obj: &Objective,
    cfg: &ColdConfig,
    x0: &Mat,
    p: f64,
    x_star: &[f64],
) -> Result<(f64, f64)> {
    check_shapes(m, obj, x0)?;
    let l = Lyapunov::new(LyapunovVariant::Scaled, m, obj, cfg, 0.0, p, x_star)?;
    let x1 = x0 - cfg.gamma * obj.stacked_grad(x0);
    let y1 = &x1 - cfg.gamma * obj.stacked_grad(&x1);
    let zero = Mat::zeros(x0.nrows(), x0.ncols());
    let v = l.evaluate(&LyapunovInputs {
        x: &x1,
        psi: &zero,
        psi_prev: &zero,
        y_hat: &zero,
        y_prev: &x1,
        y: &y1,
    });
    Ok((v.e1, v.e2))
}

/// Convenience wrapper around [`Lyapunov::new`] and [`Lyapunov::evaluate`].
#[allow(clippy::too_many_arguments)]
pub fn compute_lyapunov(
    inputs: &LyapunovInputs<'_>,
    m: &MixingMatrix,
    obj: &Objective,
    cfg: &ColdConfig,
    variant: LyapunovVariant,
    delta: f64,
    p: f64,
    x_star: &[f64],
) -> Result<LyapunovValue> {
    Ok(Lyapunov::new(variant, m, obj, cfg, delta, p, x_star)?.evaluate(inputs))
}

/// `(||(I-W)X||, ||Ŷ - X||, ||Ψ + ∇F(X)||)`; all vanish exactly at a fixed
/// point.
pub fn fixed_point_residual(state: &AlgoState, m: &MixingMatrix, obj: &Objective) -> (f64, f64, f64) {
    let r1 = (m.laplacian() * &state.x).norm();
    let r2 = (&state.y_hat - &state.x).norm();
    let r3 = (&state.psi + obj.stacked_grad(&state.x)).norm();
    (r1, r2, r3)
}

/// Options shared by the optimization runs.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: u64,
    /// Run even when the compressor's contract does not fit the algorithm.
    pub force: bool,
    /// Optimum used for `max_node_error` and the Lyapunov value; computed
    /// when absent.
    pub x_star: Option<Vec<f64>>,
    /// Lyapunov variant and the compressor constant it uses.
    pub lyapunov: Option<(LyapunovVariant, f64)>,
    /// Keep `X^k` for every row in the trace.
    pub keep_iterates: bool,
}

fn resolve_optimum(obj: &Objective, opts: &RunOptions) -> Result<Vec<f64>> {
    match &opts.x_star {
        Some(x) if x.len() == obj.d() => Ok(x.clone()),
        Some(x) => Err(Error::InvalidInput(format!(
            "x_star has length {}, expected {}",
            x.len(),
            obj.d()
        ))),
        None => obj.reference_optimum(1e-10),
    }
}

fn check_shapes(m: &MixingMatrix, obj: &Objective, x0: &Mat) -> Result<()> {
    if x0.nrows() != m.n() || x0.nrows() != obj.n() || x0.ncols() != obj.d() {
        return Err(Error::InvalidInput(format!(
            "X0 is {}x{}, graph has {} nodes, objective is {}x{}",
            x0.nrows(),
            x0.ncols(),
            m.n(),
            obj.n(),
            obj.d()
        )));
    }
    Ok(())
}

fn guard(k: usize, x: &Mat) -> Result<()> {
    let norm = x.norm();
    if !norm.is_finite() || norm > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { k, norm });
    }
    Ok(())
}

fn base_record(k: usize, x: &Mat, obj: &Objective, x_star: &[f64], bits: f64, seed: u64) -> TraceRecord {
    TraceRecord {
        iter: k,
        consensus_error: Some(crate::linalg::consensus_error(x)),
        optimality_gap: Some(obj.optimality_gap(x)),
        max_node_error: Some(max_row_distance(x, x_star)),
        bits_cumulative: bits,
        seed: Some(seed),
        ..Default::default()
    }
}

/// NIDS with `W̃ = (I+W)/2`:
/// `X^{k+1} = W̃(2X^k - X^{k-1} - γ∇F(X^k) + γ∇F(X^{k-1}))`.
///
/// Uncompressed messages cost `32·d` bits each.
pub fn nids_run(
    m: &MixingMatrix,
    obj: &Objective,
    gamma: f64,
    x0: &Mat,
    iters: usize,
    opts: &RunOptions,
) -> Result<Trace> {
    check_shapes(m, obj, x0)?;
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    let x_star = resolve_optimum(obj, opts)?;
    let per_round = 32.0 * obj.d() as f64 * m.mean_degree();
    let w_lazy = m.lazy();
    let mut records = Vec::with_capacity(iters);
    let mut iterates = Vec::new();
    let mut x_prev = x0.clone();
    let mut g_prev = obj.stacked_grad(x0);
    let mut x = x0 - gamma * &g_prev;
    let mut push = |k: usize, x: &Mat, records: &mut Vec<TraceRecord>| {
        let bits = per_round * k.saturating_sub(1) as f64;
        records.push(base_record(k, x, obj, &x_star, bits, opts.seed));
        if opts.keep_iterates {
            iterates.push(x.clone());
        }
    };
    if iters == 0 {
        return Ok(Trace {
            records,
            final_x: x0.clone(),
            scaling_violations: Vec::new(),
            iterates: Vec::new(),
        });
    }
    push(0, &x_prev, &mut records);
    let mut last = x.clone();
    for k in 1..iters {
        guard(k, &x)?;
        push(k, &x, &mut records);
        let g = obj.stacked_grad(&x);
        let inner = 2.0 * &x - &x_prev - gamma * (&g - &g_prev);
        let next = &w_lazy * inner;
        x_prev = std::mem::replace(&mut x, next);
        g_prev = g;
        last = x.clone();
    }
    Ok(Trace {
        records,
        final_x: last,
        scaling_violations: Vec::new(),
        iterates,
    })
}

/// Node-local COLD / Dyna-COLD iteration.
///
/// Node `i` forms `y_i = x_i - γ∇f_i(x_i) - γψ_i`, sends
/// `q_i = Q((y_i - ŷ_i)/s)`, and all nodes update `ŷ_i += s q_i`,
/// `ỹ_i += τs(q_i - Σ_j W_ij q_j)`, `ψ_i += ỹ_i`,
/// `x_i = x_i - γ∇f_i(x_i) - γψ_i`. With `s = 1` this is COLD.
pub struct ColdRunner<'a> {
    m: &'a MixingMatrix,
    obj: &'a Objective,
    q: &'a CompressorSpec,
    cfg: ColdConfig,
    state: AlgoState,
    grad: Mat,
    rng: ChaCha8Rng,
    /// Unit-ball norm of a bounded-absolute compressor.
    clamp_p: Option<f64>,
    qbuf: Mat,
    dbuf: Vec<f64>,
    obuf: Vec<f64>,
}

/// Outcome of one [`ColdRunner::step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColdStep {
    /// `||(Y^k - Ŷ^k)/s^k||_max` before clamping (unit-ball compressors only).
    pub scaled_norm: Option<f64>,
    pub clamped: bool,
}

impl<'a> ColdRunner<'a> {
    /// Starts at `X¹ = X⁰ - γ∇F(X⁰)` with the rng stream `seed`.
    pub fn new(
        m: &'a MixingMatrix,
        obj: &'a Objective,
        q: &'a CompressorSpec,
        cfg: ColdConfig,
        x0: &Mat,
        seed: u64,
    ) -> Result<Self> {
        check_shapes(m, obj, x0)?;
        let mut state = AlgoState::new(x0);
        state.x = x0 - cfg.gamma * obj.stacked_grad(x0);
        state.k = 1;
        Self::from_state(m, obj, q, cfg, state, seed)
    }

    /// Resumes from a stored state; the rng restarts on stream `seed`.
    pub fn from_state(
        m: &'a MixingMatrix,
        obj: &'a Objective,
        q: &'a CompressorSpec,
        cfg: ColdConfig,
        state: AlgoState,
        seed: u64,
    ) -> Result<Self> {
        check_shapes(m, obj, &state.x)?;
        let (n, d) = state.x.shape();
        let grad = obj.stacked_grad(&state.x);
        // compressors with a relative contract accept any input; only the
        // purely unit-ball ones need their input kept inside the ball
        let contract = q.contract(d);
        let clamp_p = match (cfg.schedule, contract.contracted, contract.absolute) {
            (Some(_), None, Some((_, p))) => Some(p),
            _ => None,
        };
        Ok(ColdRunner {
            m,
            obj,
            q,
            cfg,
            state,
            grad,
            rng: stream_rng(0, seed),
            clamp_p,
            qbuf: Mat::zeros(n, d),
            dbuf: vec![0.0; d],
            obuf: vec![0.0; d],
        })
    }

    pub fn state(&self) -> &AlgoState {
        &self.state
    }

    pub fn into_state(self) -> AlgoState {
        self.state
    }

    /// `∇F(X^k)` for the current state.
    pub fn grad(&self) -> &Mat {
        &self.grad
    }

    /// `s^k`, or 1 without a schedule.
    pub fn scale(&self) -> f64 {
        self.cfg.schedule.map(|s| s.value(self.state.k)).unwrap_or(1.0)
    }

    /// `Y^k = X^k - γ∇F(X^k) - γΨ^k`.
    pub fn y(&self) -> Mat {
        &self.state.x - self.cfg.gamma * (&self.grad + &self.state.psi)
    }

    /// Advances from `k` to `k+1` given `Y^k`.
    pub fn step(&mut self, y: &Mat) -> ColdStep {
        let (n, d) = self.state.x.shape();
        let s = self.scale();
        let (gamma, tau) = (self.cfg.gamma, self.cfg.tau);
        let cost = self.q.bit_cost(d) as f64;
        let mut scaled_max: Option<f64> = None;
        let mut clamped = false;
        for i in 0..n {
            for j in 0..d {
                self.dbuf[j] = (y[(i, j)] - self.state.y_hat[(i, j)]) / s;
            }
            if let Some(p) = self.clamp_p {
                let r = pnorm(&self.dbuf, p);
                scaled_max = Some(scaled_max.unwrap_or(0.0).max(r));
                if r > 1.0 {
                    clamped = true;
                    for v in self.dbuf.iter_mut() {
                        *v /= r;
                    }
                }
            }
            self.q.compress_into(&self.dbuf, &mut self.obuf, &mut self.rng);
            for j in 0..d {
                self.qbuf[(i, j)] = self.obuf[j];
                self.state.y_hat[(i, j)] += s * self.obuf[j];
            }
            self.state.bits_sent[i] += cost * self.m.degree(i) as f64;
        }
        let w = self.m.w();
        for i in 0..n {
            let wii = w[(i, i)];
            for j in 0..d {
                let mut acc = (1.0 - wii) * self.qbuf[(i, j)];
                for &l in self.m.neighbors(i) {
                    acc -= w[(i, l)] * self.qbuf[(l, j)];
                }
                self.state.y_tilde[(i, j)] += tau * s * acc;
                self.state.psi[(i, j)] += self.state.y_tilde[(i, j)];
                self.state.x[(i, j)] -= gamma * (self.grad[(i, j)] + self.state.psi[(i, j)]);
            }
        }
        self.state.k += 1;
        self.obj.stacked_grad_into(&self.state.x, &mut self.grad);
        ColdStep {
            scaled_norm: scaled_max,
            clamped,
        }
    }
}

fn run_cold_family(
    algo: Algorithm,
    m: &MixingMatrix,
    obj: &Objective,
    q: &CompressorSpec,
    cfg: &ColdConfig,
    x0: &Mat,
    iters: usize,
    opts: &RunOptions,
) -> Result<Trace> {
    check_shapes(m, obj, x0)?;
    let cfg = ColdConfig::new(cfg.gamma, cfg.tau)
        .map(|c| ColdConfig { schedule: cfg.schedule, ..c })?;
    let d = obj.d();
    let contract = q.contract(d);
    match algo {
        Algorithm::Cold => {
            if let Err(e) = q.require_contracted(d) {
                if !opts.force {
                    return Err(e);
                }
            }
        }
        _ => {
            if cfg.schedule.is_none() {
                return Err(Error::InvalidParameter("dyna_cold needs a scaling schedule".into()));
            }
            if contract.absolute.is_none() && contract.contracted.is_none() && !opts.force {
                return Err(Error::ContractMismatch(format!(
                    "dyna_cold needs a bounded-absolute or delta-contracted compressor; '{q}' has neither at d={d}"
                )));
            }
        }
    }
    let p = contract.absolute.map(|(_, p)| p).unwrap_or(2.0);
    let x_star = resolve_optimum(obj, opts)?;
    let lyap = match opts.lyapunov {
        Some((v, delta)) => Some(Lyapunov::new(v, m, obj, &cfg, delta, p, &x_star)?),
        None => None,
    };
    let cfg = if algo == Algorithm::Cold {
        ColdConfig { schedule: None, ..cfg }
    } else {
        cfg
    };
    let cost = q.bit_cost(d) as f64 * m.mean_degree();
    let mut records = Vec::with_capacity(iters);
    let mut iterates = Vec::new();
    let mut violations = Vec::new();
    if iters == 0 {
        return Ok(Trace {
            records,
            final_x: x0.clone(),
            scaling_violations: violations,
            iterates,
        });
    }
    records.push(base_record(0, x0, obj, &x_star, 0.0, opts.seed));
    if opts.keep_iterates {
        iterates.push(x0.clone());
    }
    let mut run = ColdRunner::new(m, obj, q, cfg, x0, opts.seed)?;
    // Y⁰ = X⁰ - γ∇F(X⁰) = X¹ and Ψ⁰ = 0
    let mut y_prev = run.state().x.clone();
    let mut psi_prev = Mat::zeros(x0.nrows(), d);
    for k in 1..iters {
        guard(k, &run.state().x)?;
        let y = run.y();
        let st = run.state();
        let mut r = base_record(k, &st.x, obj, &x_star, cost * (k - 1) as f64, opts.seed);
        r.innovation_max = Some(max_row_norm(&(&st.y_hat - &y), p));
        if algo == Algorithm::DynaCold {
            r.scale_s = Some(run.scale());
        }
        if let Some(l) = &lyap {
            let v = l.evaluate(&LyapunovInputs {
                x: &st.x,
                psi: &st.psi,
                psi_prev: &psi_prev,
                y_hat: &st.y_hat,
                y_prev: &y_prev,
                y: &y,
            });
            r.lyapunov = Some(if l.variant() == LyapunovVariant::Scaled { v.e1 } else { v.total });
        }
        records.push(r);
        if opts.keep_iterates {
            iterates.push(st.x.clone());
        }
        psi_prev = st.psi.clone();
        let step = run.step(&y);
        if step.clamped {
            violations.push(k);
        }
        y_prev = y;
    }
    let final_x = if iters == 1 { x0.clone() } else { run.into_state().x };
    Ok(Trace {
        records,
        final_x,
        scaling_violations: violations,
        iterates,
    })
}

/// COLD (node-local form). Requires a delta-contracted compressor unless
/// forced.
pub fn cold_run(
    m: &MixingMatrix,
    obj: &Objective,
    q: &CompressorSpec,
    cfg: &ColdConfig,
    x0: &Mat,
    iters: usize,
    opts: &RunOptions,
) -> Result<Trace> {
    run_cold_family(Algorithm::Cold, m, obj, q, cfg, x0, iters, opts)
}

/// Dyna-COLD: COLD with `q^k = Q((Y^k - Ŷ^k)/s^k)` and `Ŷ^{k+1} = Ŷ^k + s^k q^k`.
///
/// With a compressor whose only contract is bounded-absolute, a scaled input
/// outside the unit ball is clamped onto it and its iteration is listed in
/// `scaling_violations`.
pub fn dyna_cold_run(
    m: &MixingMatrix,
    obj: &Objective,
    q: &CompressorSpec,
    cfg: &ColdConfig,
    x0: &Mat,
    iters: usize,
    opts: &RunOptions,
) -> Result<Trace> {
    run_cold_family(Algorithm::DynaCold, m, obj, q, cfg, x0, iters, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_graph, metropolis_weights, GraphKind};
    use rand::Rng;

    fn setup(n: usize, d: usize, seed: u64) -> (MixingMatrix, Objective, Mat) {
        let m = metropolis_weights(&build_graph(GraphKind::ErdosRenyi, n, seed).unwrap()).unwrap();
        let obj = Objective::synthetic_quadratic(n, d, 1.0, 5.0, seed).unwrap();
        let mut rng = stream_rng(3, seed);
        let x0 = Mat::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        (m, obj, x0)
    }

    /// The matrix-form recursion with the same compressor draws (row order).
    fn matrix_form(
        m: &MixingMatrix,
        obj: &Objective,
        q: &CompressorSpec,
        cfg: &ColdConfig,
        x0: &Mat,
        steps: usize,
        seed: u64,
    ) -> Mat {
        let mut rng = stream_rng(0, seed);
        let (n, d) = x0.shape();
        let lap = m.laplacian();
        let mut x = x0 - cfg.gamma * obj.stacked_grad(x0);
        let mut psi = Mat::zeros(n, d);
        let mut y_hat = Mat::zeros(n, d);
        for _ in 0..steps {
            let g = obj.stacked_grad(&x);
            let y = &x - cfg.gamma * (&g + &psi);
            let diff = &y - &y_hat;
            for i in 0..n {
                let row: Vec<f64> = diff.row(i).iter().copied().collect();
                let mut out = vec![0.0; d];
                q.compress_into(&row, &mut out, &mut rng);
                for j in 0..d {
                    y_hat[(i, j)] += out[j];
                }
            }
            psi += cfg.tau * &lap * &y_hat;
            x = &x - cfg.gamma * (&g + &psi);
        }
        x
    }

    #[test]
    fn node_local_matches_matrix_form() {
        // theorem stepsizes: at τγ(1-λₙ) = 1/2 the scale-dependent quantizers
        // amplify rounding differences between the two forms geometrically
        for seed in 0..4 {
            let (m, obj, x0) = setup(7, 3, seed);
            for q in [CompressorSpec::c1(), CompressorSpec::c2(), CompressorSpec::c3()] {
                let delta = CompressorSpec::c1().require_contracted(3).unwrap();
                let cert = crate::theory::cold_rate_unbiased(obj.mu(), obj.l(), delta, &m, None, None);
                let cfg = ColdConfig::new(cert.gamma, cert.tau.unwrap()).unwrap();
                let mut run = ColdRunner::new(&m, &obj, &q, cfg, &x0, seed).unwrap();
                for _ in 0..50 {
                    let y = run.y();
                    run.step(&y);
                }
                let oracle = matrix_form(&m, &obj, &q, &cfg, &x0, 50, seed);
                let dev = (&run.state().x - oracle).abs().max();
                assert!(dev < 1e-12, "{q}: deviation {dev}");
            }
        }
    }

    #[test]
    fn dual_stays_in_range() {
        let (m, obj, x0) = setup(8, 4, 5);
        let cfg = ColdConfig::exploration(&obj, &m);
        let q = CompressorSpec::c2();
        let mut run = ColdRunner::new(&m, &obj, &q, cfg, &x0, 1).unwrap();
        for _ in 0..100 {
            let y = run.y();
            run.step(&y);
            let psi = &run.state().psi;
            let sum: f64 = column_mean(psi).iter().map(|v| v.abs()).sum();
            assert!(sum <= 1e-9 * psi.norm().max(1.0));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (m, obj, x0) = setup(5, 2, 2);
        let q = CompressorSpec::c1();
        let mut run = ColdRunner::new(&m, &obj, &q, ColdConfig::exploration(&obj, &m), &x0, 0).unwrap();
        for _ in 0..5 {
            let y = run.y();
            run.step(&y);
        }
        let mut buf = Vec::new();
        run.state().write_checkpoint(Algorithm::Cold, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 * (4 + 4 * 5 * 2));
        assert_eq!(&buf[..8], &5u64.to_le_bytes());
        let (algo, st) = AlgoState::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(algo, Algorithm::Cold);
        assert_eq!(st.k, 6);
        assert_eq!(st.x, run.state().x);
        assert_eq!(st.y_tilde, run.state().y_tilde);
        assert!(AlgoState::read_checkpoint(&mut &buf[..20]).is_err());
    }

    #[test]
    fn lyapunov_rejects_large_steps() {
        let (m, obj, _) = setup(5, 2, 2);
        let cfg = ColdConfig::new(1.0, 1.0 / (1.0 - m.lambda_n)).unwrap();
        let r = Lyapunov::new(LyapunovVariant::Unbiased, &m, &obj, &cfg, 0.1, 2.0, &[0.0, 0.0]);
        assert!(matches!(r, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in [Algorithm::Nids, Algorithm::Cold, Algorithm::DynaCold] {
            assert_eq!(a.to_string().parse::<Algorithm>().unwrap(), a);
            assert_eq!(Algorithm::from_id(a.id()).unwrap(), a);
        }
    }
}
