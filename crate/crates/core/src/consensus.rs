//! Average consensus: exact gossip, CHOCO-GOSSIP and CCS (compressed
//! gossip with a decaying scale).
//!
//! Row `k` of a trace describes `X^k`; its `bits_cumulative` counts the
//! messages needed to produce `X^k`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::compress::CompressorSpec;
use crate::error::{Error, Result};
use crate::linalg::{consensus_error, max_row_distance, column_mean, max_row_norm, Mat};
use crate::stream_rng;
use crate::theory::{choco_lyapunov_weight, choco_rate};
use crate::topology::MixingMatrix;
use crate::trace::{Trace, TraceRecord};

/// `s^k = c_s β^k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingSchedule {
    pub c_s: f64,
    pub beta: f64,
}

impl ScalingSchedule {
    pub fn new(c_s: f64, beta: f64) -> Result<Self> {
        if !(c_s > 0.0 && c_s.is_finite()) || !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "schedule needs c_s > 0 and 0 < beta < 1, got c_s={c_s}, beta={beta}"
            )));
        }
        Ok(ScalingSchedule { c_s, beta })
    }

    pub fn value(&self, k: usize) -> f64 {
        self.c_s * self.beta.powi(k as i32)
    }
}

/// Options shared by the compressed consensus runs.
#[derive(Debug, Clone, Default)]
pub struct GossipOptions {
    pub seed: u64,
    /// Run even when the stepsize or compressor contract check fails.
    pub force: bool,
    /// Initial estimate `X̂⁰`; zero when absent.
    pub xhat0: Option<Mat>,
    /// Keep `X^k` for every row in the trace.
    pub keep_iterates: bool,
}

fn record(k: usize, x: &Mat, bits: f64) -> TraceRecord {
    let mean = column_mean(x);
    TraceRecord {
        iter: k,
        consensus_error: Some(consensus_error(x)),
        max_node_error: Some(max_row_distance(x, &mean)),
        bits_cumulative: bits,
        ..Default::default()
    }
}

/// `X^{k+1} = W X^k`.
pub fn exact_gossip_run(m: &MixingMatrix, x0: &Mat, iters: usize) -> Trace {
    exact_gossip_run_with(m, x0, iters, false)
}

pub fn exact_gossip_run_with(m: &MixingMatrix, x0: &Mat, iters: usize, keep_iterates: bool) -> Trace {
    let d = x0.ncols();
    let per_round = 32.0 * d as f64 * m.mean_degree();
    let mut x = x0.clone();
    let mut records = Vec::with_capacity(iters);
    let mut iterates = Vec::new();
    for k in 0..iters {
        records.push(record(k, &x, per_round * k as f64));
        if keep_iterates {
            iterates.push(x.clone());
        }
        x = m.w() * &x;
    }
    Trace {
        records,
        final_x: x,
        scaling_violations: Vec::new(),
        iterates,
    }
}

/// State of CHOCO-GOSSIP / CCS.
#[derive(Debug, Clone)]
pub struct CompressedGossipState {
    pub x: Mat,
    pub x_hat: Mat,
    pub k: usize,
    /// Bits sent by each node so far.
    pub bits_sent: Vec<f64>,
    delta_buf: Vec<f64>,
    q_buf: Vec<f64>,
}

/// Outcome of one compressed-gossip step.
#[derive(Debug, Clone, Copy)]
pub struct GossipStep {
    /// `||X̂^{k+1} - X^k||` (Frobenius).
    pub innovation: f64,
    /// `||Δ^k / s^k||_max` when a scale was applied.
    pub scaled_norm: Option<f64>,
}

impl CompressedGossipState {
    pub fn new(x0: &Mat, xhat0: Option<&Mat>) -> Self {
        let (n, d) = x0.shape();
        CompressedGossipState {
            x: x0.clone(),
            x_hat: xhat0.cloned().unwrap_or_else(|| Mat::zeros(n, d)),
            k: 0,
            bits_sent: vec![0.0; n],
            delta_buf: vec![0.0; d],
            q_buf: vec![0.0; d],
        }
    }

    /// Estimate update `X̂^{k+1} = X̂^k + s Q((X^k - X̂^k)/s)` (with `s = 1`
    /// when `scale` is absent); the consensus step is separate so the
    /// Lyapunov value can be read in between.
    pub fn update_estimate<R: Rng + ?Sized>(
        &mut self,
        m: &MixingMatrix,
        q: &CompressorSpec,
        scale: Option<(f64, f64)>,
        rng: &mut R,
    ) -> GossipStep {
        let (n, d) = self.x.shape();
        let s = scale.map(|(s, _)| s).unwrap_or(1.0);
        let mut scaled_max = 0.0_f64;
        let mut innov = 0.0;
        let cost = q.bit_cost(d) as f64;
        for i in 0..n {
            for j in 0..d {
                self.delta_buf[j] = (self.x[(i, j)] - self.x_hat[(i, j)]) / s;
            }
            if let Some((_, p)) = scale {
                scaled_max = scaled_max.max(crate::linalg::pnorm(&self.delta_buf, p));
            }
            q.compress_into(&self.delta_buf, &mut self.q_buf, rng);
            for j in 0..d {
                self.x_hat[(i, j)] += s * self.q_buf[j];
                innov += (self.x_hat[(i, j)] - self.x[(i, j)]).powi(2);
            }
            self.bits_sent[i] += cost * m.degree(i) as f64;
        }
        GossipStep {
            innovation: innov.sqrt(),
            scaled_norm: scale.map(|_| scaled_max),
        }
    }

    /// `X^{k+1} = X^k + γ(W - I)X̂^{k+1}`.
    pub fn consensus_step(&mut self, m: &MixingMatrix, gamma: f64) {
        let lap = m.w() * &self.x_hat - &self.x_hat;
        self.x += gamma * lap;
        self.k += 1;
    }

    pub fn mean_bits(&self) -> f64 {
        self.bits_sent.iter().sum::<f64>() / self.bits_sent.len() as f64
    }
}

/// CHOCO-GOSSIP:
/// `X̂^{k+1} = X̂^k + Q(X^k - X̂^k)`, `X^{k+1} = X^k + γ(W-I)X̂^{k+1}`.
///
/// The Lyapunov column is `q||X^k - 1x̄ᵀ||² + ||X̂^{k+1} - X^k||²` with the
/// compressor's declared mean-square `δ`.
pub fn choco_gossip_run(
    m: &MixingMatrix,
    x0: &Mat,
    q: &CompressorSpec,
    gamma: f64,
    iters: usize,
    opts: &GossipOptions,
) -> Result<Trace> {
    let d = x0.ncols();
    let delta = match q.require_contracted(d) {
        Ok(v) => Some(v),
        Err(e) if !opts.force => return Err(e),
        Err(_) => None,
    };
    if let Some(delta) = delta {
        let cert = choco_rate(delta, m, Some(gamma));
        let cap = cert.get("gamma_max").unwrap();
        if !(gamma > 0.0 && gamma < cap) && !opts.force {
            return Err(Error::InvalidParameter(format!(
                "gamma={gamma} outside (0, {cap}) for delta={delta}"
            )));
        }
    }
    let weight = delta.map(|dl| choco_lyapunov_weight(dl, gamma, m.lambda_n));
    let mut rng: ChaCha8Rng = stream_rng(0, opts.seed);
    let mut st = CompressedGossipState::new(x0, opts.xhat0.as_ref());
    let mut records = Vec::with_capacity(iters);
    let mut iterates = Vec::new();
    for k in 0..iters {
        let bits = st.mean_bits();
        let ce = consensus_error(&st.x);
        let step = st.update_estimate(m, q, None, &mut rng);
        let mut r = record(k, &st.x, bits);
        r.innovation_max = Some(max_row_norm(&(&st.x_hat - &st.x), 2.0));
        r.lyapunov = weight.map(|w| w * ce * ce + step.innovation * step.innovation);
        records.push(r);
        if opts.keep_iterates {
            iterates.push(st.x.clone());
        }
        st.consensus_step(m, gamma);
    }
    Ok(Trace {
        records,
        final_x: st.x,
        scaling_violations: Vec::new(),
        iterates,
    })
}

/// CCS: `X̂^{k+1} = X̂^k + s^k Q(Δ^k/s^k)`, `Δ^k = X^k - X̂^k`,
/// `X^{k+1} = X^k + γ(W-I)X̂^{k+1}`.
///
/// Fails with a scaling violation when `||Δ^k/s^k||_max > 1` in the
/// compressor's norm (unless forced, in which case it is recorded). The
/// `innovation_max` column is `||X̂^k - X^k||_max`.
pub fn ccs_run(
    m: &MixingMatrix,
    x0: &Mat,
    q: &CompressorSpec,
    gamma: f64,
    schedule: &ScalingSchedule,
    iters: usize,
    opts: &GossipOptions,
) -> Result<Trace> {
    let d = x0.ncols();
    let p = match q.require_absolute(d) {
        Ok((_, p)) => p,
        Err(e) if !opts.force => return Err(e),
        Err(_) => f64::INFINITY,
    };
    let mut rng: ChaCha8Rng = stream_rng(0, opts.seed);
    let mut st = CompressedGossipState::new(x0, opts.xhat0.as_ref());
    let mut records = Vec::with_capacity(iters);
    let mut iterates = Vec::new();
    let mut violations = Vec::new();
    for k in 0..iters {
        let s = schedule.value(k);
        let mut r = record(k, &st.x, st.mean_bits());
        r.innovation_max = Some(max_row_norm(&(&st.x_hat - &st.x), p));
        r.scale_s = Some(s);
        records.push(r);
        if opts.keep_iterates {
            iterates.push(st.x.clone());
        }
        let step = st.update_estimate(m, q, Some((s, p)), &mut rng);
        let ratio = step.scaled_norm.unwrap();
        if ratio > 1.0 + 1e-12 {
            if !opts.force {
                return Err(Error::ScalingViolation { k, ratio });
            }
            violations.push(k);
        }
        st.consensus_step(m, gamma);
    }
    Ok(Trace {
        records,
        final_x: st.x,
        scaling_violations: violations,
        iterates,
    })
}
