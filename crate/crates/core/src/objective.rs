//! Local cost functions with gradient oracles and ground-truth optima.
//!
//! The global problem is `min_x f(x) = sum_i f_i(x)`, each `f_i` being
//! `μ`-strongly convex and `L`-smooth.

use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{column_mean, sym_eigen, Mat, Vector};

pub const CENTRALIZED_MAX_ITERS: usize = 1_000_000;

#[derive(Debug, Clone)]
pub enum LocalCost {
    /// `½ xᵀAx − bᵀx + c`.
    Quadratic { a: Mat, b: Vector, c: f64 },
    /// `w Σ_j [softplus(h_jᵀx) − y_j h_jᵀx] + (r/2)||x||²` with labels in {0, 1}.
    Logistic {
        h: Mat,
        y: Vec<f64>,
        data_weight: f64,
        ridge: f64,
    },
}

/// How a node's logistic term is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogisticScale {
    /// `f_i = (1/m_i) Σ_j loss_j + (r/2)||x||²`, so `μ = r`.
    NodeAverage,
    /// `f_i = (1/m) Σ_j loss_j + (r/(2n))||x||²`, so `Σ_i f_i` is the
    /// pooled cost exactly.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    SortedLabel,
    Random(u64),
}

#[derive(Debug, Clone)]
pub struct Objective {
    n: usize,
    d: usize,
    mu: f64,
    l: f64,
    costs: Vec<LocalCost>,
    optimum: Option<Vec<f64>>,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl LocalCost {
    fn value(&self, x: &[f64]) -> f64 {
        match self {
            LocalCost::Quadratic { a, b, c } => {
                let xv = DVector::from_column_slice(x);
                0.5 * xv.dot(&(a * &xv)) - b.dot(&xv) + c
            }
            LocalCost::Logistic {
                h,
                y,
                data_weight,
                ridge,
            } => {
                let z = h * DVector::from_column_slice(x);
                let loss: f64 = z.iter().zip(y).map(|(&z, &y)| softplus(z) - y * z).sum();
                data_weight * loss + 0.5 * ridge * dot(x, x)
            }
        }
    }

    fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            LocalCost::Quadratic { a, b, .. } => {
                let d = x.len();
                for (i, o) in out.iter_mut().enumerate() {
                    let mut s = -b[i];
                    for j in 0..d {
                        s += a[(i, j)] * x[j];
                    }
                    *o = s;
                }
            }
            LocalCost::Logistic {
                h,
                y,
                data_weight,
                ridge,
            } => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = ridge * v;
                }
                let d = x.len();
                for r in 0..h.nrows() {
                    let mut z = 0.0;
                    for j in 0..d {
                        z += h[(r, j)] * x[j];
                    }
                    let g = data_weight * (sigmoid(z) - y[r]);
                    for j in 0..d {
                        out[j] += g * h[(r, j)];
                    }
                }
            }
        }
    }
}

impl Objective {
    /// `f_i(x) = ||x − x⁰_i||²`; `μ = L = 2`, optimum is the row mean.
    pub fn quadratic_consensus(x0: &Mat) -> Objective {
        let (n, d) = x0.shape();
        let costs = (0..n)
            .map(|i| {
                let xi: Vector = x0.row(i).transpose();
                LocalCost::Quadratic {
                    a: Mat::identity(d, d) * 2.0,
                    b: &xi * 2.0,
                    c: xi.norm_squared(),
                }
            })
            .collect();
        Objective {
            n,
            d,
            mu: 2.0,
            l: 2.0,
            costs,
            optimum: Some(column_mean(x0)),
        }
    }

    /// General quadratic costs `½ xᵀA_i x − b_iᵀx`; `μ` and `L` are the
    /// extreme eigenvalues over all nodes.
    pub fn quadratic(a: Vec<Mat>, b: Vec<Vector>) -> Result<Objective> {
        if a.is_empty() || a.len() != b.len() {
            return Err(Error::InvalidParameter(
                "need one (A_i, b_i) pair per node".into(),
            ));
        }
        let d = b[0].len();
        let mut mu = f64::INFINITY;
        let mut l = 0.0_f64;
        for (ai, bi) in a.iter().zip(&b) {
            if ai.shape() != (d, d) || bi.len() != d {
                return Err(Error::InvalidParameter("inconsistent quadratic shapes".into()));
            }
            if (ai - ai.transpose()).abs().max() > 1e-12 {
                return Err(Error::InvalidParameter("A_i must be symmetric".into()));
            }
            let e = sym_eigen(ai);
            mu = mu.min(e.values[d - 1]);
            l = l.max(e.values[0]);
        }
        if !(mu > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "quadratic costs must be strongly convex, min eigenvalue {mu}"
            )));
        }
        let sum_a = a.iter().fold(Mat::zeros(d, d), |s, ai| s + ai);
        let sum_b = b.iter().fold(Vector::zeros(d), |s, bi| s + bi);
        let x = sum_a
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("Σ A_i not positive definite".into()))?
            .solve(&sum_b);
        let costs = a
            .into_iter()
            .zip(b)
            .map(|(a, b)| LocalCost::Quadratic { a, b, c: 0.0 })
            .collect::<Vec<_>>();
        Ok(Objective {
            n: costs.len(),
            d,
            mu,
            l,
            costs,
            optimum: Some(x.as_slice().to_vec()),
        })
    }

    /// `A_i = Q diag(λ_i) Qᵀ` with a shared random rotation `Q`; every
    /// spectrum starts at `μ` and ends at `L`, interior values uniform in
    /// `[μ, L]`; `b_i` standard normal.
    pub fn synthetic_quadratic(n: usize, d: usize, mu: f64, l: f64, seed: u64) -> Result<Objective> {
        if !(mu > 0.0) || mu > l {
            return Err(Error::InvalidParameter(format!(
                "need 0 < mu <= L, got mu={mu}, L={l}"
            )));
        }
        if n == 0 || d == 0 {
            return Err(Error::InvalidParameter("n and d must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Mat::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        let q = g.qr().q();
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            let mut lam = vec![0.0; d];
            for (k, v) in lam.iter_mut().enumerate() {
                *v = if k == 0 {
                    mu
                } else if k == d - 1 {
                    l
                } else {
                    rng.gen_range(mu..=l)
                };
            }
            let ai = &q * Mat::from_diagonal(&Vector::from_vec(lam)) * q.transpose();
            a.push(0.5 * (&ai + ai.transpose()));
            b.push(Vector::from_fn(d, |_, _| StandardNormal.sample(&mut rng)));
        }
        let mut obj = Self::quadratic(a, b)?;
        // declared constants are exact by construction
        obj.mu = mu;
        obj.l = l;
        Ok(obj)
    }

    /// Binary logistic regression split across `n` nodes.
    pub fn logistic(
        data: &Dataset,
        n: usize,
        partition: Partition,
        ridge: f64,
        scale: LogisticScale,
    ) -> Result<Objective> {
        let m = data.labels.len();
        if !(ridge > 0.0) {
            return Err(Error::InvalidParameter(format!("ridge must be > 0, got {ridge}")));
        }
        if n == 0 || m < n {
            return Err(Error::InvalidParameter(format!(
                "cannot split {m} samples over {n} nodes without an empty partition"
            )));
        }
        let d = data.features.ncols();
        let mut order: Vec<usize> = (0..m).collect();
        match partition {
            Partition::SortedLabel => {
                order.sort_by(|&a, &b| data.labels[a].partial_cmp(&data.labels[b]).unwrap())
            }
            Partition::Random(seed) => order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
        }
        let mut costs = Vec::with_capacity(n);
        let mut l = 0.0_f64;
        let (mu, ridge_i) = match scale {
            LogisticScale::NodeAverage => (ridge, ridge),
            LogisticScale::Global => (ridge / n as f64, ridge / n as f64),
        };
        for i in 0..n {
            let lo = i * m / n;
            let hi = (i + 1) * m / n;
            let idx = &order[lo..hi];
            let h = Mat::from_fn(idx.len(), d, |r, c| data.features[(idx[r], c)]);
            let y: Vec<f64> = idx.iter().map(|&j| data.labels[j]).collect();
            let w = match scale {
                LogisticScale::NodeAverage => 1.0 / idx.len() as f64,
                LogisticScale::Global => 1.0 / m as f64,
            };
            let hth = h.transpose() * &h;
            let lmax = sym_eigen(&hth).values[0];
            l = l.max(ridge_i + w * lmax / 4.0);
            costs.push(LocalCost::Logistic {
                h,
                y,
                data_weight: w,
                ridge: ridge_i,
            });
        }
        Ok(Objective {
            n,
            d,
            mu,
            l,
            costs,
            optimum: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn l(&self) -> f64 {
        self.l
    }

    /// Closed-form optimum when available.
    pub fn optimum(&self) -> Option<&[f64]> {
        self.optimum.as_deref()
    }

    pub fn costs(&self) -> &[LocalCost] {
        &self.costs
    }

    pub fn local_value(&self, i: usize, x: &[f64]) -> f64 {
        self.costs[i].value(x)
    }

    pub fn local_grad(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.d];
        self.costs[i].grad_into(x, &mut g);
        g
    }

    pub fn local_grad_into(&self, i: usize, x: &[f64], out: &mut [f64]) {
        self.costs[i].grad_into(x, out);
    }

    pub fn global_value(&self, x: &[f64]) -> f64 {
        (0..self.n).map(|i| self.local_value(i, x)).sum()
    }

    /// `∇f(x) = Σ_i ∇f_i(x)`.
    pub fn global_grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.d];
        let mut gi = vec![0.0; self.d];
        for c in &self.costs {
            c.grad_into(x, &mut gi);
            for (a, b) in g.iter_mut().zip(&gi) {
                *a += b;
            }
        }
        g
    }

    /// `F(X) = Σ_i f_i(x_i)` for stacked iterates.
    pub fn stacked_value(&self, x: &Mat) -> f64 {
        (0..self.n)
            .map(|i| {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                self.local_value(i, &row)
            })
            .sum()
    }

    /// `∇F(X)`, row `i` being `∇f_i(x_i)`.
    pub fn stacked_grad(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros(self.n, self.d);
        self.stacked_grad_into(x, &mut out);
        out
    }

    pub fn stacked_grad_into(&self, x: &Mat, out: &mut Mat) {
        let mut row = vec![0.0; self.d];
        let mut g = vec![0.0; self.d];
        for i in 0..self.n {
            for j in 0..self.d {
                row[j] = x[(i, j)];
            }
            self.costs[i].grad_into(&row, &mut g);
            for j in 0..self.d {
                out[(i, j)] = g[j];
            }
        }
    }

    /// `||∇f(x̄)||` at the node average of `x`.
    pub fn optimality_gap(&self, x: &Mat) -> f64 {
        norm(&self.global_grad(&column_mean(x)))
    }

    /// Closed-form optimum if known, else the centralized gradient-descent oracle.
    pub fn reference_optimum(&self, tol: f64) -> Result<Vec<f64>> {
        match &self.optimum {
            Some(x) => Ok(x.clone()),
            None => centralized_optimum(self, tol),
        }
    }
}

/// Gradient descent on `f = Σ f_i` with stepsize `2/(nμ + nL)` until
/// `||∇f(x)|| <= tol`.
pub fn centralized_optimum(obj: &Objective, tol: f64) -> Result<Vec<f64>> {
    let step = 2.0 / (obj.n as f64 * (obj.mu + obj.l));
    let mut x = vec![0.0; obj.d];
    let mut g = obj.global_grad(&x);
    for _ in 0..CENTRALIZED_MAX_ITERS {
        if norm(&g) <= tol {
            return Ok(x);
        }
        for (a, b) in x.iter_mut().zip(&g) {
            *a -= step * b;
        }
        g = obj.global_grad(&x);
    }
    Err(Error::NoConvergence {
        iterations: CENTRALIZED_MAX_ITERS,
        residual: norm(&g),
    })
}

/// Labelled feature matrix, labels in {0, 1}.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Mat,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn new(features: Mat, labels: Vec<f64>) -> Result<Dataset> {
        if features.nrows() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidInput("labels must be 0 or 1".into()));
        }
        Ok(Dataset { features, labels })
    }

    /// Two Gaussian clusters centred at `±c` with `||c|| = 1`, unit noise;
    /// the first half of the samples is labelled 0.
    pub fn synthetic_two_class(m: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centre: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c = norm(&centre);
        centre.iter_mut().for_each(|v| *v /= c);
        let labels: Vec<f64> = (0..m).map(|i| if i < m / 2 { 0.0 } else { 1.0 }).collect();
        let features = Mat::from_fn(m, d, |i, j| {
            let sign = if labels[i] == 1.0 { 1.0 } else { -1.0 };
            let noise: f64 = StandardNormal.sample(&mut rng);
            sign * centre[j] + noise
        });
        Dataset { features, labels }
    }

    /// Reads `label,feat_1,...,feat_d` rows; `-1` labels map to 0 and `#`
    /// starts a comment line.
    pub fn load_csv(path: &Path) -> Result<Dataset> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Io(e.to_string()))?;
        let mut labels = Vec::new();
        let mut values = Vec::new();
        let mut d = None;
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            let nums = rec
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("row {}: bad number `{s}`", line + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            if nums.len() < 2 {
                return Err(Error::Parse(format!("row {}: need a label and features", line + 1)));
            }
            match d {
                None => d = Some(nums.len() - 1),
                Some(d) if d != nums.len() - 1 => {
                    return Err(Error::Parse(format!(
                        "row {}: expected {d} features, got {}",
                        line + 1,
                        nums.len() - 1
                    )))
                }
                _ => {}
            }
            labels.push(if nums[0] == -1.0 { 0.0 } else { nums[0] });
            values.extend_from_slice(&nums[1..]);
        }
        let d = d.ok_or_else(|| Error::Parse("empty dataset".into()))?;
        let features = Mat::from_row_slice(labels.len(), d, &values);
        Dataset::new(features, labels)
    }
}
