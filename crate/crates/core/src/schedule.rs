//! Diffusion coefficient tables and the Gaussian algebra built on them.
//!
//! Steps are 1-based: `alpha(t)` for `t` in `1..=T`. The cumulative product
//! uses the empty-product convention `alpha_bar(0) == 1`. The word-noising
//! coefficient `alpha0` is stored alongside but never enters the product.
//!
//! All coefficients are kept in `f64`; for `T = 2000` the tail of the
//! cumulative product is far below `f32` resolution.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `alpha_bar(u) = 1 - sqrt(u + offset)` on `u = t / T`.
    Sqrt,
    /// `beta_t` linearly spaced from `beta_min` to `beta_max`.
    LinearBeta,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt" => Ok(ScheduleKind::Sqrt),
            "linear_beta" | "linear" => Ok(ScheduleKind::LinearBeta),
            other => Err(Error::InvalidSchedule(format!(
                "unknown schedule kind `{other}`"
            ))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Sqrt => f.write_str("sqrt"),
            ScheduleKind::LinearBeta => f.write_str("linear_beta"),
        }
    }
}

/// Everything needed to rebuild a schedule bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    /// Word-noising coefficient of `q(x_0 | w) = N(Emb(w), (1 - alpha0) I)`.
    pub alpha0: f64,
    /// Offset `s` of the sqrt schedule.
    pub offset: f64,
    /// Upper clip on `beta_t` for the sqrt schedule.
    pub max_beta: f64,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Sqrt,
            steps: 2000,
            alpha0: 0.99,
            offset: 1e-4,
            max_beta: 0.999,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn sqrt(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn linear_beta(steps: usize, beta_min: f64, beta_max: f64) -> Self {
        Self {
            kind: ScheduleKind::LinearBeta,
            steps,
            beta_min,
            beta_max,
            ..Self::default()
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.clone())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schedule spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidSchedule(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Immutable alpha / cumulative-alpha tables for steps `1..=T`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        let steps = spec.steps;
        if steps < 1 {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        if !(spec.alpha0 > 0.0 && spec.alpha0 <= 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "alpha0 = {} outside (0, 1]",
                spec.alpha0
            )));
        }
        let alphas = match spec.kind {
            ScheduleKind::Sqrt => sqrt_alphas(&spec)?,
            ScheduleKind::LinearBeta => linear_beta_alphas(&spec)?,
        };
        for (i, &a) in alphas.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_{} = {a} outside (0, 1]",
                    i + 1
                )));
            }
        }
        let alpha_bars = alphas
            .iter()
            .scan(1.0f64, |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            spec,
            alphas,
            alpha_bars,
        })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alpha0(&self) -> f64 {
        self.spec.alpha0
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    /// `alpha_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alphas[t - 1])
    }

    /// `alpha_bar_t` for `t` in `0..=T`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_step(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn forward_marginal_sample(
        &self,
        x0: &Array2<f64>,
        t: usize,
        eps: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.check_step(t)?;
        let ab = self.alpha_bars[t - 1];
        same_shape("forward_marginal_sample", x0, eps)?;
        Ok(affine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
    }

    /// One Markov step: `sqrt(alpha_t) x_{t-1} + sqrt(1 - alpha_t) eps`.
    pub fn forward_step_sample(
        &self,
        x_prev: &Array2<f64>,
        t: usize,
        eps: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let a = self.alpha(t)?;
        same_shape("forward_step_sample", x_prev, eps)?;
        Ok(affine(x_prev, a.sqrt(), eps, (1.0 - a).sqrt()))
    }

    /// Coefficients `(c_xt, c_x0)` of the posterior mean
    /// `c_xt * x_t + c_x0 * x0`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let a = self.alpha(t)?;
        let ab = self.alpha_bars[t - 1];
        let ab_prev = self.alpha_bar(t - 1)?;
        let denom = 1.0 - ab;
        if denom <= 0.0 {
            return Err(Error::DegenerateSchedule { t });
        }
        Ok((
            a.sqrt() * (1.0 - ab_prev) / denom,
            ab_prev.sqrt() * (1.0 - a) / denom,
        ))
    }

    /// Mean of `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_mean(
        &self,
        x_t: &Array2<f64>,
        x0: &Array2<f64>,
        t: usize,
    ) -> Result<Array2<f64>> {
        let (c_xt, c_x0) = self.posterior_coefficients(t)?;
        same_shape("posterior_mean", x_t, x0)?;
        Ok(affine(x_t, c_xt, x0, c_x0))
    }

    /// Variance of `q(x_{t-1} | x_t, x_0)` (isotropic).
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        let a = self.alpha(t)?;
        let ab = self.alpha_bars[t - 1];
        let ab_prev = self.alpha_bar(t - 1)?;
        let denom = 1.0 - ab;
        if denom <= 0.0 {
            return Err(Error::DegenerateSchedule { t });
        }
        Ok(((1.0 - a) * (1.0 - ab_prev) / denom).max(0.0))
    }

    /// CSV table `t,alpha,alpha_bar,posterior_variance`. Degenerate steps
    /// report `nan` in the variance column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,alpha,alpha_bar,posterior_variance\n");
        for t in 1..=self.steps() {
            let var = self.posterior_variance(t).unwrap_or(f64::NAN);
            out.push_str(&format!(
                "{t},{:e},{:e},{:e}\n",
                self.alphas[t - 1],
                self.alpha_bars[t - 1],
                var
            ));
        }
        out
    }
}

fn sqrt_alphas(spec: &ScheduleSpec) -> Result<Vec<f64>> {
    if !(spec.offset > 0.0 && spec.offset < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "sqrt offset {} outside (0, 1)",
            spec.offset
        )));
    }
    if !(spec.max_beta > 0.0 && spec.max_beta < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "max_beta {} outside (0, 1)",
            spec.max_beta
        )));
    }
    let steps = spec.steps as f64;
    let f = |u: f64| 1.0 - (u + spec.offset).sqrt();
    Ok((1..=spec.steps)
        .map(|t| {
            let prev = f((t - 1) as f64 / steps);
            let cur = f(t as f64 / steps);
            let beta = (1.0 - cur / prev).min(spec.max_beta);
            1.0 - beta
        })
        .collect())
}

fn linear_beta_alphas(spec: &ScheduleSpec) -> Result<Vec<f64>> {
    let (lo, hi) = (spec.beta_min, spec.beta_max);
    if !(0.0..1.0).contains(&lo) || !(0.0..1.0).contains(&hi) {
        return Err(Error::InvalidSchedule(format!(
            "beta range ({lo}, {hi}) must lie in [0, 1)"
        )));
    }
    let steps = spec.steps;
    Ok((0..steps)
        .map(|i| {
            let frac = if steps == 1 {
                0.0
            } else {
                i as f64 / (steps - 1) as f64
            };
            1.0 - (lo + (hi - lo) * frac)
        })
        .collect())
}

fn same_shape(context: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(context, a.shape(), b.shape()));
    }
    Ok(())
}

fn affine(a: &Array2<f64>, ca: f64, b: &Array2<f64>, cb: f64) -> Array2<f64> {
    let mut out = a * ca;
    out.scaled_add(cb, b);
    out
}
