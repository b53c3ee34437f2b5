//! Seasonal ARIMA(p,d,q)(P,D,Q)_24 with exhaustive order selection by AIC.
//!
//! The model for a series `y` (already log1p-transformed) is
//!
//! ```text
//! φ(B) Φ(B^24) (∇^d ∇_24^D y_t − μ) = θ(B) Θ(B^24) e_t
//! φ(B) = 1 − φ₁B − φ₂B²      θ(B) = 1 + θ₁B + θ₂B²
//! Φ(B) = 1 − Φ₁B^24          Θ(B) = 1 + Θ₁B^24
//! ```
//!
//! with `μ` estimated only when `d + D = 0`. Coefficients are fitted by
//! conditional sum of squares: pre-sample innovations are zero and the
//! recursion starts once every AR lag is available. The sum of squares is
//! taken over the hours from [`COMMON_START`] on, the same span for every
//! candidate, so the residuals are one-step prediction errors of `y` on one
//! window and the AIC values are comparable across differencing orders.
//!
//! Stationarity and invertibility are enforced by construction: the optimizer
//! works on unconstrained values mapped through `tanh` to partial
//! autocorrelations and then to coefficients by the Durbin–Levinson
//! recursion; seasonal coefficients are `tanh` of their free parameter.

use super::optim::{nelder_mead, NelderMeadOptions};
use super::{BenchmarkError, Result};
use crate::types::HORIZON;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;

pub const SEASON: usize = 24;
/// Minimum history accepted by [`fit_arima_auto`]: three weeks of hours.
pub const MIN_FIT_HOURS: usize = 3 * 168;
/// First hour whose one-step error enters the sum of squares for every
/// candidate: the largest lag any candidate needs, `1 + 24 + 2 + 24`.
pub const COMMON_START: usize = 1 + SEASON + 2 + SEASON;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
    #[serde(rename = "P")]
    pub sp: usize,
    #[serde(rename = "D")]
    pub sd: usize,
    #[serde(rename = "Q")]
    pub sq: usize,
}

impl ArimaOrder {
    pub const fn new(p: usize, d: usize, q: usize, sp: usize, sd: usize, sq: usize) -> Self {
        Self { p, d, q, sp, sd, sq }
    }

    /// The seasonal random walk `(0,0,0)(0,1,0)_24`, i.e. seasonal naive.
    pub const SEASONAL_RANDOM_WALK: Self = Self::new(0, 0, 0, 0, 1, 0);

    pub fn has_mean(&self) -> bool {
        self.d + self.sd == 0
    }

    /// Estimated parameters counted by the AIC, innovation variance included.
    pub fn n_params(&self) -> usize {
        self.p + self.q + self.sp + self.sq + usize::from(self.has_mean()) + 1
    }

    fn is_in_box(&self) -> bool {
        self.p <= 2 && self.q <= 2 && self.sp <= 1 && self.sq <= 1 && self.d <= 1 && self.sd <= 1
    }

    /// Every order of the search box, in a fixed order.
    pub fn search_box() -> Vec<Self> {
        let mut out = Vec::with_capacity(144);
        for d in 0..=1 {
            for sd in 0..=1 {
                for p in 0..=2 {
                    for q in 0..=2 {
                        for sp in 0..=1 {
                            for sq in 0..=1 {
                                out.push(Self::new(p, d, q, sp, sd, sq));
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for ArimaOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({},{},{})({},{},{})_{SEASON}",
            self.p, self.d, self.q, self.sp, self.sd, self.sq
        )
    }
}

/// A fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaSpec {
    pub order: ArimaOrder,
    /// φ₁..φ_p
    pub ar: Vec<f64>,
    /// θ₁..θ_q
    pub ma: Vec<f64>,
    /// Φ₁ if P = 1
    pub seasonal_ar: Vec<f64>,
    /// Θ₁ if Q = 1
    pub seasonal_ma: Vec<f64>,
    /// Mean of the (undifferenced) series; 0 when any differencing is used.
    pub intercept: f64,
    /// Sum of squares over the common window divided by its length.
    pub sigma2: f64,
    pub aic: f64,
    /// True when no candidate could be estimated and the seasonal random
    /// walk was substituted.
    pub fallback: bool,
}

impl ArimaSpec {
    /// A parameter-free spec (only meaningful for orders without AR/MA terms).
    pub fn bare(order: ArimaOrder, intercept: f64) -> Self {
        Self {
            order,
            ar: vec![0.0; order.p],
            ma: vec![0.0; order.q],
            seasonal_ar: vec![0.0; order.sp],
            seasonal_ma: vec![0.0; order.sq],
            intercept,
            sigma2: f64::NAN,
            aic: f64::NAN,
            fallback: false,
        }
    }

    /// Nonzero lags of the expanded AR polynomial of the differenced series,
    /// as `(lag, a)` with `w_t − μ = Σ a (w_{t−lag} − μ) + …`.
    fn ar_lags(&self) -> Vec<(usize, f64)> {
        let sar = self.seasonal_ar.first().copied().unwrap_or(0.0);
        let mut out = Vec::new();
        for (i, a) in self.ar.iter().enumerate() {
            out.push((i + 1, *a));
        }
        if self.order.sp > 0 {
            out.push((SEASON, sar));
            for (i, a) in self.ar.iter().enumerate() {
                out.push((SEASON + i + 1, -a * sar));
            }
        }
        out
    }

    /// Nonzero lags of the expanded MA polynomial, `(lag, m)` with
    /// `… + e_t + Σ m e_{t−lag}`.
    fn ma_lags(&self) -> Vec<(usize, f64)> {
        let sma = self.seasonal_ma.first().copied().unwrap_or(0.0);
        let mut out = Vec::new();
        for (i, m) in self.ma.iter().enumerate() {
            out.push((i + 1, *m));
        }
        if self.order.sq > 0 {
            out.push((SEASON, sma));
            for (i, m) in self.ma.iter().enumerate() {
                out.push((SEASON + i + 1, m * sma));
            }
        }
        out
    }

    fn differencing_offset(&self) -> usize {
        self.order.d + SEASON * self.order.sd
    }

    /// AR polynomial of `y` itself, differencing folded in: returns the
    /// nonzero `(lag, c)` with `y_t = const + Σ c y_{t−lag} + MA part`.
    fn level_ar_lags(&self) -> Vec<(usize, f64)> {
        // Coefficients of 1 − Σ a_k B^k as a dense polynomial.
        let mut poly = vec![1.0];
        let mul = |poly: &Vec<f64>, other: &[(usize, f64)]| {
            let deg = other.iter().map(|(l, _)| *l).max().unwrap_or(0);
            let mut out = vec![0.0; poly.len() + deg];
            for (i, c) in poly.iter().enumerate() {
                out[i] += c;
                for (l, a) in other {
                    out[i + l] -= c * a;
                }
            }
            out
        };
        poly = mul(&poly, &self.ar_lags());
        for _ in 0..self.order.d {
            poly = mul(&poly, &[(1, 1.0)]);
        }
        for _ in 0..self.order.sd {
            poly = mul(&poly, &[(SEASON, 1.0)]);
        }
        poly.iter()
            .enumerate()
            .skip(1)
            .filter(|(_, c)| **c != 0.0)
            .map(|(l, c)| (l, -c))
            .collect()
    }

    /// Constant term of the level recursion.
    fn level_constant(&self) -> f64 {
        if !self.order.has_mean() {
            return 0.0;
        }
        let ar_sum: f64 = self.ar_lags().iter().map(|(_, a)| a).sum();
        self.intercept * (1.0 - ar_sum)
    }
}

/// `∇^d ∇_24^D y`.
pub fn difference(y: &[f64], d: usize, sd: usize) -> Vec<f64> {
    let mut w = y.to_vec();
    for _ in 0..d {
        w = w.windows(2).map(|p| p[1] - p[0]).collect();
    }
    for _ in 0..sd {
        w = (SEASON..w.len()).map(|t| w[t] - w[t - SEASON]).collect();
    }
    w
}

/// Conditional residuals of `spec` on `y`, aligned to `y` (zero where the
/// recursion has not started). Returns the residuals and the sum of squares
/// from `sse_from` on.
fn css_residuals(spec: &ArimaSpec, y: &[f64], sse_from: usize) -> (Vec<f64>, f64) {
    let offset = spec.differencing_offset();
    let w = difference(y, spec.order.d, spec.order.sd);
    let ar = spec.ar_lags();
    let ma = spec.ma_lags();
    let mu = if spec.order.has_mean() { spec.intercept } else { 0.0 };
    let start = ar.iter().map(|(l, _)| *l).max().unwrap_or(0);
    let mut e = vec![0.0; y.len()];
    let mut sse = 0.0;
    for i in start..w.len() {
        let mut v = w[i] - mu;
        for (l, a) in &ar {
            v -= a * (w[i - l] - mu);
        }
        for (l, m) in &ma {
            if i >= start + l {
                v -= m * e[offset + i - l];
            }
        }
        e[offset + i] = v;
        if offset + i >= sse_from {
            sse += v * v;
        }
    }
    (e, sse)
}

/// Partial autocorrelations → AR coefficients (Durbin–Levinson).
fn pacf_to_coefficients(r: &[f64]) -> Vec<f64> {
    let mut phi: Vec<f64> = Vec::with_capacity(r.len());
    for (k, rk) in r.iter().enumerate() {
        let prev = phi.clone();
        phi.push(*rk);
        for j in 0..k {
            phi[j] = prev[j] - rk * prev[k - 1 - j];
        }
    }
    phi
}

fn spec_from_free(order: ArimaOrder, x: &[f64]) -> ArimaSpec {
    let mut it = x.iter().copied();
    let mut take = |n: usize| -> Vec<f64> { (0..n).map(|_| it.next().unwrap().tanh()).collect() };
    let ar = pacf_to_coefficients(&take(order.p));
    // Invertibility of 1 + θ(B) is stationarity of 1 − (−θ)(B).
    let ma = pacf_to_coefficients(&take(order.q)).into_iter().map(|c| -c).collect();
    let seasonal_ar = take(order.sp);
    let seasonal_ma = take(order.sq);
    let intercept = if order.has_mean() { x[x.len() - 1] } else { 0.0 };
    ArimaSpec {
        order,
        ar,
        ma,
        seasonal_ar,
        seasonal_ma,
        intercept,
        sigma2: f64::NAN,
        aic: f64::NAN,
        fallback: false,
    }
}

/// Fits one order by conditional sum of squares. `None` if the objective
/// never became finite.
pub fn fit_order(y: &[f64], order: ArimaOrder) -> Option<ArimaSpec> {
    let n_free = order.p + order.q + order.sp + order.sq;
    let mut x0 = vec![0.0; n_free];
    if order.has_mean() {
        x0.push(y.iter().sum::<f64>() / y.len() as f64);
    }
    let n_eff = y.len().saturating_sub(COMMON_START);
    if n_eff == 0 {
        return None;
    }
    let opts = NelderMeadOptions {
        max_evals: 400 * (x0.len() + 1),
        ..NelderMeadOptions::default()
    };
    let best = nelder_mead(|x| css_residuals(&spec_from_free(order, x), y, COMMON_START).1, &x0, &opts);
    if !best.value.is_finite() {
        return None;
    }
    let mut spec = spec_from_free(order, &best.x);
    let n = n_eff as f64;
    spec.sigma2 = best.value / n;
    spec.aic = n * (best.value / n).ln() + 2.0 * order.n_params() as f64;
    if !spec.aic.is_finite() {
        // A perfect fit (zero sum of squares) still ranks first.
        spec.aic = f64::MIN;
    }
    Some(spec)
}

/// Every candidate's AIC, `None` for candidates that failed.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoArima {
    pub spec: ArimaSpec,
    pub candidates: Vec<(ArimaOrder, Option<f64>)>,
}

/// Exhaustive AIC search over the order box. `y` is the log1p-transformed
/// history.
pub fn fit_arima_auto(y: &[f64]) -> Result<AutoArima> {
    fit_arima_over(y, &ArimaOrder::search_box())
}

/// As [`fit_arima_auto`] over an explicit candidate list.
pub fn fit_arima_over(y: &[f64], orders: &[ArimaOrder]) -> Result<AutoArima> {
    if y.len() < MIN_FIT_HOURS {
        return Err(BenchmarkError::TooShort {
            needed: MIN_FIT_HOURS,
            got: y.len(),
        });
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(BenchmarkError::NonFinite { index: i });
    }
    if let Some(o) = orders.iter().find(|o| !o.is_in_box()) {
        return Err(BenchmarkError::OrderOutOfRange(*o));
    }
    let mut best: Option<ArimaSpec> = None;
    let mut candidates = Vec::with_capacity(orders.len());
    for &order in orders {
        let fit = fit_order(y, order);
        candidates.push((order, fit.as_ref().map(|s| s.aic)));
        if let Some(s) = fit {
            if best.as_ref().is_none_or(|b| s.aic < b.aic) {
                best = Some(s);
            }
        }
    }
    let spec = best.unwrap_or_else(|| ArimaSpec {
        fallback: true,
        ..ArimaSpec::bare(ArimaOrder::SEASONAL_RANDOM_WALK, 0.0)
    });
    Ok(AutoArima { spec, candidates })
}

/// In-sample one-step predictions of `y` (`y − residual`); entries before the
/// recursion starts are NaN.
pub fn one_step_predictions(spec: &ArimaSpec, y: &[f64]) -> Vec<f64> {
    let (e, _) = css_residuals(spec, y, y.len());
    let first = spec.differencing_offset() + spec.ar_lags().iter().map(|(l, _)| *l).max().unwrap_or(0);
    (0..y.len())
        .map(|t| if t < first { f64::NAN } else { y[t] - e[t] })
        .collect()
}

/// Iterated forecasts of the transformed series for `horizon` steps, with
/// future innovations set to zero.
pub fn forecast_transformed(spec: &ArimaSpec, y: &[f64], horizon: usize) -> Result<Vec<f64>> {
    let ar = spec.level_ar_lags();
    let ma = spec.ma_lags();
    let need = ar.iter().chain(&ma).map(|(l, _)| *l).max().unwrap_or(0);
    if y.len() < need.max(1) {
        return Err(BenchmarkError::TooShort {
            needed: need.max(1),
            got: y.len(),
        });
    }
    let (mut e, _) = css_residuals(spec, y, y.len());
    let c = spec.level_constant();
    let mut path = y.to_vec();
    for _ in 0..horizon {
        let t = path.len();
        let mut v = c;
        for (l, a) in &ar {
            v += a * path[t - l];
        }
        for (l, m) in &ma {
            v += m * e[t - l];
        }
        if !v.is_finite() {
            return Err(BenchmarkError::NonFinite { index: t });
        }
        path.push(v);
        e.push(0.0);
    }
    Ok(path.split_off(y.len()))
}

/// 24-hour kWh forecast from a kWh history. The history is log1p-transformed,
/// forecast, and mapped back; a forecast that reproduces an observed
/// transformed value maps back to that exact observation.
pub fn arima_forecast(spec: &ArimaSpec, history_kwh: &[f64]) -> Result<Vec<f64>> {
    let y: Vec<f64> = history_kwh.iter().map(|z| z.ln_1p()).collect();
    let lookup: HashMap<u64, f64> = y.iter().zip(history_kwh).map(|(t, z)| (t.to_bits(), *z)).collect();
    let f = forecast_transformed(spec, &y, HORIZON)?;
    Ok(f.into_iter()
        .map(|v| lookup.get(&v.to_bits()).copied().unwrap_or_else(|| v.exp_m1()).max(0.0))
        .collect())
}
