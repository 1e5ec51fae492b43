//! Two-state correct/incorrect chain of a decoder under label injection.
//!
//! A decoded tag is correct with probability `p` after a correct input and
//! `q` after an incorrect one. With probability `beta` the gate replaces the
//! input with ground truth, which counts as a correct input. The stationary
//! probability of a correct tag is
//! `γ(β) = (pβ + q(1−β)) / (1 − (1−β)(p−q))`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::rngs::SmallRng;
use rand::{RngCore, SeedableRng};

use crate::error::{Error, Result};

pub const DEFAULT_BURN_IN: usize = 100;
pub const CSV_HEADER: &str = "p,q,beta,gamma_closed,gamma_mc,stderr,verdict";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainSpec {
    pub p: f64,
    pub q: f64,
    pub beta: f64,
    pub gamma0_init: f64,
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {v} outside [0, 1]")))
    }
}

impl ChainSpec {
    pub fn new(p: f64, q: f64, beta: f64) -> Result<Self> {
        let s = Self { p, q, beta, gamma0_init: 0.5 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        unit("p", self.p)?;
        unit("q", self.q)?;
        unit("beta", self.beta)?;
        unit("gamma0_init", self.gamma0_init)
    }

    /// `(1−β)(p−q)`, the contraction factor of the recursion.
    pub fn contraction(&self) -> f64 {
        (1.0 - self.beta) * (self.p - self.q)
    }
}

/// `γ_t = p(β + (1−β)γ_{t−1}) + q(1−β)(1−γ_{t−1})`.
pub fn gamma_step(gamma_prev: f64, spec: &ChainSpec) -> Result<f64> {
    spec.validate()?;
    unit("gamma_prev", gamma_prev)?;
    let ChainSpec { p, q, beta, .. } = *spec;
    Ok(p * (beta + (1.0 - beta) * gamma_prev) + q * (1.0 - beta) * (1.0 - gamma_prev))
}

/// Runs `n` recursion steps from `spec.gamma0_init`.
pub fn iterate_gamma(spec: &ChainSpec, n: usize) -> Result<f64> {
    let mut g = spec.gamma0_init;
    for _ in 0..n {
        g = gamma_step(g, spec)?;
    }
    Ok(g)
}

/// Closed-form stationary value. Fails when `|(1−β)(p−q)| = 1`, where the
/// chain has no unique fixed point.
pub fn gamma_fixed_point(spec: &ChainSpec) -> Result<f64> {
    spec.validate()?;
    let k = spec.contraction();
    if k.abs() >= 1.0 {
        return Err(Error::Degenerate(format!(
            "p = {}, q = {}, beta = {} has no unique equilibrium",
            spec.p, spec.q, spec.beta
        )));
    }
    Ok((spec.p * spec.beta + spec.q * (1.0 - spec.beta)) / (1.0 - k))
}

/// `dγ/dβ = (p−q)(1−p) / (1 − (1−β)(p−q))²`.
pub fn gamma_slope(spec: &ChainSpec) -> Result<f64> {
    gamma_fixed_point(spec)?;
    let d = spec.p - spec.q;
    let den = 1.0 - spec.contraction();
    Ok(d * (1.0 - spec.p) / (den * den))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub gamma: f64,
    pub stderr: f64,
}

/// Probability `x` as a threshold on a uniform `u32`: `u < t` has
/// probability `x` up to 2⁻³².
fn threshold(x: f64) -> u64 {
    libm::round(x * 4294967296.0) as u64
}

/// Samples `trials` independent chains for `steps` steps each and averages
/// the terminal correctness. Each step splits one 64-bit draw into the gate
/// uniform (high half) and the correctness uniform (low half).
pub fn simulate_chain(spec: &ChainSpec, steps: usize, trials: usize, seed: u64) -> Result<McEstimate> {
    spec.validate()?;
    if steps < DEFAULT_BURN_IN {
        return Err(Error::Domain(format!("{steps} steps is shorter than the {DEFAULT_BURN_IN}-step burn-in")));
    }
    if trials == 0 {
        return Err(Error::Domain("at least one trial is required".into()));
    }
    let (tb, tp, tq, t0) = (threshold(spec.beta), threshold(spec.p), threshold(spec.q), threshold(spec.gamma0_init));
    let mut rng = SmallRng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..trials {
        let mut correct = (rng.next_u64() >> 32) < t0;
        for _ in 0..steps {
            let u = rng.next_u64();
            let injected = (u >> 32) < tb;
            let t = if injected || correct { tp } else { tq };
            correct = (u & 0xffff_ffff) < t;
        }
        hits += usize::from(correct);
    }
    let n = trials as f64;
    let gamma = hits as f64 / n;
    Ok(McEstimate { gamma, stderr: libm::sqrt(gamma * (1.0 - gamma) / n) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Increasing,
    Decreasing,
    Constant,
    Degenerate,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Increasing => "increasing",
            Verdict::Decreasing => "decreasing",
            Verdict::Constant => "constant",
            Verdict::Degenerate => "degenerate",
        }
    }

    /// The direction predicted from the chain parameters alone: increasing
    /// for `p > q`, decreasing for `p < q`, constant for `p = q`, with the
    /// exception `p = 1` where every `β` gives `γ = 1`.
    pub fn predicted(p: f64, q: f64) -> Self {
        if p == q || p == 1.0 {
            Verdict::Constant
        } else if p > q {
            Verdict::Increasing
        } else {
            Verdict::Decreasing
        }
    }
}

/// Direction of `γ(β)` observed across increasing `betas`.
pub fn observed_verdict(p: f64, q: f64, betas: &[f64]) -> Result<Verdict> {
    let mut values = Vec::with_capacity(betas.len());
    for &b in betas {
        match gamma_fixed_point(&ChainSpec::new(p, q, b)?) {
            Ok(g) => values.push(g),
            Err(Error::Degenerate(_)) => return Ok(Verdict::Degenerate),
            Err(e) => return Err(e),
        }
    }
    const TIE: f64 = 1e-12;
    let pairs = || values.windows(2);
    Ok(if pairs().all(|w| (w[1] - w[0]).abs() <= TIE) {
        Verdict::Constant
    } else if pairs().all(|w| w[1] - w[0] > TIE) {
        Verdict::Increasing
    } else if pairs().all(|w| w[0] - w[1] > TIE) {
        Verdict::Decreasing
    } else {
        Verdict::Degenerate
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderingRow {
    pub p: f64,
    pub q: f64,
    pub beta: f64,
    /// `None` in degenerate cells.
    pub gamma_closed: Option<f64>,
    pub mc: Option<McEstimate>,
    pub verdict: Verdict,
}

/// Settings of the optional Monte-Carlo column.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McSettings {
    pub steps: usize,
    pub trials: usize,
    pub seed: u64,
}

/// SplitMix64 finalizer, used to derive one stream per grid cell.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One row per `(p, q, β)` with the closed form, optionally a Monte-Carlo
/// estimate, and the observed direction of `γ` in `β` for that `(p, q)`.
/// `betas` must be increasing.
pub fn ordering_report(grid: &[(f64, f64)], betas: &[f64], mc: Option<McSettings>) -> Result<Vec<OrderingRow>> {
    if betas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("betas must be strictly increasing".into()));
    }
    let mut rows = Vec::with_capacity(grid.len() * betas.len());
    for &(p, q) in grid {
        let verdict = observed_verdict(p, q, betas)?;
        for &beta in betas {
            let spec = ChainSpec::new(p, q, beta)?;
            let gamma_closed = gamma_fixed_point(&spec).ok();
            let mc = match (mc, gamma_closed) {
                (Some(s), Some(_)) => {
                    Some(simulate_chain(&spec, s.steps, s.trials, derive_seed(s.seed, rows.len() as u64))?)
                }
                _ => None,
            };
            rows.push(OrderingRow { p, q, beta, gamma_closed, mc, verdict });
        }
    }
    Ok(rows)
}

/// `CSV_HEADER` followed by one line per row; missing values are empty.
pub fn report_csv(rows: &[OrderingRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let closed = r.gamma_closed.map(|g| format!("{g:.12}")).unwrap_or_default();
        let (mc, se) = match r.mc {
            Some(m) => (format!("{:.6}", m.gamma), format!("{:.6}", m.stderr)),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(out, "{},{},{},{closed},{mc},{se},{}", r.p, r.q, r.beta, r.verdict.as_str());
    }
    out
}

/// `{0.1, 0.2, …, 0.9}`.
pub fn default_probabilities() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

pub fn default_betas() -> Vec<f64> {
    alloc::vec![0.0, 0.25, 0.5, 0.75, 1.0]
}
