//! Synthetic bubbling data, recovery of the approximating global solution at
//! the design nodes, and the estimates that compare the two.

use std::f64::consts::PI;

use nalgebra::DVector;
use num_rational::Rational64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::design::{Node, NodeSet};
use crate::error::{Error, Result};
use crate::fracpoly::ratio_to_f64;
use crate::linalg::{cond2, LogMatrix};
use crate::linearization::{dparam_numerator, perturb, Chart, ParamTag};
use crate::system::{inverse_cartan, Component, SingularWeights, TodaParams, TodaSolution};

/// Smooth bounded perturbation `w(r, θ)` with sup-norm at most one.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrigPerturbation {
    /// `(amplitude, angular mode, angular phase, radial frequency, radial phase)`.
    terms: Vec<(f64, f64, f64, f64, f64)>,
}

impl TrigPerturbation {
    pub fn seeded(rng: &mut ChaCha8Rng) -> Self {
        let mut terms: Vec<(f64, f64, f64, f64, f64)> = (0..4)
            .map(|m| {
                (
                    rng.gen_range(-1.0..1.0),
                    m as f64,
                    rng.gen_range(0.0..2.0 * PI),
                    rng.gen_range(0.2..1.5),
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let total: f64 = terms.iter().map(|t| t.0.abs()).sum();
        for t in terms.iter_mut() {
            t.0 /= total;
        }
        TrigPerturbation { terms }
    }

    pub fn eval(&self, r: f64, theta: f64) -> f64 {
        let s = (1.0 + r).ln();
        self.terms
            .iter()
            .map(|(a, m, ph, k, ps)| a * (m * theta + ph).cos() * (k * s + ps).cos())
            .sum()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplePoint {
    pub node: Node,
    /// `ṽ_1^k .. ṽ_n^k` at the node.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BubblingSample {
    pub epsilon: f64,
    pub weights: SingularWeights,
    pub truth: TodaParams,
    pub eta: f64,
    pub seed: u64,
    pub points: Vec<SamplePoint>,
}

/// `ṽ_i^k = ṽ_i(·, Λ) + η w_i` at every node.
pub fn synthesize(
    truth: &TodaParams,
    epsilon: f64,
    eta: f64,
    seed: u64,
    nodes: &[Node],
) -> Result<BubblingSample> {
    let sol = TodaSolution::build(truth)?;
    let n = truth.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pert: Vec<TrigPerturbation> = (0..n).map(|_| TrigPerturbation::seeded(&mut rng)).collect();
    let mut points = Vec::with_capacity(nodes.len());
    for node in nodes {
        let r = node.r();
        let lp = sol.ladder_point(r, node.theta)?;
        let values = (1..=n)
            .map(|i| {
                let exact = sol.component_from(&lp, Component::LowerRegular, i);
                if eta == 0.0 {
                    exact
                } else {
                    exact + eta * pert[i - 1].eval(r, node.theta)
                }
            })
            .collect();
        points.push(SamplePoint { node: *node, values });
    }
    Ok(BubblingSample {
        epsilon,
        weights: truth.weights.clone(),
        truth: truth.clone(),
        eta,
        seed,
        points,
    })
}

/// `max_{i, y} ṽ_i(y) / (1 + γ_i)` over the given values.
fn peak(weights: &SingularWeights, points: &[SamplePoint]) -> f64 {
    points
        .iter()
        .flat_map(|p| {
            p.values
                .iter()
                .enumerate()
                .map(|(i, v)| v / ratio_to_f64(weights.mu(i + 1)))
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `ε` recovered from the sample by its defining maximum.
pub fn recompute_epsilon(sample: &BubblingSample) -> f64 {
    sample.epsilon * (-0.5 * peak(&sample.weights, &sample.points)).exp()
}

/// Rescales `params` so that `max ṽ_i/(1+γ_i) = 0` over `nodes`.
pub fn normalize_peak(params: &TodaParams, nodes: &[Node]) -> Result<TodaParams> {
    let mut p = params.clone();
    for _ in 0..60 {
        let sample = synthesize(&p, 1.0, 0.0, 0, nodes)?;
        let m = peak(&p.weights, &sample.points);
        if m.abs() < 1e-14 {
            return Ok(p);
        }
        p = p.rescaled((-0.5 * m).exp());
    }
    Ok(p)
}

/// Geometric radii from `1e−3` to `r_max` times `angles` equispaced angles.
pub fn sample_grid(r_max: f64, per_decade: usize, angles: usize) -> Vec<Node> {
    let (lo, hi) = (1e-3f64.ln(), r_max.ln());
    let count = ((hi - lo) / std::f64::consts::LN_10 * per_decade as f64).ceil() as usize + 1;
    let mut out = Vec::with_capacity(count * angles);
    for a in 0..count {
        let ln_r = lo + (hi - lo) * a as f64 / (count - 1) as f64;
        for b in 0..angles {
            out.push(Node {
                ln_r,
                theta: 2.0 * PI * b as f64 / angles as f64,
            });
        }
    }
    out
}

/// Values of the first upper component `ṽ^1 = Σ_j a^{1j} ṽ_j` at the design nodes.
fn upper_targets(sample: &BubblingSample, nodes: &[Node]) -> Result<Vec<f64>> {
    let n = sample.weights.n();
    let inv = inverse_cartan(n);
    nodes
        .iter()
        .map(|node| {
            let p = sample
                .points
                .iter()
                .find(|p| p.node == *node)
                .ok_or_else(|| Error::MissingSample(format!("r = {}, theta = {}", node.r(), node.theta)))?;
            Ok((0..n).map(|j| ratio_to_f64(inv[0][j]) * p.values[j]).sum())
        })
        .collect()
}

/// Free coordinates of `params` in the design's parameter order.
pub fn coordinates(params: &TodaParams, tags: &[ParamTag]) -> Vec<f64> {
    tags.iter()
        .map(|t| match *t {
            ParamTag::Lambda(i) => params.lambda[i],
            ParamTag::CRe(i, j) => params.c.get(i, j).re,
            ParamTag::CIm(i, j) => params.c.get(i, j).im,
        })
        .collect()
}

/// Inverse of [`coordinates`] in the λ_n-dependent chart.
pub fn from_coordinates(template: &TodaParams, tags: &[ParamTag], x: &[f64]) -> Result<TodaParams> {
    let mut p = template.clone();
    for (t, v) in tags.iter().zip(x) {
        p = match *t {
            ParamTag::Lambda(i) => perturb(&p, ParamTag::Lambda(i), Chart::LastDependent, v - p.lambda[i])?,
            ParamTag::CRe(i, j) => perturb(&p, *t, Chart::LastDependent, v - p.c.get(i, j).re)?,
            ParamTag::CIm(i, j) => perturb(&p, *t, Chart::LastDependent, v - p.c.get(i, j).im)?,
        };
    }
    Ok(p)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Recovery {
    pub params: TodaParams,
    /// Sup-norm residual before each iteration and after the last one.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Condition number of the scaled Jacobian at the final iterate.
    pub jacobian_cond: f64,
}

pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 50;

fn residuals(params: &TodaParams, nodes: &[Node], targets: &[f64]) -> Result<Vec<f64>> {
    let sol = TodaSolution::build_unverified(params)?;
    nodes
        .iter()
        .zip(targets)
        .map(|(p, t)| Ok(sol.first_regular(p.r(), p.theta)? - t))
        .collect()
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| if x.is_nan() { f64::INFINITY } else { m.max(x.abs()) })
}

/// Jacobian in reduced coordinates: λ_i columns (`0 < i < n`) carry
/// `(λ_0/λ_i − |P_i|²)/D` instead of the raw field.
fn reduced_jacobian(sol: &TodaSolution, tags: &[ParamTag], nodes: &[Node]) -> Result<LogMatrix> {
    let d = nodes.len();
    let den = sol.denominator.compile();
    let lam = &sol.params.lambda;
    let mut jac = LogMatrix::new(d, tags.len());
    for (e, tag) in tags.iter().enumerate() {
        let num = match *tag {
            ParamTag::Lambda(i) if i > 0 => crate::fracpoly::GenPoly::real(lam[0] / lam[i])
                .sub(&sol.curve[i - 1].norm_sqr()),
            t => dparam_numerator(sol, t, Chart::LastDependent)?,
        }
        .compile();
        for (l, p) in nodes.iter().enumerate() {
            let (ln, sn) = num.eval_ln_log(p.ln_r, p.theta);
            let (ld, sd) = den.eval_ln_log(p.ln_r, p.theta);
            jac.set(l, e, (ln - ld, sn * sd));
        }
    }
    Ok(jac)
}

/// Damped Newton on `ṽ^1(p_l, Λ) = Σ_j a^{1j} ṽ_j^k(p_l)` at the design nodes.
pub fn recover(sample: &BubblingSample, design: &NodeSet, init: &TodaParams) -> Result<Recovery> {
    let tags = &design.params;
    let nodes = &design.nodes;
    let targets = upper_targets(sample, nodes)?;
    let mut params = init.clone();
    let mut res = residuals(&params, nodes, &targets)?;
    let mut trace = vec![sup(&res)];
    let mut jacobian_cond = f64::NAN;
    let mut iterations = 0;
    while iterations < NEWTON_MAX_ITER && *trace.last().unwrap() >= NEWTON_TOL {
        iterations += 1;
        let sol = TodaSolution::build_unverified(&params)?;
        let scaled = reduced_jacobian(&sol, tags, nodes)?.matching_scaling();
        jacobian_cond = cond2(&scaled.matrix);
        if !(jacobian_cond <= design.cond_ceiling) {
            return Err(Error::SingularJacobian(jacobian_cond));
        }
        let rhs = DVector::from_iterator(res.len(), res.iter().zip(&scaled.row_scale).map(|(f, u)| -f * u.exp()));
        let z = scaled
            .matrix
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or(Error::SingularJacobian(jacobian_cond))?;
        let y: Vec<f64> = z.iter().zip(&scaled.col_scale).map(|(z, v)| z * v.exp()).collect();
        let y = to_chart(&params, tags, y);
        let x = coordinates(&params, tags);
        let current = *trace.last().unwrap();
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + alpha * b).collect();
            if let Ok(p) = from_coordinates(&params, tags, &trial) {
                if let Ok(r) = residuals(&p, nodes, &targets) {
                    if sup(&r) < current {
                        accepted = Some((p, r));
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        let (p, r) = accepted.ok_or(Error::NewtonDivergence(iterations))?;
        params = p;
        res = r;
        trace.push(sup(&res));
    }
    let converged = *trace.last().unwrap() < NEWTON_TOL;
    Ok(Recovery {
        params,
        trace,
        iterations,
        converged,
        jacobian_cond,
    })
}

/// Gauss-Newton over every sample point with `r ≤ 1/ε`; the design nodes
/// only fix the parameter set.
pub fn recover_lsq(sample: &BubblingSample, tags: &[ParamTag], init: &TodaParams) -> Result<Recovery> {
    let r_max = 1.0 / sample.epsilon;
    let nodes: Vec<Node> = sample
        .points
        .iter()
        .filter(|p| p.node.r() <= r_max * (1.0 + 1e-12))
        .map(|p| p.node)
        .collect();
    if nodes.len() < tags.len() {
        return Err(Error::MissingSample(format!(
            "{} points for {} parameters",
            nodes.len(),
            tags.len()
        )));
    }
    let targets = upper_targets(sample, &nodes)?;
    let mut params = init.clone();
    let mut res = residuals(&params, &nodes, &targets)?;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut trace = vec![sup(&res)];
    let mut jacobian_cond = f64::NAN;
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;
    while iterations < NEWTON_MAX_ITER && *trace.last().unwrap() >= NEWTON_TOL && last_step > 1e-15 {
        iterations += 1;
        let sol = TodaSolution::build_unverified(&params)?;
        let jac = reduced_jacobian(&sol, tags, &nodes)?;
        let col_scale: Vec<f64> = (0..tags.len())
            .map(|e| {
                let m = jac.log_abs.column(e).max();
                if m.is_finite() { -m } else { 0.0 }
            })
            .collect();
        let a = jac.scaled(&vec![0.0; nodes.len()], &col_scale);
        jacobian_cond = cond2(&a);
        if !(jacobian_cond <= 1e12) {
            return Err(Error::SingularJacobian(jacobian_cond));
        }
        let rhs = DVector::from_iterator(res.len(), res.iter().map(|f| -f));
        let z = a
            .svd(true, true)
            .solve(&rhs, 0.0)
            .map_err(|_| Error::SingularJacobian(jacobian_cond))?;
        let y: Vec<f64> = z.iter().zip(&col_scale).map(|(z, v)| z * v.exp()).collect();
        let delta = to_chart(&params, tags, y);
        let x = coordinates(&params, tags);
        let current = norm(&res);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + alpha * b).collect();
            if let Ok(p) = from_coordinates(&params, tags, &trial) {
                if let Ok(r) = residuals(&p, &nodes, &targets) {
                    if norm(&r) <= current {
                        accepted = Some((p, r));
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        let (p, r) = accepted.ok_or(Error::NewtonDivergence(iterations))?;
        last_step = (current - norm(&r)) / current.max(1e-300);
        params = p;
        res = r;
        trace.push(sup(&res));
    }
    let converged = *trace.last().unwrap() < NEWTON_TOL || last_step <= 1e-15;
    Ok(Recovery {
        params,
        trace,
        iterations,
        converged,
        jacobian_cond,
    })
}

/// Maps a step in reduced coordinates back to the chart:
/// `δλ_0 = y_0 − Σ_i (λ_0/λ_i) y_i`.
fn to_chart(params: &TodaParams, tags: &[ParamTag], mut y: Vec<f64>) -> Vec<f64> {
    let lam = &params.lambda;
    if let Some(z0) = tags.iter().position(|t| *t == ParamTag::Lambda(0)) {
        let shift: f64 = tags
            .iter()
            .zip(&y)
            .filter_map(|(t, yi)| match *t {
                ParamTag::Lambda(i) if i > 0 => Some(lam[0] / lam[i] * yi),
                _ => None,
            })
            .sum();
        y[z0] -= shift;
    }
    y
}

/// Starting point from the sample's asymptotes: `λ_0` from the innermost
/// radius, `λ_n` from the outermost, the middle λ's balanced by the product
/// constraint, all `c = 0`.
pub fn slope_fit_init(sample: &BubblingSample) -> Result<TodaParams> {
    let w = &sample.weights;
    let n = w.n();
    let inv = inverse_cartan(n);
    let upper = |p: &SamplePoint| -> f64 { (0..n).map(|j| ratio_to_f64(inv[0][j]) * p.values[j]).sum() };
    let mean_at = |ln_r: f64| -> f64 {
        let pts: Vec<&SamplePoint> = sample.points.iter().filter(|p| p.node.ln_r == ln_r).collect();
        pts.iter().map(|p| upper(p)).sum::<f64>() / pts.len() as f64
    };
    let ln_min = sample.points.iter().map(|p| p.node.ln_r).fold(f64::INFINITY, f64::min);
    let ln_max = sample.points.iter().map(|p| p.node.ln_r).fold(f64::NEG_INFINITY, f64::max);
    if !ln_min.is_finite() {
        return Err(Error::MissingSample("empty sample".into()));
    }
    let lambda0 = (-mean_at(ln_min)).exp();
    let a_n = ratio_to_f64(w.ladder()[n]);
    let lambda_n = (-mean_at(ln_max) - 2.0 * a_n * ln_max).exp();
    let k = w.constraint_constant();
    let c = crate::system::CoeffTable::zeros(n);
    if n == 1 {
        return TodaParams::make(w.clone(), &[k / lambda0], c);
    }
    let mid = (k / (lambda0 * lambda_n)).powf(1.0 / (n as f64 - 1.0));
    let mut head = vec![lambda0];
    head.extend(std::iter::repeat(mid).take(n - 1));
    TodaParams::make_last_dependent(w.clone(), &head, c)
}

/// Largest relative coordinate error, λ's relative and c's absolute.
pub fn parameter_error(a: &TodaParams, b: &TodaParams) -> f64 {
    let mut err: f64 = 0.0;
    for (x, y) in a.lambda.iter().zip(&b.lambda) {
        err = err.max((x - y).abs() / y.abs());
    }
    for (i, j) in crate::system::CoeffTable::slots(a.n()) {
        err = err.max((a.c.get(i, j) - b.c.get(i, j)).norm());
    }
    err
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// `min γ ≤ −3/4`: rate `ε^σ (1+|y|)^σ`.
    SmallGamma,
    /// Rate `ε (1+|y|)`.
    LargeGamma,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateSpec {
    pub sigma: f64,
    pub regime: Regime,
}

impl EstimateSpec {
    pub fn new(weights: &SingularWeights, sigma: f64) -> Result<Self> {
        let n = weights.n();
        let min_gamma = weights.min_gamma();
        let two_mu_min = (1..=n).map(|i| 2.0 * ratio_to_f64(weights.mu(i))).fold(f64::INFINITY, f64::min);
        if min_gamma <= Rational64::new(-3, 4) {
            if !(sigma > 0.0 && sigma < two_mu_min) {
                return Err(Error::InvalidEstimate(format!(
                    "sigma = {sigma} outside (0, {two_mu_min})"
                )));
            }
            return Ok(EstimateSpec {
                sigma,
                regime: Regime::SmallGamma,
            });
        }
        let upper = two_mu_min.min(1.0);
        if !(sigma > 0.0 && sigma < upper && two_mu_min + sigma > 1.0) {
            return Err(Error::InvalidEstimate(format!(
                "sigma = {sigma} must lie in (0, {upper}) with {two_mu_min} + sigma > 1"
            )));
        }
        Ok(EstimateSpec {
            sigma,
            regime: Regime::LargeGamma,
        })
    }

    pub fn rate(&self, epsilon: f64, r: f64) -> f64 {
        match self.regime {
            Regime::SmallGamma => (epsilon * (1.0 + r)).powf(self.sigma),
            Regime::LargeGamma => epsilon * (1.0 + r),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfileRow {
    pub r: f64,
    pub theta: f64,
    pub deviation: Vec<f64>,
    pub rate: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MainEstimate {
    pub spec: EstimateSpec,
    /// `max_y max_i d_i(y) / rate(y)`.
    pub constant: f64,
    pub max_deviation: f64,
    pub rows: Vec<ProfileRow>,
}

/// `d_i(y) = |ṽ_i^k(y) − ṽ_i(y, Λ̂)|` against the branch rate over `r ≤ 1/ε`.
pub fn verify_mainest(sample: &BubblingSample, recovered: &TodaParams, spec: &EstimateSpec) -> Result<MainEstimate> {
    let sol = TodaSolution::build(recovered)?;
    let n = sol.n();
    let r_max = 1.0 / sample.epsilon;
    let mut rows = Vec::new();
    let (mut constant, mut max_dev): (f64, f64) = (0.0, 0.0);
    for p in sample.points.iter().filter(|p| p.node.r() <= r_max * (1.0 + 1e-12)) {
        let r = p.node.r();
        let lp = sol.ladder_point(r, p.node.theta)?;
        let deviation: Vec<f64> = (1..=n)
            .map(|i| (p.values[i - 1] - sol.component_from(&lp, Component::LowerRegular, i)).abs())
            .collect();
        let rate = spec.rate(sample.epsilon, r);
        let worst = deviation.iter().cloned().fold(0.0, f64::max);
        constant = constant.max(worst / rate);
        max_dev = max_dev.max(worst);
        rows.push(ProfileRow {
            r,
            theta: p.node.theta,
            deviation,
            rate,
        });
    }
    Ok(MainEstimate {
        spec: spec.clone(),
        constant,
        max_deviation: max_dev,
        rows,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApcorStat {
    pub component: usize,
    /// Sup over `r ≤ R`.
    pub sup: f64,
    /// Sup over `r ≤ 2R`.
    pub sup_doubled: f64,
    /// `|m(R) − m(R/10)| / log 10` for the circle mean `m` of the corrected field.
    pub growth: f64,
    pub pass: bool,
}

/// Growth per unit `log r` above which the statistic counts as unbounded.
pub const APCOR_GROWTH_LIMIT: f64 = 0.05;

/// `sup_{r ≤ R} |ṽ_i + 2 w log(1+r)|` with `w = 2 + γ_i + γ_{n+1−i}`, or with
/// a caller-supplied slope constant.
pub fn apcor_sup(sol: &TodaSolution, i: usize, weight: f64, r_max: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for node in sample_grid(r_max, 24, 8) {
        let r = node.r();
        let v = sol.eval_component(Component::LowerRegular, i, r, node.theta)?;
        let s = (v + 2.0 * weight * (1.0 + r).ln()).abs();
        if !s.is_finite() {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(s);
    }
    Ok(worst)
}

fn ring_mean(sol: &TodaSolution, i: usize, weight: f64, r: f64) -> Result<f64> {
    let mut acc = 0.0;
    for b in 0..8 {
        let t = 2.0 * PI * b as f64 / 8.0;
        acc += sol.eval_component(Component::LowerRegular, i, r, t)? + 2.0 * weight * (1.0 + r).ln();
    }
    Ok(acc / 8.0)
}

pub fn verify_apcor_with(sol: &TodaSolution, r_max: f64, weight: impl Fn(usize) -> f64) -> Result<Vec<ApcorStat>> {
    (1..=sol.n())
        .map(|i| {
            let w = weight(i);
            let sup = apcor_sup(sol, i, w, r_max)?;
            let sup_doubled = apcor_sup(sol, i, w, 2.0 * r_max)?;
            let growth = (ring_mean(sol, i, w, r_max)? - ring_mean(sol, i, w, r_max / 10.0)?).abs()
                / std::f64::consts::LN_10;
            let pass = sup.is_finite() && sup_doubled < 2.0 * sup.max(1e-300) && growth.is_finite()
                && growth < APCOR_GROWTH_LIMIT;
            Ok(ApcorStat {
                component: i,
                sup,
                sup_doubled,
                growth,
                pass,
            })
        })
        .collect()
}

pub fn verify_apcor(sol: &TodaSolution, r_max: f64) -> Result<Vec<ApcorStat>> {
    let w = sol.weights().clone();
    verify_apcor_with(sol, r_max, |i| ratio_to_f64(w.far_field_weight(i)))
}

/// Least-squares slope of `log e^{u_i}` against `log r` on `[r_lo, r_hi]`,
/// angle averaged.
pub fn fit_decay_exponent(sol: &TodaSolution, i: usize, r_lo: f64, r_hi: f64) -> Result<f64> {
    let count = 21;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for a in 0..count {
        let ln_r = r_lo.ln() + (r_hi / r_lo).ln() * a as f64 / (count - 1) as f64;
        let mut acc = 0.0;
        for b in 0..8 {
            let t = 2.0 * PI * b as f64 / 8.0;
            acc += sol.ladder_point(ln_r.exp(), t)?.exp_lower(i);
        }
        let y = (acc / 8.0).ln();
        sx += ln_r;
        sy += y;
        sxx += ln_r * ln_r;
        sxy += ln_r * y;
    }
    let c = count as f64;
    Ok((c * sxy - sx * sy) / (c * sxx - sx * sx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{design_nodes, DesignConfig};
    use crate::system::{q, CoeffTable};

    fn bubble() -> TodaParams {
        TodaParams::make(SingularWeights::regular(1), &[0.5], CoeffTable::zeros(1)).unwrap()
    }

    #[test]
    fn noiseless_sample_is_exact() {
        let p = bubble();
        let nodes = sample_grid(10.0, 4, 4);
        let s = synthesize(&p, 0.1, 0.0, 1, &nodes).unwrap();
        let sol = TodaSolution::build(&p).unwrap();
        for pt in &s.points {
            let v = sol
                .eval_component(Component::LowerRegular, 1, pt.node.r(), pt.node.theta)
                .unwrap();
            assert_eq!(v, pt.values[0]);
        }
    }

    #[test]
    fn perturbation_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = TrigPerturbation::seeded(&mut rng);
        for node in sample_grid(1e3, 10, 16) {
            assert!(w.eval(node.r(), node.theta).abs() <= 1.0);
        }
    }

    #[test]
    fn epsilon_round_trip() {
        let w = SingularWeights::new(vec![q(1, 2), q(0, 1)]).unwrap();
        let p = TodaParams::random_admissible(&w, 0.3, &mut ChaCha8Rng::seed_from_u64(3));
        let nodes = sample_grid(1e3, 8, 8);
        let normalized = normalize_peak(&p, &nodes).unwrap();
        let eps = (-5.0f64).exp();
        let s = synthesize(&normalized, eps, 0.0, 0, &nodes).unwrap();
        assert!((recompute_epsilon(&s) / eps - 1.0).abs() < 1e-10);
    }

    #[test]
    fn estimate_branches() {
        let w = SingularWeights::new(vec![q(-4, 5), q(0, 1)]).unwrap();
        let s = EstimateSpec::new(&w, 0.3).unwrap();
        assert_eq!(s.regime, Regime::SmallGamma);
        assert!(EstimateSpec::new(&w, 0.5).is_err());
        let w = SingularWeights::new(vec![q(-3, 4)]).unwrap();
        assert_eq!(EstimateSpec::new(&w, 0.3).unwrap().regime, Regime::SmallGamma);
        let w = SingularWeights::new(vec![q(-1, 2), q(0, 1)]).unwrap();
        let s = EstimateSpec::new(&w, 0.5).unwrap();
        assert_eq!(s.regime, Regime::LargeGamma);
        // 2μ_min = 1 needs σ > 0
        assert!(EstimateSpec::new(&w, 1.0).is_err());
    }

    #[test]
    fn bubble_apcor_statistic() {
        let sol = TodaSolution::build(&bubble()).unwrap();
        let stats = verify_apcor(&sol, 1e3).unwrap();
        assert!(stats[0].pass && stats[0].sup < 5.0, "{stats:?}");
        assert!((stats[0].sup - 4f64.ln() * 2.0).abs() < 1e-2);
    }

    #[test]
    fn apcor_negative_control() {
        let w = SingularWeights::new(vec![q(1, 1), q(0, 1)]).unwrap();
        let p = TodaParams::random_admissible(&w, 0.3, &mut ChaCha8Rng::seed_from_u64(5));
        let sol = TodaSolution::build(&p).unwrap();
        assert!(verify_apcor(&sol, 1e4).unwrap().iter().all(|s| s.pass));
        let wrong = verify_apcor_with(&sol, 1e4, |i| 2.0 + w.gamma_f64(i)).unwrap();
        assert!(wrong.iter().any(|s| !s.pass));
    }

    #[test]
    fn decay_exponent_matches() {
        let w = SingularWeights::new(vec![q(1, 2), q(-1, 2)]).unwrap();
        let p = TodaParams::random_admissible(&w, 0.3, &mut ChaCha8Rng::seed_from_u64(6));
        let sol = TodaSolution::build(&p).unwrap();
        for i in 1..=2 {
            let s = fit_decay_exponent(&sol, i, 1e3, 1e4).unwrap();
            assert!((s + sol.decay_exponent(i)).abs() < 0.1, "{s}");
        }
    }

    fn recovery_setup(w: SingularWeights, seed: u64) -> (TodaParams, NodeSet) {
        let p = TodaParams::random_admissible(&w, 0.4, &mut ChaCha8Rng::seed_from_u64(seed));
        let sol = TodaSolution::build(&p).unwrap();
        let d = design_nodes(&sol, &DesignConfig::moderate()).unwrap().node_set();
        (p, d)
    }

    #[test]
    fn smallest_instance_recovers() {
        let (p, d) = recovery_setup(SingularWeights::regular(1), 1);
        assert_eq!(d.params.len(), 3);
        let s = synthesize(&p, 1e-3, 0.0, 2, &d.nodes).unwrap();
        let mut init = p.clone();
        init.lambda[0] *= 1.01;
        init.c.set(1, 0, p.c.get(1, 0) * 1.01).unwrap();
        let init = TodaParams::make(init.weights.clone(), &[init.lambda[1] * 0.99], init.c).unwrap();
        let r = recover(&s, &d, &init).unwrap();
        assert!(r.converged, "{:?}", r.trace);
        assert!(parameter_error(&r.params, &p) < 1e-9);
    }

    #[test]
    fn su3_recovers_from_perturbed_start() {
        let (p, d) = recovery_setup(SingularWeights::regular(2), 2);
        let s = synthesize(&p, 1e-3, 0.0, 2, &d.nodes).unwrap();
        let tags = d.params.clone();
        let x: Vec<f64> = coordinates(&p, &tags)
            .iter()
            .enumerate()
            .map(|(k, v)| v * if k % 2 == 0 { 1.05 } else { 0.95 })
            .collect();
        let init = from_coordinates(&p, &tags, &x).unwrap();
        let r = recover(&s, &d, &init).unwrap();
        assert!(r.converged, "{:?}", r.trace);
        assert!(parameter_error(&r.params, &p) < 1e-9, "{}", parameter_error(&r.params, &p));
    }

    #[test]
    fn least_squares_error_is_linear_in_noise() {
        let (p, d) = recovery_setup(SingularWeights::new(vec![q(1, 2), q(0, 1)]).unwrap(), 3);
        let mut nodes = d.nodes.clone();
        nodes.extend(sample_grid(1e3, 6, 8));
        let errs: Vec<f64> = [1e-4, 1e-5]
            .iter()
            .map(|&eta| {
                let s = synthesize(&p, 1e-3, eta, 9, &nodes).unwrap();
                parameter_error(&recover_lsq(&s, &d.params, &p).unwrap().params, &p)
            })
            .collect();
        let slope = (errs[0] / errs[1]).log10();
        assert!((slope - 1.0).abs() < 0.05, "{errs:?}");
    }

    #[test]
    fn slope_fit_lands_near_truth_at_zero_c() {
        let w = SingularWeights::new(vec![q(0, 1)]).unwrap();
        let p = TodaParams::make(w, &[0.7], CoeffTable::zeros(1)).unwrap();
        let nodes = sample_grid(1e4, 4, 4);
        let s = synthesize(&p, 1e-4, 0.0, 0, &nodes).unwrap();
        let init = slope_fit_init(&s).unwrap();
        assert!(parameter_error(&init, &p) < 1e-5);
    }
}
