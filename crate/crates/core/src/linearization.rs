//! Parameter derivatives of the first component and the kernel of the
//! linearized system.
//!
//! Derivative fields of `ũ¹ = −log D` are represented as `num / D` with a
//! polynomial numerator, so the kernel coefficients `m_kl` can be read off
//! monomial by monomial.

use std::collections::BTreeMap;
use std::fmt;

use num_complex::Complex64;
use num_rational::Rational64;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fracpoly::{GenPoly, MonomialKey};
use crate::system::{cartan, CoeffTable, TodaParams, TodaSolution};

/// Step of central differences in parameter space.
pub const PARAM_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BetaLadder {
    pub beta: Vec<Rational64>,
}

pub fn beta_ladder(weights: &crate::system::SingularWeights) -> BetaLadder {
    let n = weights.n();
    let mut beta = Vec::with_capacity(n + 1);
    beta.push(-weights.gamma_upper(1));
    for i in 1..n {
        beta.push(weights.gamma_upper(i) - weights.gamma_upper(i + 1) + Rational64::from_integer(i as i64));
    }
    beta.push(weights.gamma_upper(n) + Rational64::from_integer(n as i64));
    BetaLadder { beta }
}

/// Which of `λ_0` or `λ_n` is eliminated through the product constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Chart {
    /// Free `λ_0..λ_{n−1}`; the convention of the design matrix.
    LastDependent,
    /// Free `λ_1..λ_n`.
    ZeroDependent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamTag {
    Lambda(usize),
    CRe(usize, usize),
    CIm(usize, usize),
}

impl fmt::Display for ParamTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamTag::Lambda(i) => write!(f, "lambda{i}"),
            ParamTag::CRe(i, j) => write!(f, "re_c{i}{j}"),
            ParamTag::CIm(i, j) => write!(f, "im_c{i}{j}"),
        }
    }
}

impl std::str::FromStr for ParamTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameterTag(s.to_string());
        let digits = |t: &str| -> Result<Vec<usize>> {
            t.chars()
                .map(|c| c.to_digit(10).map(|d| d as usize).ok_or_else(bad))
                .collect()
        };
        if let Some(rest) = s.strip_prefix("lambda") {
            return rest.parse().map(ParamTag::Lambda).map_err(|_| bad());
        }
        for (prefix, im) in [("re_c", false), ("im_c", true)] {
            if let Some(rest) = s.strip_prefix(prefix) {
                let d = digits(rest)?;
                if d.len() != 2 {
                    return Err(bad());
                }
                return Ok(if im {
                    ParamTag::CIm(d[0], d[1])
                } else {
                    ParamTag::CRe(d[0], d[1])
                });
            }
        }
        Err(bad())
    }
}

/// Free parameters of `chart`: the free λ's, then real and imaginary parts
/// of every resonant slot in row order.
pub fn active_params(weights: &crate::system::SingularWeights, chart: Chart) -> Vec<ParamTag> {
    let n = weights.n();
    let mut tags: Vec<ParamTag> = match chart {
        Chart::LastDependent => (0..n).map(ParamTag::Lambda).collect(),
        Chart::ZeroDependent => (1..=n).map(ParamTag::Lambda).collect(),
    };
    for (i, j) in CoeffTable::slots(n) {
        if weights.resonant(j, i) {
            tags.push(ParamTag::CRe(i, j));
            tags.push(ParamTag::CIm(i, j));
        }
    }
    tags
}

fn check_tag(params: &TodaParams, tag: ParamTag, chart: Chart) -> Result<()> {
    let n = params.n();
    let ok = match tag {
        ParamTag::Lambda(i) => match chart {
            Chart::LastDependent => i < n,
            Chart::ZeroDependent => (1..=n).contains(&i),
        },
        ParamTag::CRe(i, j) | ParamTag::CIm(i, j) => {
            i >= 1 && i <= n && j < i && params.weights.resonant(j, i)
        }
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameterTag(tag.to_string()))
    }
}

/// Moves one free coordinate by `delta`, re-solving the dependent λ.
pub fn perturb(params: &TodaParams, tag: ParamTag, chart: Chart, delta: f64) -> Result<TodaParams> {
    check_tag(params, tag, chart)?;
    let n = params.n();
    let mut c = params.c.clone();
    let mut lambda = params.lambda.clone();
    match tag {
        ParamTag::Lambda(i) => lambda[i] += delta,
        ParamTag::CRe(i, j) => c.set(i, j, c.get(i, j) + Complex64::new(delta, 0.0))?,
        ParamTag::CIm(i, j) => c.set(i, j, c.get(i, j) + Complex64::new(0.0, delta))?,
    }
    let w = params.weights.clone();
    match chart {
        Chart::LastDependent => TodaParams::make_last_dependent(w, &lambda[..n], c),
        Chart::ZeroDependent => TodaParams::make(w, &lambda[1..], c),
    }
}

/// Numerator of `∂ũ¹/∂tag`; the field is this polynomial divided by `D`.
pub fn dparam_numerator(sol: &TodaSolution, tag: ParamTag, chart: Chart) -> Result<GenPoly> {
    let params = &sol.params;
    check_tag(params, tag, chart)?;
    let n = params.n();
    let lam = &params.lambda;
    let a = params.weights.ladder();
    let p_sq = |i: usize| sol.curve[i - 1].norm_sqr();
    Ok(match (tag, chart) {
        (ParamTag::Lambda(0), Chart::LastDependent) => {
            p_sq(n).scale_real(lam[n] / lam[0]).sub(&GenPoly::one())
        }
        (ParamTag::Lambda(i), Chart::LastDependent) => {
            p_sq(n).scale_real(lam[n] / lam[i]).sub(&p_sq(i))
        }
        (ParamTag::Lambda(k), Chart::ZeroDependent) => {
            GenPoly::real(lam[0] / lam[k]).sub(&p_sq(k))
        }
        (ParamTag::CRe(i, j), _) => {
            let x = GenPoly::z_pow(a[j]).mul(&sol.curve[i - 1].conj());
            x.add(&x.conj()).scale_real(-lam[i])
        }
        (ParamTag::CIm(i, j), _) => {
            // 2 Im(x) = −i (x − x̄)
            let x = GenPoly::z_pow(a[j]).mul(&sol.curve[i - 1].conj());
            x.sub(&x.conj()).scale(Complex64::new(0.0, -lam[i]))
        }
    })
}

/// A real field `num / den` with symbolic derivatives.
#[derive(Clone, Debug)]
pub struct RatioField {
    pub num: GenPoly,
    pub den: GenPoly,
    parts: [GenPoly; 8],
}

impl RatioField {
    pub fn new(num: GenPoly, den: GenPoly) -> Self {
        let (nz, nzb) = (num.d_z(), num.d_zbar());
        let nzzb = nz.d_zbar();
        let (dz, dzb) = (den.d_z(), den.d_zbar());
        let dzzb = dz.d_zbar();
        let parts = [num.clone(), nz, nzb, nzzb, den.clone(), dz, dzb, dzzb];
        RatioField { num, den, parts }
    }

    pub fn eval(&self, r: f64, theta: f64) -> Result<f64> {
        Ok((self.num.eval(r, theta)? / self.den.eval(r, theta)?).re)
    }

    /// `Δ(N/D)` by the quotient rule.
    pub fn laplacian(&self, r: f64, theta: f64) -> Result<f64> {
        let mut v = [Complex64::zero(); 8];
        for (slot, p) in v.iter_mut().zip(self.parts.iter()) {
            *slot = p.eval(r, theta)?;
        }
        let [nv, nz, nzb, nzzb, d, dz, dzb, dzzb] = v;
        let lap = nzzb / d - (nz * dzb + nzb * dz) / (d * d) - nv * dzzb / (d * d)
            + 2.0 * nv * dz * dzb / (d * d * d);
        Ok(4.0 * lap.re)
    }
}

/// Closed-form `∂ũ¹/∂tag`.
pub fn dparam_field(sol: &TodaSolution, tag: ParamTag, chart: Chart) -> Result<RatioField> {
    Ok(RatioField::new(
        dparam_numerator(sol, tag, chart)?,
        sol.denominator.clone(),
    ))
}

/// Step `h` for a coordinate, scaled by `λ_i` for the λ directions.
pub fn fd_step(params: &TodaParams, tag: ParamTag, h: f64) -> f64 {
    match tag {
        ParamTag::Lambda(i) => h * params.lambda[i].min(1.0),
        _ => h,
    }
}

/// Fourth-order central difference of `ũ¹` in parameter space at each point.
pub fn dparam_fd(
    params: &TodaParams,
    tag: ParamTag,
    chart: Chart,
    points: &[(f64, f64)],
    h: f64,
) -> Result<Vec<f64>> {
    let h = fd_step(params, tag, h);
    let at = |k: f64| TodaSolution::build_unverified(&perturb(params, tag, chart, k * h)?);
    let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
    points
        .iter()
        .map(|&(r, t)| {
            let d1 = p1.first_regular(r, t)? - m1.first_regular(r, t)?;
            let d2 = p2.first_regular(r, t)? - m2.first_regular(r, t)?;
            Ok((8.0 * d1 - d2) / (12.0 * h))
        })
        .collect()
}

/// `Φ^i = ∂u^i/∂tag` for `i = 1..n`, the first in closed form and the rest as
/// fourth-order central differences of the tau polynomials.
pub fn companion_fields(sol: &TodaSolution, tag: ParamTag, chart: Chart) -> Result<Vec<RatioField>> {
    let mut fields = vec![dparam_field(sol, tag, chart)?];
    let n = sol.n();
    if n > 1 {
        let h = fd_step(&sol.params, tag, PARAM_STEP);
        let at = |k: f64| TodaSolution::build_unverified(&perturb(&sol.params, tag, chart, k * h)?);
        let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
        for i in 2..=n {
            let d1 = p1.tau[i - 1].f.sub(&m1.tau[i - 1].f);
            let d2 = p2.tau[i - 1].f.sub(&m2.tau[i - 1].f);
            let num = d1.scale_real(8.0).sub(&d2).scale_real(-1.0 / (12.0 * h));
            fields.push(RatioField::new(num, sol.tau[i - 1].f.clone()));
        }
    }
    Ok(fields)
}

/// `ΔΦ_i + e^{u_i} Σ_j a_ij Φ_j` with symbolic Laplacians.
pub fn linearized_residual(
    sol: &TodaSolution,
    fields: &[RatioField],
    r: f64,
    theta: f64,
) -> Result<Vec<f64>> {
    let vals: Vec<f64> = fields.iter().map(|f| f.eval(r, theta)).collect::<Result<_>>()?;
    let laps: Vec<f64> = fields.iter().map(|f| f.laplacian(r, theta)).collect::<Result<_>>()?;
    combine(sol, &vals, &laps, r, theta)
}

/// The same residual for arbitrary closures, Laplacian by a 5-point stencil
/// at scale `min(1e−3, 1e−3 r)`.
pub fn linearized_residual_fd<F>(sol: &TodaSolution, fields: &[F], r: f64, theta: f64) -> Result<Vec<f64>>
where
    F: Fn(f64, f64) -> Result<f64>,
{
    let h = 1e-3f64.min(1e-3 * r);
    let (x, y) = (r * theta.cos(), r * theta.sin());
    let at = |f: &F, x: f64, y: f64| f(x.hypot(y), y.atan2(x));
    let mut vals = Vec::with_capacity(fields.len());
    let mut laps = Vec::with_capacity(fields.len());
    for f in fields {
        let c = at(f, x, y)?;
        let s = at(f, x + h, y)? + at(f, x - h, y)? + at(f, x, y + h)? + at(f, x, y - h)?;
        vals.push(c);
        laps.push((s - 4.0 * c) / (h * h));
    }
    combine(sol, &vals, &laps, r, theta)
}

fn combine(sol: &TodaSolution, vals: &[f64], laps: &[f64], r: f64, theta: f64) -> Result<Vec<f64>> {
    let n = sol.n();
    if vals.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: vals.len(),
        });
    }
    let lp = sol.ladder_point(r, theta)?;
    let a = cartan(n);
    Ok((0..n)
        .map(|i| {
            let coupled: f64 = (0..n).map(|j| a[i][j] as f64 * vals[j]).sum();
            laps[i] + lp.exp_lower(i + 1) * coupled
        })
        .collect())
}

/// Kernel element in the basis `m_kk |z|^{2a_k}`, `2|z|^{2a_k} Re(m̄_kl z^{a_l − a_k})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMode {
    /// `m_00..m_nn`.
    pub mkk: Vec<f64>,
    /// `m_kl` for `k < l`, keyed `(k, l)`.
    pub mkl: BTreeMap<(usize, usize), Complex64>,
}

impl LinearMode {
    pub fn zero(n: usize) -> Self {
        LinearMode {
            mkk: vec![0.0; n + 1],
            mkl: BTreeMap::new(),
        }
    }

    /// Builds a mode from `m_11..m_nn` and off-diagonal entries, fixing `m_00`
    /// by the trace identity.
    pub fn from_free(
        params: &TodaParams,
        free_diag: &[f64],
        off: BTreeMap<(usize, usize), Complex64>,
    ) -> Result<Self> {
        let n = params.n();
        if free_diag.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: free_diag.len(),
            });
        }
        let lam = &params.lambda;
        let m00 = -lam[0] * (1..=n).map(|k| free_diag[k - 1] / lam[k]).sum::<f64>();
        let mut mkk = vec![m00];
        mkk.extend_from_slice(free_diag);
        let mode = LinearMode { mkk, mkl: off };
        mode.check_resonance(params)?;
        Ok(mode)
    }

    /// The mode `Σ_k coeff_k ∂u¹/∂λ_k` in the zero-dependent chart, via
    /// `m_kk = −coeff_k` and `m_00 = λ_0 Σ coeff_k / λ_k`.
    pub fn from_lambda_combination(params: &TodaParams, coeff: &[f64]) -> Result<Self> {
        let diag: Vec<f64> = coeff.iter().map(|c| -c).collect();
        LinearMode::from_free(params, &diag, BTreeMap::new())
    }

    fn check_resonance(&self, params: &TodaParams) -> Result<()> {
        for (&(k, l), v) in &self.mkl {
            if *v != Complex64::zero() && !params.weights.resonant(k, l) {
                return Err(Error::NonResonantCoefficient { i: l, j: k });
            }
        }
        Ok(())
    }

    /// Reads the coefficients of a numerator polynomial in the kernel basis.
    pub fn from_numerator(params: &TodaParams, num: &GenPoly) -> Result<Self> {
        let n = params.n();
        let a = params.weights.ladder();
        let mut mode = LinearMode::zero(n);
        let scale = num.terms().map(|(_, c)| c.norm()).fold(0.0, f64::max);
        for (key, c) in num.terms() {
            let (p, q) = (key.p(), key.q());
            let l = a.iter().position(|x| *x == p);
            let k = a.iter().position(|x| *x == q);
            match (k, l) {
                (Some(k), Some(l)) if k == l => mode.mkk[k] = c.re,
                (Some(k), Some(l)) if k < l => {
                    mode.mkl.insert((k, l), c.conj());
                }
                (Some(_), Some(_)) => {}
                _ => {
                    if c.norm() > 1e-12 * scale {
                        return Err(Error::InvalidParameterTag(format!(
                            "monomial {key:?} outside the kernel basis"
                        )));
                    }
                }
            }
        }
        mode.check_resonance(params)?;
        Ok(mode)
    }

    /// `Σ_k m_kk / λ_k`, zero for genuine kernel elements.
    pub fn trace_defect(&self, params: &TodaParams) -> f64 {
        self.mkk
            .iter()
            .zip(params.lambda.iter())
            .map(|(m, l)| m / l)
            .sum()
    }

    /// The numerator polynomial of `Φ_1`.
    pub fn numerator(&self, params: &TodaParams) -> GenPoly {
        let a = params.weights.ladder();
        let mut terms = Vec::new();
        for (k, m) in self.mkk.iter().enumerate() {
            terms.push((MonomialKey::from_exponents(a[k], a[k]), Complex64::new(*m, 0.0)));
        }
        for (&(k, l), m) in &self.mkl {
            terms.push((MonomialKey::from_exponents(a[l], a[k]), m.conj()));
            terms.push((MonomialKey::from_exponents(a[k], a[l]), *m));
        }
        GenPoly::from_terms(terms)
    }
}

/// `Φ_1(r, θ)` of a kernel mode.
pub fn kernel_eval(sol: &TodaSolution, mode: &LinearMode, r: f64, theta: f64) -> Result<f64> {
    let a = sol.params.weights.ladder();
    let ln_r = r.ln();
    if r.is_nan() || r <= 0.0 {
        return Err(Error::NonpositiveRadius(r));
    }
    let mut acc = 0.0;
    for (k, m) in mode.mkk.iter().enumerate() {
        acc += m * (2.0 * crate::fracpoly::ratio_to_f64(a[k]) * ln_r).exp();
    }
    for (&(k, l), m) in &mode.mkl {
        let ak = crate::fracpoly::ratio_to_f64(a[k]);
        let al = crate::fracpoly::ratio_to_f64(a[l]);
        let phase = Complex64::from_polar(((al + ak) * ln_r).exp(), (al - ak) * theta);
        acc += 2.0 * (m.conj() * phase).re;
    }
    Ok(acc / sol.denominator_at(r, theta)?)
}

/// Result of checking the printed sign of the `Im c` derivative field.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SignCheck {
    /// `+1` when the closed form agrees with finite differences, `−1` when
    /// its negation does, `0` when no resonant slot exists.
    pub imag_sign: i32,
    pub max_relative_error: f64,
}

/// Compares each closed-form field with finite differences at `points`.
pub fn fd_agreement(sol: &TodaSolution, chart: Chart, points: &[(f64, f64)]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for tag in active_params(sol.weights(), chart) {
        let field = dparam_field(sol, tag, chart)?;
        let mut scale: f64 = 0.0;
        let mut err: f64 = 0.0;
        let fds = dparam_fd(&sol.params, tag, chart, points, PARAM_STEP)?;
        for (&(r, t), fd) in points.iter().zip(fds) {
            let exact = field.eval(r, t)?;
            scale = scale.max(exact.abs());
            err = err.max((exact - fd).abs());
        }
        worst = worst.max(err / scale.max(1e-300));
    }
    Ok(worst)
}

pub fn imag_sign_check(sol: &TodaSolution, points: &[(f64, f64)]) -> Result<SignCheck> {
    let tags: Vec<ParamTag> = active_params(sol.weights(), Chart::LastDependent)
        .into_iter()
        .filter(|t| matches!(t, ParamTag::CIm(..)))
        .collect();
    if tags.is_empty() {
        return Ok(SignCheck {
            imag_sign: 0,
            max_relative_error: 0.0,
        });
    }
    let (mut plus, mut minus, mut scale) = (0.0f64, 0.0f64, 0.0f64);
    for tag in tags {
        let field = dparam_field(sol, tag, Chart::LastDependent)?;
        let fds = dparam_fd(&sol.params, tag, Chart::LastDependent, points, PARAM_STEP)?;
        for (&(r, t), fd) in points.iter().zip(fds) {
            let exact = field.eval(r, t)?;
            plus = plus.max((exact - fd).abs());
            minus = minus.max((exact + fd).abs());
            scale = scale.max(fd.abs());
        }
    }
    let (imag_sign, err) = if plus <= minus { (1, plus) } else { (-1, minus) };
    Ok(SignCheck {
        imag_sign,
        max_relative_error: err / scale.max(1e-300),
    })
}
