//! Evaluation nodes that make the parameter Jacobian and the kernel basis
//! matrix invertible.
//!
//! Nodes sit at `|p_l| = N s^{1+εl}` with `l = 1..d`. Radii are kept as
//! logarithms so that `s` can be pushed far beyond the floating point range;
//! matrix entries are stored as log-magnitudes and conditioned after a
//! two-sided diagonal scaling.

use std::f64::consts::LN_10;

use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_rational::{BigRational, Rational64};
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fracpoly::{ratio_to_f64, rational_to_string, CompiledPoly, GenPoly, MonomialKey};
use crate::linalg::{cond2, smallest_singular_value, LogMatrix};
use crate::linearization::{dparam_numerator, Chart, ParamTag};
use crate::system::{SingularWeights, TodaParams, TodaSolution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryKind {
    Radial,
    Cos,
    Sin,
}

/// One basis exponent: `2a_k` for radial entries (`k == l`), `a_k + a_l`
/// with frequency `a_l − a_k` for trigonometric ones (`k < l`, slot `c_lk`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LadderEntry {
    pub power: Rational64,
    pub kind: EntryKind,
    pub frequency: Rational64,
    pub k: usize,
    pub l: usize,
    pub resonant: bool,
}

impl LadderEntry {
    /// Row parameter of the design matrix in the λ_n-dependent chart.
    pub fn param(&self, n: usize) -> ParamTag {
        match self.kind {
            EntryKind::Radial if self.k == n => ParamTag::Lambda(0),
            EntryKind::Radial => ParamTag::Lambda(self.k),
            EntryKind::Cos => ParamTag::CRe(self.l, self.k),
            EntryKind::Sin => ParamTag::CIm(self.l, self.k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExponentLadder {
    pub entries: Vec<LadderEntry>,
}

pub fn exponent_ladder(weights: &SingularWeights) -> ExponentLadder {
    let n = weights.n();
    let a = weights.ladder();
    let mut entries = Vec::with_capacity(n * n + 2 * n);
    for k in 1..=n {
        entries.push(LadderEntry {
            power: a[k] * Rational64::from_integer(2),
            kind: EntryKind::Radial,
            frequency: Rational64::zero(),
            k,
            l: k,
            resonant: true,
        });
    }
    for l in 1..=n {
        for k in 0..l {
            for kind in [EntryKind::Cos, EntryKind::Sin] {
                entries.push(LadderEntry {
                    power: a[k] + a[l],
                    kind,
                    frequency: a[l] - a[k],
                    k,
                    l,
                    resonant: weights.resonant(k, l),
                });
            }
        }
    }
    let rank = |e: &LadderEntry| match e.kind {
        EntryKind::Radial => 0,
        EntryKind::Cos => 1,
        EntryKind::Sin => 2,
    };
    entries.sort_by(|x, y| {
        y.power
            .cmp(&x.power)
            .then(x.frequency.cmp(&y.frequency))
            .then(rank(x).cmp(&rank(y)))
    });
    ExponentLadder { entries }
}

impl ExponentLadder {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries of resonant slots only; the dimension of the parameter space.
    pub fn active(&self) -> ExponentLadder {
        ExponentLadder {
            entries: self.entries.iter().filter(|e| e.resonant).cloned().collect(),
        }
    }

    /// Index ranges of equal powers, in ladder order.
    pub fn groups(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.entries.len() {
            if i == self.entries.len() || self.entries[i].power != self.entries[start].power {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    /// Distinct powers in descending order.
    pub fn distinct_powers(&self) -> Vec<Rational64> {
        self.groups().into_iter().map(|g| self.entries[g.start].power).collect()
    }
}

/// Columns `1, sin(N_i θ), cos(N_i θ)` for the odd variant, without the
/// constant row for the even one; one column per angle.
fn sincos_matrix(freqs: &[f64], angles: &[f64], with_constant: bool) -> Result<DMatrix<f64>> {
    if freqs.iter().any(|f| !(*f > 0.0)) || freqs.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::NonincreasingFrequencies);
    }
    let size = 2 * freqs.len() + usize::from(with_constant);
    if angles.len() != size {
        return Err(Error::AngleCount {
            expected: size,
            got: angles.len(),
        });
    }
    let mut m = DMatrix::zeros(size, size);
    for (c, &t) in angles.iter().enumerate() {
        let mut row = 0;
        if with_constant {
            m[(0, c)] = 1.0;
            row = 1;
        }
        for (i, &f) in freqs.iter().enumerate() {
            m[(row + 2 * i, c)] = (f * t).sin();
            m[(row + 2 * i + 1, c)] = (f * t).cos();
        }
    }
    Ok(m)
}

pub fn sincos_matrix_odd(freqs: &[f64], angles: &[f64]) -> Result<DMatrix<f64>> {
    sincos_matrix(freqs, angles, true)
}

pub fn sincos_matrix_even(freqs: &[f64], angles: &[f64]) -> Result<DMatrix<f64>> {
    sincos_matrix(freqs, angles, false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignConfig {
    /// `log N`.
    pub ln_n: f64,
    /// `log s`.
    pub ln_s: f64,
    /// Radius exponent step; `None` picks `min(1e−2, ε₀/2)` from the ordering bound.
    pub eps: Option<f64>,
    pub delta_angle: f64,
    pub cond_ceiling: f64,
    pub max_escalations: usize,
    /// Reject ε violating the strict ordering of node magnitudes.
    pub check_ordering: bool,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            ln_n: 1e4f64.ln(),
            ln_s: 10f64.ln(),
            eps: None,
            delta_angle: 1e-2,
            cond_ceiling: 1e8,
            max_escalations: 8,
            check_ordering: true,
        }
    }
}

impl DesignConfig {
    /// Nodes at radii of order one, where every parameter is visible in
    /// double precision; the ordering rule is waived and invertibility rests
    /// on the conditioning certificate alone.
    pub fn moderate() -> Self {
        DesignConfig {
            ln_n: 0.5f64.ln(),
            ln_s: 2f64.ln(),
            eps: Some(0.3),
            delta_angle: 0.5,
            cond_ceiling: 1e8,
            max_escalations: 0,
            check_ordering: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let eps_ok = self.eps.map_or(true, |e| e > 0.0 && e.is_finite());
        let strict = !self.check_ordering || (self.ln_n > self.ln_s && self.eps.map_or(true, |e| e < 1.0));
        if !(self.ln_s >= 0.0 && self.ln_n.is_finite() && self.delta_angle > 0.0 && eps_ok && strict) {
            return Err(Error::InvalidDesignConfig);
        }
        Ok(())
    }

    /// `N ↦ 10N`, `s ↦ s²`, keeping `N > s`.
    fn escalate(&self) -> Self {
        let ln_s = (2.0 * self.ln_s).max(LN_10);
        DesignConfig {
            ln_s,
            ln_n: (self.ln_n + LN_10).max(ln_s + LN_10),
            ..self.clone()
        }
    }
}

fn big(q: Rational64) -> BigRational {
    BigRational::new(BigInt::from(*q.numer()), BigInt::from(*q.denom()))
}

/// Largest ε (exclusive) for which `(1+εa) l₁ > (1+εb) l₂` holds for all
/// `a, b ∈ 1..=d` and adjacent powers `l₁ > l₂`; `None` if unbounded.
pub fn ordering_bound(ladder: &ExponentLadder) -> Option<BigRational> {
    let d = BigRational::from_integer(BigInt::from(ladder.len()));
    let powers = ladder.distinct_powers();
    let mut bound: Option<BigRational> = None;
    for w in powers.windows(2) {
        let (l1, l2) = (big(w[0]), big(w[1]));
        // worst case a = 1, b = d: ε (d l₂ − l₁) < l₁ − l₂
        let denom = &d * &l2 - &l1;
        if denom > BigRational::zero() {
            let e = (&l1 - &l2) / denom;
            bound = Some(match bound {
                Some(b) if b < e => b,
                _ => e,
            });
        }
    }
    bound
}

/// Exact check of the node ordering for a given ε.
pub fn check_ordering(ladder: &ExponentLadder, eps: f64) -> Result<()> {
    let e = BigRational::from_float(eps).ok_or(Error::InvalidDesignConfig)?;
    let d = ladder.len() as i64;
    let one = BigRational::one();
    let powers = ladder.distinct_powers();
    for w in powers.windows(2) {
        let (l1, l2) = (big(w[0]), big(w[1]));
        let lhs = (&one + &e) * &l1;
        let rhs = (&one + &e * BigRational::from_integer(BigInt::from(d))) * &l2;
        if lhs <= rhs {
            return Err(Error::OrderingViolation {
                high: rational_to_string(w[0]),
                low: rational_to_string(w[1]),
                detail: format!("(1+eps)*{} <= (1+{d}*eps)*{} at eps = {eps}", w[0], w[1]),
            });
        }
    }
    Ok(())
}

fn resolve_eps(ladder: &ExponentLadder, config: &DesignConfig) -> Result<f64> {
    match config.eps {
        Some(e) => {
            if config.check_ordering {
                check_ordering(ladder, e)?;
            }
            Ok(e)
        }
        None => {
            let cap = 1e-2;
            let e = match ordering_bound(ladder) {
                Some(b) => {
                    let half: f64 = num_traits::ToPrimitive::to_f64(&b).unwrap_or(cap) / 2.0;
                    half.min(cap)
                }
                None => cap,
            };
            check_ordering(ladder, e)?;
            Ok(e)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub ln_r: f64,
    pub theta: f64,
}

impl Node {
    pub fn r(&self) -> f64 {
        self.ln_r.exp()
    }
}

/// Assigns `|p_l| = N s^{1+εl}`; ladder entry `e` (0-based) gets `l = d − e`.
/// Within a group of equal powers the `m`-th entry gets angle `m δ`.
pub fn place_nodes(ladder: &ExponentLadder, ln_n: f64, ln_s: f64, eps: f64, delta: f64) -> Vec<Node> {
    let d = ladder.len();
    let mut nodes = vec![Node { ln_r: 0.0, theta: 0.0 }; d];
    for group in ladder.groups() {
        for (m, e) in group.enumerate() {
            let l = (d - e) as f64;
            nodes[e] = Node {
                ln_r: ln_n + (1.0 + eps * l) * ln_s,
                theta: m as f64 * delta,
            };
        }
    }
    nodes
}

/// Numerators of the rows of `M` after the unimodular reduction
/// `row_{λ_i} ← row_{λ_i} − (λ_0/λ_i) row_{λ_0}`.
fn reduced_numerator(sol: &TodaSolution, entry: &LadderEntry) -> Result<GenPoly> {
    let n = sol.n();
    match entry.param(n) {
        ParamTag::Lambda(i) if i > 0 => {
            let lam = &sol.params.lambda;
            Ok(GenPoly::real(lam[0] / lam[i]).sub(&sol.curve[i - 1].norm_sqr()))
        }
        tag => dparam_numerator(sol, tag, Chart::LastDependent),
    }
}

/// Kernel basis function of an entry in the coefficient form of `Φ_1`.
fn basis_numerator(params: &TodaParams, entry: &LadderEntry) -> GenPoly {
    let a = params.weights.ladder();
    let x = GenPoly::from_terms(vec![(
        MonomialKey::from_exponents(a[entry.l], a[entry.k]),
        num_complex::Complex64::new(1.0, 0.0),
    )]);
    match entry.kind {
        EntryKind::Radial => GenPoly::abs_pow(entry.power)
            .sub(&GenPoly::real(params.lambda[0] / params.lambda[entry.k])),
        EntryKind::Cos => x.add(&x.conj()),
        EntryKind::Sin => x.sub(&x.conj()).scale(num_complex::Complex64::new(0.0, -1.0)),
    }
}

fn log_ratio(num: (f64, f64), den: (f64, f64)) -> (f64, f64) {
    (num.0 - den.0, num.1 * den.1)
}

#[derive(Clone, Debug)]
pub struct NodeDesign {
    pub ladder: ExponentLadder,
    pub params: Vec<ParamTag>,
    pub nodes: Vec<Node>,
    pub config: DesignConfig,
    pub eps: f64,
    pub escalations: usize,
    /// Jacobian rows `∂ũ¹/∂param` at the nodes.
    pub m: LogMatrix,
    /// `M` after the unimodular λ-row reduction.
    pub m_reduced: LogMatrix,
    pub m1: LogMatrix,
    /// Numerators of `m_reduced`, i.e. with the column factor `D(p_l)` removed.
    pub m2: LogMatrix,
    pub cond_m: f64,
    pub cond_m1: f64,
    /// Numerators of the rows of `m_reduced`, kept for diagnostics.
    reduced_rows: Vec<GenPoly>,
}

impl NodeDesign {
    /// Places nodes and assembles all matrices for one fixed configuration.
    pub fn assemble(sol: &TodaSolution, config: &DesignConfig) -> Result<Self> {
        config.validate()?;
        let n = sol.n();
        let ladder = exponent_ladder(sol.weights()).active();
        let eps = resolve_eps(&ladder, config)?;
        let nodes = place_nodes(&ladder, config.ln_n, config.ln_s, eps, config.delta_angle);
        let d = ladder.len();
        let params: Vec<ParamTag> = ladder.entries.iter().map(|e| e.param(n)).collect();

        let den = sol.denominator.compile();
        let den_vals: Vec<(f64, f64)> = nodes.iter().map(|p| den.eval_ln_log(p.ln_r, p.theta)).collect();
        let mut m = LogMatrix::new(d, d);
        let mut m_reduced = LogMatrix::new(d, d);
        let mut m1 = LogMatrix::new(d, d);
        let mut m2 = LogMatrix::new(d, d);
        let mut reduced_rows = Vec::with_capacity(d);
        for (e, entry) in ladder.entries.iter().enumerate() {
            let raw = dparam_numerator(sol, params[e], Chart::LastDependent)?.compile();
            let red_poly = reduced_numerator(sol, entry)?;
            let red = red_poly.compile();
            let basis = basis_numerator(&sol.params, entry).compile();
            for (l, p) in nodes.iter().enumerate() {
                m.set(e, l, log_ratio(raw.eval_ln_log(p.ln_r, p.theta), den_vals[l]));
                let num = red.eval_ln_log(p.ln_r, p.theta);
                m2.set(e, l, num);
                m_reduced.set(e, l, log_ratio(num, den_vals[l]));
                m1.set(e, l, basis.eval_ln_log(p.ln_r, p.theta));
            }
            reduced_rows.push(red_poly);
        }
        let cond_m = cond2(&m_reduced.matching_scaling().matrix);
        let cond_m1 = cond2(&m1.matching_scaling().matrix);
        Ok(NodeDesign {
            ladder,
            params,
            nodes,
            config: config.clone(),
            eps,
            escalations: 0,
            m,
            m_reduced,
            m1,
            m2,
            cond_m,
            cond_m1,
            reduced_rows,
        })
    }

    pub fn dimension(&self) -> usize {
        self.nodes.len()
    }

    pub fn within_ceiling(&self) -> bool {
        self.cond_m <= self.config.cond_ceiling && self.cond_m1 <= self.config.cond_ceiling
    }

    pub fn node_set(&self) -> NodeSet {
        NodeSet {
            params: self.params.clone(),
            nodes: self.nodes.clone(),
            cond_ceiling: self.config.cond_ceiling,
            eps: self.eps,
            escalations: self.escalations,
            cond_m: self.cond_m,
            cond_m1: self.cond_m1,
        }
    }
}

/// The serializable part of a design: what recovery needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSet {
    pub params: Vec<ParamTag>,
    pub nodes: Vec<Node>,
    pub cond_ceiling: f64,
    pub eps: f64,
    pub escalations: usize,
    pub cond_m: f64,
    pub cond_m1: f64,
}

/// Places nodes, escalating `(N, s)` until both matrices are certified.
pub fn design_nodes(sol: &TodaSolution, config: &DesignConfig) -> Result<NodeDesign> {
    let mut cfg = config.clone();
    let mut last = None;
    for step in 0..=config.max_escalations {
        let mut design = NodeDesign::assemble(sol, &cfg)?;
        design.escalations = step;
        if design.within_ceiling() {
            return Ok(design);
        }
        last = Some((design.cond_m, design.cond_m1));
        cfg = cfg.escalate();
    }
    let (cond_m, cond_m1) = last.expect("at least one attempt");
    Err(Error::ConditioningFailure {
        cond_m,
        cond_m1,
        ceiling: config.cond_ceiling,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupDominance {
    pub power: String,
    pub size: usize,
    /// Over the group's rows, the largest numerator magnitude at nodes of
    /// lower groups relative to the largest at the group's own nodes.
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Certificate {
    pub dimension: usize,
    pub cond_m: f64,
    pub cond_m1: f64,
    /// Condition number of `M` under row scaling only.
    pub cond_m_rows_only: f64,
    pub smallest_singular_value_m: f64,
    pub smallest_singular_value_m1: f64,
    pub log_abs_det_m: f64,
    pub log_abs_det_m1: f64,
    /// Relative size of the sub-leading part of each reduced row at its node.
    pub leading_defect: Vec<f64>,
    pub dominance: Vec<GroupDominance>,
    pub pass: bool,
}

pub fn certify(design: &NodeDesign) -> Certificate {
    let sm = design.m_reduced.matching_scaling();
    let sm1 = design.m1.matching_scaling();
    let leading_defect = design
        .reduced_rows
        .iter()
        .enumerate()
        .map(|(e, row)| {
            let lead = row.leading_part();
            let rest = row.sub(&lead);
            let p = design.nodes[e];
            let (ll, _) = lead.compile().eval_ln_log(p.ln_r, p.theta);
            let (lr, _) = CompiledPoly::new(&rest).eval_ln_log(p.ln_r, p.theta);
            (lr - ll).exp()
        })
        .collect();
    let dominance: Vec<GroupDominance> = design
        .ladder
        .groups()
        .iter()
        .map(|g| {
            let mut ratio: f64 = 0.0;
            for e in g.clone() {
                let row = design.m2.log_abs.row(e);
                let own = g.clone().map(|l| row[l]).fold(f64::NEG_INFINITY, f64::max);
                let lower = (g.end..design.dimension())
                    .map(|l| row[l])
                    .fold(f64::NEG_INFINITY, f64::max);
                ratio = ratio.max((lower - own).exp());
            }
            GroupDominance {
                power: rational_to_string(design.ladder.entries[g.start].power),
                size: g.len(),
                ratio,
            }
        })
        .collect();
    let cond_m = cond2(&sm.matrix);
    let cond_m1 = cond2(&sm1.matrix);
    let pass = cond_m <= design.config.cond_ceiling
        && cond_m1 <= design.config.cond_ceiling
        && dominance.iter().all(|g| g.ratio < DOMINANCE_LIMIT);
    Certificate {
        dimension: design.dimension(),
        cond_m,
        cond_m1,
        cond_m_rows_only: cond2(&design.m.row_equilibrated()),
        smallest_singular_value_m: smallest_singular_value(&sm.matrix),
        smallest_singular_value_m1: smallest_singular_value(&sm1.matrix),
        log_abs_det_m: sm.log_abs_det(),
        log_abs_det_m1: sm1.log_abs_det(),
        leading_defect,
        dominance,
        pass,
    }
}

/// Cross-group entries must stay strictly below the matched ones.
pub const DOMINANCE_LIMIT: f64 = 1.0 - 1e-6;

/// Frequencies as floats; convenience for reporting.
pub fn frequencies(ladder: &ExponentLadder) -> Vec<f64> {
    ladder.entries.iter().map(|e| ratio_to_f64(e.frequency)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{q, CoeffTable};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn powers(w: &SingularWeights) -> Vec<Rational64> {
        exponent_ladder(w).entries.iter().map(|e| e.power).collect()
    }

    #[test]
    fn ladder_examples() {
        let p = powers(&SingularWeights::regular(1));
        assert_eq!(p, vec![q(2, 1), q(1, 1), q(1, 1)]);
        let l = exponent_ladder(&SingularWeights::regular(2));
        let sizes: Vec<(Rational64, usize)> =
            l.groups().into_iter().map(|g| (l.entries[g.start].power, g.len())).collect();
        assert_eq!(
            sizes,
            vec![(q(4, 1), 1), (q(3, 1), 2), (q(2, 1), 3), (q(1, 1), 2)]
        );
        let g2 = &l.entries[3..6];
        assert_eq!(g2[0].kind, EntryKind::Radial);
        assert_eq!((g2[1].kind, g2[2].kind), (EntryKind::Cos, EntryKind::Sin));
        let w = SingularWeights::new(vec![q(0, 1), q(1, 2)]).unwrap();
        let l = exponent_ladder(&w);
        assert_eq!(l.len(), 8);
        assert!(l.groups().iter().all(|g| g.len() == 1 || g.len() == 2));
    }

    #[test]
    fn ladder_counts_and_pairs() {
        for n in 1..=4 {
            let l = exponent_ladder(&SingularWeights::regular(n));
            assert_eq!(l.len(), n * n + 2 * n);
            assert_eq!(l.active().len(), n * n + 2 * n);
        }
        let w = SingularWeights::new(vec![q(1, 2)]).unwrap();
        assert_eq!(exponent_ladder(&w).active().len(), 1);
    }

    #[test]
    fn sincos_examples() {
        let d = 0.1;
        let m = sincos_matrix_odd(&[1.0], &[d, 2.0 * d, 3.0 * d]).unwrap();
        assert!(m.determinant().abs() > 1e-4);
        let m = sincos_matrix_even(&[1.0], &[d, 2.0 * d]).unwrap();
        assert!((m.determinant().abs() - d.sin().abs()).abs() < 1e-15);
        assert_eq!(
            sincos_matrix_even(&[2.0, 1.0], &[0.0; 4]),
            Err(Error::NonincreasingFrequencies)
        );
        assert!(matches!(
            sincos_matrix_odd(&[1.0], &[0.0; 2]),
            Err(Error::AngleCount { .. })
        ));
    }

    #[test]
    fn ordering_bound_is_sharp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let gam: Vec<Rational64> = (0..3).map(|_| q(rng.gen_range(-1..=2), 2)).collect();
            let l = exponent_ladder(&SingularWeights::new(gam).unwrap()).active();
            if let Some(b) = ordering_bound(&l) {
                let b: f64 = num_traits::ToPrimitive::to_f64(&b).unwrap();
                assert!(check_ordering(&l, b * 0.999).is_ok());
                assert!(check_ordering(&l, b * 1.001).is_err());
            }
        }
    }

    #[test]
    fn ordering_agrees_with_direct_magnitudes() {
        // the log of |p_a|^{l1}/|p_b|^{l2} grows with log s iff the rational check passes
        let l = exponent_ladder(&SingularWeights::regular(2));
        let d = l.len();
        for eps in [0.01, 0.04, 0.2] {
            let ok = check_ordering(&l, eps).is_ok();
            let pw = l.distinct_powers();
            let mut direct = true;
            for w in pw.windows(2) {
                let (l1, l2) = (ratio_to_f64(w[0]), ratio_to_f64(w[1]));
                for a in 1..=d {
                    for b in 1..=d {
                        let at = |ln_s: f64| {
                            l1 * (1.0 + eps * a as f64) * ln_s - l2 * (1.0 + eps * b as f64) * ln_s
                        };
                        if at(20.0) - at(10.0) <= 0.0 {
                            direct = false;
                        }
                    }
                }
            }
            assert_eq!(ok, direct, "eps = {eps}");
        }
    }

    fn bubble() -> TodaSolution {
        let p = TodaParams::make(SingularWeights::regular(1), &[0.5], CoeffTable::zeros(1)).unwrap();
        TodaSolution::build(&p).unwrap()
    }

    #[test]
    fn bubble_design_passes() {
        let cfg = DesignConfig {
            eps: Some(0.01),
            ..DesignConfig::default()
        };
        let d = design_nodes(&bubble(), &cfg).unwrap();
        assert_eq!(d.dimension(), 3);
        let c = certify(&d);
        assert!(c.pass, "{c:?}");
        assert!(c.smallest_singular_value_m > 0.0);
    }

    #[test]
    fn unit_s_fails_certification() {
        let cfg = DesignConfig {
            ln_s: 0.0,
            eps: Some(0.01),
            max_escalations: 0,
            ..DesignConfig::default()
        };
        let d = NodeDesign::assemble(&bubble(), &cfg).unwrap();
        let c = certify(&d);
        assert!(!c.pass);
        assert!(c.dominance.iter().any(|g| g.ratio > 0.9), "{c:?}");
    }

    #[test]
    fn large_eps_is_rejected() {
        let cfg = DesignConfig {
            eps: Some(0.3),
            ..DesignConfig::default()
        };
        let p = TodaParams::make(SingularWeights::regular(2), &[1.0, 1.0], CoeffTable::zeros(2))
            .unwrap();
        let sol = TodaSolution::build(&p).unwrap();
        assert!(matches!(
            design_nodes(&sol, &cfg),
            Err(Error::OrderingViolation { .. })
        ));
    }

    #[test]
    fn leading_defect_decreases_with_n() {
        let p = TodaParams::make(SingularWeights::regular(2), &[1.0, 1.0], CoeffTable::zeros(2))
            .unwrap();
        let sol = TodaSolution::build(&p).unwrap();
        let mut prev: Option<Vec<f64>> = None;
        for big_n in [10.0f64, 20.0, 40.0] {
            let cfg = DesignConfig {
                ln_n: big_n.ln(),
                ln_s: 2f64.ln(),
                eps: Some(0.01),
                ..DesignConfig::default()
            };
            let c = certify(&NodeDesign::assemble(&sol, &cfg).unwrap());
            if let Some(p) = prev {
                for (a, b) in c.leading_defect.iter().zip(p.iter()) {
                    assert!(*b == 0.0 && *a == 0.0 || a < b, "{a} {b}");
                }
            }
            prev = Some(c.leading_defect);
        }
    }
}
