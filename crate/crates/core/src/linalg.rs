//! Dense helpers for badly scaled square matrices stored as log-magnitudes.

use nalgebra::DMatrix;

/// Entries `sign · exp(log_abs)`; zeros carry `log_abs = −∞`.
#[derive(Clone, Debug)]
pub struct LogMatrix {
    pub log_abs: DMatrix<f64>,
    pub sign: DMatrix<f64>,
}

impl LogMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        LogMatrix {
            log_abs: DMatrix::from_element(rows, cols, f64::NEG_INFINITY),
            sign: DMatrix::zeros(rows, cols),
        }
    }

    pub fn set(&mut self, i: usize, j: usize, (log_abs, sign): (f64, f64)) {
        if sign == 0.0 || log_abs == f64::NEG_INFINITY {
            self.log_abs[(i, j)] = f64::NEG_INFINITY;
            self.sign[(i, j)] = 0.0;
        } else {
            self.log_abs[(i, j)] = log_abs;
            self.sign[(i, j)] = sign;
        }
    }

    pub fn nrows(&self) -> usize {
        self.log_abs.nrows()
    }

    /// Plain values; overflows to infinity for extreme designs.
    pub fn dense(&self) -> DMatrix<f64> {
        self.log_abs.zip_map(&self.sign, |l, s| s * l.exp())
    }

    /// `diag(e^{u}) A diag(e^{v})`.
    pub fn scaled(&self, u: &[f64], v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.nrows(), self.log_abs.ncols(), |i, j| {
            self.sign[(i, j)] * (self.log_abs[(i, j)] + u[i] + v[j]).exp()
        })
    }

    /// Each row divided by its largest magnitude.
    pub fn row_equilibrated(&self) -> DMatrix<f64> {
        let u: Vec<f64> = (0..self.nrows())
            .map(|i| {
                let m = self.log_abs.row(i).max();
                if m.is_finite() {
                    -m
                } else {
                    0.0
                }
            })
            .collect();
        self.scaled(&u, &vec![0.0; self.log_abs.ncols()])
    }

    /// Two-sided scaling from a maximum-product matching: the matched entries
    /// become ±1 and every other entry has magnitude at most 1.
    pub fn matching_scaling(&self) -> MatchingScaling {
        let n = self.nrows();
        let cost = DMatrix::from_fn(n, n, |i, j| {
            let l = self.log_abs[(i, j)];
            if l.is_finite() {
                -l
            } else {
                ZERO_COST
            }
        });
        let (assignment, u, v) = hungarian(&cost);
        // cost_ij − u_i − v_j ≥ 0, so |a_ij| e^{u_i + v_j} ≤ 1
        let (row_scale, col_scale) = (u, v);
        let matrix = self.scaled(&row_scale, &col_scale);
        let structurally_singular = (0..n).any(|i| !self.log_abs[(i, assignment[i])].is_finite());
        MatchingScaling {
            assignment,
            row_scale,
            col_scale,
            matrix,
            structurally_singular,
        }
    }
}

/// Stand-in cost for exact zeros; large but far from overflow.
const ZERO_COST: f64 = 1e12;

#[derive(Clone, Debug)]
pub struct MatchingScaling {
    /// `assignment[row] = column`.
    pub assignment: Vec<usize>,
    pub row_scale: Vec<f64>,
    pub col_scale: Vec<f64>,
    pub matrix: DMatrix<f64>,
    pub structurally_singular: bool,
}

impl MatchingScaling {
    /// `log |det A|` of the unscaled matrix.
    pub fn log_abs_det(&self) -> f64 {
        let det = self.matrix.clone().lu().determinant();
        det.abs().ln() - self.row_scale.iter().sum::<f64>() - self.col_scale.iter().sum::<f64>()
    }
}

/// 2-norm condition number; infinite for singular input.
pub fn cond2(m: &DMatrix<f64>) -> f64 {
    if m.iter().any(|x| !x.is_finite()) {
        return f64::INFINITY;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || max == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.iter().any(|x| !x.is_finite()) {
        return f64::NAN;
    }
    m.clone().svd(false, false).singular_values.min()
}

/// Minimum-cost perfect assignment with dual potentials `u_i + v_j ≤ c_ij`,
/// equality on the returned assignment.
pub fn hungarian(cost: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.nrows();
    // 1-based potentials and matching, column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    (assignment, u[1..].to_vec(), v[1..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_min(cost: &DMatrix<f64>) -> f64 {
        fn rec(cost: &DMatrix<f64>, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.nrows() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..cost.ncols() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[(row, j)] + rec(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost.ncols()])
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=6 {
            for _ in 0..20 {
                let cost = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-5.0..5.0));
                let (a, u, v) = hungarian(&cost);
                let total: f64 = (0..n).map(|i| cost[(i, a[i])]).sum();
                assert!((total - brute_min(&cost)).abs() < 1e-9);
                for i in 0..n {
                    for j in 0..n {
                        assert!(u[i] + v[j] <= cost[(i, j)] + 1e-9);
                    }
                    assert!((u[i] + v[a[i]] - cost[(i, a[i])]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn matching_scaling_bounds_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = LogMatrix::new(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                m.set(i, j, (rng.gen_range(-300.0..300.0), if rng.gen_bool(0.5) { 1.0 } else { -1.0 }));
            }
        }
        let s = m.matching_scaling();
        for i in 0..5 {
            assert!((s.matrix[(i, s.assignment[i])].abs() - 1.0).abs() < 1e-9);
            for j in 0..5 {
                assert!(s.matrix[(i, j)].abs() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn graded_vandermonde_is_well_conditioned_after_matching() {
        // entries r_j^{p_i} with widely separated radii
        let powers = [4.0, 3.0, 2.0, 1.0];
        let ln_r = [500.0, 520.0, 540.0, 560.0];
        let mut m = LogMatrix::new(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                m.set(i, j, (powers[i] * ln_r[j], 1.0));
            }
        }
        assert!(cond2(&m.row_equilibrated()) > 1e10);
        let s = m.matching_scaling();
        assert!(cond2(&s.matrix) < 10.0);
        let exact: f64 = 4.0 * 560.0 + 3.0 * 540.0 + 2.0 * 520.0 + 500.0;
        assert!((s.log_abs_det() / exact - 1.0).abs() < 1e-10);
    }
}
