//! Elastic-net logistic regression by accelerated proximal gradient (FISTA
//! with backtracking and adaptive restart), plus the cross-validated
//! hyperparameter grid.
//!
//! Objective over weights `w` and unpenalized intercept `b`:
//! `mean_i logloss(yᵢ, xᵢ·w + b) + (1/(C·n))·[α‖w‖₁ + ½(1−α)‖w‖²]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::auroc;
use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_rows * n_cols {
            return Err(Error::Invalid(format!("matrix data has {} values, expected {n_rows}×{n_cols}", data.len())));
        }
        Ok(Matrix { n_rows, n_cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.n_cols);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        Matrix { n_rows: rows.len(), n_cols: self.n_cols, data }
    }

    /// First non-finite entry as `(row, column)`.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.data.iter().position(|v| !v.is_finite()).map(|k| (k / self.n_cols, k % self.n_cols))
    }

    fn mul_vec(&self, w: &[f64], b: f64, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = b + dot(self.row(i), w);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softplus(m: f64) -> f64 {
    m.max(0.0) + (-m.abs()).exp().ln_1p()
}

fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_iter: usize,
    /// Stop when the gradient-mapping sup-norm falls below this.
    pub tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { max_iter: 5000, tol: 1e-7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Penalty {
    l1: f64,
    l2: f64,
}

impl Penalty {
    fn new(n: usize, c: f64, l1_ratio: f64) -> Self {
        let scale = 1.0 / (c * n as f64);
        Penalty { l1: scale * l1_ratio, l2: scale * (1.0 - l1_ratio) }
    }
}

fn mean_loss(margins: &[f64], y: &[bool]) -> f64 {
    margins.iter().zip(y).map(|(&m, &t)| softplus(m) - if t { m } else { 0.0 }).sum::<f64>() / margins.len() as f64
}

/// Full objective at `(w, b)`.
pub fn objective(x: &Matrix, y: &[bool], w: &[f64], b: f64, c: f64, l1_ratio: f64) -> f64 {
    let p = Penalty::new(x.n_rows, c, l1_ratio);
    let mut m = vec![0.0; x.n_rows];
    x.mul_vec(w, b, &mut m);
    mean_loss(&m, y) + p.l1 * w.iter().map(|v| v.abs()).sum::<f64>() + 0.5 * p.l2 * dot(w, w)
}

/// Smooth part (mean loss + L2 term) and its gradient.
pub fn smooth_value_and_gradient(x: &Matrix, y: &[bool], w: &[f64], b: f64, c: f64, l1_ratio: f64) -> (f64, Vec<f64>, f64) {
    let p = Penalty::new(x.n_rows, c, l1_ratio);
    let mut m = vec![0.0; x.n_rows];
    x.mul_vec(w, b, &mut m);
    let (gw, gb) = gradient_from_margins(x, y, &m, w, p);
    (mean_loss(&m, y) + 0.5 * p.l2 * dot(w, w), gw, gb)
}

fn gradient_from_margins(x: &Matrix, y: &[bool], m: &[f64], w: &[f64], p: Penalty) -> (Vec<f64>, f64) {
    let n = x.n_rows as f64;
    let mut gw: Vec<f64> = w.iter().map(|v| p.l2 * v).collect();
    let mut gb = 0.0;
    for i in 0..x.n_rows {
        let r = (sigmoid(m[i]) - f64::from(u8::from(y[i]))) / n;
        if r != 0.0 {
            for (g, v) in gw.iter_mut().zip(x.row(i)) {
                *g += r * v;
            }
        }
        gb += r;
    }
    (gw, gb)
}

/// Largest eigenvalue of `X̃ᵀX̃ / n` (X̃ with an intercept column), by power
/// iteration from the all-ones vector.
fn curvature_estimate(x: &Matrix) -> f64 {
    let (n, p) = (x.n_rows, x.n_cols);
    let mut v = vec![1.0 / ((p + 1) as f64).sqrt(); p + 1];
    let mut xv = vec![0.0; n];
    let mut lambda = 0.0;
    for _ in 0..30 {
        x.mul_vec(&v[..p], v[p], &mut xv);
        let mut u = vec![0.0; p + 1];
        for i in 0..n {
            for (a, b) in u[..p].iter_mut().zip(x.row(i)) {
                *a += xv[i] * b;
            }
            u[p] += xv[i];
        }
        let norm = dot(&u, &u).sqrt();
        if norm == 0.0 {
            break;
        }
        lambda = norm / n as f64;
        v = u.into_iter().map(|a| a / norm).collect();
    }
    lambda
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn validate(x: &Matrix, y: &[bool], c: f64, l1_ratio: f64) -> Result<()> {
    if y.len() != x.n_rows {
        return Err(Error::Invalid("label count differs from row count".into()));
    }
    if !y.iter().any(|&v| v) || y.iter().all(|&v| v) {
        return Err(Error::SingleClass);
    }
    if !(c > 0.0 && c.is_finite()) || !(0.0..=1.0).contains(&l1_ratio) {
        return Err(Error::Invalid(format!("bad hyperparameters C={c}, l1_ratio={l1_ratio}")));
    }
    if let Some((r, col)) = x.first_non_finite() {
        return Err(Error::NonFinite(format!("row {r}, feature column {col}")));
    }
    Ok(())
}

/// Fit one model. `warm` seeds the solver with an earlier solution.
pub fn train_logreg(
    x: &Matrix,
    y: &[bool],
    c: f64,
    l1_ratio: f64,
    settings: &SolverSettings,
    warm: Option<(&[f64], f64)>,
) -> Result<Fit> {
    validate(x, y, c, l1_ratio)?;
    let (n, p) = (x.n_rows, x.n_cols);
    let pen = Penalty::new(n, c, l1_ratio);
    let prior = y.iter().filter(|&&v| v).count() as f64 / n as f64;
    let (mut w, mut b) = match warm {
        Some((w0, b0)) if w0.len() == p => (w0.to_vec(), b0),
        _ => (vec![0.0; p], (prior / (1.0 - prior)).ln()),
    };
    let mut lip = (0.25 * curvature_estimate(x) + pen.l2).max(1e-12);

    let mut m = vec![0.0; n];
    x.mul_vec(&w, b, &mut m);
    let composite = |m: &[f64], w: &[f64]| mean_loss(m, y) + pen.l1 * w.iter().map(|v| v.abs()).sum::<f64>() + 0.5 * pen.l2 * dot(w, w);
    let mut f_cur = composite(&m, &w);

    let (mut zw, mut zb, mut zm) = (w.clone(), b, m.clone());
    let mut t = 1.0f64;
    let mut nw = vec![0.0; p];
    let mut nm = vec![0.0; n];
    for it in 1..=settings.max_iter {
        let fz = mean_loss(&zm, y) + 0.5 * pen.l2 * dot(&zw, &zw);
        let (gw, gb) = gradient_from_margins(x, y, &zm, &zw, pen);
        let nb;
        loop {
            let step = 1.0 / lip;
            for j in 0..p {
                let v = zw[j] - step * gw[j];
                let thr = step * pen.l1;
                nw[j] = if v > thr { v - thr } else if v < -thr { v + thr } else { 0.0 };
            }
            let cand_b = zb - step * gb;
            x.mul_vec(&nw, cand_b, &mut nm);
            let f_new = mean_loss(&nm, y) + 0.5 * pen.l2 * dot(&nw, &nw);
            let mut lin = (cand_b - zb) * gb;
            let mut sq = (cand_b - zb).powi(2);
            for j in 0..p {
                let d = nw[j] - zw[j];
                lin += d * gw[j];
                sq += d * d;
            }
            if f_new <= fz + lin + 0.5 * lip * sq + 1e-12 * fz.abs() {
                nb = cand_b;
                break;
            }
            lip *= 2.0;
        }
        let mut gmap = (lip * (nb - zb)).abs();
        for j in 0..p {
            gmap = gmap.max((lip * (nw[j] - zw[j])).abs());
        }
        let f_new = composite(&nm, &nw);
        if gmap <= settings.tol {
            return Ok(Fit { weights: nw, intercept: nb, iterations: it, converged: true });
        }
        if f_new > f_cur {
            // restart momentum from the last accepted iterate
            t = 1.0;
            zw.copy_from_slice(&w);
            zb = b;
            zm.copy_from_slice(&m);
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        for j in 0..p {
            zw[j] = nw[j] + beta * (nw[j] - w[j]);
        }
        zb = nb + beta * (nb - b);
        for i in 0..n {
            zm[i] = nm[i] + beta * (nm[i] - m[i]);
        }
        w.copy_from_slice(&nw);
        b = nb;
        m.copy_from_slice(&nm);
        f_cur = f_new;
        t = t_next;
    }
    log::debug!("solver stopped at {} iterations (C={c}, l1_ratio={l1_ratio})", settings.max_iter);
    Ok(Fit { weights: w, intercept: b, iterations: settings.max_iter, converged: false })
}

pub fn decision_function(x: &Matrix, w: &[f64], b: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.n_rows];
    x.mul_vec(w, b, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperGrid {
    pub cs: Vec<f64>,
    pub l1_ratios: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            cs: vec![1e-3, 1e-2, 1e-1, 1.0, 1e1],
            l1_ratios: vec![0.0, 0.5, 1.0],
        }
    }
}

impl HyperGrid {
    /// Sorted, deduplicated copy; search results depend only on this form.
    pub fn canonical(&self) -> HyperGrid {
        let norm = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        HyperGrid { cs: norm(&self.cs), l1_ratios: norm(&self.l1_ratios) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub c: f64,
    pub l1_ratio: f64,
    pub mean_auroc: f64,
    pub folds_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best_c: f64,
    pub best_l1_ratio: f64,
    pub best_mean_auroc: f64,
    pub cells: Vec<GridCell>,
}

/// Cross-validated grid search maximizing mean per-fold validation AUROC.
/// Folds whose training or validation part holds a single class are skipped.
/// Ties go to the smallest C, then the smallest l1_ratio.
pub fn grid_search(x: &Matrix, y: &[bool], folds: &[Vec<usize>], grid: &HyperGrid, settings: &SolverSettings) -> Result<GridResult> {
    let grid = grid.canonical();
    if grid.cs.is_empty() || grid.l1_ratios.is_empty() {
        return Err(Error::Invalid("empty hyperparameter grid".into()));
    }
    let usable: Vec<(Matrix, Vec<bool>, Matrix, Vec<bool>)> = folds
        .iter()
        .filter_map(|val| {
            let in_val: std::collections::HashSet<usize> = val.iter().copied().collect();
            let train: Vec<usize> = folds.iter().flatten().copied().filter(|i| !in_val.contains(i)).collect();
            let yt: Vec<bool> = train.iter().map(|&i| y[i]).collect();
            let yv: Vec<bool> = val.iter().map(|&i| y[i]).collect();
            let two = |v: &[bool]| v.iter().any(|&a| a) && v.iter().any(|&a| !a);
            (two(&yt) && two(&yv)).then(|| (x.select_rows(&train), yt, x.select_rows(val), yv))
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Invalid("no cross-validation fold has both classes".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..usable.len()).flat_map(|f| (0..grid.l1_ratios.len()).map(move |a| (f, a))).collect();
    // each job walks the C path in ascending order with warm starts
    let results: Vec<Result<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(f, a)| {
            let (xt, yt, xv, yv) = &usable[f];
            let mut warm: Option<Fit> = None;
            let mut aucs = Vec::with_capacity(grid.cs.len());
            for &c in &grid.cs {
                let fit = train_logreg(xt, yt, c, grid.l1_ratios[a], settings, warm.as_ref().map(|w| (w.weights.as_slice(), w.intercept)))?;
                aucs.push(auroc(&decision_function(xv, &fit.weights, fit.intercept), yv)?);
                warm = Some(fit);
            }
            Ok(aucs)
        })
        .collect();
    let mut sums = vec![vec![0.0; grid.l1_ratios.len()]; grid.cs.len()];
    for (&(_, a), r) in jobs.iter().zip(results) {
        for (ci, auc) in r?.into_iter().enumerate() {
            sums[ci][a] += auc;
        }
    }
    let mut cells = Vec::new();
    let mut best: Option<usize> = None;
    for (ci, &c) in grid.cs.iter().enumerate() {
        for (a, &l1) in grid.l1_ratios.iter().enumerate() {
            let mean = sums[ci][a] / usable.len() as f64;
            if best.is_none_or(|k: usize| mean > cells.get(k).map_or(f64::NEG_INFINITY, |c: &GridCell| c.mean_auroc)) {
                best = Some(cells.len());
            }
            cells.push(GridCell { c, l1_ratio: l1, mean_auroc: mean, folds_used: usable.len() });
        }
    }
    let b = &cells[best.expect("grid is non-empty")];
    Ok(GridResult { best_c: b.c, best_l1_ratio: b.l1_ratio, best_mean_auroc: b.mean_auroc, cells: cells.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;

    fn random_problem(seed_: u64, n: usize, p: usize) -> (Matrix, Vec<bool>) {
        let mut r = seed::substream(seed_, "lr");
        let data: Vec<f64> = (0..n * p).map(|_| seed::unit_f64(&mut r) * 2.0 - 1.0).collect();
        let x = Matrix::new(n, p, data).unwrap();
        let mut y: Vec<bool> = (0..n).map(|i| x.row(i)[0] + 0.5 * seed::unit_f64(&mut r) > 0.2).collect();
        y[0] = true;
        y[1] = false;
        (x, y)
    }

    #[test]
    fn separable_and_dominated_cases() {
        let x = Matrix::new(2, 1, vec![-1.0, 1.0]).unwrap();
        let y = [false, true];
        let fit = train_logreg(&x, &y, 1e12, 0.5, &SolverSettings::default(), None).unwrap();
        assert_eq!(auroc(&decision_function(&x, &fit.weights, fit.intercept), &y).unwrap(), 1.0);

        let (x, y) = random_problem(2, 60, 8);
        for l1 in [0.0, 0.5, 1.0] {
            let fit = train_logreg(&x, &y, 1e-12, l1, &SolverSettings::default(), None).unwrap();
            assert!(fit.weights.iter().all(|w| w.abs() <= 1e-6));
            let prior = y.iter().filter(|&&v| v).count() as f64 / 60.0;
            assert!((fit.intercept - (prior / (1.0 - prior)).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn converges_to_a_stationary_point() {
        let (x, y) = random_problem(5, 80, 6);
        let s = SolverSettings { max_iter: 20000, tol: 1e-9 };
        let fit = train_logreg(&x, &y, 1.0, 0.0, &s, None).unwrap();
        let (_, gw, gb) = smooth_value_and_gradient(&x, &y, &fit.weights, fit.intercept, 1.0, 0.0);
        assert!(fit.converged);
        assert!(gb.abs() < 1e-8 && gw.iter().all(|g| g.abs() < 1e-8));
        let loose = train_logreg(&x, &y, 1.0, 0.0, &SolverSettings::default(), None).unwrap();
        let tight = objective(&x, &y, &fit.weights, fit.intercept, 1.0, 0.0);
        assert!(objective(&x, &y, &loose.weights, loose.intercept, 1.0, 0.0) - tight <= 1e-6);
    }

    #[test]
    fn lasso_optimality() {
        let (x, y) = random_problem(6, 80, 10);
        let (c, a) = (0.05, 1.0);
        let fit = train_logreg(&x, &y, c, a, &SolverSettings { max_iter: 50000, tol: 1e-10 }, None).unwrap();
        let (_, gw, _) = smooth_value_and_gradient(&x, &y, &fit.weights, fit.intercept, c, a);
        let l1 = a / (c * 80.0);
        for (w, g) in fit.weights.iter().zip(&gw) {
            if *w == 0.0 {
                assert!(g.abs() <= l1 + 1e-8);
            } else {
                assert!((g + l1 * w.signum()).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn errors() {
        let x = Matrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(matches!(train_logreg(&x, &[true, true], 1.0, 0.0, &SolverSettings::default(), None), Err(Error::SingleClass)));
        let bad = Matrix::new(2, 1, vec![f64::NAN, 1.0]).unwrap();
        assert!(matches!(train_logreg(&bad, &[true, false], 1.0, 0.0, &SolverSettings::default(), None), Err(Error::NonFinite(_))));
    }

    #[test]
    fn grid_order_does_not_matter() {
        let (x, y) = random_problem(9, 60, 5);
        let folds: Vec<Vec<usize>> = (0..10).map(|k| (0..60).filter(|i| i % 10 == k).collect()).collect();
        let grid = HyperGrid { cs: vec![1e-2, 1.0, 1e2], l1_ratios: vec![0.0, 1.0] };
        let rev = HyperGrid { cs: vec![1e2, 1.0, 1e-2, 1.0], l1_ratios: vec![1.0, 0.0] };
        let s = SolverSettings::default();
        let a = grid_search(&x, &y, &folds, &grid, &s).unwrap();
        let b = grid_search(&x, &y, &folds, &rev, &s).unwrap();
        assert_eq!(a, b);
        let best = a.cells.iter().map(|c| c.mean_auroc).fold(f64::NEG_INFINITY, f64::max);
        let first = a.cells.iter().find(|c| c.mean_auroc == best).unwrap();
        assert_eq!((a.best_c, a.best_l1_ratio), (first.c, first.l1_ratio));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn gradient_matches_finite_differences(s in any::<u64>(), n in 3usize..20, p in 1usize..6, c in 0.01f64..10.0, l1 in 0.0f64..1.0) {
            let (x, y) = random_problem(s, n, p);
            let mut r = seed::substream(s, "point");
            let w: Vec<f64> = (0..p).map(|_| seed::unit_f64(&mut r) * 2.0 - 1.0).collect();
            let b = seed::unit_f64(&mut r) - 0.5;
            let (_, gw, gb) = smooth_value_and_gradient(&x, &y, &w, b, c, l1);
            let h = 1e-6;
            let f = |w: &[f64], b: f64| smooth_value_and_gradient(&x, &y, w, b, c, l1).0;
            for j in 0..=p {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                let (mut bp, mut bm) = (b, b);
                if j < p { wp[j] += h; wm[j] -= h; } else { bp += h; bm -= h; }
                let fd = (f(&wp, bp) - f(&wm, bm)) / (2.0 * h);
                let g = if j < p { gw[j] } else { gb };
                prop_assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-3));
            }
        }
    }
}
