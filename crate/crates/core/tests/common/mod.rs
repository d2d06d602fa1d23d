//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_rows(n: usize, h: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| (0..h).map(|_| StandardNormal.sample(&mut r)).collect()).collect()
}

pub fn to_ndarray(rows: &[Vec<f64>]) -> ndarray::Array2<f64> {
    let h = rows[0].len();
    ndarray::Array2::from_shape_fn((rows.len(), h), |(i, j)| rows[i][j])
}

fn to_dmatrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

/// Ranks by counting: rank_i = #{v_j < v_i} + (#{v_j == v_i} + 1) / 2.
pub fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va.sqrt() * vb.sqrt())
}

pub fn brute_spearman(a: &[f64], b: &[f64]) -> f64 {
    brute_pearson(&brute_ranks(a), &brute_ranks(b))
}

/// Partial correlation via residuals of rank-on-rank regressions.
pub fn brute_partial_spearman(a: &[f64], b: &[f64], z: &[f64]) -> f64 {
    let (ra, rb, rz) = (brute_ranks(a), brute_ranks(b), brute_ranks(z));
    let resid = |v: &[f64]| -> Vec<f64> {
        let n = v.len() as f64;
        let mv = v.iter().sum::<f64>() / n;
        let mz = rz.iter().sum::<f64>() / n;
        let beta = v.iter().zip(&rz).map(|(x, y)| (x - mv) * (y - mz)).sum::<f64>()
            / rz.iter().map(|y| (y - mz).powi(2)).sum::<f64>();
        v.iter().zip(&rz).map(|(x, y)| (x - mv) - beta * (y - mz)).collect()
    };
    brute_pearson(&resid(&ra), &resid(&rb))
}

fn standardize(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mut means = vec![0.0; x.ncols()];
    let mut sds = vec![1.0; x.ncols()];
    let mut out = x.clone();
    for j in 0..x.ncols() {
        let m = x.column(j).sum() / n;
        let sd = (x.column(j).iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        means[j] = m;
        sds[j] = sd;
        for i in 0..x.nrows() {
            out[(i, j)] = (x[(i, j)] - m) / sd;
        }
    }
    (out, means, sds)
}

/// Textbook NIPALS for one target, predictions through `R = W (PᵀW)⁻¹`.
pub fn reference_nipals_predict(x: &[Vec<f64>], y: &[f64], k: usize, x_new: &[Vec<f64>]) -> Vec<f64> {
    let xm = to_dmatrix(x);
    let (mut xa, means, sds) = standardize(&xm);
    let n = y.len() as f64;
    let ym = y.iter().sum::<f64>() / n;
    let ysd = (y.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut ya = DVector::from_iterator(y.len(), y.iter().map(|v| (v - ym) / ysd));
    let h = xm.ncols();
    let mut w_mat = DMatrix::zeros(h, k);
    let mut p_mat = DMatrix::zeros(h, k);
    let mut c = DVector::zeros(k);
    for a in 0..k {
        let w = xa.transpose() * &ya;
        let w = &w / w.norm();
        let t = &xa * &w;
        let tt = t.dot(&t);
        let p = xa.transpose() * &t / tt;
        c[a] = ya.dot(&t) / tt;
        xa -= &t * p.transpose();
        ya -= &t * c[a];
        w_mat.set_column(a, &w);
        p_mat.set_column(a, &p);
    }
    let rot = &w_mat * (p_mat.transpose() * &w_mat).try_inverse().expect("invertible");
    let beta = rot * c;
    x_new
        .iter()
        .map(|row| {
            let s: f64 = row.iter().enumerate().map(|(j, v)| (v - means[j]) / sds[j] * beta[j]).sum();
            s * ysd + ym
        })
        .collect()
}

/// Krylov characterization: rank-k PLS regresses y on span{s, Ss, ..., S^{k-1}s}
/// with S = XᵀX and s = Xᵀy in the standardized coordinates.
pub fn krylov_pls_predict(x: &[Vec<f64>], y: &[f64], k: usize, x_new: &[Vec<f64>]) -> Vec<f64> {
    let xm = to_dmatrix(x);
    let (xs, means, sds) = standardize(&xm);
    let n = y.len() as f64;
    let ym = y.iter().sum::<f64>() / n;
    let ysd = (y.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - ym) / ysd));
    let s_mat = xs.transpose() * &xs;
    let h = xs.ncols();
    let mut basis = DMatrix::zeros(h, k);
    let mut v = xs.transpose() * &ys;
    for a in 0..k {
        v /= v.norm();
        basis.set_column(a, &v);
        v = &s_mat * &v;
    }
    let q = basis.qr().q();
    let xq = &xs * &q;
    let coef = (xq.transpose() * &xq).cholesky().expect("spd").solve(&(xq.transpose() * &ys));
    let beta = q * coef;
    x_new
        .iter()
        .map(|row| {
            let s: f64 = row.iter().enumerate().map(|(j, v)| (v - means[j]) / sds[j] * beta[j]).sum();
            s * ysd + ym
        })
        .collect()
}

/// Ordinary least squares with intercept, solved by QR.
pub fn ols_predict(x: &[Vec<f64>], y: &[f64], x_new: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let h = x[0].len();
    let design = DMatrix::from_fn(n, h + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    let yv = DVector::from_column_slice(y);
    let qr = design.qr();
    let qty = qr.q().transpose() * yv;
    let beta = qr.r().solve_upper_triangular(&qty).expect("full rank");
    x_new
        .iter()
        .map(|row| beta[0] + row.iter().enumerate().map(|(j, v)| v * beta[j + 1]).sum::<f64>())
        .collect()
}
