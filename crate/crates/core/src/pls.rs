//! Rank-k partial least squares regression for a single target.
//!
//! Inputs and target are standardized (zero mean, unit sample variance)
//! before component extraction. Each component takes the weight vector
//! proportional to `X_aᵀ y_a`, forms scores `t = X_a w`, and deflates both
//! `X_a` (rank-one loading update) and `y_a` (projection on `t`). Predictions
//! are expressed through the non-deflated projection `Z = X_std W` and a
//! coefficient vector `C`, so that `Ŷ = Z C` on the standardized scale.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magic prefix of the binary model record.
pub const MODEL_MAGIC: &[u8; 4] = b"PLS1";
pub const MODEL_VERSION: u16 = 1;

pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_TOL: f64 = 1e-6;
/// Extraction stops once `‖Xₐᵀyₐ‖` falls to this fraction of `‖Xᵀy‖`.
pub const EXHAUSTED_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PlsError {
    #[error("target has zero variance")]
    DegenerateTarget,
    #[error("rank {rank} too large (max {max} for this data)")]
    RankTooLarge { rank: usize, max: usize },
    #[error("need at least rank + 2 = {need} samples, got {n}")]
    TooFewSamples { n: usize, need: usize },
    #[error("component {component} did not converge within {max_iter} iterations")]
    NoConvergence { component: usize, max_iter: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite input at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("malformed model record: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PlsError>;

/// A fitted probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlsModel {
    pub rank: usize,
    pub x_mean: Array1<f64>,
    pub x_scale: Array1<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
    /// `h × k`, unit-norm columns.
    pub weights: Array2<f64>,
    /// `h × k`.
    pub loadings: Array2<f64>,
    /// Length `k`; maps `Z = X_std W` onto the standardized target.
    pub coefficients: Array1<f64>,
    pub layer: u32,
    pub source_attribute: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub r2_train: f64,
    pub r2_valid: Option<f64>,
    /// Iterations spent per component. Single-target extraction is closed
    /// form, so every entry is 1.
    pub iterations: Vec<usize>,
    pub max_iter: usize,
    pub tol: f64,
    pub scaled: bool,
}

fn check_finite_matrix(x: ArrayView2<f64>) -> Result<()> {
    for ((row, col), v) in x.indexed_iter() {
        if !v.is_finite() {
            return Err(PlsError::NonFinite { row, col });
        }
    }
    Ok(())
}

/// Column means and sample standard deviations; zero-variance columns get scale 1.
fn column_moments(x: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let mut scale = Array1::zeros(x.ncols());
    for (j, col) in x.axis_iter(Axis(1)).enumerate() {
        let m = mean[j];
        let ss: f64 = col.iter().map(|v| (v - m) * (v - m)).sum();
        let sd = (ss / (n - 1.0)).sqrt();
        scale[j] = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
    }
    (mean, scale)
}

/// Fits a rank-`rank` model of `y` on the rows of `x`.
///
/// When the residual target has no covariance left with the residual
/// columns before `rank` components are drawn, extraction stops there and the
/// returned model has fewer components; its predictions equal least squares.
pub fn fit_pls(x: ArrayView2<f64>, y: ArrayView1<f64>, rank: usize) -> Result<(PlsModel, FitReport)> {
    let (n, h) = x.dim();
    if y.len() != n {
        return Err(PlsError::ShapeMismatch {
            expected: format!("{n} targets"),
            got: format!("{}", y.len()),
        });
    }
    if rank == 0 || rank > n.min(h) {
        return Err(PlsError::RankTooLarge { rank, max: n.min(h) });
    }
    if n < rank + 2 {
        return Err(PlsError::TooFewSamples { n, need: rank + 2 });
    }
    check_finite_matrix(x)?;
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(PlsError::NonFinite { row: i, col: 0 });
    }

    let (x_mean, x_scale) = column_moments(x);
    let y_mean = y.mean().expect("non-empty");
    let y_ss: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();
    let y_scale = (y_ss / (n as f64 - 1.0)).sqrt();
    if y_scale == 0.0 || !y_scale.is_finite() {
        return Err(PlsError::DegenerateTarget);
    }

    let xs = standardize(x, &x_mean, &x_scale);
    let ys = y.mapv(|v| (v - y_mean) / y_scale);

    let mut xa = xs.clone();
    let mut ya = ys.clone();
    let mut weights = Array2::zeros((h, rank));
    let mut loadings = Array2::zeros((h, rank));
    let mut y_loadings = Array1::zeros(rank);

    let mut first_norm = 0.0;
    let mut extracted = rank;
    for a in 0..rank {
        let mut w = xa.t().dot(&ya);
        let norm = w.dot(&w).sqrt();
        if a == 0 {
            if norm == 0.0 || !norm.is_finite() {
                return Err(PlsError::RankTooLarge { rank, max: 0 });
            }
            first_norm = norm;
        } else if norm <= EXHAUSTED_TOL * first_norm {
            // The residual target is orthogonal to the residual columns, so
            // the fit already equals least squares on x.
            extracted = a;
            break;
        }
        w /= norm;
        let t = xa.dot(&w);
        let tt = t.dot(&t);
        if tt == 0.0 {
            return Err(PlsError::RankTooLarge { rank, max: a });
        }
        let p = xa.t().dot(&t) / tt;
        let q = ya.dot(&t) / tt;
        for (mut row, &ti) in xa.axis_iter_mut(Axis(0)).zip(t.iter()) {
            row.scaled_add(-ti, &p);
        }
        ya.scaled_add(-q, &t);
        weights.column_mut(a).assign(&w);
        loadings.column_mut(a).assign(&p);
        y_loadings[a] = q;
    }

    let weights = weights.slice(s![.., ..extracted]).to_owned();
    let loadings = loadings.slice(s![.., ..extracted]).to_owned();
    let y_loadings = y_loadings.slice(s![..extracted]).to_owned();

    // PᵀW is upper triangular with unit diagonal in exact arithmetic; solve
    // the general system anyway so rounding in the lower part is honoured.
    let ptw = loadings.t().dot(&weights);
    let coefficients = solve_dense(&ptw, &y_loadings).ok_or(PlsError::RankTooLarge {
        rank,
        max: rank.saturating_sub(1),
    })?;

    let model = PlsModel {
        rank: extracted,
        x_mean,
        x_scale,
        y_mean,
        y_scale,
        weights,
        loadings,
        coefficients,
        layer: 0,
        source_attribute: String::new(),
    };
    let fitted = model.predict(x)?;
    let r2_train = r2_score(y, fitted.view())?;
    let report = FitReport {
        r2_train,
        r2_valid: None,
        iterations: vec![1; extracted],
        max_iter: DEFAULT_MAX_ITER,
        tol: DEFAULT_TOL,
        scaled: true,
    };
    Ok((model, report))
}

fn standardize(x: ArrayView2<f64>, mean: &Array1<f64>, scale: &Array1<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        row -= mean;
        row /= scale;
    }
    out
}

/// Gaussian elimination with partial pivoting on a small dense system.
fn solve_dense(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let k = b.len();
    let mut m = a.clone();
    let mut rhs = b.clone();
    for col in 0..k {
        let pivot = (col..k).max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))?;
        if m[[pivot, col]].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for j in 0..k {
                m.swap([pivot, j], [col, j]);
            }
            rhs.swap(pivot, col);
        }
        for row in col + 1..k {
            let f = m[[row, col]] / m[[col, col]];
            if f != 0.0 {
                for j in col..k {
                    m[[row, j]] -= f * m[[col, j]];
                }
                rhs[row] -= f * rhs[col];
            }
        }
    }
    let mut x = Array1::zeros(k);
    for row in (0..k).rev() {
        let mut acc = rhs[row];
        for j in row + 1..k {
            acc -= m[[row, j]] * x[j];
        }
        x[row] = acc / m[[row, row]];
    }
    Some(x)
}

impl PlsModel {
    pub fn hidden_dim(&self) -> usize {
        self.x_mean.len()
    }

    /// Attaches the layer and source-attribute tags.
    pub fn tagged(mut self, layer: u32, source_attribute: impl Into<String>) -> Self {
        self.layer = layer;
        self.source_attribute = source_attribute.into();
        self
    }

    fn check_cols(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.hidden_dim() {
            return Err(PlsError::ShapeMismatch {
                expected: format!("{} columns", self.hidden_dim()),
                got: format!("{} columns", x.ncols()),
            });
        }
        Ok(())
    }

    /// Subspace scores `Z = ((X - x_mean) / x_scale) W`, shape `m × k`.
    pub fn project(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_cols(x)?;
        Ok(standardize(x, &self.x_mean, &self.x_scale).dot(&self.weights))
    }

    /// Predictions on the original target scale.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let z = self.project(x)?;
        Ok(z.dot(&self.coefficients).mapv(|v| v * self.y_scale + self.y_mean))
    }

    /// Writes the little-endian binary record.
    ///
    /// Layout: `PLS1`, version `u16`, `h: u32`, `k: u32`, then `f64` arrays
    /// `x_mean[h]`, `x_scale[h]`, `W[h×k]`, `P[h×k]`, `C[k]`, `y_mean`,
    /// `y_scale` (matrices row-major), followed by `layer: u32` and the
    /// source attribute as a `u32` byte length plus UTF-8 bytes.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let h = self.hidden_dim();
        let k = self.rank;
        let mut buf = Vec::with_capacity(14 + 8 * (2 * h + 2 * h * k + k + 2));
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(h as u32).to_le_bytes());
        buf.extend_from_slice(&(k as u32).to_le_bytes());
        let mut put = |v: f64| buf.extend_from_slice(&v.to_le_bytes());
        self.x_mean.iter().for_each(|&v| put(v));
        self.x_scale.iter().for_each(|&v| put(v));
        // iter() on a standard-layout or transposed array walks logical row-major order
        self.weights.iter().for_each(|&v| put(v));
        self.loadings.iter().for_each(|&v| put(v));
        self.coefficients.iter().for_each(|&v| put(v));
        put(self.y_mean);
        put(self.y_scale);
        buf.extend_from_slice(&self.layer.to_le_bytes());
        let name = self.source_attribute.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MODEL_MAGIC {
            return Err(PlsError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(PlsError::Format(format!("unsupported version {version}")));
        }
        let h = cur.u32()? as usize;
        let k = cur.u32()? as usize;
        if k == 0 || k > h {
            return Err(PlsError::Format(format!("invalid dims h={h} k={k}")));
        }
        let x_mean = Array1::from(cur.f64s(h)?);
        let x_scale = Array1::from(cur.f64s(h)?);
        let weights = Array2::from_shape_vec((h, k), cur.f64s(h * k)?)
            .map_err(|e| PlsError::Format(e.to_string()))?;
        let loadings = Array2::from_shape_vec((h, k), cur.f64s(h * k)?)
            .map_err(|e| PlsError::Format(e.to_string()))?;
        let coefficients = Array1::from(cur.f64s(k)?);
        let y_mean = cur.f64()?;
        let y_scale = cur.f64()?;
        let layer = cur.u32()?;
        let len = cur.u32()? as usize;
        let source_attribute = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|e| PlsError::Format(e.to_string()))?;
        if cur.pos != bytes.len() {
            return Err(PlsError::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(PlsModel {
            rank: k,
            x_mean,
            x_scale,
            y_mean,
            y_scale,
            weights,
            loadings,
            coefficients,
            layer,
            source_attribute,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PlsError::Format("truncated record".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count.checked_mul(8).ok_or_else(|| PlsError::Format("overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2_score(y: ArrayView1<f64>, y_hat: ArrayView1<f64>) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(PlsError::ShapeMismatch {
            expected: format!("{} predictions", y.len()),
            got: format!("{}", y_hat.len()),
        });
    }
    if y.len() < 2 {
        return Err(PlsError::TooFewSamples { n: y.len(), need: 2 });
    }
    let mean = y.mean().expect("non-empty");
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(PlsError::DegenerateTarget);
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}
