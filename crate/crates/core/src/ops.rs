// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense numeric kernels shared by the forward and backward passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

pub const RMS_EPS: f64 = 1e-6;

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// d/dx of `silu(x)`.
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Row-wise RMS normalisation. Returns the normalised rows (times `gain`)
/// and the per-row RMS used, which the backward pass needs.
pub fn rms_norm(x: ArrayView2<f64>, gain: ArrayView1<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let rms: Array1<f64> = x
        .rows()
        .into_iter()
        .map(|row| (row.iter().map(|v| v * v).sum::<f64>() / d + RMS_EPS).sqrt())
        .collect();
    let mut out = x.to_owned();
    for (mut row, r) in out.rows_mut().into_iter().zip(rms.iter()) {
        row.zip_mut_with(&gain, |v, g| *v = *v / r * g);
    }
    (out, rms)
}

/// Backward of [`rms_norm`]. Accumulates the gain gradient into `dgain`.
pub fn rms_norm_backward(
    x: ArrayView2<f64>,
    rms: ArrayView1<f64>,
    gain: ArrayView1<f64>,
    dy: ArrayView2<f64>,
    dgain: &mut Array1<f64>,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut dx = Array2::zeros(x.raw_dim());
    for (t, r) in rms.iter().enumerate() {
        let xr = x.row(t);
        let dyr = dy.row(t);
        let mut proj = 0.0;
        for j in 0..x.ncols() {
            let xhat = xr[j] / r;
            dgain[j] += dyr[j] * xhat;
            proj += dyr[j] * gain[j] * xhat;
        }
        proj /= d;
        let mut dxr = dx.row_mut(t);
        for j in 0..x.ncols() {
            let xhat = xr[j] / r;
            dxr[j] = (dyr[j] * gain[j] - xhat * proj) / r;
        }
    }
    dx
}

/// Numerically stable softmax of a slice, in place.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = if *x == f64::NEG_INFINITY {
            0.0
        } else {
            (*x - max).exp()
        };
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("standard layout"));
    }
    out
}

/// Log-softmax of each row.
pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Frobenius norm of a matrix, accumulated in f64.
pub fn frobenius(x: ArrayView2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// L2 norm of every column.
pub fn column_norms(x: ArrayView2<f64>) -> Array1<f64> {
    x.map_axis(Axis(0), |c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// L2 norm of every row.
pub fn row_norms(x: ArrayView2<f64>) -> Array1<f64> {
    x.map_axis(Axis(1), |r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
}
