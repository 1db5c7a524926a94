use ndarray::{Array1, Array2};

/// Sinusoidal encoding `[sin(t w_0), .., sin(t w_{h-1}), cos(t w_0), ..]`
/// with `w_i = 10000^(-i/h)` and `h = dim / 2`. An odd `dim` gets a trailing
/// zero.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    let t = t as f64;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

pub(crate) fn embed_batch(t: &[usize], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((t.len(), dim));
    for (mut row, &ti) in out.outer_iter_mut().zip(t) {
        row.assign(&sinusoidal_embedding(ti, dim));
    }
    out
}
