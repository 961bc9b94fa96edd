use super::{dot, norm2, DenseArray};
use crate::error::{Error, Result};

/// Floor for the spectral-norm estimate of a (near) zero matrix.
pub const SN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralNorm {
    pub w_sn: DenseArray,
    /// Updated left vector; the caller persists it when training.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub sigma: f64,
}

fn mat_vec(w: &DenseArray, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|i| dot(w.row(i), x)).collect()
}

fn mat_t_vec(w: &DenseArray, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, &yi) in y.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o += yi * wv;
        }
    }
    out
}

/// Power-iteration estimate of the largest singular value, `W / σ`.
///
/// Each iteration sets `v ∝ Wᵀu` then `u ∝ Wv`; `σ = uᵀWv`.
pub fn spectral_normalize(w: &DenseArray, u: &[f64], n_power_iters: usize) -> Result<SpectralNorm> {
    if w.shape().len() != 2 || u.len() != w.rows() {
        return Err(Error::dim(format!(
            "spectral_normalize: weight {:?} with u of len {}",
            w.shape(),
            u.len()
        )));
    }
    if n_power_iters == 0 {
        return Err(Error::invalid("n_power_iters must be at least 1"));
    }
    if (norm2(u) - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "u must be unit norm, got {}",
            norm2(u)
        )));
    }
    let mut u = u.to_vec();
    let mut v = vec![0.0; w.cols()];
    for _ in 0..n_power_iters {
        let wt_u = mat_t_vec(w, &u);
        let n = norm2(&wt_u);
        if n <= SN_EPS {
            return Ok(zero_result(w, u));
        }
        v = wt_u.iter().map(|x| x / n).collect();
        let wv = mat_vec(w, &v);
        let n = norm2(&wv);
        if n <= SN_EPS {
            return Ok(zero_result(w, u));
        }
        u = wv.iter().map(|x| x / n).collect();
    }
    let sigma = dot(&u, &mat_vec(w, &v));
    if sigma <= SN_EPS {
        return Ok(zero_result(w, u));
    }
    let w_sn = w.scale(1.0 / sigma);
    Ok(SpectralNorm { w_sn, u, v, sigma })
}

fn zero_result(w: &DenseArray, u: Vec<f64>) -> SpectralNorm {
    SpectralNorm {
        w_sn: DenseArray::zeros(w.shape()),
        u,
        v: vec![0.0; w.cols()],
        sigma: SN_EPS,
    }
}

/// Gradient with respect to the raw weight given `G = ∂L/∂W_sn`, treating the
/// power-iteration vectors as constants: `(G − ⟨G, W_sn⟩·u vᵀ) / σ`.
pub fn spectral_backward(sn: &SpectralNorm, grad_wsn: &DenseArray) -> Result<DenseArray> {
    if !grad_wsn.same_shape(&sn.w_sn) {
        return Err(Error::dim("spectral_backward: shape mismatch"));
    }
    if sn.sigma <= SN_EPS {
        return Ok(grad_wsn.clone());
    }
    let inner = dot(grad_wsn.data(), sn.w_sn.data());
    let mut out = grad_wsn.clone();
    let cols = out.cols();
    for (i, &ui) in sn.u.iter().enumerate() {
        for (j, g) in out.row_mut(i).iter_mut().enumerate().take(cols) {
            *g = (*g - inner * ui * sn.v[j]) / sn.sigma;
        }
    }
    Ok(out)
}
