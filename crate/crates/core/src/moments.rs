//! Conditional moment restrictions: residuals, stratum-wise centering of the
//! critic output, the empirical moment matrix and the GMM loss.
//!
//! Centering `c̃ = c − E[c | D]` makes every critic feature orthogonal to any
//! function of the stratum alone, so `E[e·c̃ᵀ] = 0` only constrains the part of
//! the residual that varies with the site inside a stratum.

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Per-stratum running means of the critic output.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub mu: Vec<Vec<f64>>,
    pub initialized: Vec<bool>,
    pub momentum: f64,
}

impl MomentState {
    pub fn new(n_strata: usize, dim: usize, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        if n_strata == 0 || dim == 0 {
            return Err(Error::invalid(
                "moment state needs at least one stratum and one dimension",
            ));
        }
        Ok(Self {
            mu: vec![vec![0.0; dim]; n_strata],
            initialized: vec![false; n_strata],
            momentum,
        })
    }

    pub fn n_strata(&self) -> usize {
        self.mu.len()
    }

    pub fn dim(&self) -> usize {
        self.mu[0].len()
    }

    /// Euclidean norm of each stratum mean.
    pub fn norms(&self) -> Vec<f64> {
        self.mu
            .iter()
            .map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centered {
    pub centered: DenseArray,
    pub counts: Vec<usize>,
}

/// `e = y − p`.
pub fn compute_residuals(y: &DenseArray, p: &DenseArray) -> Result<DenseArray> {
    if !y.same_shape(p) {
        return Err(Error::dim(format!(
            "residual: y {:?} vs p {:?}",
            y.shape(),
            p.shape()
        )));
    }
    y.sub(p)
}

fn stratum_means(c: &DenseArray, d: &[usize], k: usize) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if c.rows() != d.len() {
        return Err(Error::dim(format!(
            "{} critic rows vs {} strata",
            c.rows(),
            d.len()
        )));
    }
    let m = c.cols();
    let mut sums = vec![vec![0.0; m]; k];
    let mut counts = vec![0usize; k];
    for (i, &s) in d.iter().enumerate() {
        if s >= k {
            return Err(Error::invalid(format!(
                "stratum id {s} out of range 0..{k}"
            )));
        }
        counts[s] += 1;
        for (acc, v) in sums[s].iter_mut().zip(c.row(i)) {
            *acc += v;
        }
    }
    for (sum, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            sum.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    Ok((sums, counts))
}

/// Center critic outputs by the running stratum means.
///
/// Initialized strata are centered by their mean *before* this batch's update;
/// a stratum seen for the first time is centered by its own batch mean, which
/// also becomes its running mean. Strata absent from the batch are untouched.
/// With `training == false` the state is never modified and a cold stratum is
/// an error.
pub fn center_instruments(
    c: &DenseArray,
    d: &[usize],
    state: &mut MomentState,
    training: bool,
) -> Result<Centered> {
    if c.cols() != state.dim() {
        return Err(Error::dim(format!(
            "critic dim {} vs moment state {}",
            c.cols(),
            state.dim()
        )));
    }
    let (batch_means, counts) = stratum_means(c, d, state.n_strata())?;
    if !training {
        if let Some(k) = (0..counts.len()).find(|&k| counts[k] > 0 && !state.initialized[k]) {
            return Err(Error::ColdStratum(k));
        }
    }
    let mut centered = c.clone();
    for (i, &k) in d.iter().enumerate() {
        let offset = if state.initialized[k] {
            &state.mu[k]
        } else {
            &batch_means[k]
        };
        for (v, o) in centered.row_mut(i).iter_mut().zip(offset) {
            *v -= o;
        }
    }
    if training {
        let mom = state.momentum;
        for k in 0..counts.len() {
            if counts[k] == 0 {
                continue;
            }
            if state.initialized[k] {
                for (mu, b) in state.mu[k].iter_mut().zip(&batch_means[k]) {
                    *mu = mom * *mu + (1.0 - mom) * b;
                }
            } else {
                state.mu[k] = batch_means[k].clone();
                state.initialized[k] = true;
            }
        }
    }
    Ok(Centered { centered, counts })
}

/// Subtract the exact in-batch stratum mean from every row.
pub fn exact_center(c: &DenseArray, d: &[usize]) -> Result<DenseArray> {
    let k = d.iter().max().map_or(1, |m| m + 1);
    let (means, _) = stratum_means(c, d, k)?;
    let mut out = c.clone();
    for (i, &s) in d.iter().enumerate() {
        for (v, m) in out.row_mut(i).iter_mut().zip(&means[s]) {
            *v -= m;
        }
    }
    Ok(out)
}

/// `m̂ = (1/B)·Σ_i e_i c̃_iᵀ`, shape `C × M`.
pub fn moment_matrix(e: &DenseArray, c_tilde: &DenseArray) -> Result<DenseArray> {
    let b = e.rows();
    if b == 0 || e.is_empty() {
        return Err(Error::invalid("moment matrix of an empty batch"));
    }
    if c_tilde.rows() != b {
        return Err(Error::dim(format!(
            "{b} residual rows vs {} instrument rows",
            c_tilde.rows()
        )));
    }
    let (nc, nm) = (e.cols(), c_tilde.cols());
    let mut out = DenseArray::zeros(&[nc, nm]);
    for i in 0..b {
        let (ei, ci) = (e.row(i), c_tilde.row(i));
        for (c, &ev) in ei.iter().enumerate() {
            for (dst, &cv) in out.row_mut(c).iter_mut().zip(ci) {
                *dst += ev * cv;
            }
        }
    }
    Ok(out.scale(1.0 / b as f64))
}

/// `‖m̂‖_F²`.
pub fn gmm_loss(m_hat: &DenseArray) -> f64 {
    m_hat.frobenius_sq()
}

pub fn gmm_loss_grad(m_hat: &DenseArray) -> DenseArray {
    m_hat.scale(2.0)
}

/// Pull `G = ∂L/∂m̂` back to the residuals: `(1/B)·c̃·Gᵀ`.
pub fn moment_grad_residuals(c_tilde: &DenseArray, g: &DenseArray) -> Result<DenseArray> {
    Ok(c_tilde
        .matmul(&g.transpose())?
        .scale(1.0 / c_tilde.rows() as f64))
}

/// Pull `G = ∂L/∂m̂` back to the centered instruments: `(1/B)·e·G`.
pub fn moment_grad_instruments(e: &DenseArray, g: &DenseArray) -> Result<DenseArray> {
    Ok(e.matmul(g)?.scale(1.0 / e.rows() as f64))
}

/// One batch worth of moment quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentBatch {
    pub residuals: DenseArray,
    pub centered: DenseArray,
    pub moment: DenseArray,
    pub counts: Vec<usize>,
}

impl MomentBatch {
    pub fn compute(
        y: &DenseArray,
        p: &DenseArray,
        c: &DenseArray,
        d: &[usize],
        state: &mut MomentState,
        training: bool,
    ) -> Result<Self> {
        let residuals = compute_residuals(y, p)?;
        let Centered { centered, counts } = center_instruments(c, d, state, training)?;
        let moment = moment_matrix(&residuals, &centered)?;
        Ok(Self {
            residuals,
            centered,
            moment,
            counts,
        })
    }

    pub fn loss(&self) -> f64 {
        gmm_loss(&self.moment)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseArray {
        DenseArray::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn residual_examples() {
        let y = m(&[&[1.0, 0.0]]);
        assert!(compute_residuals(&y, &y)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let e = compute_residuals(&y, &m(&[&[0.5, 0.5]])).unwrap();
        assert_eq!(e.data(), &[0.5, -0.5]);
        let p = m(&[&[0.2, 0.3, 0.5]]);
        let e = compute_residuals(&m(&[&[0.0, 1.0, 0.0]]), &p).unwrap();
        assert!(e.data().iter().sum::<f64>().abs() < 1e-15);
        assert!(compute_residuals(&y, &m(&[&[1.0]])).is_err());
    }

    #[test]
    fn first_sight_centering_uses_batch_mean() {
        let mut st = MomentState::new(2, 2, 0.9).unwrap();
        let c = m(&[&[3.0, -1.0], &[3.0, -1.0], &[3.0, -1.0]]);
        let out = center_instruments(&c, &[0, 1, 0], &mut st, true).unwrap();
        assert!(out.centered.data().iter().all(|&v| v == 0.0));
        assert_eq!(st.mu, vec![vec![3.0, -1.0], vec![3.0, -1.0]]);
        assert_eq!(out.counts, vec![2, 1]);
    }

    #[test]
    fn ema_hand_example() {
        let mut st = MomentState::new(1, 1, 0.9).unwrap();
        st.mu[0] = vec![1.0];
        st.initialized[0] = true;
        let out = center_instruments(&m(&[&[2.0], &[4.0]]), &[0, 0], &mut st, true).unwrap();
        assert_eq!(out.centered.data(), &[1.0, 3.0]);
        assert!((st.mu[0][0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn absent_stratum_is_untouched() {
        let mut st = MomentState::new(2, 1, 0.9).unwrap();
        st.mu = vec![vec![0.5], vec![0.123456789]];
        st.initialized = vec![true, true];
        center_instruments(&m(&[&[2.0], &[4.0]]), &[0, 0], &mut st, true).unwrap();
        assert_eq!(st.mu[1][0].to_bits(), 0.123456789f64.to_bits());
    }

    #[test]
    fn eval_never_mutates_and_rejects_cold_strata() {
        let mut st = MomentState::new(2, 1, 0.9).unwrap();
        st.mu[0] = vec![1.0];
        st.initialized[0] = true;
        let before = st.clone();
        let out = center_instruments(&m(&[&[2.0]]), &[0], &mut st, false).unwrap();
        assert_eq!(out.centered.data(), &[1.0]);
        assert_eq!(st, before);
        let err = center_instruments(&m(&[&[2.0]]), &[1], &mut st, false).unwrap_err();
        assert!(matches!(err, Error::ColdStratum(1)));
    }

    #[test]
    fn moment_matrix_examples() {
        let e = m(&[&[1.0, -1.0]]);
        let c = m(&[&[2.0, 0.0, 1.0]]);
        let mh = moment_matrix(&e, &c).unwrap();
        assert_eq!(
            mh.to_rows(),
            vec![vec![2.0, 0.0, 1.0], vec![-2.0, 0.0, -1.0]]
        );
        let zero = moment_matrix(&DenseArray::zeros(&[1, 2]), &c).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let scaled = moment_matrix(&e, &c.scale(3.0)).unwrap();
        assert_eq!(scaled, mh.scale(3.0));
    }

    #[test]
    fn gmm_loss_examples() {
        assert_eq!(gmm_loss(&DenseArray::zeros(&[2, 2])), 0.0);
        assert_eq!(gmm_loss(&m(&[&[3.0, 4.0]])), 25.0);
        assert_eq!(gmm_loss_grad(&m(&[&[1.0, -2.0]])).data(), &[2.0, -4.0]);
    }

    #[test]
    fn exact_center_examples() {
        let out = exact_center(&m(&[&[1.0], &[3.0]]), &[0, 0]).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);
        let c = m(&[&[1.0, 2.0], &[5.0, -3.0], &[0.5, 0.25]]);
        let out = exact_center(&c, &[0, 0, 0]).unwrap();
        for j in 0..2 {
            let mean: f64 = (0..3).map(|i| out.get(i, j)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_momentum_rejected() {
        assert!(MomentState::new(1, 1, 1.0).is_err());
        assert!(MomentState::new(1, 1, -0.1).is_err());
    }
}
