use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ParameterStore;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Coordinates checked; every coordinate when the store is smaller.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coords: 100,
            seed: 0,
        }
    }
}

/// Compare the gradients stored in `params` against central differences of
/// `loss_fn`. Returns the max relative error, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &ParameterStore,
    cfg: GradCheckConfig,
) -> Result<f64>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    let total = params.num_scalars();
    let coords: Vec<usize> = if total <= cfg.max_coords.max(100) {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut picked =
            rand::seq::index::sample(&mut rng, total, cfg.max_coords.max(100)).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for flat in coords {
        let (e, i) = probe.locate(flat).expect("coordinate in range");
        let analytic = params.entry_at(e).grad.data()[i];
        let original = probe.entry_at(e).value.data()[i];

        probe.entry_at_mut(e).value.data_mut()[i] = original + cfg.epsilon;
        let plus = loss_fn(&probe)?;
        probe.entry_at_mut(e).value.data_mut()[i] = original - cfg.epsilon;
        let minus = loss_fn(&probe)?;
        probe.entry_at_mut(e).value.data_mut()[i] = original;

        let numeric = (plus - minus) / (2.0 * cfg.epsilon);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}
