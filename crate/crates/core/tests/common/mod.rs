//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use civdg::config::ExperimentConfig;
use civdg::metrics::PredictionLog;
use civdg::models::{Critic, CriticSpec, Predictor, PredictorSpec};
use civdg::moments::{center_instruments, exact_center, MomentState};
use civdg::scm::{DatasetSplit, ScmConfig, SplitRole, TaskMode};
use civdg::tensor::{
    finite_diff_check, spectral_normalize, DenseArray, GradCheckConfig, ParameterStore,
};
use civdg::tensor::{AdamW, AdamWConfig};
use civdg::trainer::{
    fit, predictor_objective, same_values, Ablation, Batch, DataDims, ModelConfig, TrainConfig,
    Trainer,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseArray {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    DenseArray::matrix(rows, cols, data).unwrap()
}

pub fn batch(rng: &mut ChaCha8Rng, mode: TaskMode, b: usize, p: usize, c: usize) -> Batch {
    let x = gaussian(rng, b, p, 1.0);
    let labels: Vec<Vec<f64>> = (0..b)
        .map(|i| match mode {
            TaskMode::SingleLabel => (0..c).map(|k| (k == i % c) as u8 as f64).collect(),
            TaskMode::MultiLabel => (0..c).map(|_| rng.gen_range(0..2) as f64).collect(),
        })
        .collect();
    let z = (0..b).map(|i| i % 5).collect();
    let d = (0..b).map(|i| (i / 2) % 2).collect();
    Batch::new(x, DenseArray::from_rows(&labels).unwrap(), z, d).unwrap()
}

/// Max relative error of the analytic `∂L_θ/∂θ` against central differences
/// over every predictor coordinate, on an 8-sample batch.
pub fn predictor_gradcheck(mode: TaskMode, n_classes: usize, lambda: f64, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let spec = PredictorSpec {
        feature_dim: 6,
        hidden_dims: vec![10, 7],
        n_classes,
        task_mode: mode,
        use_demographics: true,
        d_embed_dim: 3,
        ..PredictorSpec::default()
    };
    let (pred, mut params) = Predictor::init(spec, seed).unwrap();
    // Embeddings start tiny; enlarge them so the stratum path is exercised.
    let emb = params.get_mut("pred.d_embed").unwrap();
    emb.value = emb.value.scale(25.0);
    let b = batch(&mut rng, mode, 8, 6, n_classes);
    let c_tilde = exact_center(&gaussian(&mut rng, 8, 4, 1.0), &b.d).unwrap();

    params.zero_grad();
    predictor_objective(&pred, &mut params, &b, Some(&c_tilde), lambda).unwrap();
    let total = params.num_scalars();
    finite_diff_check(
        |p: &ParameterStore| {
            let mut p = p.clone();
            Ok(predictor_objective(&pred, &mut p, &b, Some(&c_tilde), lambda)?.l_theta)
        },
        &params,
        GradCheckConfig {
            epsilon: 1e-5,
            max_coords: total,
            seed,
        },
    )
    .unwrap()
}

pub fn critic_spec(n_sites: usize, n_strata: usize) -> CriticSpec {
    CriticSpec {
        n_sites,
        n_strata,
        z_embed_dim: 8,
        d_embed_dim: 8,
        hidden_dim: 32,
        n_layers: 3,
        output_dim: 8,
        leaky_slope: 0.01,
    }
}

/// Largest value over trials of
/// `|Σ_i f(d_i)·c̃_ij| / (B·max|f|·max|c|)` with exact stratum centering.
pub fn moment_identity_worst(trials: usize, functions: usize, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut r = rng(seed);
    for t in 0..trials {
        let k = r.gen_range(1..=6);
        let s = r.gen_range(1..=6);
        let b = r.gen_range(2..=128);
        let (critic, mut params) = Critic::init(critic_spec(s, k), seed ^ t as u64).unwrap();
        // Spread the embeddings so the outputs are far from constant.
        for name in ["critic.z_embed", "critic.d_embed"] {
            let e = params.get_mut(name).unwrap();
            e.value = e.value.scale(r.gen_range(1.0..100.0));
        }
        let z: Vec<usize> = (0..b).map(|_| r.gen_range(0..s)).collect();
        let d: Vec<usize> = (0..b).map(|_| r.gen_range(0..k)).collect();
        let c = critic.forward(&params, &z, &d).unwrap().output;
        let ct = exact_center(&c, &d).unwrap();
        let cmax = c.max_abs().max(f64::MIN_POSITIVE);
        for _ in 0..functions {
            let table: Vec<f64> = (0..k).map(|_| r.gen_range(-10.0..10.0)).collect();
            let fmax = table.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for j in 0..ct.cols() {
                let sum: f64 = (0..b).map(|i| table[d[i]] * ct.get(i, j)).sum();
                worst = worst.max(sum.abs() / (b as f64 * fmax * cmax));
            }
        }
    }
    worst
}

/// Absent strata keep their running means bit for bit; present ones follow
/// `μ ← m·μ + (1−m)·mean` exactly.
pub fn ema_skip_rule_holds(seed: u64) -> bool {
    let mut r = rng(seed);
    let (k, m) = (4, 3);
    let mut state = MomentState::new(k, m, 0.9).unwrap();
    let warm: Vec<usize> = (0..k).collect();
    center_instruments(&gaussian(&mut r, k, m, 1.0), &warm, &mut state, true).unwrap();
    for _ in 0..50 {
        let present: Vec<usize> = (0..k).filter(|_| r.gen_bool(0.5)).collect();
        if present.is_empty() {
            continue;
        }
        let b = r.gen_range(1..20);
        let d: Vec<usize> = (0..b)
            .map(|_| present[r.gen_range(0..present.len())])
            .collect();
        let c = gaussian(&mut r, b, m, 1.0);
        let before = state.clone();
        center_instruments(&c, &d, &mut state, true).unwrap();
        for s in 0..k {
            let rows: Vec<usize> = (0..b).filter(|&i| d[i] == s).collect();
            if rows.is_empty() {
                let same = state.mu[s]
                    .iter()
                    .zip(&before.mu[s])
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if !same || state.initialized[s] != before.initialized[s] {
                    return false;
                }
                continue;
            }
            for j in 0..m {
                let mean = rows.iter().map(|&i| c.get(i, j)).sum::<f64>() / rows.len() as f64;
                let expect = 0.9 * before.mu[s][j] + (1.0 - 0.9) * mean;
                if (state.mu[s][j] - expect).abs() > 1e-14 {
                    return false;
                }
            }
        }
    }
    true
}

/// ∞-norm gap between the running means of a frozen critic and the exact
/// stratum means after 500 stationary batches.
pub fn ema_convergence_error(seed: u64) -> f64 {
    let (s, k, b) = (5, 2, 128);
    let (critic, params) = Critic::init(critic_spec(s, k), seed).unwrap();
    let selection = civdg::scm::enrichment_matrix(s, 0.45, 0.05).unwrap();
    // Exact E[c | D = k] from the critic's value on every (z, k) cell.
    let truth: Vec<Vec<f64>> = (0..k)
        .map(|dk| {
            let z: Vec<usize> = (0..s).collect();
            let out = critic.forward(&params, &z, &vec![dk; s]).unwrap().output;
            (0..out.cols())
                .map(|j| (0..s).map(|zi| selection[dk][zi] * out.get(zi, j)).sum())
                .collect()
        })
        .collect();
    let mut r = rng(seed.wrapping_add(1000));
    let mut state = MomentState::new(k, 8, 0.9).unwrap();
    for _ in 0..500 {
        let d: Vec<usize> = (0..b).map(|_| r.gen_range(0..k)).collect();
        let z: Vec<usize> = d
            .iter()
            .map(|&dk| {
                let u: f64 = r.gen();
                let mut acc = 0.0;
                selection[dk]
                    .iter()
                    .position(|&p| {
                        acc += p;
                        u < acc
                    })
                    .unwrap_or(s - 1)
            })
            .collect();
        let c = critic.forward(&params, &z, &d).unwrap().output;
        center_instruments(&c, &d, &mut state, true).unwrap();
    }
    let mut err: f64 = 0.0;
    for dk in 0..k {
        for j in 0..8 {
            err = err.max((state.mu[dk][j] - truth[dk][j]).abs());
        }
    }
    err
}

/// Forward passes with the spectral state committed, weights untouched.
pub fn spectral_warmup(
    critic: &Critic,
    params: &mut ParameterStore,
    z: &[usize],
    d: &[usize],
    n: usize,
) {
    for _ in 0..n {
        let tape = critic.forward(params, z, d).unwrap();
        critic.commit_spectral_state(params, &tape).unwrap();
    }
}

pub fn sigma_max(w: &DenseArray) -> f64 {
    let m = DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
    m.singular_values().max()
}

/// True spectral norm of each normalized weight as the next forward pass
/// will use it.
pub fn normalized_sigmas(critic: &Critic, params: &ParameterStore) -> Vec<f64> {
    critic
        .spec
        .layer_weight_names()
        .iter()
        .map(|name| {
            let p = params.get(name).unwrap();
            let sn = spectral_normalize(&p.value, p.sn_u.as_ref().unwrap(), 1).unwrap();
            sigma_max(&sn.w_sn)
        })
        .collect()
}

/// `max ‖c(a) − c(b)‖ / (L·‖a − b‖)` over sampled embedding pairs, with `L`
/// the product of the layers' true spectral norms.
pub fn lipschitz_ratio(critic: &Critic, params: &ParameterStore, pairs: usize, seed: u64) -> f64 {
    let lip: f64 = normalized_sigmas(critic, params).iter().product();
    let width = critic.spec.z_embed_dim + critic.spec.d_embed_dim;
    let ze = params.value("critic.z_embed").unwrap();
    let de = params.value("critic.d_embed").unwrap();
    let mut r = rng(seed);
    let point = |r: &mut ChaCha8Rng| -> Vec<f64> {
        // Either an actual (z, d) embedding or a random point near one.
        let mut v: Vec<f64> = ze
            .row(r.gen_range(0..ze.rows()))
            .iter()
            .chain(de.row(r.gen_range(0..de.rows())))
            .copied()
            .collect();
        if r.gen_bool(0.5) {
            v.iter_mut()
                .for_each(|x| *x += r.sample::<f64, _>(StandardNormal));
        }
        v
    };
    let mut a = Vec::with_capacity(pairs * width);
    let mut b = Vec::with_capacity(pairs * width);
    for _ in 0..pairs {
        a.extend(point(&mut r));
        b.extend(point(&mut r));
    }
    let a = DenseArray::matrix(pairs, width, a).unwrap();
    let b = DenseArray::matrix(pairs, width, b).unwrap();
    let fa = critic.forward_embedded(params, &a).unwrap();
    let fb = critic.forward_embedded(params, &b).unwrap();
    let norm = |x: &[f64], y: &[f64]| {
        x.iter()
            .zip(y)
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    (0..pairs)
        .filter_map(|i| {
            let din = norm(a.row(i), b.row(i));
            (din > 0.0).then(|| norm(fa.row(i), fb.row(i)) / (lip * din))
        })
        .fold(0.0, f64::max)
}

/// Copy of `split` with every record moved to a single stratum.
pub fn single_stratum(split: &DatasetSplit) -> DatasetSplit {
    let mut out = split.clone();
    out.records.iter_mut().for_each(|r| r.d = 0);
    out.provenance.n_strata = 1;
    out.provenance.stratum_probs = vec![1.0];
    out.provenance.selection_matrix = vec![vec![
        1.0 / out.provenance.n_sites as f64;
        out.provenance.n_sites
    ]];
    out
}

pub fn small_splits(seed: u64, n: usize) -> (DatasetSplit, DatasetSplit) {
    let cfg = ScmConfig {
        seed,
        ..ScmConfig::reference()
    };
    (
        civdg::scm::sample_split(&cfg, n, SplitRole::Train).unwrap(),
        civdg::scm::sample_split(&cfg, n / 2, SplitRole::SourceVal).unwrap(),
    )
}

// ---- trainer equivalences ----

pub fn quick(ablation: Ablation, seed: u64) -> TrainConfig {
    TrainConfig {
        ablation,
        seed,
        batch_size: 64,
        max_steps: 30,
        eval_every: 10,
        ..TrainConfig::default()
    }
}

pub fn model(use_demographics: bool) -> ModelConfig {
    ModelConfig {
        use_demographics,
        ..ModelConfig::default()
    }
}

/// `ablation = erm` against a trainer built without a critic.
pub fn erm_matches_critic_free(data_seed: u64, seed: u64) -> bool {
    let (train, val) = small_splits(data_seed, 400);
    let cfg = quick(Ablation::Erm, seed);
    let with = fit(&train, &val, &cfg, &model(true)).unwrap();
    let without = Trainer::without_critic(&model(true), &cfg, DataDims::of(&train))
        .unwrap()
        .run(&train, &val)
        .unwrap();
    assert!(
        with.counters.critic_updates > 0,
        "the ablation still trains its critic"
    );
    same_values(&with.best.predictor_params, &without.best.predictor_params)
        && with.best.step == without.best.step
        && with.best.val_metric.to_bits() == without.best.val_metric.to_bits()
}

/// `no_civ` against `full_civ` on the same data collapsed to one stratum.
pub fn no_civ_matches_single_stratum(data_seed: u64, seed: u64) -> bool {
    let (train, val) = small_splits(data_seed, 400);
    let (train1, val1) = (single_stratum(&train), single_stratum(&val));
    let a = fit(&train, &val, &quick(Ablation::NoCiv, seed), &model(false)).unwrap();
    let b = fit(
        &train1,
        &val1,
        &quick(Ablation::FullCiv, seed),
        &model(false),
    )
    .unwrap();
    same_values(&a.best.predictor_params, &b.best.predictor_params)
        && same_values(&a.best.critic_params, &b.best.critic_params)
        && a.best.moments == b.best.moments
        && a.history.without_timing() == b.history.without_timing()
}

/// AdamW ascent on `g` against descent on `-g`, bit for bit.
pub fn adamw_ascent_matches_negated_descent(seed: u64) -> bool {
    let mut r = rng(seed);
    let mut base = ParameterStore::new();
    base.insert("w", gaussian(&mut r, 3, 4, 1.0), None).unwrap();
    base.insert("b", gaussian(&mut r, 1, 4, 1.0), None).unwrap();
    let (mut up, mut down) = (base.clone(), base.clone());
    let cfg = AdamWConfig {
        weight_decay: 0.1,
        ..AdamWConfig::default()
    };
    let (mut opt_up, mut opt_down) = (AdamW::new(cfg), AdamW::new(cfg));
    for _ in 0..25 {
        for name in ["w", "b"] {
            let g = gaussian(&mut r, base.value(name).unwrap().rows(), 4, 1.0);
            down.set_grad(name, g.scale(-1.0)).unwrap();
            up.set_grad(name, g).unwrap();
        }
        opt_up.step(&mut up, true).unwrap();
        opt_down.step(&mut down, false).unwrap();
    }
    let bits = |x: &DenseArray| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same = up
        .iter()
        .zip(down.iter())
        .all(|((_, a), (_, b))| bits(&a.value) == bits(&b.value));
    same
}

/// A critic after `train_steps` ascent steps followed by 50 power-iteration
/// warm-up passes at fixed weights.
pub fn warmed_critic(seed: u64, train_steps: usize) -> (Critic, ParameterStore) {
    let (train, _) = small_splits(seed, 512);
    let cfg = ExperimentConfig::default();
    let mut trainer = Trainer::new(&cfg.model, &cfg.train, DataDims::of(&train)).unwrap();
    let idx: Vec<usize> = (0..128).collect();
    let mut b = Batch::from_split(&train, &idx).unwrap();
    trainer.prepare(&mut b);
    for _ in 0..train_steps {
        trainer.critic_step(&b).unwrap();
    }
    let critic = trainer.critic().unwrap().clone();
    let mut params = trainer.critic_params().unwrap().clone();
    spectral_warmup(&critic, &mut params, &b.z, &b.d, 50);
    (critic, params)
}

// ---- metric oracles: direct transcriptions of the definitions ----

pub fn random_log(r: &mut ChaCha8Rng, mode: TaskMode) -> PredictionLog {
    let n = r.gen_range(1..=64);
    let c = r.gen_range(2..=4);
    let (n_sites, n_strata) = (r.gen_range(1..=4), r.gen_range(1..=3));
    // Coarse scores make ties common.
    let coarse = r.gen_bool(0.5);
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let raw: Vec<f64> = (0..c)
            .map(|_| {
                if coarse {
                    r.gen_range(0..4) as f64 / 4.0
                } else {
                    r.gen::<f64>()
                }
            })
            .collect();
        match mode {
            TaskMode::SingleLabel => {
                let raw: Vec<f64> = raw.iter().map(|v| v + 0.25).collect();
                let total: f64 = raw.iter().sum();
                let mut s: Vec<f64> = raw.iter().map(|v| v / total).collect();
                // Make the row sum exactly representable as 1 within tolerance.
                let rest: f64 = s[..c - 1].iter().sum();
                s[c - 1] = (1.0 - rest).max(0.0);
                scores.push(s);
                let y = r.gen_range(0..c);
                labels.push((0..c).map(|k| (k == y) as u8 as f64).collect());
            }
            TaskMode::MultiLabel => {
                scores.push(raw);
                labels.push((0..c).map(|_| r.gen_range(0..2) as f64).collect());
            }
        }
    }
    let z = (0..n).map(|_| r.gen_range(0..n_sites)).collect();
    let d = (0..n).map(|_| r.gen_range(0..n_strata)).collect();
    PredictionLog::new(scores, labels, z, d, mode).unwrap()
}

fn argmax_first(s: &[f64]) -> usize {
    let best = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    s.iter().position(|&v| v == best).unwrap()
}

pub fn oracle_correct(log: &PredictionLog, i: usize) -> f64 {
    let (s, y) = (&log.scores[i], &log.labels[i]);
    match log.task_mode {
        TaskMode::SingleLabel => (y[argmax_first(s)] == 1.0) as u8 as f64,
        TaskMode::MultiLabel => {
            let agree = (0..s.len())
                .filter(|&k| (s[k] >= 0.5) == (y[k] == 1.0))
                .count();
            agree as f64 / s.len() as f64
        }
    }
}

pub fn oracle_accuracy(log: &PredictionLog) -> f64 {
    (0..log.len()).map(|i| oracle_correct(log, i)).sum::<f64>() / log.len() as f64
}

/// Minimum accuracy over nonempty groups defined by `key`.
pub fn oracle_wg(log: &PredictionLog, key: impl Fn(usize) -> Vec<usize>) -> f64 {
    let keys: Vec<Vec<usize>> = (0..log.len()).map(&key).collect();
    let mut worst = f64::INFINITY;
    for k in &keys {
        let members: Vec<usize> = (0..log.len()).filter(|&i| &keys[i] == k).collect();
        let acc =
            members.iter().map(|&i| oracle_correct(log, i)).sum::<f64>() / members.len() as f64;
        worst = worst.min(acc);
    }
    worst
}

pub fn label_key(log: &PredictionLog, i: usize) -> usize {
    match log.task_mode {
        TaskMode::SingleLabel => argmax_first(&log.labels[i]),
        TaskMode::MultiLabel => log.labels[i]
            .iter()
            .enumerate()
            .map(|(k, &v)| (v as usize) * (1 << k))
            .sum(),
    }
}

pub fn oracle_ece(log: &PredictionLog, n_bins: usize) -> f64 {
    let n = log.len() as f64;
    let mut total = 0.0;
    for b in 0..n_bins {
        let (lo, hi) = (b as f64 / n_bins as f64, (b + 1) as f64 / n_bins as f64);
        let members: Vec<usize> = (0..log.len())
            .filter(|&i| {
                let conf = log.scores[i][argmax_first(&log.scores[i])];
                (conf > lo && conf <= hi) || (b == 0 && conf == 0.0)
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().map(|&i| oracle_correct(log, i)).sum::<f64>() / m;
        let conf = members
            .iter()
            .map(|&i| log.scores[i][argmax_first(&log.scores[i])])
            .sum::<f64>()
            / m;
        total += m / n * (acc - conf).abs();
    }
    total
}

/// Pair counting: P(score_pos > score_neg) + ½·P(tie).
pub fn oracle_binary_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = (0..scores.len())
        .filter(|&i| positive[i])
        .map(|i| scores[i])
        .collect();
    let neg: Vec<f64> = (0..scores.len())
        .filter(|&i| !positive[i])
        .map(|i| scores[i])
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

pub fn oracle_macro_auroc(log: &PredictionLog) -> Option<f64> {
    let per: Vec<f64> = (0..log.n_classes())
        .filter_map(|k| {
            let s: Vec<f64> = log.scores.iter().map(|r| r[k]).collect();
            let p: Vec<bool> = log.labels.iter().map(|r| r[k] == 1.0).collect();
            oracle_binary_auroc(&s, &p)
        })
        .collect();
    (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
}

/// `(eod, dpd)` across the stratum column, macro-averaged over binarized tasks.
pub fn oracle_fairness(log: &PredictionLog) -> Option<(f64, f64)> {
    let mut groups = log.d.clone();
    groups.sort_unstable();
    groups.dedup();
    if groups.len() < 2 {
        return None;
    }
    let tasks: Vec<usize> = if log.task_mode == TaskMode::SingleLabel && log.n_classes() == 2 {
        vec![1]
    } else {
        (0..log.n_classes()).collect()
    };
    let positive = |i: usize, k: usize| match log.task_mode {
        TaskMode::SingleLabel => argmax_first(&log.scores[i]) == k,
        TaskMode::MultiLabel => log.scores[i][k] >= 0.5,
    };
    let rate = |g: usize, k: usize, cond: &dyn Fn(usize) -> bool| -> Option<f64> {
        let members: Vec<usize> = (0..log.len())
            .filter(|&i| log.d[i] == g && cond(i))
            .collect();
        (!members.is_empty()).then(|| {
            members.iter().filter(|&&i| positive(i, k)).count() as f64 / members.len() as f64
        })
    };
    let (mut eod_sum, mut dpd_sum) = (0.0, 0.0);
    for &k in &tasks {
        let (mut eod, mut dpd): (f64, f64) = (0.0, 0.0);
        for &a in &groups {
            for &b in &groups {
                let all = |_: usize| true;
                let pos = |i: usize| log.labels[i][k] == 1.0;
                let neg = |i: usize| log.labels[i][k] == 0.0;
                dpd = dpd.max((rate(a, k, &all).unwrap() - rate(b, k, &all).unwrap()).abs());
                for cond in [&pos as &dyn Fn(usize) -> bool, &neg] {
                    if let (Some(x), Some(y)) = (rate(a, k, cond), rate(b, k, cond)) {
                        eod = eod.max((x - y).abs());
                    }
                }
            }
        }
        eod_sum += eod;
        dpd_sum += dpd;
    }
    let n = tasks.len() as f64;
    Some((eod_sum / n, dpd_sum / n))
}

/// Largest |implementation − oracle| over every metric on one log.
pub fn metric_oracle_gap(log: &PredictionLog) -> f64 {
    use civdg::metrics::{accuracy_and_wg, ece, fairness_gaps, macro_auroc, Grouping};
    let mut gap: f64 = 0.0;
    let mut diff = |a: f64, b: f64| gap = gap.max((a - b).abs());
    let groupings: [(Grouping, Box<dyn Fn(usize) -> Vec<usize>>); 4] = [
        (Grouping::BySite, Box::new(|i| vec![log.z[i]])),
        (Grouping::ByStratum, Box::new(|i| vec![log.d[i]])),
        (
            Grouping::BySiteStratum,
            Box::new(|i| vec![log.z[i], log.d[i]]),
        ),
        (
            Grouping::BySiteLabel,
            Box::new(|i| vec![log.z[i], label_key(log, i)]),
        ),
    ];
    for (g, key) in groupings {
        let got = accuracy_and_wg(log, g).unwrap();
        diff(got.accuracy, oracle_accuracy(log));
        diff(got.wg_accuracy, oracle_wg(log, key));
    }
    if log.task_mode == TaskMode::SingleLabel {
        for bins in [1, 10, 15] {
            diff(ece(log, bins).unwrap().ece, oracle_ece(log, bins));
        }
    }
    match (macro_auroc(log), oracle_macro_auroc(log)) {
        (Ok(a), Some(b)) => diff(a.macro_auroc, b),
        (Err(_), None) => {}
        _ => return f64::INFINITY,
    }
    match (fairness_gaps(log, &log.d), oracle_fairness(log)) {
        (Ok(f), Some((eod, dpd))) => {
            diff(f.eod, eod);
            diff(f.dpd, dpd);
        }
        (Err(_), None) => {}
        _ => return f64::INFINITY,
    }
    gap
}
