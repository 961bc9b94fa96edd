//! Structural-causal-model simulator for multi-site data with selection bias.
//!
//! Sampling follows the generative graph in topological order:
//!
//! ```text
//! D ~ Cat(stratum_probs)              Z ~ Cat(selection_matrix[D])
//! U ~ N(0, I_C)                       Y_r = tanh(ds·δ_D + cs·U + ε_r)
//! A = pattern_Z + scale_Z·ε_A         X = ss·S·Y_r + as·A + fn·ε_X
//! score = Y_r + ds·η_D + cs·U + on·ε_Y      Y = label(score) with flips
//! ```
//!
//! `Z` only reaches `X` through `A`; it never enters the label equation. Every
//! record draws the same fixed sequence of exogenous noises, so intervening on
//! `Z` leaves every other draw untouched.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskMode {
    SingleLabel,
    MultiLabel,
}

impl TaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskMode::SingleLabel => "single_label",
            TaskMode::MultiLabel => "multi_label",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single_label" => Ok(TaskMode::SingleLabel),
            "multi_label" => Ok(TaskMode::MultiLabel),
            other => Err(Error::Config(format!("unknown task mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScmConfig {
    pub n_sites: usize,
    pub n_strata: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    /// Scale of the site artifact in `X`.
    pub artifact_strength: f64,
    /// Weight of the unobserved confounder `U` in `Y_r` and `Y`, and of the
    /// direct stratum offsets in `Y`.
    pub confounder_strength: f64,
    /// Weight of the stratum offsets in `Y_r`.
    pub demographic_strength: f64,
    /// Scale of the clinical signal `Y_r` in `X`.
    pub signal_strength: f64,
    pub feature_noise: f64,
    pub outcome_noise: f64,
    pub label_noise: f64,
    /// `P(Z = z | D = k)`, one row per stratum.
    pub selection_matrix: Vec<Vec<f64>>,
    /// `P(D = k)`.
    pub stratum_probs: Vec<f64>,
    pub task_mode: TaskMode,
    pub seed: u64,
}

impl Default for ScmConfig {
    /// Five sites, two strata, two classes, 16 features, independent selection.
    /// With the confounder and artifact switched off, `X` determines `Y` up to
    /// feature noise.
    fn default() -> Self {
        Self {
            n_sites: 5,
            n_strata: 2,
            n_classes: 2,
            feature_dim: 16,
            artifact_strength: 1.0,
            confounder_strength: 0.5,
            demographic_strength: 0.5,
            signal_strength: 2.0,
            feature_noise: 0.15,
            outcome_noise: 0.0,
            label_noise: 0.0,
            selection_matrix: vec![vec![0.2; 5]; 2],
            stratum_probs: vec![0.5, 0.5],
            task_mode: TaskMode::SingleLabel,
            seed: 0,
        }
    }
}

/// Rows for two strata enriching stratum 0 in the first two sites and
/// stratum 1 in the last two: `[hi, hi, 0.., lo, lo]` and its mirror.
pub fn enrichment_matrix(n_sites: usize, high: f64, low: f64) -> Result<Vec<Vec<f64>>> {
    if n_sites < 4 {
        return Err(Error::invalid("enrichment needs at least 4 sites"));
    }
    if ((2.0 * high + 2.0 * low) - 1.0).abs() > 1e-9 || high < 0.0 || low < 0.0 {
        return Err(Error::invalid(
            "enrichment weights must satisfy 2·high + 2·low = 1",
        ));
    }
    let mut row = vec![0.0; n_sites];
    row[0] = high;
    row[1] = high;
    row[n_sites - 2] = low;
    row[n_sites - 1] = low;
    let mirrored: Vec<f64> = row.iter().rev().cloned().collect();
    Ok(vec![row, mirrored])
}

impl ScmConfig {
    /// The benchmark configuration used by the ablation suite: stratum 0 at
    /// 0.45/0.45 in sites 0–1 and 0.05/0.05 in sites 3–4, stratum 1 mirrored.
    pub fn reference() -> Self {
        Self {
            selection_matrix: enrichment_matrix(5, 0.45, 0.05).expect("valid"),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sites == 0 || self.n_strata == 0 || self.n_classes == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("all dimensions must be at least 1"));
        }
        if self.task_mode == TaskMode::SingleLabel && self.n_classes < 2 {
            return Err(Error::invalid("single-label tasks need at least 2 classes"));
        }
        for (name, v) in [
            ("artifact_strength", self.artifact_strength),
            ("confounder_strength", self.confounder_strength),
            ("demographic_strength", self.demographic_strength),
            ("signal_strength", self.signal_strength),
            ("feature_noise", self.feature_noise),
            ("outcome_noise", self.outcome_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::invalid("label_noise must lie in [0, 1)"));
        }
        validate_stochastic(
            &self.selection_matrix,
            self.n_strata,
            self.n_sites,
            "selection_matrix",
        )?;
        validate_stochastic(
            std::slice::from_ref(&self.stratum_probs),
            1,
            self.n_strata,
            "stratum_probs",
        )?;
        Ok(())
    }

    /// Structural parameters of `g_r`, `g_A`, `g_X`, `g_Y`. Depends only on the
    /// seed and dimensions, never on the selection matrix.
    pub fn mechanism(&self) -> Mechanism {
        let mut rng = seed::rng(seed::mix(self.seed, &[stream::MECHANISM]));
        let p = self.feature_dim;
        let c = self.n_classes;
        let mut signal = vec![vec![0.0; c]; p];
        for col in 0..c {
            let dir = unit_gaussian(&mut rng, p);
            for (row, v) in signal.iter_mut().zip(dir) {
                row[col] = v;
            }
        }
        let site_patterns = (0..self.n_sites)
            .map(|_| unit_gaussian(&mut rng, p))
            .collect();
        let site_noise = (0..self.n_sites).map(|_| rng.gen_range(0.5..1.0)).collect();
        // Stratum k favours class k mod C in both the latent state and the label.
        let stratum_offsets = (0..self.n_strata)
            .map(|k| {
                (0..c)
                    .map(|cl| if cl == k % c { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect();
        Mechanism {
            signal,
            site_patterns,
            site_noise,
            stratum_offsets,
        }
    }
}

fn validate_stochastic(m: &[Vec<f64>], rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.len() != rows || m.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid(format!("{what} must be {rows}x{cols}")));
    }
    for (k, row) in m.iter().enumerate() {
        if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!(
                "{what} row {k} has a negative or non-finite entry"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("{what} row {k} sums to {s}")));
        }
    }
    Ok(())
}

fn unit_gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mechanism {
    /// `p × C` signal directions.
    pub signal: Vec<Vec<f64>>,
    pub site_patterns: Vec<Vec<f64>>,
    pub site_noise: Vec<f64>,
    /// `K × C` ±1 offsets.
    pub stratum_offsets: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub y_r: Vec<f64>,
    pub u: Vec<f64>,
    pub a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub x: Vec<f64>,
    /// One-hot (single-label) or binary (multi-label).
    pub y: Vec<f64>,
    pub z: usize,
    pub d: usize,
    pub latent: Option<Latent>,
}

impl FeatureRecord {
    pub fn label_index(&self) -> usize {
        self.y.iter().position(|&v| v == 1.0).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitRole {
    Train,
    SourceVal,
    IdTest,
    OodTest,
}

impl SplitRole {
    pub const ALL: [SplitRole; 4] = [
        SplitRole::Train,
        SplitRole::SourceVal,
        SplitRole::IdTest,
        SplitRole::OodTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::SourceVal => "source_val",
            SplitRole::IdTest => "id_test",
            SplitRole::OodTest => "ood_test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split role {s}")))
    }

    pub fn index(self) -> u64 {
        match self {
            SplitRole::Train => 0,
            SplitRole::SourceVal => 1,
            SplitRole::IdTest => 2,
            SplitRole::OodTest => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub records: Vec<FeatureRecord>,
    pub role: SplitRole,
    pub provenance: ScmConfig,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.records
            .first()
            .map_or(self.provenance.feature_dim, |r| r.x.len())
    }

    pub fn n_classes(&self) -> usize {
        self.records
            .first()
            .map_or(self.provenance.n_classes, |r| r.y.len())
    }

    /// Empirical `P̂(Z | D)`; rows of empty strata are all zero.
    pub fn empirical_selection(&self) -> Vec<Vec<f64>> {
        let counts = self.cell_counts();
        counts
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter()
                    .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                    .collect()
            })
            .collect()
    }

    pub fn cell_counts(&self) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0usize; self.provenance.n_sites]; self.provenance.n_strata];
        for r in &self.records {
            counts[r.d][r.z] += 1;
        }
        counts
    }

    pub fn with_role(mut self, role: SplitRole) -> Self {
        self.role = role;
        self
    }
}

struct Exogenous {
    d: f64,
    z: f64,
    u: Vec<f64>,
    r: Vec<f64>,
    a: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
    flip: Vec<f64>,
    flip_to: Vec<f64>,
}

fn draw_exogenous(rng: &mut ChaCha8Rng, c: usize, p: usize) -> Exogenous {
    let mut normals =
        |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect() };
    let u = normals(c);
    let r = normals(c);
    let a = normals(p);
    let x = normals(p);
    let y = normals(c);
    Exogenous {
        d: rng.gen(),
        z: rng.gen(),
        u,
        r,
        a,
        x,
        y,
        flip: (0..c).map(|_| rng.gen()).collect(),
        flip_to: (0..c).map(|_| rng.gen()).collect(),
    }
}

fn categorical(probs: &[f64], draw: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if draw < acc && p > 0.0 {
            return i;
        }
    }
    last_positive
}

fn sample_impl(
    cfg: &ScmConfig,
    n: usize,
    role: SplitRole,
    site_override: Option<&dyn Fn(usize, usize) -> usize>,
) -> Result<DatasetSplit> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::invalid("sample size must be at least 1"));
    }
    let mech = cfg.mechanism();
    let (p, c) = (cfg.feature_dim, cfg.n_classes);
    let (ds, cs) = (cfg.demographic_strength, cfg.confounder_strength);
    let mut rng = seed::rng(seed::mix(cfg.seed, &[stream::SAMPLE, role.index()]));
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let eps = draw_exogenous(&mut rng, c, p);
        let d = categorical(&cfg.stratum_probs, eps.d);
        let mut z = categorical(&cfg.selection_matrix[d], eps.z);
        if let Some(f) = site_override {
            z = f(i, d);
            if z >= cfg.n_sites {
                return Err(Error::invalid(format!("intervened site {z} out of range")));
            }
        }
        let offsets = &mech.stratum_offsets[d];
        let u = eps.u;
        let y_r: Vec<f64> = (0..c)
            .map(|k| (ds * offsets[k] + cs * u[k] + eps.r[k]).tanh())
            .collect();
        let scale = mech.site_noise[z];
        let a: Vec<f64> = (0..p)
            .map(|j| mech.site_patterns[z][j] + scale * eps.a[j])
            .collect();
        let x: Vec<f64> = (0..p)
            .map(|j| {
                let signal: f64 = (0..c).map(|k| mech.signal[j][k] * y_r[k]).sum();
                cfg.signal_strength * signal
                    + cfg.artifact_strength * a[j]
                    + cfg.feature_noise * eps.x[j]
            })
            .collect();
        let score: Vec<f64> = (0..c)
            .map(|k| y_r[k] + cs * (offsets[k] + u[k]) + cfg.outcome_noise * eps.y[k])
            .collect();
        let y = label_from_score(cfg, &score, &eps.flip, &eps.flip_to);
        records.push(FeatureRecord {
            x,
            y,
            z,
            d,
            latent: Some(Latent { y_r, u, a }),
        });
    }
    Ok(DatasetSplit {
        records,
        role,
        provenance: cfg.clone(),
    })
}

fn label_from_score(cfg: &ScmConfig, score: &[f64], flip: &[f64], flip_to: &[f64]) -> Vec<f64> {
    let c = cfg.n_classes;
    match cfg.task_mode {
        TaskMode::SingleLabel => {
            let mut cls = 0;
            for k in 1..c {
                if score[k] > score[cls] {
                    cls = k;
                }
            }
            if flip[0] < cfg.label_noise {
                let shift = 1 + ((flip_to[0] * (c - 1) as f64) as usize).min(c - 2);
                cls = (cls + shift) % c;
            }
            let mut y = vec![0.0; c];
            y[cls] = 1.0;
            y
        }
        TaskMode::MultiLabel => (0..c)
            .map(|k| {
                let on = score[k] > 0.0;
                let on = if flip[k] < cfg.label_noise { !on } else { on };
                if on {
                    1.0
                } else {
                    0.0
                }
            })
            .collect(),
    }
}

/// Ancestral sampling of `n` training records.
pub fn sample_dataset(cfg: &ScmConfig, n: usize) -> Result<DatasetSplit> {
    sample_split(cfg, n, SplitRole::Train)
}

/// Ancestral sampling with a noise stream dedicated to `role`.
pub fn sample_split(cfg: &ScmConfig, n: usize, role: SplitRole) -> Result<DatasetSplit> {
    sample_impl(cfg, n, role, None)
}

/// Same exogenous draws as [`sample_split`], but with `Z` set by
/// `site_of(record_index, stratum)` instead of the selection mechanism.
pub fn sample_with_site_intervention(
    cfg: &ScmConfig,
    n: usize,
    role: SplitRole,
    site_of: &dyn Fn(usize, usize) -> usize,
) -> Result<DatasetSplit> {
    sample_impl(cfg, n, role, Some(site_of))
}

/// Stratified subsampling so that `P̂(Z | D)` matches `target` within total
/// variation 0.02 per stratum. Features and labels are never modified; the
/// kept records stay in their original order.
pub fn inject_spurious_correlation(
    split: &DatasetSplit,
    target: &[Vec<f64>],
    seed: u64,
) -> Result<DatasetSplit> {
    const TV_TOLERANCE: f64 = 0.02;
    if split.is_empty() {
        return Err(Error::invalid("cannot subsample an empty split"));
    }
    let (k_strata, n_sites) = (split.provenance.n_strata, split.provenance.n_sites);
    validate_stochastic(target, k_strata, n_sites, "target")?;

    let mut cells: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); n_sites]; k_strata];
    for (i, r) in split.records.iter().enumerate() {
        cells[r.d][r.z].push(i);
    }

    let mut rng = seed::rng(seed::mix(seed, &[stream::SUBSAMPLE]));
    let mut keep = vec![false; split.len()];
    for d in 0..k_strata {
        let available: usize = cells[d].iter().map(Vec::len).sum();
        if available == 0 {
            continue;
        }
        // Largest stratum size reachable without exceeding any cell.
        let mut size = f64::INFINITY;
        for z in 0..n_sites {
            if target[d][z] > 0.0 {
                if cells[d][z].is_empty() {
                    return Err(Error::Infeasible {
                        d,
                        z,
                        needed: 1,
                        available: 0,
                    });
                }
                size = size.min(cells[d][z].len() as f64 / target[d][z]);
            }
        }
        let size = size.floor();
        let mut counts: Vec<usize> = (0..n_sites)
            .map(|z| ((target[d][z] * size).round() as usize).min(cells[d][z].len()))
            .collect();
        let total: usize = counts.iter().sum();
        let tv: f64 = 0.5
            * (0..n_sites)
                .map(|z| (counts[z] as f64 / total.max(1) as f64 - target[d][z]).abs())
                .sum::<f64>();
        if total == 0 || tv > TV_TOLERANCE {
            let (z, _) = (0..n_sites)
                .map(|z| (z, target[d][z] - counts[z] as f64 / total.max(1) as f64))
                .fold((0, f64::NEG_INFINITY), |best, cur| {
                    if cur.1 > best.1 {
                        cur
                    } else {
                        best
                    }
                });
            let needed = (target[d][z] * available as f64).ceil() as usize;
            return Err(Error::Infeasible {
                d,
                z,
                needed: needed.max(1),
                available: cells[d][z].len(),
            });
        }
        for z in 0..n_sites {
            let cell = &mut cells[d][z];
            let chosen = rand::seq::index::sample(&mut rng, cell.len(), counts[z]);
            for j in chosen.iter() {
                keep[cell[j]] = true;
            }
            counts[z] = 0;
        }
    }

    let records = split
        .records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();
    let mut provenance = split.provenance.clone();
    provenance.selection_matrix = target.to_vec();
    Ok(DatasetSplit {
        records,
        role: split.role,
        provenance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OodMode {
    Independent,
    Reversed,
    HeldOutSite(usize),
}

impl OodMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(OodMode::Independent),
            "reversed" => Ok(OodMode::Reversed),
            _ => {
                let k = s
                    .strip_prefix("held_out_site=")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| Error::Config(format!("unknown ood mode {s}")))?;
                Ok(OodMode::HeldOutSite(k))
            }
        }
    }

    pub fn label(self) -> String {
        match self {
            OodMode::Independent => "independent".into(),
            OodMode::Reversed => "reversed".into(),
            OodMode::HeldOutSite(k) => format!("held_out_site={k}"),
        }
    }
}

/// Training and OOD configurations differing only in their selection matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct OodShift {
    pub train: ScmConfig,
    pub ood: ScmConfig,
}

pub fn make_ood_shift(cfg: &ScmConfig, mode: OodMode) -> Result<OodShift> {
    cfg.validate()?;
    let s = cfg.n_sites;
    let mut train = cfg.clone();
    let mut ood = cfg.clone();
    match mode {
        OodMode::Independent => {
            ood.selection_matrix = vec![vec![1.0 / s as f64; s]; cfg.n_strata];
        }
        OodMode::Reversed => {
            ood.selection_matrix = cfg
                .selection_matrix
                .iter()
                .map(|row| row.iter().rev().cloned().collect())
                .collect();
        }
        OodMode::HeldOutSite(k) => {
            if k >= s {
                return Err(Error::invalid(format!(
                    "held-out site {k} out of range 0..{s}"
                )));
            }
            if s < 2 {
                return Err(Error::invalid("holding out a site needs at least 2 sites"));
            }
            train.selection_matrix = cfg
                .selection_matrix
                .iter()
                .map(|row| {
                    let rest: f64 = row
                        .iter()
                        .enumerate()
                        .filter(|(z, _)| *z != k)
                        .map(|(_, v)| v)
                        .sum();
                    row.iter()
                        .enumerate()
                        .map(|(z, &v)| {
                            if z == k {
                                0.0
                            } else if rest > 0.0 {
                                v / rest
                            } else {
                                1.0 / (s - 1) as f64
                            }
                        })
                        .collect()
                })
                .collect();
            ood.selection_matrix =
                vec![(0..s).map(|z| if z == k { 1.0 } else { 0.0 }).collect(); cfg.n_strata];
        }
    }
    Ok(OodShift { train, ood })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record_is_fully_populated() {
        let split = sample_dataset(&ScmConfig::reference(), 1).unwrap();
        assert_eq!(split.len(), 1);
        let r = &split.records[0];
        assert_eq!(r.x.len(), 16);
        assert_eq!(r.y.iter().sum::<f64>(), 1.0);
        assert!(r.z < 5 && r.d < 2);
        assert!(r.latent.is_some());
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut cfg = ScmConfig::default();
        cfg.selection_matrix[0][0] += 0.1;
        assert!(sample_dataset(&cfg, 10).is_err());
        let cfg = ScmConfig {
            artifact_strength: -1.0,
            ..ScmConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(sample_dataset(&ScmConfig::default(), 0).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = ScmConfig::reference();
        assert_eq!(
            sample_dataset(&cfg, 200).unwrap(),
            sample_dataset(&cfg, 200).unwrap()
        );
        let other = sample_split(&cfg, 200, SplitRole::SourceVal).unwrap();
        assert_ne!(other.records, sample_dataset(&cfg, 200).unwrap().records);
    }

    #[test]
    fn mechanism_ignores_selection_matrix() {
        let a = ScmConfig::reference().mechanism();
        let b = ScmConfig::default().mechanism();
        assert_eq!(a, b);
    }

    #[test]
    fn independent_shift_is_uniform() {
        let shift = make_ood_shift(&ScmConfig::reference(), OodMode::Independent).unwrap();
        for row in &shift.ood.selection_matrix {
            assert!(row.iter().all(|&v| v == 0.2));
        }
        assert_eq!(shift.train, ScmConfig::reference());
    }

    #[test]
    fn reversed_shift_mirrors_sites() {
        let cfg = ScmConfig {
            n_sites: 4,
            selection_matrix: vec![vec![0.45, 0.45, 0.05, 0.05], vec![0.05, 0.05, 0.45, 0.45]],
            ..ScmConfig::default()
        };
        let shift = make_ood_shift(&cfg, OodMode::Reversed).unwrap();
        assert_eq!(shift.ood.selection_matrix[0], vec![0.05, 0.05, 0.45, 0.45]);
        let mut expected = cfg.clone();
        expected.selection_matrix = shift.ood.selection_matrix.clone();
        assert_eq!(shift.ood, expected);
    }

    #[test]
    fn held_out_site_shift() {
        let shift = make_ood_shift(&ScmConfig::default(), OodMode::HeldOutSite(4)).unwrap();
        for row in &shift.train.selection_matrix {
            assert_eq!(row[4], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for row in &shift.ood.selection_matrix {
            assert_eq!(row, &vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        }
        assert!(make_ood_shift(&ScmConfig::default(), OodMode::HeldOutSite(5)).is_err());
    }

    #[test]
    fn ood_mode_parsing() {
        assert_eq!(OodMode::parse("reversed").unwrap(), OodMode::Reversed);
        assert_eq!(
            OodMode::parse("held_out_site=3").unwrap(),
            OodMode::HeldOutSite(3)
        );
        assert!(OodMode::parse("held_out_site=x").is_err());
    }

    #[test]
    fn injection_with_current_distribution_keeps_most_records() {
        let split = sample_dataset(&ScmConfig::reference(), 4000).unwrap();
        let target = split.empirical_selection();
        let out = inject_spurious_correlation(&split, &target, 1).unwrap();
        assert!(out.len() as f64 >= 0.9 * split.len() as f64);
        assert!(max_tv(&out.empirical_selection(), &target) < 0.02);
    }

    #[test]
    fn injection_enriches_stratum_zero() {
        let cfg = ScmConfig {
            n_sites: 4,
            selection_matrix: vec![vec![0.25; 4]; 2],
            ..ScmConfig::default()
        };
        let split = sample_dataset(&cfg, 6000).unwrap();
        let target = vec![vec![0.45, 0.45, 0.05, 0.05], vec![0.05, 0.05, 0.45, 0.45]];
        let out = inject_spurious_correlation(&split, &target, 3).unwrap();
        let got = out.empirical_selection();
        assert!(max_tv(&got, &target) < 0.02, "{got:?}");
        // Records are untouched copies.
        for r in &out.records {
            assert!(split.records.contains(r));
        }
    }

    #[test]
    fn injection_zero_column_empties_the_cell() {
        let split = sample_dataset(&ScmConfig::default(), 3000).unwrap();
        let target = vec![vec![0.25, 0.25, 0.25, 0.25, 0.0]; 2];
        let out = inject_spurious_correlation(&split, &target, 0).unwrap();
        assert!(out.records.iter().all(|r| r.z != 4));
    }

    #[test]
    fn injection_reports_infeasible_cell() {
        let cfg = ScmConfig {
            selection_matrix: vec![vec![0.25, 0.25, 0.25, 0.25, 0.0]; 2],
            ..ScmConfig::default()
        };
        let split = sample_dataset(&cfg, 500).unwrap();
        let err = inject_spurious_correlation(&split, &vec![vec![0.2; 5]; 2], 0).unwrap_err();
        assert!(matches!(err, Error::Infeasible { z: 4, .. }), "{err}");
    }

    fn max_tv(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| 0.5 * x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}
