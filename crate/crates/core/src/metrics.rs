//! Accuracy, worst-group accuracy, calibration, AUROC, group-fairness gaps and
//! the site-conditional residual diagnostic.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::scm::TaskMode;
use crate::tensor::DenseArray;

pub const DEFAULT_ECE_BINS: usize = 15;

/// Per-sample scores and labels with their site and stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionLog {
    pub scores: Vec<Vec<f64>>,
    /// One-hot (single-label) or binary (multi-label).
    pub labels: Vec<Vec<f64>>,
    pub z: Vec<usize>,
    pub d: Vec<usize>,
    pub task_mode: TaskMode,
}

impl PredictionLog {
    pub fn new(
        scores: Vec<Vec<f64>>,
        labels: Vec<Vec<f64>>,
        z: Vec<usize>,
        d: Vec<usize>,
        task_mode: TaskMode,
    ) -> Result<Self> {
        let n = scores.len();
        if labels.len() != n || z.len() != n || d.len() != n {
            return Err(Error::dim("prediction log columns differ in length"));
        }
        let c = scores.first().map_or(0, Vec::len);
        for (i, (s, y)) in scores.iter().zip(&labels).enumerate() {
            if s.len() != c || y.len() != c {
                return Err(Error::dim(format!("row {i} has inconsistent class count")));
            }
            if s.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid(format!(
                    "row {i} has a score outside [0, 1]"
                )));
            }
            if y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::invalid(format!("row {i} has a non-binary label")));
            }
            if task_mode == TaskMode::SingleLabel {
                if (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!("row {i} scores do not sum to 1")));
                }
                if y.iter().filter(|&&v| v == 1.0).count() != 1 {
                    return Err(Error::invalid(format!("row {i} label is not one-hot")));
                }
            }
        }
        Ok(Self {
            scores,
            labels,
            z,
            d,
            task_mode,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    /// Argmax with lowest-index tie-break.
    pub fn predicted_class(&self, i: usize) -> usize {
        let s = &self.scores[i];
        let mut best = 0;
        for k in 1..s.len() {
            if s[k] > s[best] {
                best = k;
            }
        }
        best
    }

    pub fn true_class(&self, i: usize) -> usize {
        self.labels[i].iter().position(|&v| v == 1.0).unwrap_or(0)
    }

    /// Binary decision for class `k`: one-vs-rest argmax for single-label,
    /// a 0.5 threshold for multi-label.
    pub fn predicts_positive(&self, i: usize, k: usize) -> bool {
        match self.task_mode {
            TaskMode::SingleLabel => self.predicted_class(i) == k,
            TaskMode::MultiLabel => self.scores[i][k] >= 0.5,
        }
    }

    /// 1/0 correctness for single-label, per-label agreement rate for multi-label.
    pub fn correctness(&self, i: usize) -> f64 {
        match self.task_mode {
            TaskMode::SingleLabel => (self.predicted_class(i) == self.true_class(i)) as u8 as f64,
            TaskMode::MultiLabel => {
                let c = self.n_classes();
                let hits = (0..c)
                    .filter(|&k| self.predicts_positive(i, k) == (self.labels[i][k] == 1.0))
                    .count();
                hits as f64 / c as f64
            }
        }
    }

    /// Residuals `y − p` as a `B × C` array.
    pub fn residuals(&self) -> Result<DenseArray> {
        let rows: Vec<Vec<f64>> = self
            .labels
            .iter()
            .zip(&self.scores)
            .map(|(y, p)| y.iter().zip(p).map(|(a, b)| a - b).collect())
            .collect();
        DenseArray::from_rows(&rows)
    }

    pub fn subset(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        Self {
            scores: idx.iter().map(|&i| self.scores[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
            z: idx.iter().map(|&i| self.z[i]).collect(),
            d: idx.iter().map(|&i| self.d[i]).collect(),
            task_mode: self.task_mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    BySite,
    ByStratum,
    BySiteStratum,
    /// Site × true class, the default worst-group definition.
    BySiteLabel,
}

impl Grouping {
    pub fn as_str(self) -> &'static str {
        match self {
            Grouping::BySite => "z",
            Grouping::ByStratum => "d",
            Grouping::BySiteStratum => "z_d",
            Grouping::BySiteLabel => "z_y",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupKey {
    pub z: Option<usize>,
    pub d: Option<usize>,
    pub y: Option<usize>,
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(z) = self.z {
            parts.push(format!("z={z}"));
        }
        if let Some(d) = self.d {
            parts.push(format!("d={d}"));
        }
        if let Some(y) = self.y {
            parts.push(format!("y={y}"));
        }
        write!(f, "{}", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRow {
    pub key: GroupKey,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAccuracy {
    pub accuracy: f64,
    pub wg_accuracy: f64,
    pub worst_group: GroupKey,
    pub table: Vec<GroupRow>,
    /// Groups of the id grid with no samples; excluded from the minimum.
    pub empty_groups: Vec<GroupKey>,
}

fn group_key(log: &PredictionLog, i: usize, grouping: Grouping) -> GroupKey {
    let (z, d) = (log.z[i], log.d[i]);
    let y = match log.task_mode {
        TaskMode::SingleLabel => log.true_class(i),
        TaskMode::MultiLabel => log.labels[i]
            .iter()
            .enumerate()
            .map(|(k, &v)| (v as usize) << k)
            .sum(),
    };
    match grouping {
        Grouping::BySite => GroupKey {
            z: Some(z),
            d: None,
            y: None,
        },
        Grouping::ByStratum => GroupKey {
            z: None,
            d: Some(d),
            y: None,
        },
        Grouping::BySiteStratum => GroupKey {
            z: Some(z),
            d: Some(d),
            y: None,
        },
        Grouping::BySiteLabel => GroupKey {
            z: Some(z),
            d: None,
            y: Some(y),
        },
    }
}

pub fn accuracy_and_wg(log: &PredictionLog, grouping: Grouping) -> Result<GroupAccuracy> {
    if log.is_empty() {
        return Err(Error::invalid("empty prediction log"));
    }
    let mut groups: BTreeMap<GroupKey, (usize, f64)> = BTreeMap::new();
    let mut total = 0.0;
    for i in 0..log.len() {
        let c = log.correctness(i);
        total += c;
        let e = groups
            .entry(group_key(log, i, grouping))
            .or_insert((0, 0.0));
        e.0 += 1;
        e.1 += c;
    }
    let table: Vec<GroupRow> = groups
        .iter()
        .map(|(&key, &(count, hits))| GroupRow {
            key,
            count,
            accuracy: hits / count as f64,
        })
        .collect();
    let worst = table
        .iter()
        .fold(None::<&GroupRow>, |best, row| match best {
            Some(b) if b.accuracy <= row.accuracy => Some(b),
            _ => Some(row),
        })
        .expect("nonempty");

    let max_of =
        |f: &dyn Fn(&GroupKey) -> Option<usize>| table.iter().filter_map(|r| f(&r.key)).max();
    let zs = max_of(&|k| k.z)
        .map(|m| (0..=m).map(Some).collect())
        .unwrap_or(vec![None]);
    let ds = max_of(&|k| k.d)
        .map(|m| (0..=m).map(Some).collect())
        .unwrap_or(vec![None]);
    // Label combinations of a multi-label log are not enumerated; only the
    // observed ones count.
    let ys: Vec<Option<usize>> = match (grouping, log.task_mode) {
        (Grouping::BySiteLabel, TaskMode::SingleLabel) => (0..log.n_classes()).map(Some).collect(),
        (Grouping::BySiteLabel, TaskMode::MultiLabel) => {
            let mut seen: Vec<_> = table.iter().map(|r| r.key.y).collect();
            seen.sort_unstable();
            seen.dedup();
            seen
        }
        _ => vec![None],
    };
    let mut empty_groups = Vec::new();
    for &z in &zs {
        for &d in &ds {
            for &y in &ys {
                let key = GroupKey { z, d, y };
                if !groups.contains_key(&key) {
                    empty_groups.push(key);
                }
            }
        }
    }
    Ok(GroupAccuracy {
        accuracy: total / log.len() as f64,
        wg_accuracy: worst.accuracy,
        worst_group: worst.key,
        table,
        empty_groups,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EceBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EceReport {
    pub ece: f64,
    pub bins: Vec<EceBin>,
}

/// Index of the right-closed bin `(b/n, (b+1)/n]` holding `conf`; 0 lands in bin 0.
fn bin_index(conf: f64, n: usize) -> usize {
    let nf = n as f64;
    let mut b = ((conf * nf).ceil() as isize - 1).clamp(0, n as isize - 1) as usize;
    while b > 0 && conf <= b as f64 / nf {
        b -= 1;
    }
    while b + 1 < n && conf > (b + 1) as f64 / nf {
        b += 1;
    }
    b
}

/// Expected calibration error over equal-width confidence bins.
pub fn ece(log: &PredictionLog, n_bins: usize) -> Result<EceReport> {
    if n_bins == 0 {
        return Err(Error::invalid("n_bins must be at least 1"));
    }
    if log.task_mode != TaskMode::SingleLabel {
        return Err(Error::invalid("ECE is defined for single-label logs"));
    }
    if log.is_empty() {
        return Err(Error::invalid("empty prediction log"));
    }
    let mut count = vec![0usize; n_bins];
    let mut hits = vec![0.0; n_bins];
    let mut conf = vec![0.0; n_bins];
    for i in 0..log.len() {
        let pred = log.predicted_class(i);
        let c = log.scores[i][pred];
        let b = bin_index(c, n_bins);
        count[b] += 1;
        conf[b] += c;
        hits[b] += log.correctness(i);
    }
    let n = log.len() as f64;
    let mut total = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let (acc, cf) = if count[b] > 0 {
                (hits[b] / count[b] as f64, conf[b] / count[b] as f64)
            } else {
                (0.0, 0.0)
            };
            total += count[b] as f64 / n * (acc - cf).abs();
            EceBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: count[b],
                accuracy: acc,
                confidence: cf,
            }
        })
        .collect();
    Ok(EceReport { ece: total, bins })
}

/// Area under the ROC curve by the Mann–Whitney statistic with mid-ranks.
/// `None` when either class is missing.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; ties share the average rank.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AurocReport {
    pub macro_auroc: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes lacking positives or negatives.
    pub excluded: Vec<usize>,
}

pub fn macro_auroc(log: &PredictionLog) -> Result<AurocReport> {
    let c = log.n_classes();
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let s: Vec<f64> = log.scores.iter().map(|r| r[k]).collect();
            let pos: Vec<bool> = log.labels.iter().map(|r| r[k] == 1.0).collect();
            binary_auroc(&s, &pos)
        })
        .collect();
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::MetricUndefined(
            "every class lacks positives or negatives".into(),
        ));
    }
    let excluded = per_class
        .iter()
        .enumerate()
        .filter(|(_, a)| a.is_none())
        .map(|(k, _)| k)
        .collect();
    Ok(AurocReport {
        macro_auroc: included.iter().sum::<f64>() / included.len() as f64,
        per_class,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairnessReport {
    pub eod: f64,
    pub dpd: f64,
    /// `(eod, dpd)` per binarized task.
    pub per_task: Vec<(f64, f64)>,
    /// Group pairs whose TPR or FPR gap was undefined.
    pub skipped: Vec<String>,
}

/// Binarized tasks: the positive class for binary single-label logs, one
/// task per class otherwise.
fn binary_tasks(log: &PredictionLog) -> Vec<usize> {
    match (log.task_mode, log.n_classes()) {
        (TaskMode::SingleLabel, 2) => vec![1],
        (_, c) => (0..c).collect(),
    }
}

/// Demographic-parity and equalized-odds differences across `groups`
/// (usually the stratum column), macro-averaged over binarized tasks.
pub fn fairness_gaps(log: &PredictionLog, groups: &[usize]) -> Result<FairnessReport> {
    if groups.len() != log.len() {
        return Err(Error::dim("group column length differs from log"));
    }
    let ids: Vec<usize> = {
        let mut g = groups.to_vec();
        g.sort_unstable();
        g.dedup();
        g
    };
    if ids.len() < 2 {
        return Err(Error::invalid(
            "fairness gaps need at least two protected groups",
        ));
    }
    let mut per_task = Vec::new();
    let mut skipped = Vec::new();
    for k in binary_tasks(log) {
        // (n, predicted positive, positives, true positives, negatives, false positives)
        let mut stats = vec![[0usize; 6]; ids.len()];
        for i in 0..log.len() {
            let g = ids.binary_search(&groups[i]).expect("present");
            let yhat = log.predicts_positive(i, k);
            let y = log.labels[i][k] == 1.0;
            let s = &mut stats[g];
            s[0] += 1;
            s[1] += yhat as usize;
            if y {
                s[2] += 1;
                s[3] += yhat as usize;
            } else {
                s[4] += 1;
                s[5] += yhat as usize;
            }
        }
        let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        let mut dpd: f64 = 0.0;
        let mut eod: f64 = 0.0;
        for a in 0..ids.len() {
            for b in a + 1..ids.len() {
                let (sa, sb) = (&stats[a], &stats[b]);
                let pa = sa[1] as f64 / sa[0] as f64;
                let pb = sb[1] as f64 / sb[0] as f64;
                dpd = dpd.max((pa - pb).abs());
                let tpr = rate(sa[3], sa[2])
                    .zip(rate(sb[3], sb[2]))
                    .map(|(x, y)| (x - y).abs());
                let fpr = rate(sa[5], sa[4])
                    .zip(rate(sb[5], sb[4]))
                    .map(|(x, y)| (x - y).abs());
                if tpr.is_none() || fpr.is_none() {
                    skipped.push(format!(
                        "task {k}: groups {} vs {} lack {}",
                        ids[a],
                        ids[b],
                        if tpr.is_none() {
                            "positives"
                        } else {
                            "negatives"
                        }
                    ));
                }
                if let Some(gap) = tpr.into_iter().chain(fpr).reduce(f64::max) {
                    eod = eod.max(gap);
                }
            }
        }
        per_task.push((eod, dpd));
    }
    let n = per_task.len() as f64;
    Ok(FairnessReport {
        eod: per_task.iter().map(|t| t.0).sum::<f64>() / n,
        dpd: per_task.iter().map(|t| t.1).sum::<f64>() / n,
        per_task,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratumViolation {
    pub d: usize,
    pub violation: f64,
    pub n_sites: usize,
    /// Only one site present, so the statistic is trivially zero.
    pub single_site: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViolationReport {
    pub per_stratum: Vec<StratumViolation>,
    pub max: f64,
}

/// Within each stratum, the largest gap between a site's mean residual and
/// the stratum's mean residual over sites and classes.
pub fn moment_violation(
    residuals: &DenseArray,
    strata: &[usize],
    sites: &[usize],
) -> Result<ViolationReport> {
    if residuals.rows() != strata.len() || strata.len() != sites.len() {
        return Err(Error::dim(
            "residual, stratum and site columns differ in length",
        ));
    }
    let c = residuals.cols();
    let mut by_stratum: BTreeMap<usize, (Vec<f64>, usize, BTreeMap<usize, (Vec<f64>, usize)>)> =
        BTreeMap::new();
    for i in 0..strata.len() {
        let e = by_stratum
            .entry(strata[i])
            .or_insert_with(|| (vec![0.0; c], 0, BTreeMap::new()));
        let row = residuals.row(i);
        e.0.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        e.1 += 1;
        let s = e.2.entry(sites[i]).or_insert_with(|| (vec![0.0; c], 0));
        s.0.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        s.1 += 1;
    }
    let per_stratum: Vec<StratumViolation> = by_stratum
        .into_iter()
        .map(|(d, (sum, n, sites))| {
            let mut worst: f64 = 0.0;
            for (ssum, sn) in sites.values() {
                for k in 0..c {
                    worst = worst.max((ssum[k] / *sn as f64 - sum[k] / n as f64).abs());
                }
            }
            StratumViolation {
                d,
                violation: worst,
                n_sites: sites.len(),
                single_site: sites.len() == 1,
            }
        })
        .collect();
    let max = per_stratum.iter().map(|s| s.violation).fold(0.0, f64::max);
    Ok(ViolationReport { per_stratum, max })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupRow {
    pub id: usize,
    pub count: usize,
    pub accuracy: f64,
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub n: usize,
    pub accuracy: f64,
    pub wg_accuracy: f64,
    pub worst_group: GroupKey,
    pub wg_by_site: f64,
    pub wg_by_stratum: f64,
    pub wg_by_site_stratum: f64,
    pub ece: Option<EceReport>,
    pub auroc: Option<AurocReport>,
    pub fairness: Option<FairnessReport>,
    pub per_stratum: Vec<SubgroupRow>,
    pub per_site: Vec<SubgroupRow>,
    pub violation: ViolationReport,
    pub warnings: Vec<String>,
}

fn subgroup_rows(log: &PredictionLog, col: &[usize]) -> Vec<SubgroupRow> {
    let mut ids = col.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|id| {
            let sub = log.subset(|i| col[i] == id);
            let accuracy =
                (0..sub.len()).map(|i| sub.correctness(i)).sum::<f64>() / sub.len() as f64;
            SubgroupRow {
                id,
                count: sub.len(),
                accuracy,
                auroc: macro_auroc(&sub).ok().map(|a| a.macro_auroc),
            }
        })
        .collect()
}

impl MetricReport {
    pub fn compute(log: &PredictionLog, n_bins: usize) -> Result<Self> {
        let main = accuracy_and_wg(log, Grouping::BySiteLabel)?;
        let mut warnings: Vec<String> = main
            .empty_groups
            .iter()
            .map(|g| format!("empty group {g} excluded from worst-group accuracy"))
            .collect();
        let ece = match log.task_mode {
            TaskMode::SingleLabel => Some(ece(log, n_bins)?),
            TaskMode::MultiLabel => None,
        };
        let auroc = match macro_auroc(log) {
            Ok(a) => {
                for k in &a.excluded {
                    warnings.push(format!("class {k} excluded from AUROC"));
                }
                Some(a)
            }
            Err(e) => {
                warnings.push(e.to_string());
                None
            }
        };
        let fairness = match fairness_gaps(log, &log.d) {
            Ok(f) => {
                warnings.extend(f.skipped.iter().cloned());
                Some(f)
            }
            Err(e) => {
                warnings.push(e.to_string());
                None
            }
        };
        let violation = moment_violation(&log.residuals()?, &log.d, &log.z)?;
        for s in violation.per_stratum.iter().filter(|s| s.single_site) {
            warnings.push(format!("stratum {} observed at a single site", s.d));
        }
        Ok(Self {
            n: log.len(),
            accuracy: main.accuracy,
            wg_accuracy: main.wg_accuracy,
            worst_group: main.worst_group,
            wg_by_site: accuracy_and_wg(log, Grouping::BySite)?.wg_accuracy,
            wg_by_stratum: accuracy_and_wg(log, Grouping::ByStratum)?.wg_accuracy,
            wg_by_site_stratum: accuracy_and_wg(log, Grouping::BySiteStratum)?.wg_accuracy,
            ece,
            auroc,
            fairness,
            per_stratum: subgroup_rows(log, &log.d),
            per_site: subgroup_rows(log, &log.z),
            violation,
            warnings,
        })
    }

    /// Headline metrics as `(column, value)` pairs; names are stable.
    pub fn headline(&self) -> Vec<(&'static str, f64)> {
        let nan = f64::NAN;
        vec![
            ("accuracy", self.accuracy),
            ("wg_accuracy", self.wg_accuracy),
            ("wg_accuracy_z", self.wg_by_site),
            ("wg_accuracy_d", self.wg_by_stratum),
            ("wg_accuracy_zd", self.wg_by_site_stratum),
            ("ece", self.ece.as_ref().map_or(nan, |e| e.ece)),
            (
                "macro_auroc",
                self.auroc.as_ref().map_or(nan, |a| a.macro_auroc),
            ),
            ("eod", self.fairness.as_ref().map_or(nan, |f| f.eod)),
            ("dpd", self.fairness.as_ref().map_or(nan, |f| f.dpd)),
            ("moment_violation", self.violation.max),
        ]
    }

    /// Tab-separated `section\tkey\tvalue` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("section\tkey\tvalue\n");
        out.push_str(&format!("summary\tn\t{}\n", self.n));
        for (k, v) in self.headline() {
            out.push_str(&format!("summary\t{k}\t{}\n", fmt_value(v)));
        }
        out.push_str(&format!("summary\tworst_group\t{}\n", self.worst_group));
        for r in &self.per_stratum {
            out.push_str(&format!("stratum\td={}.n\t{}\n", r.id, r.count));
            out.push_str(&format!(
                "stratum\td={}.accuracy\t{}\n",
                r.id,
                fmt_value(r.accuracy)
            ));
            out.push_str(&format!(
                "stratum\td={}.auroc\t{}\n",
                r.id,
                fmt_value(r.auroc.unwrap_or(f64::NAN))
            ));
        }
        for r in &self.per_site {
            out.push_str(&format!("site\tz={}.n\t{}\n", r.id, r.count));
            out.push_str(&format!(
                "site\tz={}.accuracy\t{}\n",
                r.id,
                fmt_value(r.accuracy)
            ));
        }
        for s in &self.violation.per_stratum {
            out.push_str(&format!(
                "violation\td={}\t{}\n",
                s.d,
                fmt_value(s.violation)
            ));
        }
        if let Some(e) = &self.ece {
            for (b, bin) in e.bins.iter().enumerate() {
                out.push_str(&format!(
                    "ece_bin\t{b}\t{},{},{}\n",
                    bin.count,
                    fmt_value(bin.accuracy),
                    fmt_value(bin.confidence)
                ));
            }
        }
        for w in &self.warnings {
            out.push_str(&format!("warning\t-\t{w}\n"));
        }
        out
    }
}

pub(crate) fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.12}")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>10}", "metric", "value")?;
        for (k, v) in self.headline() {
            writeln!(
                f,
                "{k:<18} {:>10}",
                if v.is_nan() {
                    "-".into()
                } else {
                    format!("{:.2}", 100.0 * v)
                }
            )?;
        }
        writeln!(
            f,
            "{:<18} {:>10}",
            "worst_group",
            self.worst_group.to_string()
        )?;
        writeln!(f)?;
        writeln!(
            f,
            "{:<10} {:>7} {:>9} {:>9}",
            "stratum", "n", "acc", "auroc"
        )?;
        for r in &self.per_stratum {
            let auc = r
                .auroc
                .map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
            writeln!(
                f,
                "{:<10} {:>7} {:>9.2} {:>9}",
                r.id,
                r.count,
                100.0 * r.accuracy,
                auc
            )?;
        }
        writeln!(f)?;
        writeln!(f, "{:<10} {:>7} {:>9}", "site", "n", "acc")?;
        for r in &self.per_site {
            writeln!(f, "{:<10} {:>7} {:>9.2}", r.id, r.count, 100.0 * r.accuracy)?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}
