//! Experiment drivers behind the command-line verbs: dataset generation,
//! single training runs, the ablation suite, the λ sweep and table reports.
//!
//! Every emitted table starts with a `# config_hash` line naming the
//! canonical configuration that produced it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{MetricReport, PredictionLog};
use crate::scm::{make_ood_shift, sample_split, DatasetSplit, SplitRole, TaskMode};
use crate::seed;
use crate::trainer::{
    fit, lambda_sweep, select_by_validation, Ablation, Checkpoint, FitResult, SweepRow,
};

pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn split_file(role: SplitRole) -> String {
    format!("{}.civd", role.as_str())
}

/// The out-of-distribution test split. It can be evaluated with a finished
/// checkpoint but is never handed to training or selection code.
#[derive(Debug, Clone, PartialEq)]
pub struct SealedOod {
    split: DatasetSplit,
}

impl SealedOod {
    pub fn new(split: DatasetSplit) -> Result<Self> {
        if split.role != SplitRole::OodTest {
            return Err(Error::Contract(format!(
                "sealed split has role '{}'",
                split.role.as_str()
            )));
        }
        Ok(Self { split })
    }

    pub fn evaluate(&self, ckpt: &Checkpoint) -> Result<PredictionLog> {
        ckpt.predict(&self.split)
    }

    /// Read-only view for writing files and reporting columns.
    pub fn split(&self) -> &DatasetSplit {
        &self.split
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: DatasetSplit,
    pub source_val: DatasetSplit,
    pub id_test: DatasetSplit,
    pub ood: SealedOod,
}

impl Splits {
    /// Sample all four splits: the first three from the training selection
    /// mechanism, the last from the shifted one.
    pub fn sample(cfg: &ExperimentConfig) -> Result<Self> {
        let shift = make_ood_shift(&cfg.scm, cfg.data.ood_mode)?;
        let d = &cfg.data;
        Ok(Self {
            train: sample_split(&shift.train, d.n_train, SplitRole::Train)?,
            source_val: sample_split(&shift.train, d.n_val, SplitRole::SourceVal)?,
            id_test: sample_split(&shift.train, d.n_id_test, SplitRole::IdTest)?,
            ood: SealedOod::new(sample_split(&shift.ood, d.n_ood, SplitRole::OodTest)?)?,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |role: SplitRole| -> Result<DatasetSplit> {
            let path = dir.join(split_file(role));
            let split = io::read_split(&path)?;
            if split.role != role {
                return Err(Error::format(
                    &path,
                    format!("holds a '{}' split", split.role.as_str()),
                ));
            }
            Ok(split)
        };
        Ok(Self {
            train: read(SplitRole::Train)?,
            source_val: read(SplitRole::SourceVal)?,
            id_test: read(SplitRole::IdTest)?,
            ood: SealedOod::new(read(SplitRole::OodTest)?)?,
        })
    }

    /// Data for replicate `seed_index`: loaded from `data.dir` when set,
    /// otherwise sampled with `scm.seed` mixed with the replicate index.
    pub fn for_replicate(cfg: &ExperimentConfig, seed_index: usize) -> Result<Self> {
        match &cfg.data.dir {
            Some(dir) => Self::load(dir),
            None => {
                let mut c = cfg.clone();
                c.scm.seed = seed::mix(cfg.scm.seed, &[seed_index as u64]);
                Self::sample(&c)
            }
        }
    }

    fn all(&self) -> [&DatasetSplit; 4] {
        [
            &self.train,
            &self.source_val,
            &self.id_test,
            self.ood.split(),
        ]
    }
}

fn selection_text(rows: &[Vec<f64>]) -> String {
    rows.iter()
        .map(|r| {
            r.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Write the four splits and a provenance manifest; returns the file paths.
pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let splits = Splits::sample(cfg)?;
    let mut written = Vec::new();
    let mut manifest = format!(
        "# config_hash\t{}\nood_mode={}\nscm_seed={}\n",
        cfg.hash(),
        cfg.data.ood_mode.label(),
        cfg.scm.seed
    );
    for split in splits.all() {
        let role = split.role.as_str();
        let path = out.join(split_file(split.role));
        io::write_split(&path, split)?;
        written.push(path);
        if cfg.data.write_text {
            let path = out.join(format!("{role}.tsv"));
            io::write_split_text(&path, split)?;
            written.push(path);
        }
        let _ = writeln!(manifest, "{role}.file={}", split_file(split.role));
        let _ = writeln!(manifest, "{role}.n={}", split.len());
        let _ = writeln!(
            manifest,
            "{role}.selection={}",
            selection_text(&split.provenance.selection_matrix)
        );
        let _ = writeln!(
            manifest,
            "{role}.empirical_selection={}",
            selection_text(&split.empirical_selection())
        );
    }
    manifest.push_str("\n# configuration\n");
    manifest.push_str(&cfg.to_canonical_text());
    let path = out.join(MANIFEST_FILE);
    io::write_file(&path, manifest)?;
    written.push(path);
    Ok(written)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub fit: FitResult,
    /// Reports for source_val, id_test and ood_test, in that order.
    pub reports: Vec<(SplitRole, MetricReport)>,
}

/// Train on `splits` and evaluate the selected checkpoint. The OOD split is
/// only touched after `fit` has returned.
pub fn run_once(cfg: &ExperimentConfig, splits: &Splits) -> Result<RunOutcome> {
    let result = fit(&splits.train, &splits.source_val, &cfg.train, &cfg.model)?;
    let bins = cfg.metric.ece_bins;
    let mut reports = Vec::new();
    for split in [&splits.source_val, &splits.id_test] {
        let log = result.best.predict(split)?;
        reports.push((split.role, MetricReport::compute(&log, bins)?));
    }
    let log = splits.ood.evaluate(&result.best)?;
    reports.push((SplitRole::OodTest, MetricReport::compute(&log, bins)?));
    Ok(RunOutcome {
        fit: result,
        reports,
    })
}

pub fn representation_tsv(ckpt: &Checkpoint, split: &DatasetSplit) -> Result<String> {
    let h = ckpt.representations(split)?;
    let mut out = String::from("d\tz\ty");
    for j in 0..h.cols() {
        let _ = write!(out, "\th_{j}");
    }
    out.push('\n');
    let multi = split.provenance.task_mode == TaskMode::MultiLabel;
    for (i, r) in split.records.iter().enumerate() {
        let y = if multi {
            r.y.iter()
                .map(|&v| if v == 1.0 { '1' } else { '0' })
                .collect()
        } else {
            r.label_index().to_string()
        };
        let _ = write!(out, "{}\t{}\t{y}", r.d, r.z);
        for v in h.row(i) {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Train once, write the checkpoint, history and metric reports to
/// `cfg.run.out_dir`.
pub fn train(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let splits = Splits::for_replicate(cfg, 0)?;
    let outcome = run_once(cfg, &splits)?;
    let out = &cfg.run.out_dir;
    let hash = cfg.hash();
    io::save_checkpoint(&out.join("checkpoint.civd"), &outcome.fit.best)?;
    io::write_file(&out.join("history.tsv"), outcome.fit.history.to_tsv())?;
    io::write_file(&out.join("timing.tsv"), outcome.fit.history.timing_tsv())?;
    let mut tsv = format!("# config_hash\t{hash}\nsplit\tsection\tkey\tvalue\n");
    let mut text = format!("# config_hash {hash}\n");
    let _ = writeln!(
        text,
        "# selected step {} (validation metric {:.4}), {} steps run{}",
        outcome.fit.best.step,
        outcome.fit.best.val_metric,
        outcome.fit.steps_run,
        if outcome.fit.stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );
    for (role, report) in &outcome.reports {
        for line in report.to_tsv().lines().skip(1) {
            let _ = writeln!(tsv, "{}\t{line}", role.as_str());
        }
        let _ = write!(text, "\n== {} ==\n{report}", role.as_str());
        for w in &report.warnings {
            let _ = writeln!(text, "warning: {w}");
        }
    }
    io::write_file(&out.join("metrics.tsv"), tsv)?;
    io::write_file(&out.join("metrics.txt"), text)?;
    if cfg.run.dump_representations {
        for split in splits.all() {
            let path = out.join(format!("representations_{}.tsv", split.role.as_str()));
            io::write_file(&path, representation_tsv(&outcome.fit.best, split)?)?;
        }
    }
    Ok(outcome)
}

/// Seed of the run for `method_index` × `seed_index`.
pub fn run_seed(master: u64, method_index: usize, seed_index: usize) -> u64 {
    seed::mix(master, &[method_index as u64, seed_index as u64])
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub seed_index: usize,
    pub run_seed: u64,
    /// `split.metric` values, or the error message of a failed run.
    pub metrics: std::result::Result<Vec<(String, f64)>, String>,
}

impl RunRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics
            .as_ref()
            .ok()?
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| *v)
    }
}

fn outcome_metrics(outcome: &RunOutcome) -> Vec<(String, f64)> {
    let mut m = vec![
        ("val_metric".to_string(), outcome.fit.best.val_metric),
        ("best_step".to_string(), outcome.fit.best.step as f64),
    ];
    for (role, report) in &outcome.reports {
        for (k, v) in report.headline() {
            m.push((format!("{}.{k}", role.as_str()), v));
        }
    }
    m
}

const RUNS_HEADER: &str = "method\tseed_index\trun_seed\tstatus\tmetric\tvalue";

/// Long format, one metric per line; floats are written so they parse back
/// to the same bits.
pub fn runs_to_tsv(hash: &str, runs: &[RunRecord]) -> String {
    let mut out = format!("# config_hash\t{hash}\n{RUNS_HEADER}\n");
    for r in runs {
        let prefix = format!("{}\t{}\t{}", r.method, r.seed_index, r.run_seed);
        match &r.metrics {
            Ok(m) => {
                for (k, v) in m {
                    let _ = writeln!(out, "{prefix}\tok\t{k}\t{v}");
                }
            }
            Err(e) => {
                let msg = e.replace(['\t', '\n'], " ");
                let _ = writeln!(out, "{prefix}\terror: {msg}\t-\tNaN");
            }
        }
    }
    out
}

pub fn parse_runs(text: &str, origin: &Path) -> Result<(String, Vec<RunRecord>)> {
    let mut lines = text.lines();
    let hash = lines
        .next()
        .and_then(|l| l.strip_prefix("# config_hash\t"))
        .ok_or_else(|| Error::format(origin, "missing config hash line"))?
        .to_string();
    if lines.next() != Some(RUNS_HEADER) {
        return Err(Error::format(origin, "unexpected column header"));
    }
    let mut runs: Vec<RunRecord> = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = || Error::format(origin, format!("data line {}: {line:?}", i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let seed_index: usize = f[1].parse().map_err(|_| bad())?;
        let run_seed: u64 = f[2].parse().map_err(|_| bad())?;
        let same = runs
            .last()
            .is_some_and(|r| r.method == f[0] && r.seed_index == seed_index);
        if !same {
            runs.push(RunRecord {
                method: f[0].to_string(),
                seed_index,
                run_seed,
                metrics: Ok(Vec::new()),
            });
        }
        let run = runs.last_mut().expect("pushed above");
        if let Some(msg) = f[3].strip_prefix("error: ") {
            run.metrics = Err(msg.to_string());
        } else if let Ok(m) = run.metrics.as_mut() {
            m.push((f[4].to_string(), f[5].parse().map_err(|_| bad())?));
        }
    }
    Ok((hash, runs))
}

/// Columns of the ablation table, as `split.metric` names.
pub const TABLE_COLUMNS: [&str; 10] = [
    "ood_test.wg_accuracy",
    "ood_test.accuracy",
    "ood_test.wg_accuracy_zd",
    "id_test.accuracy",
    "id_test.wg_accuracy",
    "ood_test.ece",
    "ood_test.macro_auroc",
    "ood_test.eod",
    "ood_test.dpd",
    "id_test.moment_violation",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
    /// Runs that produced a finite value.
    pub n: usize,
}

impl Cell {
    fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub config_hash: String,
    pub n_seeds: usize,
    pub columns: Vec<String>,
    /// Method name and one cell per column, methods in suite order.
    pub rows: Vec<(String, Vec<Cell>)>,
    pub failures: Vec<String>,
}

impl ResultsTable {
    pub fn from_runs(hash: &str, runs: &[RunRecord]) -> Self {
        let n_seeds = runs.iter().map(|r| r.seed_index + 1).max().unwrap_or(0);
        let mut methods: Vec<String> = Vec::new();
        for r in runs {
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
        }
        let rows = methods
            .iter()
            .map(|m| {
                let cells = TABLE_COLUMNS
                    .iter()
                    .map(|col| {
                        let vals: Vec<f64> = runs
                            .iter()
                            .filter(|r| &r.method == m)
                            .filter_map(|r| r.metric(col))
                            .filter(|v| v.is_finite())
                            .collect();
                        Cell::of(&vals)
                    })
                    .collect();
                (m.clone(), cells)
            })
            .collect();
        let failures = runs
            .iter()
            .filter_map(|r| {
                r.metrics
                    .as_ref()
                    .err()
                    .map(|e| format!("{} seed {}: {e}", r.method, r.seed_index))
            })
            .collect();
        Self {
            config_hash: hash.to_string(),
            n_seeds,
            columns: TABLE_COLUMNS.iter().map(|c| c.to_string()).collect(),
            rows,
            failures,
        }
    }

    pub fn cell(&self, method: &str, column: &str) -> Option<&Cell> {
        let j = self.columns.iter().position(|c| c == column)?;
        self.rows
            .iter()
            .find(|(m, _)| m == method)
            .map(|(_, cells)| &cells[j])
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "# config_hash\t{}\nmethod\tcolumn\tmean\tstd\tn\n",
            self.config_hash
        );
        for (m, cells) in &self.rows {
            for (col, c) in self.columns.iter().zip(cells) {
                let _ = writeln!(out, "{m}\t{col}\t{:.12}\t{:.12}\t{}", c.mean, c.std, c.n);
            }
        }
        out
    }
}

impl std::fmt::Display for ResultsTable {
    /// Percentages with two decimals, `mean ± std`; cells backed by fewer
    /// than `n_seeds` runs show the count in brackets.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "# config_hash {}", self.config_hash)?;
        writeln!(
            f,
            "# {} seeds per method, scores in percent (mean ± std)",
            self.n_seeds
        )?;
        let render = |c: &Cell| {
            let mut s = if c.n == 0 {
                "-".to_string()
            } else {
                format!("{:.2} ± {:.2}", 100.0 * c.mean, 100.0 * c.std)
            };
            if c.n < self.n_seeds {
                let _ = write!(s, " [{}]", c.n);
            }
            s
        };
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(_, cells)| cells.iter().map(render).collect())
            .collect();
        let widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(j, c)| {
                body.iter()
                    .map(|r| r[j].chars().count())
                    .max()
                    .unwrap_or(0)
                    .max(c.len())
            })
            .collect();
        write!(f, "{:<10}", "method")?;
        for (c, w) in self.columns.iter().zip(&widths) {
            write!(f, "  {c:>w$}")?;
        }
        writeln!(f)?;
        for ((m, _), cells) in self.rows.iter().zip(&body) {
            write!(f, "{m:<10}")?;
            for (s, w) in cells.iter().zip(&widths) {
                let pad = w - s.chars().count();
                write!(f, "  {}{s}", " ".repeat(pad))?;
            }
            writeln!(f)?;
        }
        for e in &self.failures {
            writeln!(f, "failed: {e}")?;
        }
        Ok(())
    }
}

pub const RUNS_FILE: &str = "runs.tsv";

fn write_results(out: &Path, table: &ResultsTable) -> Result<()> {
    io::write_file(&out.join("results.txt"), table.to_string())?;
    io::write_file(&out.join("results.tsv"), table.to_tsv())
}

/// Every ablation × `n_seeds` replicates. Replicate `s` shares its data
/// across methods; failed runs are recorded and the suite carries on.
pub fn ablation_suite(cfg: &ExperimentConfig) -> Result<(Vec<RunRecord>, ResultsTable)> {
    let n = cfg.run.n_seeds;
    let data: Vec<Result<Splits>> = crate::parallel::map((0..n).collect(), cfg.run.workers, |s| {
        Splits::for_replicate(cfg, s)
    });
    let jobs: Vec<(usize, Ablation, usize)> = Ablation::ALL
        .iter()
        .enumerate()
        .flat_map(|(m, &a)| (0..n).map(move |s| (m, a, s)))
        .collect();
    let runs = crate::parallel::map(jobs, cfg.run.workers, |(m, ablation, s)| {
        let mut c = cfg.clone();
        c.train.ablation = ablation;
        c.train.seed = run_seed(cfg.train.seed, m, s);
        let metrics = match &data[s] {
            Ok(splits) => run_once(&c, splits)
                .map(|o| outcome_metrics(&o))
                .map_err(|e| e.to_string()),
            Err(e) => Err(e.to_string()),
        };
        RunRecord {
            method: ablation.as_str().to_string(),
            seed_index: s,
            run_seed: c.train.seed,
            metrics,
        }
    });
    let hash = cfg.hash();
    let text = runs_to_tsv(&hash, &runs);
    let out = &cfg.run.out_dir;
    io::write_file(&out.join(RUNS_FILE), &text)?;
    // The table always comes from the parsed file so `report` reproduces it.
    let (_, parsed) = parse_runs(&text, &out.join(RUNS_FILE))?;
    let table = ResultsTable::from_runs(&hash, &parsed);
    write_results(out, &table)?;
    Ok((runs, table))
}

/// Rebuild the results table from a stored `runs.tsv`.
pub fn report(out: &Path) -> Result<ResultsTable> {
    let path = out.join(RUNS_FILE);
    let (hash, runs) = parse_runs(&io::read_text(&path)?, &path)?;
    let table = ResultsTable::from_runs(&hash, &runs);
    write_results(out, &table)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummaryRow {
    pub lambda: f64,
    pub mean_val: f64,
    pub mean_ood: f64,
    pub mean_ood_wg: f64,
    pub n: usize,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub config_hash: String,
    /// Replicate index and row; `selected` marks each replicate's own pick.
    pub rows: Vec<(usize, SweepRow)>,
    /// One row per λ; exactly one is selected, by mean validation metric.
    pub summary: Vec<SweepSummaryRow>,
}

impl SweepReport {
    pub fn selected(&self) -> Option<&SweepSummaryRow> {
        self.summary.iter().find(|r| r.selected)
    }

    pub fn best_ood(&self) -> Option<&SweepSummaryRow> {
        self.summary
            .iter()
            .filter(|r| r.n > 0)
            .fold(None, |b: Option<&SweepSummaryRow>, r| match b {
                Some(b) if b.mean_ood >= r.mean_ood => Some(b),
                _ => Some(r),
            })
    }

    fn summarize(grid: &[f64], rows: &[(usize, SweepRow)]) -> Vec<SweepSummaryRow> {
        let mut summary: Vec<SweepSummaryRow> = grid
            .iter()
            .map(|&lambda| {
                let ok: Vec<&SweepRow> = rows
                    .iter()
                    .map(|(_, r)| r)
                    .filter(|r| r.lambda == lambda && r.error.is_none())
                    .collect();
                let mean = |f: fn(&SweepRow) -> f64| {
                    ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
                };
                SweepSummaryRow {
                    lambda,
                    mean_val: mean(|r| r.val_metric),
                    mean_ood: mean(|r| r.ood_metric),
                    mean_ood_wg: mean(|r| r.ood_wg_accuracy),
                    n: ok.len(),
                    selected: false,
                }
            })
            .collect();
        // Reuse the per-replicate rule on the means.
        let mut proxy: Vec<SweepRow> = summary
            .iter()
            .map(|s| SweepRow {
                lambda: s.lambda,
                seed: 0,
                val_metric: s.mean_val,
                ood_metric: f64::NAN,
                ood_wg_accuracy: f64::NAN,
                selected: false,
                error: (s.n == 0).then(|| "no successful runs".to_string()),
            })
            .collect();
        select_by_validation(&mut proxy);
        for (s, p) in summary.iter_mut().zip(&proxy) {
            s.selected = p.selected;
        }
        summary
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "# config_hash\t{}\nseed_index\tlambda\trun_seed\tval_metric\tood_metric\tood_wg_accuracy\tselected\tstatus\n",
            self.config_hash
        );
        for (s, r) in &self.rows {
            let status = r.error.as_ref().map_or("ok".to_string(), |e| {
                format!("error: {}", e.replace(['\t', '\n'], " "))
            });
            let _ = writeln!(
                out,
                "{s}\t{}\t{}\t{}\t{}\t{}\t{}\t{status}",
                r.lambda,
                r.seed,
                r.val_metric,
                r.ood_metric,
                r.ood_wg_accuracy,
                u8::from(r.selected)
            );
        }
        out
    }

    pub fn summary_tsv(&self) -> String {
        let mut out = format!(
            "# config_hash\t{}\nlambda\tmean_val\tmean_ood\tmean_ood_wg\tn\tselected\n",
            self.config_hash
        );
        for r in &self.summary {
            let _ = writeln!(
                out,
                "{}\t{:.12}\t{:.12}\t{:.12}\t{}\t{}",
                r.lambda,
                r.mean_val,
                r.mean_ood,
                r.mean_ood_wg,
                r.n,
                u8::from(r.selected)
            );
        }
        out
    }

    /// Inverse of [`Self::to_tsv`]; the summary is recomputed.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let hash = lines
            .next()
            .and_then(|l| l.strip_prefix("# config_hash\t"))
            .ok_or_else(|| Error::format(origin, "missing config hash line"))?
            .to_string();
        lines.next();
        let mut rows = Vec::new();
        let mut grid: Vec<f64> = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = || Error::format(origin, format!("data line {}: {line:?}", i + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let lambda = num(f[1])?;
            if !grid.contains(&lambda) {
                grid.push(lambda);
            }
            rows.push((
                f[0].parse().map_err(|_| bad())?,
                SweepRow {
                    lambda,
                    seed: f[2].parse().map_err(|_| bad())?,
                    val_metric: num(f[3])?,
                    ood_metric: num(f[4])?,
                    ood_wg_accuracy: num(f[5])?,
                    selected: f[6] == "1",
                    error: f[7].strip_prefix("error: ").map(str::to_string),
                },
            ));
        }
        let summary = Self::summarize(&grid, &rows);
        Ok(Self {
            config_hash: hash,
            rows,
            summary,
        })
    }
}

impl std::fmt::Display for SweepReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "# config_hash {}", self.config_hash)?;
        writeln!(
            f,
            "{:>8}  {:>8}  {:>8}  {:>8}  {:>3}",
            "lambda", "val", "ood", "ood_wg", "n"
        )?;
        for r in &self.summary {
            writeln!(
                f,
                "{:>8}  {:>8.2}  {:>8.2}  {:>8.2}  {:>3}{}",
                r.lambda,
                100.0 * r.mean_val,
                100.0 * r.mean_ood,
                100.0 * r.mean_ood_wg,
                r.n,
                if r.selected { "  <- selected" } else { "" }
            )?;
        }
        Ok(())
    }
}

/// The λ grid on `n_seeds` replicates. Selection uses the validation metric
/// only; OOD columns are reported for analysis.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    if cfg.train.lambda_grid.is_empty() {
        return Err(Error::Config("train.lambda_grid is empty".into()));
    }
    let per_seed = crate::parallel::map(
        (0..cfg.run.n_seeds).collect(),
        cfg.run.workers,
        |s| -> Result<Vec<(usize, SweepRow)>> {
            let splits = Splits::for_replicate(cfg, s)?;
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = seed::mix(cfg.train.seed, &[s as u64]);
            let table = lambda_sweep(
                &splits.train,
                &splits.source_val,
                splits.ood.split(),
                &train_cfg,
                &cfg.model,
                1,
            )?;
            Ok(table.rows.into_iter().map(|r| (s, r)).collect())
        },
    );
    let mut rows = Vec::new();
    for (s, r) in per_seed.into_iter().enumerate() {
        match r {
            Ok(v) => rows.extend(v),
            Err(e) => rows.extend(cfg.train.lambda_grid.iter().map(|&lambda| {
                (
                    s,
                    SweepRow {
                        lambda,
                        seed: 0,
                        val_metric: f64::NAN,
                        ood_metric: f64::NAN,
                        ood_wg_accuracy: f64::NAN,
                        selected: false,
                        error: Some(e.to_string()),
                    },
                )
            })),
        }
    }
    let report = SweepReport {
        config_hash: cfg.hash(),
        summary: SweepReport::summarize(&cfg.train.lambda_grid, &rows),
        rows,
    };
    let out = &cfg.run.out_dir;
    io::write_file(&out.join("sweep.tsv"), report.to_tsv())?;
    io::write_file(&out.join("sweep_summary.tsv"), report.summary_tsv())?;
    Ok(report)
}
