//! Statistical and structural properties of the simulator.

use civdg::scm::{
    inject_spurious_correlation, make_ood_shift, sample_dataset, sample_split,
    sample_with_site_intervention, DatasetSplit, OodMode, ScmConfig, SplitRole, TaskMode,
};
use nalgebra::{DMatrix, DVector};

/// Chi-square critical value, 1 degree of freedom, p = 0.01.
const CHI2_1DF_P01: f64 = 6.634_896_601;

fn plug_in_mutual_information(split: &DatasetSplit) -> f64 {
    let (k, s) = (split.provenance.n_strata, split.provenance.n_sites);
    let n = split.len() as f64;
    let mut joint = vec![vec![0.0; s]; k];
    for r in &split.records {
        joint[r.d][r.z] += 1.0 / n;
    }
    let pd: Vec<f64> = joint.iter().map(|row| row.iter().sum()).collect();
    let pz: Vec<f64> = (0..s)
        .map(|z| joint.iter().map(|row| row[z]).sum())
        .collect();
    let mut mi = 0.0;
    for d in 0..k {
        for z in 0..s {
            if joint[d][z] > 0.0 {
                mi += joint[d][z] * (joint[d][z] / (pd[d] * pz[z])).ln();
            }
        }
    }
    mi
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[test]
fn labels_ignore_site_interventions() {
    let cfg = ScmConfig {
        seed: 17,
        ..ScmConfig::reference()
    };
    let n = 10_000;
    let natural = sample_split(&cfg, n, SplitRole::Train).unwrap();
    for shift in 1..cfg.n_sites {
        let moved =
            sample_with_site_intervention(&cfg, n, SplitRole::Train, &|i, _| (i + shift) % 5)
                .unwrap();
        let mut sites_changed = 0;
        for (a, b) in natural.records.iter().zip(&moved.records) {
            assert_eq!(a.d, b.d);
            let (la, lb) = (a.latent.as_ref().unwrap(), b.latent.as_ref().unwrap());
            assert_eq!(la.y_r, lb.y_r);
            assert_eq!(la.u, lb.u);
            assert_eq!(a.y, b.y, "label moved with the site");
            sites_changed += usize::from(a.z != b.z);
        }
        assert!(sites_changed > n / 2);
    }
}

#[test]
fn multi_label_outcomes_ignore_site_interventions() {
    let cfg = ScmConfig {
        n_classes: 3,
        task_mode: TaskMode::MultiLabel,
        label_noise: 0.1,
        seed: 3,
        ..ScmConfig::reference()
    };
    let a = sample_dataset(&cfg, 2000).unwrap();
    let b = sample_with_site_intervention(&cfg, 2000, SplitRole::Train, &|_, d| 4 * d).unwrap();
    for (ra, rb) in a.records.iter().zip(&b.records) {
        assert_eq!(ra.y, rb.y);
    }
}

#[test]
fn uniform_selection_gives_independent_sites() {
    let cfg = ScmConfig {
        seed: 5,
        ..ScmConfig::default()
    };
    let split = sample_dataset(&cfg, 10_000).unwrap();
    let mi = plug_in_mutual_information(&split);
    assert!(mi < 0.01, "MI {mi}");
}

#[test]
fn sites_are_uncorrelated_with_confounder_within_strata() {
    let cfg = ScmConfig {
        seed: 8,
        ..ScmConfig::reference()
    };
    let split = sample_dataset(&cfg, 10_000).unwrap();
    for d in 0..cfg.n_strata {
        let rows: Vec<_> = split.records.iter().filter(|r| r.d == d).collect();
        for z in 0..cfg.n_sites {
            let onehot: Vec<f64> = rows.iter().map(|r| f64::from(u8::from(r.z == z))).collect();
            if onehot.iter().all(|&v| v == 0.0) {
                continue;
            }
            for k in 0..cfg.n_classes {
                let u: Vec<f64> = rows
                    .iter()
                    .map(|r| r.latent.as_ref().unwrap().u[k])
                    .collect();
                let c = correlation(&onehot, &u);
                assert!(c.abs() < 0.03, "d={d} z={z} u{k}: corr {c}");
            }
        }
    }
}

#[test]
fn linear_probe_recovers_labels_without_nuisance() {
    let cfg = ScmConfig {
        artifact_strength: 0.0,
        confounder_strength: 0.0,
        label_noise: 0.0,
        seed: 21,
        ..ScmConfig::default()
    };
    let train = sample_split(&cfg, 4000, SplitRole::Train).unwrap();
    let test = sample_split(&cfg, 4000, SplitRole::IdTest).unwrap();
    let design = |s: &DatasetSplit| {
        DMatrix::from_fn(s.len(), cfg.feature_dim + 1, |i, j| {
            if j == cfg.feature_dim {
                1.0
            } else {
                s.records[i].x[j]
            }
        })
    };
    let sign = |s: &DatasetSplit| {
        DVector::from_iterator(
            s.len(),
            s.records
                .iter()
                .map(|r| if r.label_index() == 1 { 1.0 } else { -1.0 }),
        )
    };
    let x = design(&train);
    let w = (x.transpose() * &x)
        .cholesky()
        .unwrap()
        .solve(&(x.transpose() * sign(&train)));
    let scores = design(&test) * w;
    let truth = sign(&test);
    let correct = scores
        .iter()
        .zip(truth.iter())
        .filter(|(s, t)| s.signum() == **t)
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.95, "probe accuracy {acc}");
}

#[test]
fn enrichment_matches_target_and_preserves_labels() {
    let base = ScmConfig {
        n_sites: 4,
        selection_matrix: vec![vec![0.25; 4]; 2],
        seed: 2,
        ..ScmConfig::default()
    };
    let full = sample_dataset(&base, 5000).unwrap();
    let target = vec![vec![0.45, 0.45, 0.05, 0.05], vec![0.05, 0.05, 0.45, 0.45]];
    let kept = inject_spurious_correlation(&full, &target, 99).unwrap();
    let empirical = kept.empirical_selection();
    for d in 0..2 {
        let gap = tv(&empirical[d], &target[d]);
        assert!(gap <= 0.02, "stratum {d}: TV {gap}");
    }
    // Every kept record appears unchanged in the source, in order.
    let mut it = full.records.iter();
    for r in &kept.records {
        assert!(it.any(|s| s == r));
    }

    // Kept versus dropped records share label frequencies within each stratum.
    let kept_set: Vec<bool> = {
        let mut flags = vec![false; full.len()];
        let mut j = 0;
        for (i, r) in full.records.iter().enumerate() {
            if j < kept.len() && kept.records[j] == *r {
                flags[i] = true;
                j += 1;
            }
        }
        flags
    };
    for d in 0..2 {
        let mut table = [[0.0f64; 2]; 2];
        for (r, &k) in full.records.iter().zip(&kept_set) {
            if r.d == d {
                table[usize::from(k)][r.label_index()] += 1.0;
            }
        }
        let total: f64 = table.iter().flatten().sum();
        let mut chi2 = 0.0;
        for g in 0..2 {
            for y in 0..2 {
                let row: f64 = table[g].iter().sum();
                let col = table[0][y] + table[1][y];
                let expected = row * col / total;
                chi2 += (table[g][y] - expected).powi(2) / expected;
            }
        }
        assert!(chi2 < CHI2_1DF_P01, "stratum {d}: chi2 {chi2}");
    }
}

#[test]
fn sampled_selection_tracks_the_matrix() {
    let cfg = ScmConfig {
        seed: 12,
        ..ScmConfig::reference()
    };
    let split = sample_dataset(&cfg, 20_000).unwrap();
    let empirical = split.empirical_selection();
    for d in 0..cfg.n_strata {
        let gap = tv(&empirical[d], &cfg.selection_matrix[d]);
        assert!(gap < 0.02, "stratum {d}: TV {gap}");
        assert_eq!(split.cell_counts()[d][2], 0);
    }
}

#[test]
fn ood_shifts_only_touch_selection() {
    let cfg = ScmConfig::reference();
    for mode in [
        OodMode::Independent,
        OodMode::Reversed,
        OodMode::HeldOutSite(4),
    ] {
        let shift = make_ood_shift(&cfg, mode).unwrap();
        for c in [&shift.train, &shift.ood] {
            assert_eq!(c.mechanism(), cfg.mechanism());
            let restored = ScmConfig {
                selection_matrix: cfg.selection_matrix.clone(),
                ..c.clone()
            };
            assert_eq!(restored, cfg);
        }
    }
    let held = make_ood_shift(&cfg, OodMode::HeldOutSite(4)).unwrap();
    let train = sample_dataset(&held.train, 5000).unwrap();
    assert!(train.records.iter().all(|r| r.z != 4));
    let ood = sample_split(&held.ood, 1000, SplitRole::OodTest).unwrap();
    assert!(ood.records.iter().all(|r| r.z == 4));
    assert!(make_ood_shift(&cfg, OodMode::HeldOutSite(5)).is_err());
}

#[test]
fn splits_are_reproducible_and_role_specific() {
    let cfg = ScmConfig {
        seed: 44,
        ..ScmConfig::reference()
    };
    let a = sample_split(&cfg, 500, SplitRole::SourceVal).unwrap();
    let b = sample_split(&cfg, 500, SplitRole::SourceVal).unwrap();
    assert_eq!(a, b);
    let bits = |s: &DatasetSplit| -> Vec<u64> {
        s.records
            .iter()
            .flat_map(|r| r.x.iter().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    let c = sample_split(&cfg, 500, SplitRole::IdTest).unwrap();
    assert_ne!(bits(&a), bits(&c));
    let other = sample_split(&ScmConfig { seed: 45, ..cfg }, 500, SplitRole::SourceVal).unwrap();
    assert_ne!(bits(&a), bits(&other));
}
