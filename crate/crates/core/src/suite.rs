//! Evaluation suites: run one training job per fold (cross-validation) or
//! per held-out subject (leave-one-subject-out) and aggregate the test
//! accuracies, plus the K / loss-mode ablation grid built on top.
//!
//! Every suite writes a `report.csv` into its output directory; each run's
//! own artifacts land in a subdirectory named after the run. A failing run
//! aborts the suite but still leaves a report flagged `partial` covering
//! the runs that finished.

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::splits::{split_cv, split_loso, SplitPlan};
use crate::train::{seeded_stream, train, LossMode, TrainConfig};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

// Continues the stream block train.rs reserves above the network-init
// streams; suites draw split shuffles from here.
const SPLIT_STREAM: u64 = (1 << 32) + 3;

/// Which evaluation protocol a suite runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SuiteMode {
    /// `n_folds`-fold cross-validation over subjects.
    Cv { n_folds: usize },
    /// One run per subject, that subject held out for testing.
    Loso,
}

/// One finished run inside a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub run: String,
    pub test_subjects: Vec<u32>,
    pub best_epoch: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Aggregate over a suite's runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub mode: SuiteMode,
    pub rows: Vec<SuiteRow>,
    /// Arithmetic mean of the per-run test accuracies.
    pub mean_test_accuracy: f64,
    /// False when a run failed and the report only covers a prefix.
    pub complete: bool,
}

/// The split plans a suite mode expands to, in run order.
pub fn suite_plans(mode: SuiteMode, corpus: &Corpus, seed: u64) -> Result<Vec<(String, SplitPlan)>> {
    let subjects = corpus.subjects();
    match mode {
        SuiteMode::Cv { n_folds } => (0..n_folds)
            .map(|fold| {
                // A fresh stream per call keeps the shuffled fold layout
                // identical across folds, so test folds tile the subjects.
                let mut rng = seeded_stream(seed, SPLIT_STREAM);
                let plan = split_cv(&subjects, n_folds, fold, &mut rng)?;
                Ok((format!("fold_{fold}"), plan))
            })
            .collect(),
        SuiteMode::Loso => subjects
            .iter()
            .map(|&s| {
                let mut rng = seeded_stream(seed, SPLIT_STREAM);
                let plan = split_loso(&subjects, s, &mut rng)?;
                Ok((format!("subject_{s}"), plan))
            })
            .collect(),
    }
}

fn csv_subjects(subjects: &[u32]) -> String {
    subjects
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

/// Renders a suite report as CSV: one row per run, then a `mean` row whose
/// status column carries the complete/partial flag.
pub fn report_csv(report: &SuiteReport) -> String {
    let mut out = String::from("run,test_subjects,best_epoch,val_accuracy,test_accuracy,status\n");
    for row in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},ok",
            row.run,
            csv_subjects(&row.test_subjects),
            row.best_epoch,
            row.val_accuracy,
            row.test_accuracy
        )
        .expect("writing to a String cannot fail");
    }
    if !report.rows.is_empty() {
        writeln!(
            out,
            "mean,,,,{},{}",
            report.mean_test_accuracy,
            if report.complete { "complete" } else { "partial" }
        )
        .expect("writing to a String cannot fail");
    } else {
        writeln!(out, "mean,,,,,partial").expect("writing to a String cannot fail");
    }
    out
}

fn write_report(out_dir: &Path, report: &SuiteReport) -> Result<()> {
    std::fs::write(out_dir.join("report.csv"), report_csv(report))?;
    Ok(())
}

fn aggregate(mode: SuiteMode, rows: Vec<SuiteRow>, complete: bool) -> SuiteReport {
    let mean_test_accuracy = if rows.is_empty() {
        f64::NAN
    } else {
        rows.iter().map(|r| r.test_accuracy).sum::<f64>() / rows.len() as f64
    };
    SuiteReport { mode, rows, mean_test_accuracy, complete }
}

/// Runs every fold / held-out subject of `mode` with the same config and
/// writes `report.csv` plus one artifact directory per run under `out_dir`.
///
/// On a per-run failure the error propagates after a partial report (the
/// completed prefix, flagged `partial`) is written.
pub fn run_suite(
    mode: SuiteMode,
    cfg: &TrainConfig,
    corpus: &Corpus,
    out_dir: &Path,
) -> Result<SuiteReport> {
    if let SuiteMode::Cv { n_folds } = mode {
        if n_folds < 2 {
            return Err(Error::Config(format!(
                "cross-validation needs at least 2 folds, got {n_folds}"
            )));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let plans = suite_plans(mode, corpus, cfg.seed)?;
    let mut rows = Vec::with_capacity(plans.len());
    for (name, plan) in plans {
        let run_dir = out_dir.join(&name);
        let manifest = match train(cfg, corpus, &plan, &run_dir) {
            Ok(m) => m,
            Err(e) => {
                let partial = aggregate(mode, rows, false);
                write_report(out_dir, &partial)?;
                return Err(e);
            }
        };
        rows.push(SuiteRow {
            run: name,
            test_subjects: plan.test.clone(),
            best_epoch: manifest.best_epoch,
            val_accuracy: manifest.best_val_accuracy,
            test_accuracy: manifest.test.accuracy,
        });
    }
    let report = aggregate(mode, rows, true);
    write_report(out_dir, &report)?;
    Ok(report)
}

/// One cell of the ablation grid: a full suite's mean test accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub k_values: Vec<usize>,
    /// Row per loss mode: (mode, mean accuracy per K in `k_values` order).
    pub rows: Vec<(LossMode, Vec<f64>)>,
}

/// Renders the grid with loss modes as rows and ensemble sizes as columns.
pub fn ablation_csv(table: &AblationTable) -> String {
    let mut out = String::from("loss_mode");
    for k in &table.k_values {
        write!(out, ",K={k}").expect("writing to a String cannot fail");
    }
    out.push('\n');
    for (mode, cells) in &table.rows {
        write!(out, "{mode}").expect("writing to a String cannot fail");
        for cell in cells {
            write!(out, ",{cell}").expect("writing to a String cannot fail");
        }
        out.push('\n');
    }
    out
}

/// Sweeps the (loss mode, K) grid, running one full suite per cell, and
/// writes `ablation.csv` into `out_dir` with each cell's suite under
/// `out_dir/<mode>_k<k>/`.
pub fn ablate(
    mode: SuiteMode,
    cfg: &TrainConfig,
    corpus: &Corpus,
    k_values: &[usize],
    loss_modes: &[LossMode],
    out_dir: &Path,
) -> Result<AblationTable> {
    if k_values.is_empty() || loss_modes.is_empty() {
        return Err(Error::Config("ablation grid must not be empty".into()));
    }
    // Fail before any training rather than mid-grid.
    for &k in k_values {
        for &m in loss_modes {
            TrainConfig { k, loss_mode: m, ..cfg.clone() }.validate()?;
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(loss_modes.len());
    for &m in loss_modes {
        let mut cells = Vec::with_capacity(k_values.len());
        for &k in k_values {
            let cell_cfg = TrainConfig { k, loss_mode: m, ..cfg.clone() };
            let cell_dir = out_dir.join(format!("{m}_k{k}"));
            let report = run_suite(mode, &cell_cfg, corpus, &cell_dir)?;
            cells.push(report.mean_test_accuracy);
        }
        rows.push((m, cells));
    }
    let table = AblationTable { k_values: k_values.to_vec(), rows };
    std::fs::write(out_dir.join("ablation.csv"), ablation_csv(&table))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ExtractorConfig;
    use crate::synth::GeneratorSpec;

    fn tiny_corpus(n_subjects: usize, seed: u64) -> Corpus {
        let spec = GeneratorSpec {
            n_subjects,
            n_sessions: 1,
            trials_per_class: 3,
            channels: 3,
            fs: 32.0,
            trial_secs: 1.0,
            n_classes: 2,
            sigma_mix: 0.2,
            noise_level: 0.4,
            session_shift: 0.0,
            seed,
        };
        Corpus { trials: crate::synth::generate(&spec).unwrap(), fs: spec.fs }
    }

    fn tiny_config(mode: LossMode) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            k: 2,
            loss_mode: mode,
            extractor: Some(ExtractorConfig {
                channels: 3,
                samples: 32,
                temporal_filters: 2,
                depth_multiplier: 2,
                separable_filters: 4,
                temporal_kernel_len: 5,
                pool1: 2,
                pool2: 4,
                dropout_p: 0.25,
            }),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cv_suite_tests_every_subject_exactly_once() {
        let corpus = tiny_corpus(6, 1);
        let cfg = tiny_config(LossMode::Total);
        let dir = tempfile::tempdir().unwrap();
        let report = run_suite(SuiteMode::Cv { n_folds: 3 }, &cfg, &corpus, dir.path()).unwrap();
        assert!(report.complete);
        assert_eq!(report.rows.len(), 3);
        let mut tested: Vec<u32> = report
            .rows
            .iter()
            .flat_map(|r| r.test_subjects.clone())
            .collect();
        tested.sort_unstable();
        assert_eq!(tested, corpus.subjects());
        let mean = report.rows.iter().map(|r| r.test_accuracy).sum::<f64>() / 3.0;
        assert_eq!(report.mean_test_accuracy.to_bits(), mean.to_bits());
        for fold in 0..3 {
            assert!(dir.path().join(format!("fold_{fold}/manifest.json")).exists());
        }
    }

    #[test]
    fn loso_suite_runs_once_per_subject() {
        let corpus = tiny_corpus(4, 2);
        let cfg = tiny_config(LossMode::Ce);
        let dir = tempfile::tempdir().unwrap();
        let report = run_suite(SuiteMode::Loso, &cfg, &corpus, dir.path()).unwrap();
        assert_eq!(report.rows.len(), 4);
        for (row, subject) in report.rows.iter().zip(corpus.subjects()) {
            assert_eq!(row.run, format!("subject_{subject}"));
            assert_eq!(row.test_subjects, vec![subject]);
        }
    }

    #[test]
    fn identical_seeds_give_byte_identical_reports() {
        let corpus = tiny_corpus(6, 3);
        let cfg = tiny_config(LossMode::Total);
        let dir = tempfile::tempdir().unwrap();
        let a = run_suite(SuiteMode::Cv { n_folds: 3 }, &cfg, &corpus, &dir.path().join("a")).unwrap();
        let b = run_suite(SuiteMode::Cv { n_folds: 3 }, &cfg, &corpus, &dir.path().join("b")).unwrap();
        assert_eq!(a, b);
        let csv_a = std::fs::read(dir.path().join("a/report.csv")).unwrap();
        let csv_b = std::fs::read(dir.path().join("b/report.csv")).unwrap();
        assert_eq!(csv_a, csv_b);
    }

    #[test]
    fn failing_run_leaves_partial_report_and_propagates() {
        // Three subjects: every LOSO run leaves one training subject, so a
        // two-model partition is infeasible and the first run fails.
        let corpus = tiny_corpus(3, 4);
        let cfg = tiny_config(LossMode::Total);
        let dir = tempfile::tempdir().unwrap();
        let err = run_suite(SuiteMode::Loso, &cfg, &corpus, dir.path()).unwrap_err();
        assert!(matches!(err, Error::InfeasiblePartition(_)), "{err}");
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert!(csv.ends_with(",partial\n"), "{csv:?}");
    }

    #[test]
    fn report_csv_layout() {
        let report = SuiteReport {
            mode: SuiteMode::Cv { n_folds: 2 },
            rows: vec![
                SuiteRow {
                    run: "fold_0".into(),
                    test_subjects: vec![2, 5],
                    best_epoch: 7,
                    val_accuracy: 0.75,
                    test_accuracy: 0.5,
                },
                SuiteRow {
                    run: "fold_1".into(),
                    test_subjects: vec![1],
                    best_epoch: 3,
                    val_accuracy: 1.0,
                    test_accuracy: 0.75,
                },
            ],
            mean_test_accuracy: 0.625,
            complete: true,
        };
        let csv = report_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines,
            vec![
                "run,test_subjects,best_epoch,val_accuracy,test_accuracy,status",
                "fold_0,2;5,7,0.75,0.5,ok",
                "fold_1,1,3,1,0.75,ok",
                "mean,,,,0.625,complete",
            ]
        );
        let partial = SuiteReport { complete: false, ..report };
        assert!(report_csv(&partial).ends_with("mean,,,,0.625,partial\n"));
    }

    #[test]
    fn cv_needs_two_folds() {
        let corpus = tiny_corpus(4, 5);
        let cfg = tiny_config(LossMode::Ce);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            run_suite(SuiteMode::Cv { n_folds: 1 }, &cfg, &corpus, dir.path()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ablation_grid_shape_and_cells_match_suites() {
        // 4 folds of 2 subjects leave 4 training subjects per run, enough
        // for the K=3 cells.
        let corpus = tiny_corpus(8, 6);
        let cfg = tiny_config(LossMode::Total);
        let dir = tempfile::tempdir().unwrap();
        let table = ablate(
            SuiteMode::Cv { n_folds: 4 },
            &cfg,
            &corpus,
            &[2, 3],
            &[LossMode::Ce, LossMode::Total],
            &dir.path().join("grid"),
        )
        .unwrap();
        assert_eq!(table.k_values, vec![2, 3]);
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].0, LossMode::Ce);
        assert_eq!(table.rows[1].0, LossMode::Total);

        // Each cell is exactly the suite mean for that configuration.
        let check_cfg = TrainConfig { k: 3, loss_mode: LossMode::Total, ..cfg.clone() };
        let solo = run_suite(
            SuiteMode::Cv { n_folds: 4 },
            &check_cfg,
            &corpus,
            &dir.path().join("solo"),
        )
        .unwrap();
        assert_eq!(table.rows[1].1[1].to_bits(), solo.mean_test_accuracy.to_bits());

        let csv = std::fs::read_to_string(dir.path().join("grid/ablation.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("loss_mode,K=2,K=3"));
        assert!(lines.next().unwrap().starts_with("ce,"));
        assert!(lines.next().unwrap().starts_with("total,"));
    }

    #[test]
    fn ablation_rejects_invalid_grid_upfront() {
        let corpus = tiny_corpus(4, 7);
        let cfg = tiny_config(LossMode::Total);
        let dir = tempfile::tempdir().unwrap();
        // K=1 is only legal for the ce baseline; reject before training.
        let err = ablate(
            SuiteMode::Cv { n_folds: 2 },
            &cfg,
            &corpus,
            &[1, 2],
            &[LossMode::Total],
            dir.path(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(!dir.path().join("ablation.csv").exists());

        assert!(matches!(
            ablate(SuiteMode::Loso, &cfg, &corpus, &[], &[LossMode::Ce], dir.path()),
            Err(Error::Config(_))
        ));
    }
}
