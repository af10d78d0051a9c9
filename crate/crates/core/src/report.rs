//! Run-report data types and their on-disk formats.
//!
//! A batch run produces one JSON report (full resolved config, per-seed
//! summaries, aggregate statistics, mean diagnostic curves) plus CSV tables
//! meant for plotting. CSV bodies are reproducible byte for byte given the
//! same config and seed: floats are written with 17 significant digits and
//! every aggregation is order-deterministic, so reruns can be diffed. The
//! JSON report carries the only run-varying field, a wall-clock timestamp.

use std::io::Write;

use serde::Serialize;

use crate::analysis::ErrorReport;
use crate::config::ExperimentConfig;
use crate::error::Result;

/// Per-seed outcome digest: how far each corrupted arm drifted from the
/// clean arm, and what each arm's model-evaluation budget was.
#[derive(Clone, Debug, Serialize)]
pub struct TrajectorySummary {
    pub seed: u64,
    /// `‖x_0(perturbed) − x_0(clean)‖` for this seed.
    pub perturbed_final_error: f64,
    /// `‖x_0(corrected) − x_0(clean)‖` for this seed.
    pub corrected_final_error: f64,
    pub clean_eval_count: u64,
    pub perturbed_eval_count: u64,
    pub corrected_eval_count: u64,
}

/// Aggregate statistics of one corrupted arm.
#[derive(Clone, Debug, Serialize)]
pub struct ArmStats {
    pub mean_final_error: f64,
    /// Sample standard deviation (zero for a single trajectory).
    pub std_final_error: f64,
    pub mean_eval_count: f64,
    /// Fréchet distance of the arm's samples to the reference population;
    /// absent when too few trajectories exist to fit a covariance.
    pub frechet: Option<f64>,
}

/// Aggregate statistics across all seeds of a run.
#[derive(Clone, Debug, Serialize)]
pub struct Aggregate {
    pub clean_mean_eval_count: f64,
    /// Fréchet distance of the clean arm to the reference population.
    pub clean_frechet: Option<f64>,
    pub perturbed: ArmStats,
    pub corrected: ArmStats,
    /// Extra model evaluations of the corrected arm over the uncorrected
    /// one, in percent: `(corrected / perturbed − 1)·100`.
    pub overhead_pct: f64,
}

/// The complete record of one batch run.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub version: String,
    pub timestamp_unix: u64,
    /// Fully resolved configuration; a run is re-executable from this echo.
    pub config: ExperimentConfig,
    /// Set when sampling aborted on a non-finite state; the remaining
    /// fields then describe an empty run.
    pub divergence: Option<String>,
    pub trajectories: Vec<TrajectorySummary>,
    pub aggregate: Option<Aggregate>,
    /// Mean diagnostic curves of the perturbed arm against the clean arm.
    pub perturbed_errors: Option<ErrorReport>,
    /// Mean diagnostic curves of the corrected arm against the clean arm.
    pub corrected_errors: Option<ErrorReport>,
}

impl RunReport {
    /// Serializes the report as pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }
}

/// Per-step norm columns averaged over clean trajectories: the error
/// amplification and the correction contraction constant for each entry of
/// a relaxation-coefficient grid.
#[derive(Clone, Debug, Serialize)]
pub struct NormsTable {
    pub t_indices: Vec<usize>,
    pub amplification: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// `contraction[i][s]` is the mean constant for `lambdas[i]` at step `s`.
    pub contraction: Vec<Vec<f64>>,
    /// How many trajectories were averaged.
    pub n_trajectories: usize,
}

impl NormsTable {
    pub fn n_steps(&self) -> usize {
        self.t_indices.len()
    }

    /// Writes `step,t_index,amplification,L_<lambda>...` rows.
    pub fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        let mut header = String::from("step,t_index,amplification");
        for l in &self.lambdas {
            header.push_str(&format!(",L_{l}"));
        }
        writeln!(w, "{header}")?;
        for s in 0..self.n_steps() {
            let mut row = format!("{},{},{:.16e}", s, self.t_indices[s], self.amplification[s]);
            for column in &self.contraction {
                row.push_str(&format!(",{:.16e}", column[s]));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }
}

/// One row of an ablation sweep: the swept value and the quality/cost
/// summary of the corrected arm at that value.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    /// Mean final error of the corrected arm against the clean arm.
    pub mean_final_error: f64,
    /// Fréchet distance of the corrected arm to the reference population.
    pub frechet: Option<f64>,
    /// Evaluation overhead of the corrected arm over the uncorrected one.
    pub overhead_pct: f64,
}

/// Writes sweep rows as `axis,value,mean_final_error,frechet,overhead_pct`.
pub fn write_sweep_csv(rows: &[SweepRow], w: &mut dyn Write) -> Result<()> {
    writeln!(w, "axis,value,mean_final_error,frechet,overhead_pct")?;
    for row in rows {
        let frechet = match row.frechet {
            Some(v) => format!("{v:.16e}"),
            None => String::new(),
        };
        writeln!(
            w,
            "{},{},{:.16e},{},{:.16e}",
            row.axis, row.value, row.mean_final_error, frechet, row.overhead_pct
        )?;
    }
    Ok(())
}

/// Writes final samples of every arm as `arm,seed,x0,...` rows.
pub fn write_samples_csv<'a>(
    dim: usize,
    rows: impl Iterator<Item = (&'a str, u64, &'a nalgebra::DVector<f64>)>,
    w: &mut dyn Write,
) -> Result<()> {
    let mut header = String::from("arm,seed");
    for i in 0..dim {
        header.push_str(&format!(",x{i}"));
    }
    writeln!(w, "{header}")?;
    for (arm, seed, point) in rows {
        let mut row = format!("{arm},{seed}");
        for v in point.iter() {
            row.push_str(&format!(",{v:.16e}"));
        }
        writeln!(w, "{row}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn norms_csv_names_one_column_per_lambda() {
        let table = NormsTable {
            t_indices: vec![9, 4],
            amplification: vec![1.5, 1.2],
            lambdas: vec![0.0, 0.5],
            contraction: vec![vec![1.0, 1.0], vec![0.6, 0.55]],
            n_trajectories: 2,
        };
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,t_index,amplification,L_0,L_0.5");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,9,"));
        assert!(lines[2].starts_with("1,4,"));
    }

    #[test]
    fn sweep_csv_leaves_missing_metrics_empty() {
        let rows = vec![
            SweepRow {
                axis: "sigma".into(),
                value: "0.05".into(),
                mean_final_error: 0.25,
                frechet: Some(0.5),
                overhead_pct: 100.0,
            },
            SweepRow {
                axis: "sigma".into(),
                value: "0.1".into(),
                mean_final_error: 0.5,
                frechet: None,
                overhead_pct: 100.0,
            },
        ];
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "axis,value,mean_final_error,frechet,overhead_pct");
        assert!(lines[1].contains("sigma,0.05,"));
        assert!(lines[2].contains(",,"), "absent metric is an empty field");
    }

    #[test]
    fn samples_csv_tags_arm_and_seed() {
        let a = DVector::from_vec(vec![1.0, 2.0]);
        let b = DVector::from_vec(vec![-0.5, 0.25]);
        let rows = vec![("clean", 7u64, &a), ("corrected", 7u64, &b)];
        let mut buf = Vec::new();
        write_samples_csv(2, rows.into_iter(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "arm,seed,x0,x1");
        assert!(lines[1].starts_with("clean,7,"));
        assert!(lines[2].starts_with("corrected,7,"));
    }
}
