//! CSV, text, and image exports for run artifacts. CSV floats use shortest
//! round-trip formatting so downstream tools recover the exact values.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use verge_core::policy::OptionKind;
use verge_core::raster::Raster;
use verge_core::VERGENCE_ACTIONS;

use crate::probe::PolicyMatrix;
use crate::protocol::{EvalReport, FixationRecord, MetricsRow};
use crate::HarnessError;

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// One labeled row per entry of `row_labels`, one data column per probed
/// disparity: `label,<d_min>,...,<d_max>`.
fn matrix_csv(row_labels: &[String], d_values: &[i32], data: &[Vec<f64>]) -> String {
    let mut out = String::new();
    let header: Vec<String> = d_values.iter().map(|d| d.to_string()).collect();
    let _ = writeln!(out, "label,{}", header.join(","));
    for (a, label) in row_labels.iter().enumerate() {
        let cells: Vec<String> = data.iter().map(|row| format!("{}", row[a])).collect();
        let _ = writeln!(out, "{},{}", label, cells.join(","));
    }
    out
}

fn action_labels() -> Vec<String> {
    VERGENCE_ACTIONS.iter().map(|a| a.to_string()).collect()
}

/// Writes the probe matrices: the action distribution, and for hierarchical
/// models the option distribution plus one matrix per bottom network.
/// Returns the written file names.
pub fn write_policy_matrices(m: &PolicyMatrix, dir: &Path) -> Result<Vec<String>, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<(), HarnessError> {
        write_text(&dir.join(name), &text)?;
        written.push(name.to_string());
        Ok(())
    };

    put("policy_actions.csv", matrix_csv(&action_labels(), &m.d_values, &m.action))?;

    let mut summary = String::from("d,greedy_mean,opposition_rate\n");
    for (i, &d) in m.d_values.iter().enumerate() {
        let _ = writeln!(
            summary,
            "{},{},{}",
            d,
            m.greedy_mean[i],
            m.opposed[i] as f64 / m.probes_per_d as f64
        );
    }
    put("policy_greedy.csv", summary)?;

    if let Some(sel) = &m.selection {
        let labels: Vec<String> =
            OptionKind::ALL.iter().map(|o| o.label().to_string()).collect();
        put("policy_options.csv", matrix_csv(&labels, &m.d_values, sel))?;
    }
    if let Some(bottoms) = &m.bottoms {
        for (o, b) in bottoms.iter().enumerate() {
            let name = format!(
                "policy_actions_{}.csv",
                OptionKind::from_index(o).label().to_lowercase()
            );
            write_text(&dir.join(&name), &matrix_csv(&action_labels(), &m.d_values, b))?;
            written.push(name);
        }
    }

    write_matrix_heatmap(&m.action, &dir.join("policy_actions.pgm"))?;
    written.push("policy_actions.pgm".into());
    Ok(written)
}

/// 8-bit heatmap of a `[column][row]` matrix, rows in image order, scaled
/// by the matrix maximum.
pub fn write_matrix_heatmap(data: &[Vec<f64>], path: &Path) -> Result<(), HarnessError> {
    let cols = data.len();
    let rows = data.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(HarnessError::Invalid("empty matrix".into()));
    }
    let peak = data
        .iter()
        .flatten()
        .fold(0.0f64, |m, &v| m.max(v))
        .max(f64::MIN_POSITIVE);
    let mut img = Raster::<f64>::new(rows, cols, 0.0);
    for (c, col) in data.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            img.set(r, c, v / peak);
        }
    }
    img.write_pgm8(path).map_err(|e| HarnessError::Invalid(e.to_string()))?;
    Ok(())
}

fn reward_cells(r: &Option<verge_core::learner::RewardSet>) -> String {
    match r {
        Some(r) => format!("{},{},{},{}", r.parallel, r.foveal, r.inner, r.outer),
        None => ",,,".into(),
    }
}

/// Per-step evaluation trajectories, one row per step plus a step-0 row
/// holding the initial state.
pub fn write_trajectories_csv(
    records: &[FixationRecord],
    path: &Path,
) -> Result<(), HarnessError> {
    let mut out = String::from(
        "fixation,scene_id,step,option,action,vergence,gt_vergence,residual,\
         r_parallel,r_foveal,r_inner,r_outer\n",
    );
    for (fx, rec) in records.iter().enumerate() {
        let v0 = rec.gt_vergence - rec.initial_residual;
        let _ = writeln!(
            out,
            "{},{},0,,,{},{},{},,,,",
            fx, rec.scene_id, v0, rec.gt_vergence, rec.initial_residual
        );
        for s in 0..rec.actions.len() {
            let option = rec.options[s].map_or(String::new(), |o| {
                OptionKind::from_index(o).label().to_string()
            });
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                fx,
                rec.scene_id,
                s + 1,
                option,
                rec.actions[s],
                rec.vergences[s],
                rec.gt_vergence,
                rec.residuals[s],
                reward_cells(&rec.rewards[s]),
            );
        }
    }
    write_text(path, &out)
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<(), HarnessError> {
    let mut out = String::from(
        "step,mean_abs_final_residual,r_parallel,r_foveal,r_inner,r_outer,sel_f,sel_ip,sel_op\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            r.mean_abs_final_residual,
            r.mean_reward_parallel,
            r.mean_reward_foveal,
            r.mean_reward_inner,
            r.mean_reward_outer,
            r.selection_freq[0],
            r.selection_freq[1],
            r.selection_freq[2],
        );
    }
    write_text(path, &out)
}

pub fn eval_summary_text(report: &EvalReport) -> String {
    let s = &report.summary;
    format!(
        "fixations: {}\nmedian |final residual|: {} px\nconvergence rate (|r| <= 1 px): {:.4}\n\
         mean oscillation: {:.4}\n",
        s.fixations, s.median_final_abs_residual, s.convergence_rate, s.mean_oscillation
    )
}

pub fn write_eval_report(report: &EvalReport, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    write_trajectories_csv(&report.records, &dir.join("trajectories.csv"))?;
    write_text(&dir.join("eval_summary.txt"), &eval_summary_text(report))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use verge_core::learner::RewardSet;

    fn sample_matrix() -> PolicyMatrix {
        let d_values = vec![-1, 0, 1];
        let n = VERGENCE_ACTIONS.len();
        let mut action = vec![vec![1.0 / n as f64; n]; 3];
        action[2][0] = 0.5;
        let rest = 0.5 / (n - 1) as f64;
        for v in action[2].iter_mut().skip(1) {
            *v = rest;
        }
        PolicyMatrix {
            d_values,
            probes_per_d: 4,
            action,
            selection: None,
            bottoms: None,
            opposed: vec![1, 0, 3],
            greedy_mean: vec![0.5, 0.0, -0.25],
        }
    }

    #[test]
    fn matrix_csv_columns_sum_to_one_and_reimport_exactly() {
        let m = sample_matrix();
        let text = matrix_csv(&action_labels(), &m.d_values, &m.action);
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert_eq!(header, "label,-1,0,1");
        let mut sums = [0.0f64; 3];
        let mut parsed = vec![];
        for (row, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells[0], VERGENCE_ACTIONS[row].to_string());
            for (c, cell) in cells[1..].iter().enumerate() {
                let v: f64 = cell.parse().unwrap();
                sums[c] += v;
                parsed.push((row, c, v));
            }
        }
        for s in sums {
            assert!((s - 1.0).abs() < 1e-12, "column sums to {s}");
        }
        for (row, col, v) in parsed {
            assert_eq!(v, m.action[col][row], "shortest round-trip is exact");
        }
    }

    #[test]
    fn exports_land_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_matrix();
        let files = write_policy_matrices(&m, dir.path()).unwrap();
        assert!(files.contains(&"policy_actions.csv".to_string()));
        assert!(files.contains(&"policy_greedy.csv".to_string()));
        assert!(files.contains(&"policy_actions.pgm".to_string()));
        for f in &files {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        let pgm = std::fs::read(dir.path().join("policy_actions.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n3 11\n255\n"), "11 action rows, 3 d columns");
    }

    #[test]
    fn trajectory_csv_has_a_step_zero_row_per_fixation() {
        let rec = FixationRecord {
            scene_id: "test-plane".into(),
            fixation: (50, 60),
            gt_vergence: 5.0,
            initial_residual: 3.0,
            final_residual: 1.0,
            actions: vec![2, 0],
            options: vec![Some(0), Some(2)],
            vergences: vec![4, 4],
            residuals: vec![1.0, 1.0],
            rewards: vec![
                Some(RewardSet { parallel: -0.5, foveal: -0.25, inner: -0.125, outer: -0.0625 }),
                None,
            ],
            oscillation: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trajectories_csv(&[rec], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4, "header + step 0 + 2 steps");
        assert_eq!(lines[1], "0,test-plane,0,,,2,5,3,,,,");
        assert_eq!(lines[2], "0,test-plane,1,F,2,4,5,1,-0.5,-0.25,-0.125,-0.0625");
        assert_eq!(lines[3], "0,test-plane,2,OP,0,4,5,1,,,,");
    }

    #[test]
    fn metrics_csv_round_trips_core_fields() {
        let rows = vec![MetricsRow {
            step: 1000,
            mean_abs_final_residual: 2.5,
            mean_reward_parallel: -0.5,
            mean_reward_foveal: -0.4,
            mean_reward_inner: -0.3,
            mean_reward_outer: -0.2,
            selection_freq: [0.5, 0.25, 0.25],
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "1000,2.5,-0.5,-0.4,-0.3,-0.2,0.5,0.25,0.25"
        );
    }
}
