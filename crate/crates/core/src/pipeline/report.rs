//! Artifact writers: loss curves, evaluation reports, and plot-ready
//! series. Everything numeric prints with `{}` — the shortest decimal
//! form that parses back to the identical float — so re-reading a CSV
//! reproduces the run's numbers exactly. Timing goes to its own file:
//! it is machine-dependent, and keeping it apart lets every other
//! artifact be compared byte-for-byte across runs.

use super::eval::EvalReport;
use crate::Result;
use std::fs;
use std::io::Write;
use std::path::Path;

// ── loss curves ──

/// Buffered loss-curve rows: epoch, iteration, one column per named term,
/// and the total. Terms absent in an iteration (e.g. rotation loss during
/// phase one) record zero.
pub struct LossCurve {
    names: Vec<&'static str>,
    rows: Vec<(usize, usize, Vec<f64>, f64)>,
}

impl LossCurve {
    pub fn new(names: &[&'static str]) -> Self {
        LossCurve { names: names.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, epoch: usize, iter: usize, named: &[(&'static str, f64)], total: f64) {
        let mut row = vec![0.0; self.names.len()];
        for (name, value) in named {
            match self.names.iter().position(|n| n == name) {
                Some(i) => row[i] = *value,
                None => debug_assert!(false, "loss curve has no column '{name}'"),
            }
        }
        self.rows.push((epoch, iter, row, total));
    }

    /// Append buffered rows to `path` (creating it with a header first)
    /// and clear the buffer. Called once per epoch so an interrupted run
    /// leaves exactly the completed epochs on disk.
    pub fn append_to(&mut self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "epoch,iter,{},total", self.names.join(","))?;
        }
        for (epoch, iter, row, total) in &self.rows {
            let terms: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{epoch},{iter},{},{total}", terms.join(","))?;
        }
        self.rows.clear();
        Ok(())
    }
}

// ── evaluation reports ──

/// Write an evaluation report as a JSON summary plus CSV tables:
/// `{stem}.json`, `{stem}_thresholds.csv` (threshold, AR, baseline AR),
/// `{stem}_instances.csv`, and `{stem}_timing.txt`.
pub fn emit_report(report: &EvalReport, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report)?;
    fs::write(dir.join(format!("{stem}.json")), json + "\n")?;

    let mut csv = String::from("threshold,ar,baseline_ar\n");
    for ((t, a), b) in report.thresholds.iter().zip(&report.ar).zip(&report.baseline_ar) {
        csv.push_str(&format!("{t},{a},{b}\n"));
    }
    fs::write(dir.join(format!("{stem}_thresholds.csv")), csv)?;

    let mut csv = String::from("instance_id,pairs,mar,ar50\n");
    for row in &report.per_instance {
        csv.push_str(&format!("{},{},{},{}\n", row.instance_id, row.pairs, row.mar, row.ar50));
    }
    fs::write(dir.join(format!("{stem}_instances.csv")), csv)?;

    fs::write(
        dir.join(format!("{stem}_timing.txt")),
        format!("mean_ms_per_query {}\n", report.mean_ms_per_query),
    )?;
    Ok(())
}

/// Plot-ready series: one x column, any number of named y columns.
pub fn write_series_csv(
    path: &Path,
    x_name: &str,
    y_names: &[&str],
    rows: &[(f64, Vec<f64>)],
) -> Result<()> {
    let mut out = format!("{x_name},{}\n", y_names.join(","));
    for (x, ys) in rows {
        debug_assert_eq!(ys.len(), y_names.len());
        let cells: Vec<String> = ys.iter().map(|v| format!("{v}")).collect();
        out.push_str(&format!("{x},{}\n", cells.join(",")));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parse a CSV written by this module back into (header, numeric rows).
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .unwrap_or("")
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                cell.parse::<f64>().map_err(|_| {
                    crate::Error::format(format!("{}: non-numeric cell '{cell}'", path.display()))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_csv_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("series.csv");
        let rows = vec![
            (2.0, vec![0.1234567890123456, 1.0 / 3.0]),
            (4.0, vec![f64::MIN_POSITIVE, 0.72]),
        ];
        write_series_csv(&path, "m", &["qvm", "corr2d"], &rows).unwrap();
        let (header, back) = read_numeric_csv(&path).unwrap();
        assert_eq!(header, vec!["m", "qvm", "corr2d"]);
        for ((x, ys), row) in rows.iter().zip(&back) {
            assert_eq!(x.to_bits(), row[0].to_bits());
            for (y, cell) in ys.iter().zip(&row[1..]) {
                assert_eq!(y.to_bits(), cell.to_bits());
            }
        }
    }

    #[test]
    fn loss_curve_appends_and_fills_missing_terms() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let mut curve = LossCurve::new(&["a", "b"]);
        curve.push(1, 0, &[("a", 0.5), ("b", 0.25)], 0.75);
        curve.append_to(&path).unwrap();
        curve.push(2, 0, &[("b", 0.125)], 0.125);
        curve.append_to(&path).unwrap();
        let (header, rows) = read_numeric_csv(&path).unwrap();
        assert_eq!(header, vec!["epoch", "iter", "a", "b", "total"]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], vec![1.0, 0.0, 0.5, 0.25, 0.75]);
        // Missing term recorded as zero.
        assert_eq!(rows[1], vec![2.0, 0.0, 0.0, 0.125, 0.125]);
    }
}
