use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One measured run. `accuracy` and `flops` are absent where they do not
/// apply (the timing scenario has no accuracy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub seed: u64,
    pub n: usize,
    pub method: String,
    pub accuracy: Option<f64>,
    pub flops: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seed: u64,
    pub n: usize,
    pub method: String,
    pub wall_ms: f64,
}

/// Mean and sample standard deviation of the accuracy of one
/// `(n, method)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub method: String,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

/// Rows of one scenario.
///
/// `rows.csv`, `aggregates.csv` and `summary.txt` depend only on the
/// configuration and seeds; wall-clock times go to `timings.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    /// Header of the `n` column, e.g. `n_shards`.
    pub n_label: String,
    pub config: serde_json::Value,
    pub rows: Vec<RunRow>,
    pub timings: Vec<Timing>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn new(scenario: &str, n_label: &str, config: serde_json::Value) -> Self {
        Self {
            scenario: scenario.to_string(),
            n_label: n_label.to_string(),
            config,
            rows: Vec::new(),
            timings: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn push(&mut self, seed: u64, n: usize, method: &str, accuracy: Option<f64>, flops: Option<u64>) {
        self.rows.push(RunRow {
            seed,
            n,
            method: method.to_string(),
            accuracy,
            flops,
        });
    }

    pub fn time(&mut self, seed: u64, n: usize, method: &str, wall_ms: f64) {
        self.timings.push(Timing {
            seed,
            n,
            method: method.to_string(),
            wall_ms,
        });
    }

    /// Accuracy aggregates ordered by `n`, then by first appearance of the
    /// method.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut order: Vec<&str> = Vec::new();
        let mut cells: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            let Some(acc) = r.accuracy else { continue };
            let m = match order.iter().position(|&m| m == r.method) {
                Some(i) => i,
                None => {
                    order.push(&r.method);
                    order.len() - 1
                }
            };
            cells.entry((r.n, m)).or_default().push(acc);
        }
        cells
            .into_iter()
            .map(|((n, m), xs)| {
                let (mean, std) = mean_std(&xs);
                Aggregate {
                    n,
                    method: order[m].to_string(),
                    runs: xs.len(),
                    mean,
                    std,
                }
            })
            .collect()
    }

    /// Mean accuracy of `method`, over every `n` when `n` is `None`.
    pub fn mean_accuracy(&self, method: &str, n: Option<usize>) -> Option<f64> {
        let xs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && n.is_none_or(|n| r.n == n))
            .filter_map(|r| r.accuracy)
            .collect();
        (!xs.is_empty()).then(|| mean_std(&xs).0)
    }

    /// Distinct `n` values in row order.
    pub fn ns(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.n) {
                out.push(r.n);
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario: {}", self.scenario);
        let _ = writeln!(
            s,
            "{:>10}  {:<20} {:>5} {:>9} {:>9}",
            self.n_label, "method", "runs", "mean", "std"
        );
        for a in self.aggregates() {
            let _ = writeln!(
                s,
                "{:>10}  {:<20} {:>5} {:>9.4} {:>9.4}",
                a.n, a.method, a.runs, a.mean, a.std
            );
        }
        for n in &self.notes {
            let _ = writeln!(s, "{n}");
        }
        s
    }

    /// Writes `rows.csv`, `aggregates.csv`, `timings.csv`, `config.json`
    /// and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("rows.csv"))?;
        w.write_record(["seed", &self.n_label, "method", "accuracy", "flops"])?;
        for r in &self.rows {
            w.write_record([
                r.seed.to_string(),
                r.n.to_string(),
                r.method.clone(),
                r.accuracy.map(fmt_f64).unwrap_or_default(),
                r.flops.map(|f| f.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("aggregates.csv"))?;
        w.write_record([&self.n_label, "method", "runs", "mean", "std"])?;
        for a in self.aggregates() {
            w.write_record([
                a.n.to_string(),
                a.method,
                a.runs.to_string(),
                fmt_f64(a.mean),
                fmt_f64(a.std),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("timings.csv"))?;
        w.write_record(["seed", &self.n_label, "method", "wall_ms"])?;
        for t in &self.timings {
            w.write_record([
                t.seed.to_string(),
                t.n.to_string(),
                t.method.clone(),
                format!("{:.3}", t.wall_ms),
            ])?;
        }
        w.flush()?;

        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        fs::write(dir.join("summary.txt"), self.summary())?;
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Coefficient of determination of the least-squares line through
/// `(x, y)`.
pub fn linear_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    let slope = sxy / sxx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
    1.0 - ss_res / syy
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> ExperimentReport {
        let mut r = ExperimentReport::new("demo", "n_shards", serde_json::json!({"a": 1}));
        r.push(0, 2, "apt", Some(0.5), Some(10));
        r.push(1, 2, "apt", Some(0.7), Some(10));
        r.push(0, 2, "majority", Some(0.4), None);
        r.push(0, 4, "apt", Some(0.3), None);
        r
    }

    #[test]
    fn aggregates_match_rows() {
        let a = report().aggregates();
        assert_eq!(a.len(), 3);
        assert_eq!((a[0].n, a[0].method.as_str(), a[0].runs), (2, "apt", 2));
        assert!((a[0].mean - 0.6).abs() < 1e-12);
        assert!((a[0].std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(a[1].method, "majority");
        assert_eq!(a[2].n, 4);
        assert_eq!(report().mean_accuracy("apt", None), Some(0.5));
    }

    #[test]
    fn csv_is_stable_and_timings_are_separate() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let mut a = report();
        let mut b = report();
        a.time(0, 2, "apt", 1.0);
        b.time(0, 2, "apt", 2.0);
        a.write(d1.path()).unwrap();
        b.write(d2.path()).unwrap();
        for f in ["rows.csv", "aggregates.csv", "summary.txt", "config.json"] {
            assert_eq!(
                fs::read(d1.path().join(f)).unwrap(),
                fs::read(d2.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let rows = fs::read_to_string(d1.path().join("rows.csv")).unwrap();
        assert_eq!(rows.lines().next().unwrap(), "seed,n_shards,method,accuracy,flops");
        assert_eq!(rows.lines().nth(3).unwrap(), "0,2,majority,0.400000,");
    }

    #[test]
    fn r2_of_a_line_is_one() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((linear_r2(&x, &[3.0, 5.0, 7.0, 9.0]) - 1.0).abs() < 1e-12);
        assert!(linear_r2(&x, &[1.0, 4.0, 9.0, 16.0]) < 1.0);
    }
}
