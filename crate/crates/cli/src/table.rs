use std::path::Path;

use crate::error::CliError;
use crate::experiment::{mean_std, ResultRecord};

/// Aggregate of one (dataset, algorithm) cell over seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

impl Cell {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (mean, std) = mean_std(values);
        Some(Self {
            mean,
            std,
            runs: values.len(),
        })
    }

    /// `mean (std)` with three decimals, as in published tables.
    pub fn render(&self) -> String {
        format!("{:.3} ({:.3})", self.mean, self.std)
    }
}

/// Test-RMSE table: one row per dataset, one column per algorithm and a
/// final column naming the best algorithm of the row.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub algorithms: Vec<String>,
    pub rows: Vec<(String, Vec<Option<Cell>>)>,
}

fn push_unique(list: &mut Vec<String>, item: &str) {
    if !list.iter().any(|s| s == item) {
        list.push(item.to_string());
    }
}

impl Table {
    /// Groups records by dataset and algorithm, both in order of first
    /// appearance, and aggregates normalized RMSE over seeds.
    pub fn from_records(records: &[ResultRecord]) -> Self {
        let mut datasets = Vec::new();
        let mut algorithms = Vec::new();
        for r in records {
            push_unique(&mut datasets, &r.dataset);
            push_unique(&mut algorithms, &r.algorithm);
        }
        let rows = datasets
            .into_iter()
            .map(|d| {
                let cells = algorithms
                    .iter()
                    .map(|a| {
                        let values: Vec<f64> = records
                            .iter()
                            .filter(|r| r.dataset == d && &r.algorithm == a)
                            .map(|r| r.rmse)
                            .collect();
                        Cell::from_values(&values)
                    })
                    .collect();
                (d, cells)
            })
            .collect();
        Self { algorithms, rows }
    }

    /// Algorithm with the lowest mean in a row; ties are joined with `/`.
    pub fn best(&self, row: usize) -> String {
        let cells = &self.rows[row].1;
        let lowest = cells.iter().flatten().map(|c| c.mean).fold(f64::INFINITY, f64::min);
        self.algorithms
            .iter()
            .zip(cells)
            .filter(|(_, c)| c.is_some_and(|c| c.mean == lowest))
            .map(|(a, _)| a.as_str())
            .collect::<Vec<_>>()
            .join("/")
    }

    /// `(dataset, algorithm)` pairs without any record.
    pub fn missing(&self) -> Vec<(String, String)> {
        self.rows
            .iter()
            .flat_map(|(d, cells)| {
                self.algorithms
                    .iter()
                    .zip(cells)
                    .filter(|(_, c)| c.is_none())
                    .map(move |(a, _)| (d.clone(), a.clone()))
            })
            .collect()
    }

    /// Column-aligned text rendering.
    pub fn to_text(&self) -> String {
        let mut grid: Vec<Vec<String>> = Vec::with_capacity(self.rows.len() + 1);
        let mut header = vec!["dataset".to_string()];
        header.extend(self.algorithms.iter().cloned());
        header.push("best".into());
        grid.push(header);
        for (i, (d, cells)) in self.rows.iter().enumerate() {
            let mut line = vec![d.clone()];
            line.extend(cells.iter().map(|c| c.map_or("-".to_string(), |c| c.render())));
            line.push(self.best(i));
            grid.push(line);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|j| grid.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &grid {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}", w = *w))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    /// CSV with numeric `<algorithm>_mean` and `<algorithm>_std` columns.
    pub fn write_csv(&self, path: &Path) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["dataset".to_string()];
        for a in &self.algorithms {
            header.push(format!("{a}_mean"));
            header.push(format!("{a}_std"));
        }
        header.push("best".into());
        w.write_record(&header)?;
        for (i, (d, cells)) in self.rows.iter().enumerate() {
            let mut line = vec![d.clone()];
            for c in cells {
                match c {
                    Some(c) => {
                        line.push(c.mean.to_string());
                        line.push(c.std.to_string());
                    }
                    None => line.extend([String::new(), String::new()]),
                }
            }
            line.push(self.best(i));
            w.write_record(&line)?;
        }
        w.flush()?;
        Ok(())
    }
}
