use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{psnr, psnr_luma, ssim};
use super::Restorer;
use crate::data::list_images;
use crate::error::{DerainError, Result};
use crate::image::load_image;

/// Metrics of one image; `input_*` compare the unrestored input with the reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub filename: String,
    pub psnr_db: f64,
    pub psnr_luma_db: f64,
    pub ssim: f64,
    pub input_psnr_db: f64,
    pub input_ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr_db: f64,
    pub psnr_luma_db: f64,
    pub ssim: f64,
    pub input_psnr_db: f64,
    pub input_ssim: f64,
}

/// Rows sorted by filename plus their mean and median.
/// PSNR is capped at 100 dB for identical images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_id: String,
    pub dataset_id: String,
    pub rows: Vec<EvalRow>,
    pub mean: Aggregate,
    pub median: Aggregate,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn aggregate(rows: &[EvalRow], f: fn(&[f64]) -> f64) -> Aggregate {
    let col = |g: fn(&EvalRow) -> f64| f(&rows.iter().map(g).collect::<Vec<_>>());
    Aggregate {
        psnr_db: col(|r| r.psnr_db),
        psnr_luma_db: col(|r| r.psnr_luma_db),
        ssim: col(|r| r.ssim),
        input_psnr_db: col(|r| r.input_psnr_db),
        input_ssim: col(|r| r.input_ssim),
    }
}

impl EvalReport {
    /// Sorts `rows` and computes the aggregates.
    pub fn from_rows(checkpoint_id: String, dataset_id: String, mut rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(DerainError::Config("cannot build a report without rows".into()));
        }
        rows.sort_by(|a, b| a.filename.cmp(&b.filename));
        let mean = aggregate(&rows, mean);
        let median = aggregate(&rows, median);
        Ok(EvalReport { checkpoint_id, dataset_id, rows, mean, median })
    }

    /// Mean PSNR improvement over the unrestored input.
    pub fn mean_gain_db(&self) -> f64 {
        self.mean.psnr_db - self.mean.input_psnr_db
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    /// One line per row followed by `mean` and `median` lines.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| DerainError::Config(format!("csv: {e}"));
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        for (name, agg) in [("mean", &self.mean), ("median", &self.median)] {
            w.serialize(EvalRow {
                filename: name.into(),
                psnr_db: agg.psnr_db,
                psnr_luma_db: agg.psnr_luma_db,
                ssim: agg.ssim,
                input_psnr_db: agg.input_psnr_db,
                input_ssim: agg.input_ssim,
            })
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| DerainError::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv()?.as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| DerainError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| DerainError::io(path, e))
}

fn file_names(files: &[PathBuf]) -> BTreeSet<String> {
    files.iter().filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned())).collect()
}

/// Restores every image of `rainy_dir` and scores it against the same name in `gt_dir`.
pub fn evaluate_dir(restorer: &dyn Restorer, rainy_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let rainy = file_names(&list_images(rainy_dir)?);
    let gt = file_names(&list_images(gt_dir)?);
    if rainy.is_empty() {
        return Err(DerainError::Config(format!("no images in {}", rainy_dir.display())));
    }
    if rainy != gt {
        let missing_gt: Vec<_> = rainy.difference(&gt).cloned().collect();
        let missing_rainy: Vec<_> = gt.difference(&rainy).cloned().collect();
        return Err(DerainError::Config(format!(
            "filename sets differ; missing from {}: [{}]; missing from {}: [{}]",
            gt_dir.display(),
            missing_gt.join(", "),
            rainy_dir.display(),
            missing_rainy.join(", ")
        )));
    }
    let rows = rainy
        .iter()
        .map(|name| {
            let input = load_image(&rainy_dir.join(name))?;
            let reference = load_image(&gt_dir.join(name))?;
            let restored = restorer.restore(&input)?;
            Ok(EvalRow {
                filename: name.clone(),
                psnr_db: psnr(&restored, &reference)?,
                psnr_luma_db: psnr_luma(&restored, &reference)?,
                ssim: ssim(&restored, &reference)?,
                input_psnr_db: psnr(&input, &reference)?,
                input_ssim: ssim(&input, &reference)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(restorer.id(), rainy_dir.display().to_string(), rows)
}

/// One dataset of a sweep; failures are kept as messages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub name: String,
    pub report: std::result::Result<EvalReport, String>,
}

/// Reports in the order the datasets were given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub entries: Vec<SweepEntry>,
}

impl SweepTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| dataset | PSNR (dB) | luma PSNR (dB) | SSIM | input PSNR (dB) | input SSIM |\n|---|---|---|---|---|---|\n");
        for e in &self.entries {
            match &e.report {
                Ok(r) => {
                    let m = &r.mean;
                    let _ = writeln!(
                        s,
                        "| {} | {:.2} | {:.2} | {:.4} | {:.2} | {:.4} |",
                        e.name, m.psnr_db, m.psnr_luma_db, m.ssim, m.input_psnr_db, m.input_ssim
                    );
                }
                Err(msg) => {
                    let _ = writeln!(s, "| {} | error: {} | | | | |", e.name, msg.replace('|', "/"));
                }
            }
        }
        s
    }
}

/// Evaluates each `(name, rainy_dir, gt_dir)` in order, continuing past failures.
pub fn cross_domain_sweep(restorer: &dyn Restorer, datasets: &[(String, PathBuf, PathBuf)]) -> Result<SweepTable> {
    if datasets.is_empty() {
        return Err(DerainError::Config("sweep needs at least one dataset".into()));
    }
    let entries = datasets
        .iter()
        .map(|(name, rainy, gt)| {
            let report = evaluate_dir(restorer, rainy, gt).map_err(|e| {
                log::warn!("sweep entry {name} failed: {e}");
                e.to_string()
            });
            SweepEntry { name: name.clone(), report }
        })
        .collect();
    Ok(SweepTable { entries })
}
