//! `metrics.csv`: one row per logged event, schema
//! `stage,iter,psnr,ssim,f1,count,wall_ms`; absent values are empty.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliResult;

pub const HEADER: &str = "stage,iter,psnr,ssim,f1,count,wall_ms";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub stage: String,
    pub iter: u64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub f1: Option<f64>,
    pub count: Option<usize>,
    pub wall_ms: u64,
}

impl Row {
    pub fn new(stage: impl Into<String>, iter: u64) -> Self {
        Self {
            stage: stage.into(),
            iter,
            ..Self::default()
        }
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.stage,
            self.iter,
            f(self.psnr),
            f(self.ssim),
            f(self.f1),
            self.count.map(|c| c.to_string()).unwrap_or_default(),
            self.wall_ms
        )
    }
}

/// Appends rows, writing the header first if the file is new or empty.
pub fn append(path: &Path, rows: &[Row]) -> CliResult<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{}", r.to_csv())?;
    }
    Ok(())
}
