//! CSV and JSON report writers. Existing files are never replaced unless
//! `force` is set.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::TrainReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::Config(format!("unknown report format `{s}`, expected csv or json"))),
        }
    }
}

/// `{out_dir}/{stem}_{seed}_{steps}{suffix}.{ext}`.
pub fn report_path(out_dir: &Path, stem: &str, seed: u64, steps: usize, suffix: &str, ext: &str) -> PathBuf {
    out_dir.join(format!("{stem}_{seed}_{steps}{suffix}.{ext}"))
}

/// Creates `path`, failing with [`Error::Exists`] if it exists and `force` is off.
pub fn create(path: &Path, force: bool) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut o = OpenOptions::new();
    o.write(true);
    if force {
        o.create(true).truncate(true);
    } else {
        o.create_new(true);
    }
    o.open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::AlreadyExists => Error::Exists(path.to_path_buf()),
        _ => e.into(),
    })
}

/// Errors if any of `paths` exists and `force` is off.
pub fn ensure_free(paths: &[PathBuf], force: bool) -> Result<()> {
    match paths.iter().find(|p| !force && p.exists()) {
        Some(p) => Err(Error::Exists(p.clone())),
        None => Ok(()),
    }
}

/// Files [`write_train_report`] writes for a run labelled `method`.
pub fn train_report_paths(out_dir: &Path, method: &str, seed: u64, steps: usize, format: Format) -> Vec<PathBuf> {
    let main = report_path(out_dir, method, seed, steps, "", format.ext());
    match format {
        Format::Json => vec![main],
        Format::Csv => vec![main, report_path(out_dir, method, seed, steps, "_loss", "csv")],
    }
}

/// Serialises `rows` with a header row taken from the field names.
pub fn csv_string<S: Serialize>(rows: &[S]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_csv<S: Serialize>(path: &Path, rows: &[S], force: bool) -> Result<()> {
    let body = csv_string(rows)?;
    create(path, force)?.write_all(body.as_bytes())?;
    Ok(())
}

pub fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S, force: bool) -> Result<()> {
    let mut f = create(path, force)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Scalar fields of a [`TrainReport`], one CSV row.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummaryRow {
    pub method: String,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub final_pixel_acc: f64,
    pub trainable_params: u64,
    pub frozen_checksum_before: u64,
    pub frozen_checksum_after: u64,
    pub wall_time_total: f64,
}

impl From<&TrainReport> for TrainSummaryRow {
    fn from(r: &TrainReport) -> Self {
        Self {
            method: r.method.clone(),
            seed: r.seed,
            steps: r.steps,
            final_loss: r.final_loss,
            final_pixel_acc: r.final_pixel_acc,
            trainable_params: r.trainable_params,
            frozen_checksum_before: r.frozen_checksum_before,
            frozen_checksum_after: r.frozen_checksum_after,
            wall_time_total: r.wall_time_total,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
}

/// Loss curve rows, steps numbered from 1.
pub fn loss_rows(r: &TrainReport) -> Vec<LossRow> {
    r.loss_curve
        .iter()
        .enumerate()
        .map(|(i, &loss)| LossRow { step: i + 1, loss })
        .collect()
}

/// Writes a training run in `format`; CSV output also gets a `_loss` curve
/// file. Returns the paths written.
pub fn write_train_report(out_dir: &Path, r: &TrainReport, format: Format, force: bool) -> Result<Vec<PathBuf>> {
    let paths = train_report_paths(out_dir, &r.method, r.seed, r.steps, format);
    ensure_free(&paths, force)?;
    match format {
        Format::Json => write_json(&paths[0], r, force)?,
        Format::Csv => {
            write_csv(&paths[0], &[TrainSummaryRow::from(r)], force)?;
            write_csv(&paths[1], &loss_rows(r), force)?;
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        a: u32,
        b: f64,
    }

    #[test]
    fn refuses_overwrite_without_force() {
        let dir = std::env::temp_dir().join(format!("e3va-report-{}", std::process::id()));
        let p = dir.join("x.csv");
        let _ = std::fs::remove_file(&p);
        write_csv(&p, &[Row { a: 1, b: 0.5 }], false).unwrap();
        let err = write_csv(&p, &[Row { a: 2, b: 0.5 }], false).unwrap_err();
        assert!(matches!(err, Error::Exists(_)));
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a,b\n1,0.5\n");
        write_csv(&p, &[Row { a: 2, b: 0.5 }], true).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a,b\n2,0.5\n");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn loss_rows_are_one_based() {
        let r = TrainReport {
            method: "fixed".into(),
            seed: 1,
            steps: 2,
            loss_curve: vec![1.5, 1.25],
            final_loss: 1.375,
            final_pixel_acc: 0.5,
            trainable_params: 0,
            frozen_checksum_before: 0,
            frozen_checksum_after: 0,
            wall_time_total: 0.0,
        };
        assert_eq!(csv_string(&loss_rows(&r)).unwrap(), "step,loss\n1,1.5\n2,1.25\n");
        assert_eq!(
            report_path(Path::new("out"), &r.method, r.seed, r.steps, "", "json"),
            Path::new("out/fixed_1_2.json")
        );
    }

    #[test]
    fn format_parse() {
        assert_eq!("json".parse::<Format>().unwrap(), Format::Json);
        assert!("xml".parse::<Format>().is_err());
    }
}
