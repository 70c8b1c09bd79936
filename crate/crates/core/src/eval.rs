//! Accuracy metrics in the usual trajectory-benchmark format: RMS and max of
//! horizontal, longitudinal, lateral and yaw errors, percentages of frames
//! under fixed thresholds, and the share of frames with a reported pose.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose3};

pub const HORIZONTAL_THRESHOLDS_M: [f64; 3] = [0.1, 0.2, 0.3];
pub const YAW_THRESHOLDS_DEG: [f64; 3] = [0.1, 0.3, 0.6];

/// Per-frame error of an estimate against ground truth.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ErrorRecord {
    pub timestamp: f64,
    pub available: bool,
    /// Meters.
    pub horizontal: f64,
    /// Along the ground-truth heading, meters.
    pub longitudinal: f64,
    /// Perpendicular to the heading, positive to the left, meters.
    pub lateral: f64,
    /// Wrapped heading difference, degrees.
    pub yaw_deg: f64,
}

impl ErrorRecord {
    /// Record for a frame without a reported pose.
    pub fn unavailable(timestamp: f64) -> Self {
        Self {
            timestamp,
            available: false,
            horizontal: f64::NAN,
            longitudinal: f64::NAN,
            lateral: f64::NAN,
            yaw_deg: f64::NAN,
        }
    }
}

/// Planar error of `est` expressed in the heading frame of `gt`.
pub fn decompose_error(est: &Pose3, gt: &Pose3) -> ErrorRecord {
    let d = est.position - gt.position;
    let (s, c) = gt.heading().sin_cos();
    let longitudinal = c * d.x + s * d.y;
    let lateral = -s * d.x + c * d.y;
    ErrorRecord {
        timestamp: 0.0,
        available: true,
        horizontal: d.x.hypot(d.y),
        longitudinal,
        lateral,
        yaw_deg: wrap_angle(est.heading() - gt.heading()).to_degrees(),
    }
}

/// Error statistics over the available frames.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AccuracyMetrics {
    pub rms_horizontal: f64,
    pub max_horizontal: f64,
    pub rms_longitudinal: f64,
    pub max_longitudinal: f64,
    pub rms_lateral: f64,
    pub max_lateral: f64,
    pub rms_yaw_deg: f64,
    pub max_yaw_deg: f64,
    /// Percent of available frames with horizontal error at most 0.1 / 0.2 / 0.3 m.
    pub horizontal_under_percent: [f64; 3],
    /// Percent of available frames with |yaw| at most 0.1 / 0.3 / 0.6 deg.
    pub yaw_under_percent: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsSummary {
    pub frames: usize,
    pub available_frames: usize,
    pub available_percent: f64,
    pub na_percent: f64,
    /// Absent when no frame is available.
    pub metrics: Option<AccuracyMetrics>,
}

fn rms(values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn under_percent(values: &[f64], thresholds: &[f64; 3]) -> [f64; 3] {
    thresholds.map(|t| 100.0 * values.iter().filter(|v| v.abs() <= t).count() as f64 / values.len() as f64)
}

/// Summarize per-frame records. Unavailable frames only enter the
/// availability percentages.
pub fn summarize(records: &[ErrorRecord]) -> Result<MetricsSummary> {
    if records.is_empty() {
        return Err(Error::Query("no records to summarize".into()));
    }
    let avail: Vec<&ErrorRecord> = records.iter().filter(|r| r.available).collect();
    let available_percent = 100.0 * avail.len() as f64 / records.len() as f64;
    let metrics = if avail.is_empty() {
        None
    } else {
        let h: Vec<f64> = avail.iter().map(|r| r.horizontal).collect();
        let lo: Vec<f64> = avail.iter().map(|r| r.longitudinal).collect();
        let la: Vec<f64> = avail.iter().map(|r| r.lateral).collect();
        let y: Vec<f64> = avail.iter().map(|r| r.yaw_deg).collect();
        Some(AccuracyMetrics {
            rms_horizontal: rms(&h),
            max_horizontal: max_abs(&h),
            rms_longitudinal: rms(&lo),
            max_longitudinal: max_abs(&lo),
            rms_lateral: rms(&la),
            max_lateral: max_abs(&la),
            rms_yaw_deg: rms(&y),
            max_yaw_deg: max_abs(&y),
            horizontal_under_percent: under_percent(&h, &HORIZONTAL_THRESHOLDS_M),
            yaw_under_percent: under_percent(&y, &YAW_THRESHOLDS_DEG),
        })
    };
    Ok(MetricsSummary {
        frames: records.len(),
        available_frames: avail.len(),
        available_percent,
        na_percent: 100.0 - available_percent,
        metrics,
    })
}

impl MetricsSummary {
    /// Plain-text table with one row per metric group.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "frames {}  available {:.1}%  N/A {:.1}%\n",
            self.frames, self.available_percent, self.na_percent
        ));
        match &self.metrics {
            None => out.push_str("no available frames\n"),
            Some(m) => {
                out.push_str(&format!("{:<14}{:>12}{:>12}\n", "", "RMS", "Max"));
                for (name, r, x) in [
                    ("horizontal m", m.rms_horizontal, m.max_horizontal),
                    ("longitud. m", m.rms_longitudinal, m.max_longitudinal),
                    ("lateral m", m.rms_lateral, m.max_lateral),
                    ("yaw deg", m.rms_yaw_deg, m.max_yaw_deg),
                ] {
                    out.push_str(&format!("{name:<14}{r:>12.4}{x:>12.4}\n"));
                }
                let [a, b, c] = m.horizontal_under_percent;
                out.push_str(&format!("horizontal <= 0.1/0.2/0.3 m : {a:.1}/{b:.1}/{c:.1} %\n"));
                let [a, b, c] = m.yaw_under_percent;
                out.push_str(&format!("yaw <= 0.1/0.3/0.6 deg      : {a:.1}/{b:.1}/{c:.1} %\n"));
            }
        }
        out
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), |w| {
            serde_json::to_writer_pretty(&mut *w, self)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }
}

/// Per-frame results CSV: `timestamp,available,horizontal,longitudinal,lateral,yaw_deg`.
pub fn write_records<W: Write>(records: &[ErrorRecord], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["timestamp", "available", "horizontal", "longitudinal", "lateral", "yaw_deg"])?;
    for r in records {
        let num = |x: f64| if r.available { x.to_string() } else { String::new() };
        csv.write_record([
            r.timestamp.to_string(),
            u8::from(r.available).to_string(),
            num(r.horizontal),
            num(r.longitudinal),
            num(r.lateral),
            num(r.yaw_deg),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn save_records(records: &[ErrorRecord], path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), |w| write_records(records, w))
}

/// Read a results CSV written by [`write_records`].
pub fn read_records<R: Read>(r: R) -> Result<Vec<ErrorRecord>> {
    let mut reader = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let field = |k: usize| -> Result<f64> {
            let s = row.get(k).unwrap_or("");
            if s.is_empty() {
                return Ok(f64::NAN);
            }
            s.parse()
                .map_err(|_| Error::format(format!("row {}, column {}", i + 1, k), format!("not a number: {s:?}")))
        };
        let available = match row.get(1) {
            Some("1") | Some("true") => true,
            Some("0") | Some("false") => false,
            other => return Err(Error::format(format!("row {}, column 1", i + 1), format!("bad flag {other:?}"))),
        };
        out.push(ErrorRecord {
            timestamp: field(0)?,
            available,
            horizontal: field(2)?,
            longitudinal: field(3)?,
            lateral: field(4)?,
            yaw_deg: field(5)?,
        });
    }
    Ok(out)
}
