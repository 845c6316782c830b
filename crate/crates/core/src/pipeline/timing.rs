use std::path::Path;

use crate::error::{Error, Result};

pub const STAGES: [&str; 7] = [
    "integration",
    "fusion",
    "clustering",
    "proposal",
    "crf",
    "instance",
    "total",
];

/// Per-frame wall time of each stage in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub frame: usize,
    pub integration: f64,
    pub fusion: f64,
    pub clustering: f64,
    pub proposal: f64,
    pub crf: f64,
    pub instance: f64,
    pub total: f64,
}

impl StageTimings {
    pub fn values(&self) -> [f64; 7] {
        [
            self.integration,
            self.fusion,
            self.clustering,
            self.proposal,
            self.crf,
            self.instance,
            self.total,
        ]
    }

    /// Clustering, proposal and CRF: the per-frame segmentation cost.
    pub fn segmentation(&self) -> f64 {
        self.clustering + self.proposal + self.crf
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: &'static str,
    pub mean: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub frames: usize,
    pub stages: Vec<StageSummary>,
    /// Least-squares slope of total time against frame index, ms/frame.
    pub total_slope: f64,
    /// Same for clustering + proposal + CRF.
    pub segmentation_slope: f64,
}

/// Least-squares slope of `y` against `x`; 0 for fewer than two points or
/// constant `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Nearest-rank percentile of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

pub fn median(values: &[f64]) -> f64 {
    percentile(values, 50.0)
}

pub fn report_timings(timings: &[StageTimings]) -> Result<TimingReport> {
    if timings.len() < 2 {
        return Err(Error::invalid("timings", "need at least two frames"));
    }
    let stages = STAGES
        .iter()
        .enumerate()
        .map(|(k, &stage)| {
            let v: Vec<f64> = timings.iter().map(|t| t.values()[k]).collect();
            StageSummary {
                stage,
                mean: v.iter().sum::<f64>() / v.len() as f64,
                p95: percentile(&v, 95.0),
            }
        })
        .collect();
    let x: Vec<f64> = timings.iter().map(|t| t.frame as f64).collect();
    let total: Vec<f64> = timings.iter().map(|t| t.total).collect();
    let seg: Vec<f64> = timings.iter().map(StageTimings::segmentation).collect();
    Ok(TimingReport {
        frames: timings.len(),
        stages,
        total_slope: ls_slope(&x, &total),
        segmentation_slope: ls_slope(&x, &seg),
    })
}

impl TimingReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "frames {}\n{:<12} {:>10} {:>10}\n",
            self.frames, "stage", "mean_ms", "p95_ms"
        );
        for st in &self.stages {
            s += &format!("{:<12} {:>10.3} {:>10.3}\n", st.stage, st.mean, st.p95);
        }
        s += &format!("total_slope_ms_per_frame {:.6}\n", self.total_slope);
        s += &format!("segmentation_slope_ms_per_frame {:.6}\n", self.segmentation_slope);
        s
    }
}

/// Timing log: CSV with a `frame` column followed by one column per stage.
pub fn write_timing_log(path: &Path, timings: &[StageTimings]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::format("timing log", e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["frame"];
    header.extend(STAGES);
    w.write_record(&header).map_err(csv_err)?;
    for t in timings {
        let mut rec = vec![t.frame.to_string()];
        rec.extend(t.values().iter().map(|v| format!("{v:.4}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_timing_log(path: &Path) -> Result<Vec<StageTimings>> {
    let csv_err = |e: csv::Error| Error::format("timing log", e.to_string());
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != 8 {
            return Err(Error::format("timing log", "expected 8 columns"));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|e| Error::format("timing log", format!("column {i}: {e}")))
        };
        out.push(StageTimings {
            frame: rec[0]
                .parse()
                .map_err(|e| Error::format("timing log", format!("frame: {e}")))?,
            integration: num(1)?,
            fusion: num(2)?,
            clustering: num(3)?,
            proposal: num(4)?,
            crf: num(5)?,
            instance: num(6)?,
            total: num(7)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(i: usize, total: f64) -> StageTimings {
        StageTimings {
            frame: i,
            total,
            ..Default::default()
        }
    }

    #[test]
    fn constant_timings_have_zero_slope() {
        let t: Vec<_> = (0..50).map(|i| frame(i, 7.0)).collect();
        let r = report_timings(&t).unwrap();
        assert_eq!(r.total_slope, 0.0);
        assert_eq!(r.stages[6].mean, 7.0);
    }

    #[test]
    fn two_frame_mean() {
        let r = report_timings(&[frame(0, 10.0), frame(1, 20.0)]).unwrap();
        assert_eq!(r.stages[6].mean, 15.0);
        assert_eq!(r.total_slope, 10.0);
        assert!(report_timings(&[frame(0, 1.0)]).is_err());
    }

    #[test]
    fn slope_and_percentile() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v + 1.0).collect();
        assert!((ls_slope(&x, &y) - 3.0).abs() < 1e-12);
        assert_eq!(percentile(&[5.0, 1.0, 3.0, 2.0, 4.0], 50.0), 3.0);
        assert_eq!(percentile(&(1..=100).map(f64::from).collect::<Vec<_>>(), 95.0), 95.0);
    }

    #[test]
    fn log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let t = vec![
            StageTimings {
                frame: 0,
                integration: 1.5,
                fusion: 0.25,
                clustering: 2.0,
                proposal: 0.5,
                crf: 0.75,
                instance: 0.0,
                total: 5.0,
            },
            frame(1, 4.0),
        ];
        write_timing_log(&path, &t).unwrap();
        assert_eq!(read_timing_log(&path).unwrap(), t);
    }
}
