//! Power-trace post-processing: working-period detection, middle-third
//! averaging and joules per frame.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD_W: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PowerSample {
    pub t: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerTrace {
    samples: Vec<PowerSample>,
}

impl PowerTrace {
    pub fn new(samples: Vec<PowerSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Trace("empty trace".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if !(s.t.is_finite() && s.p.is_finite()) {
                return Err(Error::Trace(format!("sample {i}: non-finite value")));
            }
            if s.p < 0.0 {
                return Err(Error::Trace(format!("sample {i}: negative power {}", s.p)));
            }
            if i > 0 && s.t <= samples[i - 1].t {
                return Err(Error::Trace(format!(
                    "sample {i}: time {} does not increase past {}",
                    s.t,
                    samples[i - 1].t
                )));
            }
        }
        Ok(Self { samples })
    }

    pub fn from_watts(interval_s: f64, watts: &[f64]) -> Result<Self> {
        Self::new(
            watts
                .iter()
                .enumerate()
                .map(|(i, &p)| PowerSample {
                    t: i as f64 * interval_s,
                    p,
                })
                .collect(),
        )
    }

    pub fn samples(&self) -> &[PowerSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Parses `t_s,power_w` rows. A first row that is not numeric is taken as a
/// header and skipped.
pub fn parse_trace(text: &str) -> Result<PowerTrace> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Trace(format!("row {}: {e}", row + 1)))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if record.len() != 2 {
            return Err(Error::Trace(format!("row {}: expected 2 fields, got {}", row + 1, record.len())));
        }
        let parsed = (record[0].parse::<f64>(), record[1].parse::<f64>());
        match parsed {
            (Ok(t), Ok(p)) => samples.push(PowerSample { t, p }),
            _ if row == 0 => continue,
            _ => return Err(Error::Trace(format!("row {}: not a number", row + 1))),
        }
    }
    PowerTrace::new(samples)
}

pub fn parse_trace_file(path: impl AsRef<Path>) -> Result<PowerTrace> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace(&text)
}

/// Inclusive sample-index span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct WorkingPeriod {
    pub start: usize,
    pub end: usize,
}

impl WorkingPeriod {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Longest contiguous run with `p ≥ threshold`; the earliest on ties.
pub fn find_working_period(trace: &PowerTrace, threshold_w: f64) -> Result<WorkingPeriod> {
    find_working_period_with_gaps(trace, threshold_w, 0)
}

/// As [`find_working_period`], but dips of at most `max_gap` consecutive
/// sub-threshold samples inside a run do not end it.
pub fn find_working_period_with_gaps(trace: &PowerTrace, threshold_w: f64, max_gap: usize) -> Result<WorkingPeriod> {
    let mut runs: Vec<WorkingPeriod> = Vec::new();
    for (i, s) in trace.samples.iter().enumerate() {
        if s.p < threshold_w {
            continue;
        }
        match runs.last_mut() {
            Some(r) if i - r.end - 1 <= max_gap => r.end = i,
            _ => runs.push(WorkingPeriod { start: i, end: i }),
        }
    }
    runs.into_iter()
        .fold(None::<WorkingPeriod>, |best, r| match best {
            Some(b) if b.len() >= r.len() => Some(b),
            _ => Some(r),
        })
        .ok_or(Error::NoWorkingPeriod { threshold_w })
}

/// Mean power over indices `[start + ⌈L/3⌉, start + ⌊2L/3⌋)`.
pub fn middle_third_average(trace: &PowerTrace, period: &WorkingPeriod) -> Result<f64> {
    if period.end >= trace.len() || period.start > period.end {
        return Err(Error::InvalidArgument(format!("period {period:?} outside trace of {}", trace.len())));
    }
    let l = period.len();
    let lo = period.start + l.div_ceil(3);
    let hi = period.start + 2 * l / 3;
    if l < 3 || lo >= hi {
        return Err(Error::PeriodTooShort { len: l });
    }
    let slice = &trace.samples[lo..hi];
    Ok(slice.iter().map(|s| s.p).sum::<f64>() / slice.len() as f64)
}

pub fn energy_per_frame(avg_power_w: f64, fps: f64) -> Result<f64> {
    if !(fps > 0.0) {
        return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
    }
    Ok(avg_power_w / fps)
}

pub fn fps_from_count(frames: u64, seconds: f64) -> Result<f64> {
    if !(seconds > 0.0) {
        return Err(Error::InvalidArgument(format!("duration must be positive, got {seconds}")));
    }
    Ok(frames as f64 / seconds)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyReport {
    pub avg_power_w: f64,
    pub fps: f64,
    pub joules_per_frame: f64,
    pub period_start_s: f64,
    pub period_end_s: f64,
}

impl EnergyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        format!(
            "working period  {:.1} s .. {:.1} s\naverage power   {:.2} W\ninference speed {:.2} FPS\nenergy          {:.3} J/frame\n",
            self.period_start_s, self.period_end_s, self.avg_power_w, self.fps, self.joules_per_frame
        )
    }
}

pub fn energy_report(trace: &PowerTrace, threshold_w: f64, max_gap: usize, fps: f64) -> Result<EnergyReport> {
    let period = find_working_period_with_gaps(trace, threshold_w, max_gap)?;
    let avg = middle_third_average(trace, &period)?;
    Ok(EnergyReport {
        avg_power_w: avg,
        fps,
        joules_per_frame: energy_per_frame(avg, fps)?,
        period_start_s: trace.samples[period.start].t,
        period_end_s: trace.samples[period.end].t,
    })
}
