//! Charge accounting from measured per-mode current draws.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hours in a mean year of 365.25 days.
pub const HOURS_PER_YEAR: f64 = 8766.0;

#[derive(Debug, Error)]
pub enum PowerError {
    #[error("log entries overlap at t={0}")]
    Overlap(f64),
    #[error("log has a gap at t={0}")]
    Gap(f64),
    #[error("log entry at t={0} has a negative duration")]
    NegativeDuration(f64),
    #[error("average current must be positive, got {0} mA")]
    NonPositiveCurrent(f64),
    #[error("invalid power profile: {0}")]
    Invalid(String),
    #[error("activity log csv line {line}: {msg}")]
    Csv { line: u64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sleep,
    Probe,
    EventRecord,
    TxAudio,
    TxImage,
    Camera,
    QlInfer,
    QlUpdate,
    Ping,
}

impl Mode {
    pub const ALL: [Mode; 9] = [
        Mode::Sleep,
        Mode::Probe,
        Mode::EventRecord,
        Mode::TxAudio,
        Mode::TxImage,
        Mode::Camera,
        Mode::QlInfer,
        Mode::QlUpdate,
        Mode::Ping,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Sleep => "sleep",
            Mode::Probe => "probe",
            Mode::EventRecord => "event_record",
            Mode::TxAudio => "tx_audio",
            Mode::TxImage => "tx_image",
            Mode::Camera => "camera",
            Mode::QlInfer => "ql_infer",
            Mode::QlUpdate => "ql_update",
            Mode::Ping => "ping",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    #[default]
    Goertzel,
    Tflite,
}

/// Current draws in mA (measured at 3.35 V) and the durations of the
/// operations whose timing is not fixed by the simulation itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerProfile {
    pub i_sleep: f64,
    pub i_record_3s: f64,
    pub i_probe_goertzel: f64,
    pub i_probe_tflite: f64,
    pub i_camera: f64,
    pub i_tx_audio: f64,
    pub i_tx_image: f64,
    pub i_ql_infer: f64,
    pub i_ql_update: f64,
    pub i_ping: f64,
    /// Probe recording window.
    pub d_probe_record: f64,
    /// Detector latency after the probe recording.
    pub d_probe_detect: f64,
    pub d_ql: f64,
    pub d_tx_audio: f64,
    pub d_tx_image: f64,
    pub d_camera: f64,
    pub d_ping: f64,
    pub battery_mah: f64,
    pub camera_trigger_ratio: f64,
    pub probe_kind: ProbeKind,
}

impl Default for PowerProfile {
    fn default() -> Self {
        Self {
            i_sleep: 0.097,
            i_record_3s: 31.57,
            i_probe_goertzel: 32.34,
            i_probe_tflite: 33.11,
            i_camera: 49.33,
            i_tx_audio: 61.33,
            i_tx_image: 97.73,
            i_ql_infer: 0.031,
            i_ql_update: 0.071,
            i_ping: 0.031,
            d_probe_record: 0.1,
            d_probe_detect: 0.03,
            d_ql: 0.1,
            d_tx_audio: 1.0,
            d_tx_image: 2.0,
            d_camera: 0.5,
            d_ping: 0.01,
            battery_mah: 13_400.0,
            camera_trigger_ratio: 1.0 / 3.0,
            probe_kind: ProbeKind::Goertzel,
        }
    }
}

impl PowerProfile {
    pub fn validate(&self) -> Result<(), PowerError> {
        let currents = [
            self.i_sleep,
            self.i_record_3s,
            self.i_probe_goertzel,
            self.i_probe_tflite,
            self.i_camera,
            self.i_tx_audio,
            self.i_tx_image,
            self.i_ql_infer,
            self.i_ql_update,
            self.i_ping,
        ];
        if currents.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(PowerError::Invalid("currents must be non-negative".into()));
        }
        let durations = [
            self.d_probe_record,
            self.d_probe_detect,
            self.d_ql,
            self.d_tx_audio,
            self.d_tx_image,
            self.d_camera,
            self.d_ping,
        ];
        if durations.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(PowerError::Invalid("durations must be positive".into()));
        }
        if !(self.battery_mah.is_finite() && self.battery_mah > 0.0) {
            return Err(PowerError::Invalid("battery_mah must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.camera_trigger_ratio) {
            return Err(PowerError::Invalid("camera_trigger_ratio must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Whole probe: recording plus detection latency.
    pub fn d_probe(&self) -> f64 {
        self.d_probe_record + self.d_probe_detect
    }

    pub fn i_probe(&self) -> f64 {
        match self.probe_kind {
            ProbeKind::Goertzel => self.i_probe_goertzel,
            ProbeKind::Tflite => self.i_probe_tflite,
        }
    }

    pub fn current(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Sleep => self.i_sleep,
            Mode::Probe => self.i_probe(),
            Mode::EventRecord => self.i_record_3s,
            Mode::TxAudio => self.i_tx_audio,
            Mode::TxImage => self.i_tx_image,
            Mode::Camera => self.i_camera,
            Mode::QlInfer => self.i_ql_infer,
            Mode::QlUpdate => self.i_ql_update,
            Mode::Ping => self.i_ping,
        }
    }

    /// Charge in mAh of `duration` seconds in `mode`.
    pub fn charge(&self, mode: Mode, duration: f64) -> f64 {
        self.current(mode) * duration / 3600.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub mode: Mode,
    pub start: f64,
    pub end: f64,
}

impl LogEntry {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Sequence of device modes covering `[0, span]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivityLog {
    entries: Vec<LogEntry>,
}

impl ActivityLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<LogEntry>) -> Self {
        Self { entries }
    }

    /// Builds entries from `(mode, start, duration)` triples.
    pub fn from_spans(spans: &[(Mode, f64, f64)]) -> Self {
        Self {
            entries: spans.iter().map(|&(mode, start, d)| LogEntry { mode, start, end: start + d }).collect(),
        }
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// End of the last entry (0 for an empty log).
    pub fn cursor(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.end)
    }

    /// Appends `mode` from the cursor for `duration` seconds, merging with
    /// the previous entry when it is the same mode. Returns the new cursor.
    pub fn push(&mut self, mode: Mode, duration: f64) -> f64 {
        let start = self.cursor();
        self.push_until(mode, start + duration);
        self.cursor()
    }

    /// Extends the log with `mode` up to absolute time `end`; a no-op when
    /// `end` is not past the cursor.
    pub fn push_until(&mut self, mode: Mode, end: f64) {
        let start = self.cursor();
        if end <= start {
            return;
        }
        match self.entries.last_mut() {
            Some(last) if last.mode == mode => last.end = end,
            _ => self.entries.push(LogEntry { mode, start, end }),
        }
    }

    pub fn span(&self) -> f64 {
        self.cursor() - self.entries.first().map_or(0.0, |e| e.start)
    }

    /// Total seconds spent in each mode.
    pub fn mode_seconds(&self) -> Vec<(Mode, f64)> {
        Mode::ALL
            .into_iter()
            .map(|m| (m, self.entries.iter().filter(|e| e.mode == m).map(LogEntry::duration).sum()))
            .collect()
    }

    /// Checks that the entries tile `[0, cursor]` without gaps or overlaps,
    /// allowing `tol` seconds of slack at each boundary.
    pub fn validate(&self, tol: f64) -> Result<(), PowerError> {
        let mut sorted: Vec<&LogEntry> = self.entries.iter().collect();
        sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
        let mut t = 0.0;
        for e in sorted {
            if e.end < e.start {
                return Err(PowerError::NegativeDuration(e.start));
            }
            if e.start > t + tol {
                return Err(PowerError::Gap(t));
            }
            if e.start < t - tol {
                return Err(PowerError::Overlap(e.start));
            }
            t = e.end;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), PowerError> {
        writeln!(out, "mode,start,duration")?;
        for e in &self.entries {
            writeln!(out, "{},{},{}", e.mode.name(), e.start, e.duration())?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, PowerError> {
        let mut text = String::new();
        let mut input = input;
        input.read_to_string(&mut text)?;
        let mut spans = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let line_no = i as u64 + 1;
            let bad = |msg: &str| PowerError::Csv { line: line_no, msg: msg.to_string() };
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split(',');
            let mode = it.next().and_then(Mode::parse).ok_or_else(|| bad("unknown mode"))?;
            let start: f64 = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad start"))?;
            let duration: f64 = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad duration"))?;
            spans.push((mode, start, duration));
        }
        Ok(Self::from_spans(&spans))
    }
}

/// Boundary slack used when validating logs built from `(start, duration)`
/// pairs.
pub fn boundary_tolerance(span: f64) -> f64 {
    1e-9 * span.max(1.0)
}

/// Total charge drawn over the log, in mAh.
pub fn charge_consumed(log: &ActivityLog, profile: &PowerProfile) -> Result<f64, PowerError> {
    log.validate(boundary_tolerance(log.cursor()))?;
    Ok(log.entries.iter().map(|e| profile.charge(e.mode, e.duration())).sum())
}

/// Average current in mA over the log's span.
pub fn average_current(log: &ActivityLog, profile: &PowerProfile) -> Result<f64, PowerError> {
    let span = log.span();
    if span <= 0.0 {
        return Ok(0.0);
    }
    Ok(charge_consumed(log, profile)? / (span / 3600.0))
}

pub fn lifetime_years(avg_current: f64, battery_mah: f64) -> Result<f64, PowerError> {
    if !(avg_current > 0.0) {
        return Err(PowerError::NonPositiveCurrent(avg_current));
    }
    Ok(battery_mah / avg_current / HOURS_PER_YEAR)
}

/// Charge of recording a detected event plus its uploads, in mAh.
pub fn event_cost(profile: &PowerProfile, event_duration: f64, with_camera: bool) -> f64 {
    let mut mas = profile.i_record_3s * event_duration + profile.i_tx_audio * profile.d_tx_audio;
    if with_camera {
        mas += profile.i_camera * profile.d_camera + profile.i_tx_image * profile.d_tx_image;
    }
    mas / 3600.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> PowerProfile {
        PowerProfile::default()
    }

    #[test]
    fn one_hour_sleep() {
        let log = ActivityLog::from_spans(&[(Mode::Sleep, 0.0, 3600.0)]);
        assert!((charge_consumed(&log, &p()).unwrap() - 0.097).abs() < 1e-12);
    }

    #[test]
    fn one_recording_in_an_hour() {
        let log = ActivityLog::from_spans(&[
            (Mode::Sleep, 0.0, 1000.0),
            (Mode::EventRecord, 1000.0, 3.0),
            (Mode::Sleep, 1003.0, 2597.0),
        ]);
        let expect = (3597.0 * 0.097 + 3.0 * 31.57) / 3600.0;
        assert!((charge_consumed(&log, &p()).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.1232275).abs() < 1e-7);
    }

    #[test]
    fn empty_log_is_free() {
        assert_eq!(charge_consumed(&ActivityLog::new(), &p()).unwrap(), 0.0);
        assert_eq!(average_current(&ActivityLog::new(), &p()).unwrap(), 0.0);
    }

    #[test]
    fn gaps_and_overlaps_rejected() {
        let gap = ActivityLog::from_spans(&[(Mode::Sleep, 0.0, 10.0), (Mode::Probe, 11.0, 1.0)]);
        assert!(matches!(charge_consumed(&gap, &p()), Err(PowerError::Gap(_))));
        let overlap = ActivityLog::from_spans(&[(Mode::Sleep, 0.0, 10.0), (Mode::Probe, 9.0, 1.0)]);
        assert!(matches!(charge_consumed(&overlap, &p()), Err(PowerError::Overlap(_))));
        let late = ActivityLog::from_spans(&[(Mode::Sleep, 5.0, 10.0)]);
        assert!(matches!(charge_consumed(&late, &p()), Err(PowerError::Gap(_))));
    }

    #[test]
    fn lifetime_examples() {
        let deep = lifetime_years(0.097, 13_400.0).unwrap();
        assert!((deep - 15.759).abs() < 0.01, "{deep}");
        let fixed_3s_reference = lifetime_years(2.217, 13_400.0).unwrap();
        assert!((fixed_3s_reference - 0.69).abs() < 0.005, "{fixed_3s_reference}");
        let half = lifetime_years(1.3, 6_700.0).unwrap();
        assert_eq!(half * 2.0, lifetime_years(1.3, 13_400.0).unwrap());
        assert!(lifetime_years(0.0, 1.0).is_err());
        assert!(lifetime_years(-1.0, 1.0).is_err());
    }

    #[test]
    fn event_cost_examples() {
        let prof = p();
        let c = event_cost(&prof, 3.0, false);
        assert!((c - (31.57 * 3.0 + 61.33) / 3600.0).abs() < 1e-15);
        assert!((c - 0.04334).abs() < 1e-5);
        assert!((event_cost(&prof, 0.0, false) - 61.33 / 3600.0).abs() < 1e-15);
        let extra = event_cost(&prof, 3.0, true) - c;
        assert!((extra - (49.33 * 0.5 + 97.73 * 2.0) / 3600.0).abs() < 1e-15);
    }

    #[test]
    fn push_merges_and_skips_empty() {
        let mut log = ActivityLog::new();
        log.push(Mode::Sleep, 1.0);
        log.push(Mode::Sleep, 2.0);
        log.push_until(Mode::Probe, 2.5);
        log.push_until(Mode::Probe, 1.0);
        assert_eq!(log.entries().len(), 1);
        log.push_until(Mode::Probe, 3.5);
        log.push(Mode::Probe, 0.0);
        assert_eq!(log.entries().len(), 2);
        assert_eq!(log.cursor(), 3.5);
    }

    #[test]
    fn csv_round_trip_keeps_charge() {
        let log = ActivityLog::from_spans(&[
            (Mode::Sleep, 0.0, 12.3),
            (Mode::Probe, 12.3, 0.13),
            (Mode::EventRecord, 12.43, 2.9),
            (Mode::TxAudio, 15.33, 1.0),
        ]);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let back = ActivityLog::read_csv(buf.as_slice()).unwrap();
        assert_eq!(charge_consumed(&back, &p()).unwrap(), charge_consumed(&log, &p()).unwrap());
    }

    fn arb_log() -> impl Strategy<Value = Vec<(usize, u32)>> {
        proptest::collection::vec((0usize..9, 1u32..5000), 0..30)
    }

    fn build(spans: &[(usize, u32)]) -> ActivityLog {
        let mut log = ActivityLog::new();
        for &(m, ms) in spans {
            log.push(Mode::ALL[m], ms as f64 / 1000.0);
        }
        log
    }

    proptest! {
        #[test]
        fn additive_over_concatenation(a in arb_log(), b in arb_log()) {
            let prof = p();
            let whole: Vec<_> = a.iter().chain(b.iter()).cloned().collect();
            let sum = charge_consumed(&build(&a), &prof).unwrap() + charge_consumed(&build(&b), &prof).unwrap();
            let joint = charge_consumed(&build(&whole), &prof).unwrap();
            prop_assert!((sum - joint).abs() <= 1e-9 * (1.0 + joint));
        }

        #[test]
        fn invariant_under_entry_reordering(a in arb_log()) {
            let prof = p();
            let log = build(&a);
            let mut rev: Vec<LogEntry> = log.entries().to_vec();
            rev.reverse();
            let shuffled = ActivityLog::from_entries(rev);
            let x = charge_consumed(&log, &prof).unwrap();
            let y = charge_consumed(&shuffled, &prof).unwrap();
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x));
        }

        #[test]
        fn replacing_sleep_never_lowers_charge(len in 10u32..10_000, at in 0u32..10_000, width in 1u32..1000, m in 1usize..9) {
            let prof = PowerProfile { i_ql_infer: 0.2, i_ql_update: 0.2, i_ping: 0.2, ..p() };
            let total = len as f64;
            let start = (at % len) as f64;
            let w = (width as f64).min(total - start);
            let base = ActivityLog::from_spans(&[(Mode::Sleep, 0.0, total)]);
            let mut spans = vec![(Mode::Sleep, 0.0, start), (Mode::ALL[m], start, w)];
            if start + w < total {
                spans.push((Mode::Sleep, start + w, total - start - w));
            }
            let busy = ActivityLog::from_spans(&spans);
            prop_assert!(charge_consumed(&busy, &prof).unwrap() >= charge_consumed(&base, &prof).unwrap());
        }
    }
}
