//! Event timelines: the input every simulation runs against.
//!
//! Intervals are half-open, `[start, start + duration)`, everywhere in this
//! crate. A trace starts at `origin_hour` o'clock and spans `horizon`
//! seconds; the default horizon is rounded up to whole days.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Streams;

pub const SECONDS_PER_HOUR: f64 = 3600.0;
pub const SECONDS_PER_DAY: f64 = 86_400.0;
pub const CSV_HEADER: &str = "id,start,duration,band,x,y";

/// Shortest duration the generator will draw.
pub const MIN_GENERATED_DURATION: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("event on line {line}: {msg}")]
    Validation { line: u64, msg: String },
    #[error("invalid trace: {0}")]
    Invalid(String),
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: u64,
    pub start: f64,
    pub duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<Point>,
}

impl Event {
    pub fn new(id: u64, start: f64, duration: f64) -> Self {
        Self { id, start, duration, band: None, location: None }
    }

    pub fn with_band(mut self, band: f64) -> Self {
        self.band = Some(band);
        self
    }

    pub fn with_location(mut self, location: Point) -> Self {
        self.location = Some(location);
        self
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    /// Half-open overlap with `[t0, t1)`.
    pub fn overlaps(&self, t0: f64, t1: f64) -> bool {
        t0 < t1 && self.start < t1 && self.end() > t0
    }

    fn check(&self) -> Result<(), String> {
        if !self.start.is_finite() || self.start < 0.0 {
            return Err(format!("start must be a non-negative number, got {}", self.start));
        }
        if !self.duration.is_finite() || self.duration <= 0.0 {
            return Err(format!("duration must be positive, got {}", self.duration));
        }
        if let Some(b) = self.band {
            if !b.is_finite() || b <= 0.0 {
                return Err(format!("band must be positive, got {b}"));
            }
        }
        if let Some(p) = self.location {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err("location must be finite".into());
            }
        }
        Ok(())
    }
}

/// A validated, sorted event timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct EventTrace {
    events: Vec<Event>,
    horizon: f64,
    origin_hour: u8,
    max_duration: f64,
}

#[derive(Serialize, Deserialize)]
struct TraceJson {
    horizon: f64,
    #[serde(default)]
    origin_hour: u8,
    events: Vec<Event>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    Csv,
    Json,
}

impl TraceFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(Self::Csv),
            "json" => Some(Self::Json),
            _ => None,
        }
    }
}

fn default_horizon(events: &[Event]) -> f64 {
    let last = events.iter().map(Event::end).fold(0.0, f64::max);
    let days = (last / SECONDS_PER_DAY).ceil().max(1.0);
    days * SECONDS_PER_DAY
}

impl EventTrace {
    /// Sorts and validates `events`. `horizon = None` rounds the last event
    /// end up to whole days (one day for an empty trace).
    pub fn new(mut events: Vec<Event>, horizon: Option<f64>, origin_hour: u8) -> Result<Self, TraceError> {
        if origin_hour > 23 {
            return Err(TraceError::Invalid(format!("origin_hour {origin_hour} not in 0..=23")));
        }
        for e in &events {
            e.check().map_err(|msg| TraceError::Invalid(format!("event {}: {msg}", e.id)))?;
        }
        let horizon = match horizon {
            Some(h) if !(h.is_finite() && h > 0.0) => {
                return Err(TraceError::Invalid(format!("horizon must be positive, got {h}")))
            }
            Some(h) => h,
            None => default_horizon(&events),
        };
        if let Some(e) = events.iter().find(|e| e.end() > horizon) {
            return Err(TraceError::Invalid(format!(
                "event {} ends at {} past horizon {}",
                e.id,
                e.end(),
                horizon
            )));
        }
        events.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.id.cmp(&b.id)));
        let mut ids: Vec<u64> = events.iter().map(|e| e.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(TraceError::Invalid(format!("duplicate event id {}", w[0])));
        }
        let max_duration = events.iter().map(|e| e.duration).fold(0.0, f64::max);
        Ok(Self { events, horizon, origin_hour, max_duration })
    }

    pub fn empty(horizon: f64) -> Self {
        Self::new(Vec::new(), Some(horizon), 0).expect("positive horizon")
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn origin_hour(&self) -> u8 {
        self.origin_hour
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn days(&self) -> usize {
        (self.horizon / SECONDS_PER_DAY).floor() as usize
    }

    /// Hour of day (0..24) at trace time `t`.
    pub fn hour_of(&self, t: f64) -> usize {
        ((self.origin_hour as u64 + (t / SECONDS_PER_HOUR).floor() as u64) % 24) as usize
    }

    /// All events whose interval intersects `[t0, t1)`; an empty window
    /// intersects nothing.
    pub fn events_in_window(&self, t0: f64, t1: f64) -> Vec<&Event> {
        self.overlapping(t0, t1).collect()
    }

    pub fn overlapping(&self, t0: f64, t1: f64) -> impl Iterator<Item = &Event> {
        let (lo, hi) = self.window_bounds(t0, t1);
        self.events[lo..hi].iter().filter(move |e| e.overlaps(t0, t1))
    }

    // Candidate range: start in [t0 - max_duration, t1), padded against
    // rounding in `start + duration`. Callers filter exact ends.
    fn window_bounds(&self, t0: f64, t1: f64) -> (usize, usize) {
        if !(t0 < t1) {
            return (0, 0);
        }
        let floor = t0 - self.max_duration - 1e-6;
        let lo = self.events.partition_point(|e| e.start < floor);
        let hi = self.events.partition_point(|e| e.start < t1);
        (lo, hi.max(lo))
    }

    /// Events restricted to `[t0, t1)` by start time, re-based to `t0`.
    /// Events that would cross `t1` are dropped.
    pub fn slice(&self, t0: f64, t1: f64) -> EventTrace {
        let events = self
            .events
            .iter()
            .filter(|e| e.start >= t0 && e.end() <= t1)
            .map(|e| Event { start: e.start - t0, ..e.clone() })
            .collect();
        let origin = ((self.origin_hour as u64 + (t0 / SECONDS_PER_HOUR).floor() as u64) % 24) as u8;
        EventTrace::new(events, Some(t1 - t0), origin).expect("slice of a valid trace is valid")
    }

    pub fn has_locations(&self) -> bool {
        self.events.iter().all(|e| e.location.is_some())
    }

    /// Event counts per hour of day, summed over all days.
    pub fn hourly_histogram(&self) -> [usize; 24] {
        let mut hist = [0usize; 24];
        for e in &self.events {
            hist[self.hour_of(e.start)] += 1;
        }
        hist
    }
}

// ----------------------------------------------------------------------------
// File formats
// ----------------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_csv<W: Write>(trace: &EventTrace, mut out: W) -> Result<(), TraceError> {
    writeln!(out, "# horizon={},origin_hour={}", trace.horizon, trace.origin_hour)?;
    writeln!(out, "{CSV_HEADER}")?;
    for e in &trace.events {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.id,
            e.start,
            e.duration,
            fmt_opt(e.band),
            fmt_opt(e.location.map(|p| p.x)),
            fmt_opt(e.location.map(|p| p.y)),
        )?;
    }
    Ok(())
}

fn parse_meta(line: &str) -> (Option<f64>, u8) {
    let mut horizon = None;
    let mut origin = 0;
    for kv in line.trim_start_matches('#').split(',') {
        let mut it = kv.trim().splitn(2, '=');
        match (it.next(), it.next()) {
            (Some("horizon"), Some(v)) => horizon = v.trim().parse().ok(),
            (Some("origin_hour"), Some(v)) => origin = v.trim().parse().unwrap_or(0),
            _ => {}
        }
    }
    (horizon, origin)
}

pub fn read_csv<R: Read>(input: R) -> Result<EventTrace, TraceError> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let (mut horizon, mut origin) = (None, 0u8);
    let mut line_offset = 0u64;
    let header_line = if first.starts_with('#') {
        (horizon, origin) = parse_meta(&first);
        line_offset = 1;
        let mut h = String::new();
        reader.read_line(&mut h)?;
        h
    } else {
        first
    };
    let header: Vec<&str> = header_line.trim().split(',').map(str::trim).collect();
    if header.len() < 3 || header[..3] != ["id", "start", "duration"] {
        return Err(TraceError::Parse {
            line: line_offset + 1,
            msg: format!("expected header `{CSV_HEADER}`, got `{}`", header_line.trim()),
        });
    }

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut events = Vec::new();
    let mut lines = Vec::new();
    let mut missing_ids = Vec::new();
    for (row_idx, rec) in rdr.records().enumerate() {
        let line = line_offset + 2 + row_idx as u64;
        let rec = rec.map_err(|e| TraceError::Parse { line, msg: e.to_string() })?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let field = |i: usize| rec.get(i).filter(|s| !s.is_empty());
        let num = |i: usize, name: &str| -> Result<Option<f64>, TraceError> {
            field(i)
                .map(|s| s.parse::<f64>())
                .transpose()
                .map_err(|_| TraceError::Parse { line, msg: format!("malformed {name} `{}`", rec.get(i).unwrap_or("")) })
        };
        let id = field(0)
            .map(|s| s.parse::<u64>())
            .transpose()
            .map_err(|_| TraceError::Parse { line, msg: format!("malformed id `{}`", rec.get(0).unwrap_or("")) })?;
        let start = num(1, "start")?.ok_or(TraceError::Parse { line, msg: "missing start".into() })?;
        let duration = num(2, "duration")?.ok_or(TraceError::Parse { line, msg: "missing duration".into() })?;
        let band = num(3, "band")?;
        let location = match (num(4, "x")?, num(5, "y")?) {
            (Some(x), Some(y)) => Some(Point::new(x, y)),
            (None, None) => None,
            _ => return Err(TraceError::Validation { line, msg: "x and y must be given together".into() }),
        };
        let ev = Event { id: id.unwrap_or(0), start, duration, band, location };
        ev.check().map_err(|msg| TraceError::Validation { line, msg })?;
        if let Some(h) = horizon {
            if ev.end() > h {
                return Err(TraceError::Validation { line, msg: format!("ends at {} past horizon {h}", ev.end()) });
            }
        }
        if id.is_none() {
            missing_ids.push(events.len());
        }
        events.push(ev);
        lines.push(line);
    }
    if !missing_ids.is_empty() {
        let first = events.iter().map(|e| e.id + 1).max().unwrap_or(0);
        for (next, &i) in (first..).zip(&missing_ids) {
            events[i].id = next;
        }
    }
    let mut seen = std::collections::HashMap::new();
    for (e, &line) in events.iter().zip(&lines) {
        if seen.insert(e.id, line).is_some() {
            return Err(TraceError::Validation { line, msg: format!("duplicate id {}", e.id) });
        }
    }
    EventTrace::new(events, horizon, origin)
}

pub fn write_json<W: Write>(trace: &EventTrace, out: W) -> Result<(), TraceError> {
    let doc = TraceJson { horizon: trace.horizon, origin_hour: trace.origin_hour, events: trace.events.clone() };
    serde_json::to_writer_pretty(out, &doc)?;
    Ok(())
}

pub fn read_json<R: Read>(input: R) -> Result<EventTrace, TraceError> {
    let doc: TraceJson = serde_json::from_reader(input)?;
    for (i, e) in doc.events.iter().enumerate() {
        e.check().map_err(|msg| TraceError::Validation { line: i as u64, msg })?;
    }
    EventTrace::new(doc.events, Some(doc.horizon), doc.origin_hour)
}

pub fn load_trace(path: &Path, format: TraceFormat) -> Result<EventTrace, TraceError> {
    let file = fs::File::open(path)?;
    match format {
        TraceFormat::Csv => read_csv(file),
        TraceFormat::Json => read_json(file),
    }
}

pub fn save_trace(trace: &EventTrace, path: &Path, format: TraceFormat) -> Result<(), TraceError> {
    let mut buf = Vec::new();
    match format {
        TraceFormat::Csv => write_csv(trace, &mut buf)?,
        TraceFormat::Json => write_json(trace, &mut buf)?,
    }
    fs::write(path, buf)?;
    Ok(())
}

// ----------------------------------------------------------------------------
// Synthetic traces
// ----------------------------------------------------------------------------

/// Rectangle event locations are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

fn default_band_range() -> (f64, f64) {
    (2000.0, 8000.0)
}

/// Expected event rate for each hour of the day plus the duration law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiurnalProfile {
    pub hourly_rate: [f64; 24],
    pub duration_mean: f64,
    pub duration_sd: f64,
    /// Uniform range for event dominant frequencies, Hz.
    #[serde(default = "default_band_range")]
    pub band_hz: (f64, f64),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
}

impl DiurnalProfile {
    pub fn constant(rate: f64) -> Self {
        Self {
            hourly_rate: [rate; 24],
            duration_mean: 3.0,
            duration_sd: 0.0,
            band_hz: default_band_range(),
            region: None,
        }
    }

    /// Dawn and dusk chorus: `peak` events/h in hours 5-8 and 17-19 and
    /// `base` elsewhere, 3 s calls.
    pub fn two_peak(peak: f64, base: f64) -> Self {
        let mut hourly_rate = [base; 24];
        for h in (5..=8).chain(17..=19) {
            hourly_rate[h] = peak;
        }
        Self { hourly_rate, ..Self::constant(0.0) }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if let Some(r) = self.hourly_rate.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(TraceError::Profile(format!("hourly rate {r} must be non-negative")));
        }
        if !(self.duration_mean.is_finite() && self.duration_mean > 0.0) {
            return Err(TraceError::Profile("duration_mean must be positive".into()));
        }
        if !(self.duration_sd.is_finite() && self.duration_sd >= 0.0) {
            return Err(TraceError::Profile("duration_sd must be non-negative".into()));
        }
        let (lo, hi) = self.band_hz;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(TraceError::Profile(format!("band range ({lo}, {hi}) invalid")));
        }
        if let Some(r) = self.region {
            if !(r.x_max >= r.x_min && r.y_max >= r.y_min) {
                return Err(TraceError::Profile("region bounds inverted".into()));
            }
        }
        Ok(())
    }

    fn draw_duration<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.duration_sd == 0.0 {
            return self.duration_mean.max(MIN_GENERATED_DURATION);
        }
        let normal = Normal::new(self.duration_mean, self.duration_sd).expect("validated sd");
        for _ in 0..10_000 {
            let d = normal.sample(rng);
            if d >= MIN_GENERATED_DURATION {
                return d;
            }
        }
        MIN_GENERATED_DURATION
    }
}

/// Inhomogeneous Poisson trace with piecewise-constant hourly rates.
///
/// Each day draws from its own stream, so the first `n` days of a longer
/// trace equal an `n`-day trace with the same seed.
pub fn generate_trace(profile: &DiurnalProfile, days: usize, seed: u64) -> Result<EventTrace, TraceError> {
    profile.validate()?;
    if days == 0 {
        return Err(TraceError::Profile("days must be at least 1".into()));
    }
    let horizon = days as f64 * SECONDS_PER_DAY;
    let root = Streams::new(seed).child("trace");
    let mut events = Vec::new();
    for day in 0..days {
        let mut rng = root.indexed("day", day as u64).rng();
        let day_start = day as f64 * SECONDS_PER_DAY;
        for (hour, &rate) in profile.hourly_rate.iter().enumerate() {
            if rate == 0.0 {
                continue;
            }
            let gap = Exp::new(rate / SECONDS_PER_HOUR).expect("positive rate");
            let hour_start = day_start + hour as f64 * SECONDS_PER_HOUR;
            let hour_end = hour_start + SECONDS_PER_HOUR;
            let mut t = hour_start + gap.sample(&mut rng);
            while t < hour_end {
                let duration = profile.draw_duration(&mut rng);
                let band = rng.random_range(profile.band_hz.0..=profile.band_hz.1);
                let location = profile.region.map(|r| {
                    Point::new(rng.random_range(r.x_min..=r.x_max), rng.random_range(r.y_min..=r.y_max))
                });
                if t + duration <= horizon {
                    events.push(Event { id: 0, start: t, duration, band: Some(band), location });
                }
                t += gap.sample(&mut rng);
            }
        }
    }
    events.sort_by(|a, b| a.start.total_cmp(&b.start));
    for (i, e) in events.iter_mut().enumerate() {
        e.id = i as u64;
    }
    EventTrace::new(events, Some(horizon), 0)
}
