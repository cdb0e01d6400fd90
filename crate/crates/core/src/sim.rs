//! Single-device duty-cycle simulation.
//!
//! A device sleeps until its next scheduled wake, records a short probe
//! window and runs its detector. On a detection it keeps recording until
//! every event it has captured has ended, uploads the audio (and, for every
//! third detected event, a camera image), then goes back to sleep. The
//! device is single-core: every activity is appended to one [`ActivityLog`]
//! and nothing overlaps.
//!
//! While the device is awake after a detection the microphone stays live,
//! so events that begin during the recording or the upload pipeline are
//! captured too and extend the recording.

use std::collections::HashSet;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{sample_detection, DetectError, DetectorModel, Truth};
use crate::power::{lifetime_years, ActivityLog, LogEntry, Mode, PowerError, PowerProfile};
use crate::qsched::{decay_epsilon, init_from_distribution, reward, select_action, ActionSpace, Hyperparameters, QError, QTable, RewardInputs};
use crate::rng::{SimRng, Streams};
use crate::trace::{Event, EventTrace, SECONDS_PER_DAY};

/// Seconds recorded after a false positive, when there is no event end to
/// follow.
pub const FALSE_POSITIVE_RECORD: f64 = 3.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("interval {interval} s is shorter than the {probe} s probe")]
    IntervalTooShort { interval: f64, probe: f64 },
    #[error("trace horizon {horizon} s is shorter than the {needed} s required")]
    TraceTooShort { horizon: f64, needed: f64 },
    #[error("period length {0} s must divide a day")]
    PeriodLength(f64),
    #[error("invalid setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Q(#[from] QError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Power(#[from] PowerError),
}

/// What drives a device's wake-ups.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleSpec {
    /// Wake every `interval` seconds regardless of the hour.
    Fixed { interval: f64 },
    /// Greedy inference on a learned table; one interval per period.
    QLearn { table: QTable, actions: ActionSpace },
}

impl ScheduleSpec {
    pub fn fixed(interval: f64) -> Self {
        Self::Fixed { interval }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Fixed { interval } => format!("fixed_{interval}s"),
            Self::QLearn { .. } => "qlearn".into(),
        }
    }
}

/// Detector, power model and the `w1` used when reporting rewards.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimSetup {
    pub detector: DetectorModel,
    pub profile: PowerProfile,
    pub hp: Hyperparameters,
}

impl SimSetup {
    pub fn validate(&self) -> Result<(), SimError> {
        self.detector.validate()?;
        self.profile.validate()?;
        self.hp.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    pub period: usize,
    pub hour: usize,
    pub interval: f64,
    pub activations: u64,
    pub positives: u64,
    pub negatives: u64,
    pub events_total: u64,
    pub events_detected: u64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub name: String,
    pub periods: Vec<PeriodRecord>,
    pub detection_rate: f64,
    /// Set when the evaluated span held no events; `detection_rate` is then
    /// reported as 1.
    pub zero_events: bool,
    pub events_total: u64,
    pub events_detected: u64,
    pub total_activations: u64,
    pub positives: u64,
    pub negatives: u64,
    pub charge_mah: f64,
    pub span_seconds: f64,
    pub avg_current_ma: f64,
    pub lifetime_years: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episodes_to_convergence: Option<usize>,
}

impl SimReport {
    fn from_periods(name: String, periods: Vec<PeriodRecord>, charge_mah: f64, span_seconds: f64, battery_mah: f64) -> Self {
        let events_total: u64 = periods.iter().map(|p| p.events_total).sum();
        let events_detected: u64 = periods.iter().map(|p| p.events_detected).sum();
        let positives: u64 = periods.iter().map(|p| p.positives).sum();
        let negatives: u64 = periods.iter().map(|p| p.negatives).sum();
        let zero_events = events_total == 0;
        let detection_rate = if zero_events { 1.0 } else { events_detected as f64 / events_total as f64 };
        let avg_current_ma = if span_seconds > 0.0 { charge_mah / (span_seconds / 3600.0) } else { 0.0 };
        let lifetime = lifetime_years(avg_current_ma, battery_mah).unwrap_or(f64::INFINITY);
        Self {
            name,
            periods,
            detection_rate,
            zero_events,
            events_total,
            events_detected,
            total_activations: positives + negatives,
            positives,
            negatives,
            charge_mah,
            span_seconds,
            avg_current_ma,
            lifetime_years: lifetime,
            episodes_to_convergence: None,
        }
    }

    pub fn total_reward(&self) -> f64 {
        self.periods.iter().map(|p| p.reward).sum()
    }

    pub fn write_periods_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "name,period,hour,interval,activations,positives,negatives,events_total,events_detected,reward")?;
        for p in &self.periods {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                self.name,
                p.period,
                p.hour,
                p.interval,
                p.activations,
                p.positives,
                p.negatives,
                p.events_total,
                p.events_detected,
                p.reward
            )?;
        }
        Ok(())
    }
}

/// Counts for one period of one device.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PeriodStats {
    pub activations: u64,
    pub positives: u64,
    pub negatives: u64,
    /// Events first captured by probes started in this period, in capture
    /// order.
    pub detected: Vec<u64>,
}

impl PeriodStats {
    pub fn reward_inputs(&self) -> RewardInputs {
        RewardInputs { n_pos: self.positives, n_neg: self.negatives }
    }
}

/// Steps one device through time, one period at a time.
pub struct Device<'a> {
    trace: &'a EventTrace,
    profile: &'a PowerProfile,
    detector: &'a DetectorModel,
    log: ActivityLog,
    sealed: usize,
    sealed_charge: f64,
    detected: HashSet<u64>,
    detected_count: u64,
    /// Log one ping per captured event after each upload.
    pub pings: bool,
}

impl<'a> Device<'a> {
    pub fn new(trace: &'a EventTrace, profile: &'a PowerProfile, detector: &'a DetectorModel) -> Self {
        Self {
            trace,
            profile,
            detector,
            log: ActivityLog::new(),
            sealed: 0,
            sealed_charge: 0.0,
            detected: HashSet::new(),
            detected_count: 0,
            pings: false,
        }
    }

    pub fn cursor(&self) -> f64 {
        self.log.cursor()
    }

    pub fn log(&self) -> &ActivityLog {
        &self.log
    }

    pub fn into_log(self) -> ActivityLog {
        self.log
    }

    pub fn is_detected(&self, id: u64) -> bool {
        self.detected.contains(&id)
    }

    /// Charge drawn so far, summed entry by entry in log order so that it
    /// equals `charge_consumed` of the log bit for bit.
    pub fn charge(&mut self) -> f64 {
        let entries = self.log.entries();
        if entries.is_empty() {
            return 0.0;
        }
        let last = entries.len() - 1;
        while self.sealed < last {
            let e: &LogEntry = &entries[self.sealed];
            self.sealed_charge += self.profile.charge(e.mode, e.duration());
            self.sealed += 1;
        }
        let e = &entries[last];
        self.sealed_charge + self.profile.charge(e.mode, e.duration())
    }

    pub fn sleep_until(&mut self, t: f64) {
        self.log.push_until(Mode::Sleep, t);
    }

    /// Q-learning bookkeeping at a period boundary: the update for the
    /// period just finished (if any), then inference for the next one.
    pub fn ql_boundary(&mut self, at: f64, update: bool) {
        self.sleep_until(at);
        if update {
            self.log.push(Mode::QlUpdate, self.profile.d_ql);
        }
        self.log.push(Mode::QlInfer, self.profile.d_ql);
    }

    pub fn ql_update_only(&mut self, at: f64) {
        self.sleep_until(at);
        self.log.push(Mode::QlUpdate, self.profile.d_ql);
    }

    /// Runs wake-ups every `interval` seconds from `start` (or from the end
    /// of the current activity, if later) until `end`.
    pub fn run_period<R: Rng>(&mut self, start: f64, end: f64, interval: f64, rng: &mut R) -> Result<PeriodStats, SimError> {
        let d_probe = self.profile.d_probe();
        if interval < d_probe {
            return Err(SimError::IntervalTooShort { interval, probe: d_probe });
        }
        let mut stats = PeriodStats::default();
        let mut wake = start.max(self.cursor());
        while wake < end {
            self.sleep_until(wake);
            self.probe(wake, rng, &mut stats)?;
            wake = (wake + interval).max(self.cursor());
        }
        Ok(stats)
    }

    fn undetected(&self, t0: f64, t1: f64) -> Vec<&'a Event> {
        let trace: &'a EventTrace = self.trace;
        trace.overlapping(t0, t1).filter(|e| !self.detected.contains(&e.id)).collect()
    }

    fn probe<R: Rng>(&mut self, wake: f64, rng: &mut R, stats: &mut PeriodStats) -> Result<(), SimError> {
        let window_end = wake + self.profile.d_probe_record;
        let present = self.undetected(wake, window_end);
        self.log.push(Mode::Probe, self.profile.d_probe());
        stats.activations += 1;
        let decision = match self.detector {
            DetectorModel::Goertzel(g) => g.probe(wake, &present, rng)?,
            other => {
                let truth = if present.is_empty() { Truth::Absent } else { Truth::Present };
                sample_detection(other, truth, rng)
            }
        };
        if !decision.is_event() {
            stats.negatives += 1;
            return Ok(());
        }
        stats.positives += 1;
        if present.is_empty() {
            let until = self.cursor() + FALSE_POSITIVE_RECORD;
            self.log.push_until(Mode::EventRecord, until);
            self.upload(0);
        } else {
            self.capture_chain(wake, present, stats);
        }
        Ok(())
    }

    fn capture(&mut self, events: &[&Event], stats: &mut PeriodStats) -> f64 {
        let mut end = f64::NEG_INFINITY;
        for e in events {
            if self.detected.insert(e.id) {
                stats.detected.push(e.id);
            }
            end = end.max(e.end());
        }
        end
    }

    fn capture_chain(&mut self, wake: f64, first: Vec<&Event>, stats: &mut PeriodStats) {
        let mut batch = first;
        loop {
            let mut rec_end = self.capture(&batch, stats).max(self.cursor());
            let mut in_batch = batch.len() as u64;
            // the microphone is on: anything starting before the recording ends joins it
            loop {
                let more = self.undetected(wake, rec_end);
                if more.is_empty() {
                    break;
                }
                in_batch += more.len() as u64;
                rec_end = rec_end.max(self.capture(&more, stats));
            }
            self.log.push_until(Mode::EventRecord, rec_end);
            self.upload(in_batch);
            // events that began while uploading
            batch = self.undetected(wake, self.cursor());
            if batch.is_empty() {
                break;
            }
        }
    }

    fn upload(&mut self, new_events: u64) {
        let p = self.profile;
        self.log.push(Mode::TxAudio, p.d_tx_audio);
        let ratio = p.camera_trigger_ratio;
        let before = (self.detected_count as f64 * ratio + 1e-9).floor() as u64;
        self.detected_count += new_events;
        let after = (self.detected_count as f64 * ratio + 1e-9).floor() as u64;
        for _ in before..after {
            self.log.push(Mode::Camera, p.d_camera);
            self.log.push(Mode::TxImage, p.d_tx_image);
        }
        if self.pings {
            for _ in 0..new_events {
                self.log.push(Mode::Ping, p.d_ping);
            }
        }
    }

    /// Sleeps out to `horizon` and returns the finished log.
    pub fn finish(mut self, horizon: f64) -> ActivityLog {
        self.sleep_until(horizon);
        self.log
    }
}

/// Period geometry for a trace.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Periods {
    pub length: f64,
    pub per_day: usize,
    pub origin_offset: usize,
}

impl Periods {
    pub fn new(length: f64, origin_hour: u8) -> Result<Self, SimError> {
        let per_day = SECONDS_PER_DAY / length;
        if !(length > 0.0) || per_day.fract() != 0.0 {
            return Err(SimError::PeriodLength(length));
        }
        let origin_offset = ((origin_hour as f64 * 3600.0) / length).floor() as usize;
        Ok(Self { length, per_day: per_day as usize, origin_offset })
    }

    pub fn count(&self, horizon: f64) -> usize {
        (horizon / self.length).ceil() as usize
    }

    /// Table state (period of day) for absolute period index `p`.
    pub fn state(&self, p: usize) -> usize {
        (p + self.origin_offset) % self.per_day
    }

    pub fn bounds(&self, p: usize, horizon: f64) -> (f64, f64) {
        let start = p as f64 * self.length;
        (start, ((p + 1) as f64 * self.length).min(horizon))
    }
}

fn period_records(
    trace: &EventTrace,
    periods: &Periods,
    stats: &[(f64, PeriodStats)],
    detected: impl Fn(u64) -> bool,
    hp: &Hyperparameters,
) -> Vec<PeriodRecord> {
    let mut totals = vec![0u64; stats.len()];
    let mut hits = vec![0u64; stats.len()];
    for e in trace.events() {
        let p = ((e.start / periods.length).floor() as usize).min(stats.len().saturating_sub(1));
        if p < stats.len() {
            totals[p] += 1;
            if detected(e.id) {
                hits[p] += 1;
            }
        }
    }
    stats
        .iter()
        .enumerate()
        .map(|(p, (interval, s))| {
            let state = periods.state(p);
            PeriodRecord {
                period: p,
                hour: state,
                interval: *interval,
                activations: s.activations,
                positives: s.positives,
                negatives: s.negatives,
                events_total: totals[p],
                events_detected: hits[p],
                reward: reward(s.reward_inputs(), hp.w1_for(state)),
            }
        })
        .collect()
}

/// Runs `spec` over the whole trace. Learned tables run greedily without
/// updates; use [`train_qlearn`] to learn.
pub fn run_schedule(
    trace: &EventTrace,
    spec: &ScheduleSpec,
    setup: &SimSetup,
    seed: u64,
) -> Result<(SimReport, ActivityLog), SimError> {
    run_schedule_with(trace, spec, setup, &Streams::new(seed).child("run"))
}

pub fn run_schedule_with(
    trace: &EventTrace,
    spec: &ScheduleSpec,
    setup: &SimSetup,
    streams: &Streams,
) -> Result<(SimReport, ActivityLog), SimError> {
    setup.validate()?;
    let period_length = match spec {
        ScheduleSpec::Fixed { .. } => crate::qsched::DEFAULT_PERIOD_LENGTH,
        ScheduleSpec::QLearn { table, .. } => table.period_length,
    };
    let periods = Periods::new(period_length, trace.origin_hour())?;
    if let ScheduleSpec::QLearn { table, actions } = spec {
        if table.states() != periods.per_day || table.actions() != actions.len() {
            return Err(SimError::Invalid(format!(
                "table is {}x{}, schedule needs {}x{}",
                table.states(),
                table.actions(),
                periods.per_day,
                actions.len()
            )));
        }
    }
    let d_probe = setup.profile.d_probe();
    if let ScheduleSpec::Fixed { interval } = spec {
        if *interval < d_probe {
            return Err(SimError::IntervalTooShort { interval: *interval, probe: d_probe });
        }
    }
    let horizon = trace.horizon();
    let mut rng = streams.child("detector").rng();
    let mut device = Device::new(trace, &setup.profile, &setup.detector);
    let mut stats = Vec::new();
    for p in 0..periods.count(horizon) {
        let (start, end) = periods.bounds(p, horizon);
        let interval = match spec {
            ScheduleSpec::Fixed { interval } => *interval,
            ScheduleSpec::QLearn { table, actions } => {
                device.ql_boundary(start, false);
                actions.interval(table.argmax(periods.state(p)))
            }
        };
        stats.push((interval, device.run_period(start, end, interval, &mut rng)?));
    }
    let detected: HashSet<u64> = trace.events().iter().map(|e| e.id).filter(|&id| device.is_detected(id)).collect();
    device.sleep_until(horizon);
    let charge = device.charge();
    let log = device.into_log();
    let records = period_records(trace, &periods, &stats, |id| detected.contains(&id), &setup.hp);
    let span = log.cursor();
    let report = SimReport::from_periods(spec.name(), records, charge, span, setup.profile.battery_mah);
    Ok((report, log))
}

/// How a learning run is split into days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub train_days: usize,
    pub eval_days: usize,
    /// Training episodes; episode `e` replays training day `e % train_days`.
    pub episodes: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self { train_days: 1, eval_days: 1, episodes: 30 }
    }
}

/// How the table starts out before the first episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QInit {
    #[default]
    Zero,
    /// Seed from per-period event probabilities estimated with random
    /// probes over the training days.
    FromDistribution { scale: f64, probes_per_period: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub table: QTable,
    pub train: SimReport,
    pub eval: SimReport,
    pub eval_log: ActivityLog,
    /// Greedy policy after each training episode.
    pub policies: Vec<Vec<usize>>,
}

/// Fraction of uniformly random probe instants in each period of day that
/// overlap an event, over the first `days` days.
pub fn estimate_event_distribution(
    trace: &EventTrace,
    days: usize,
    period_length: f64,
    probes_per_period: usize,
    probe_window: f64,
    rng: &mut SimRng,
) -> Result<Vec<f64>, SimError> {
    let periods = Periods::new(period_length, trace.origin_hour())?;
    let mut hits = vec![0usize; periods.per_day];
    let mut draws = vec![0usize; periods.per_day];
    let last = (days * periods.per_day).min(periods.count(trace.horizon()));
    for p in 0..last {
        let (start, end) = periods.bounds(p, trace.horizon());
        let s = periods.state(p);
        for _ in 0..probes_per_period {
            let t = rng.random_range(start..end);
            draws[s] += 1;
            if trace.overlapping(t, t + probe_window).next().is_some() {
                hits[s] += 1;
            }
        }
    }
    Ok(hits.iter().zip(&draws).map(|(&h, &d)| if d == 0 { 0.0 } else { h as f64 / d as f64 }).collect())
}

/// Trained table, training report and the greedy policy after each episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub table: QTable,
    pub train: SimReport,
    pub policies: Vec<Vec<usize>>,
}

/// Day-by-day learning on the first `plan.train_days` days of the trace,
/// then greedy evaluation on the following `plan.eval_days`.
pub fn train_qlearn(
    trace: &EventTrace,
    plan: &TrainPlan,
    actions: &ActionSpace,
    init: &QInit,
    setup: &SimSetup,
    seed: u64,
) -> Result<TrainOutcome, SimError> {
    if plan.eval_days == 0 {
        return Err(SimError::Invalid("need at least one evaluation day; use train_policy to train only".into()));
    }
    let needed = (plan.train_days + plan.eval_days) as f64 * SECONDS_PER_DAY;
    if trace.horizon() < needed {
        return Err(SimError::TraceTooShort { horizon: trace.horizon(), needed });
    }
    let Trained { table, train, policies } = train_policy(trace, plan, actions, init, setup, seed)?;
    let eval_trace = trace.slice(
        plan.train_days as f64 * SECONDS_PER_DAY,
        (plan.train_days + plan.eval_days) as f64 * SECONDS_PER_DAY,
    );
    let spec = ScheduleSpec::QLearn { table: table.clone(), actions: actions.clone() };
    let streams = Streams::new(seed).child("qlearn");
    let (mut eval, eval_log) = run_schedule_with(&eval_trace, &spec, setup, &streams.child("eval"))?;
    eval.episodes_to_convergence = train.episodes_to_convergence;
    Ok(TrainOutcome { table, train, eval, eval_log, policies })
}

/// The training half of [`train_qlearn`].
///
/// Each episode is one day. At each period start an interval is chosen
/// ε-greedily and held for the period; at the period end the reward is
/// applied with the next period of day (wrapping) as the next state. ε
/// decays once per episode.
pub fn train_policy(
    trace: &EventTrace,
    plan: &TrainPlan,
    actions: &ActionSpace,
    init: &QInit,
    setup: &SimSetup,
    seed: u64,
) -> Result<Trained, SimError> {
    setup.validate()?;
    let hp = &setup.hp;
    if plan.train_days == 0 || plan.episodes == 0 {
        return Err(SimError::Invalid("need at least one training day and episode".into()));
    }
    let needed = plan.train_days as f64 * SECONDS_PER_DAY;
    if trace.horizon() < needed {
        return Err(SimError::TraceTooShort { horizon: trace.horizon(), needed });
    }
    let d_probe = setup.profile.d_probe();
    if actions.interval(0) < d_probe {
        return Err(SimError::IntervalTooShort { interval: actions.interval(0), probe: d_probe });
    }
    let streams = Streams::new(seed).child("qlearn");
    let periods = Periods::new(crate::qsched::DEFAULT_PERIOD_LENGTH, trace.origin_hour())?;
    let mut table = match init {
        QInit::Zero => QTable::zeros(periods.per_day, actions.len()),
        QInit::FromDistribution { scale, probes_per_period } => {
            let mut rng = streams.child("init").rng();
            let probs = estimate_event_distribution(
                trace,
                plan.train_days,
                periods.length,
                *probes_per_period,
                setup.profile.d_probe_record,
                &mut rng,
            )?;
            init_from_distribution(&probs, *scale, actions.len())?
        }
    };

    let days: Vec<EventTrace> = (0..plan.train_days)
        .map(|d| trace.slice(d as f64 * SECONDS_PER_DAY, (d + 1) as f64 * SECONDS_PER_DAY))
        .collect();
    let mut eps = hp.eps_max;
    let mut policies = Vec::with_capacity(plan.episodes);
    let mut train_records = Vec::new();
    let (mut train_charge, mut train_span) = (0.0, 0.0);

    for episode in 0..plan.episodes {
        let day = &days[episode % plan.train_days];
        let ep = streams.indexed("episode", episode as u64);
        let mut explore = ep.child("explore").rng();
        let mut detect = ep.child("detector").rng();
        let mut device = Device::new(day, &setup.profile, &setup.detector);
        let day_periods = Periods::new(periods.length, day.origin_hour())?;
        let n = day_periods.count(day.horizon());
        let mut stats = Vec::with_capacity(n);
        for p in 0..n {
            let (start, end) = day_periods.bounds(p, day.horizon());
            let state = day_periods.state(p);
            device.ql_boundary(start, p > 0);
            let action = select_action(&table, state, eps, &mut explore);
            let interval = actions.interval(action);
            let s = device.run_period(start, end, interval, &mut detect)?;
            let r = reward(s.reward_inputs(), hp.w1_for(state));
            table.q_update(state, action, r, (state + 1) % day_periods.per_day, hp)?;
            stats.push((interval, s));
        }
        device.ql_update_only(device.cursor().max(day.horizon()));
        let detected: HashSet<u64> = day.events().iter().map(|e| e.id).filter(|&id| device.is_detected(id)).collect();
        device.sleep_until(day.horizon());
        let charge = device.charge();
        let log = device.into_log();
        train_span += log.cursor();
        train_charge += charge;
        let offset = train_records.len();
        train_records.extend(period_records(day, &day_periods, &stats, |id| detected.contains(&id), hp).into_iter().map(
            |mut r| {
                r.period += offset;
                r
            },
        ));
        policies.push(table.greedy_policy());
        eps = decay_epsilon(eps, hp);
    }

    let mut train = SimReport::from_periods("qlearn_train".into(), train_records, train_charge, train_span, setup.profile.battery_mah);
    train.episodes_to_convergence = convergence_episodes(&policies);

    Ok(Trained { table, train, policies })
}

/// Index of the first episode from which the greedy policy never changes
/// again. `None` when it was still changing at the final episode.
pub fn convergence_episodes(policies: &[Vec<usize>]) -> Option<usize> {
    let last = policies.last()?;
    let start = policies.iter().rposition(|p| p != last).map_or(0, |i| i + 1);
    if start == policies.len() - 1 && policies.len() > 1 {
        None
    } else {
        Some(start)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub detection_rate: f64,
    pub activations: u64,
    pub positives: u64,
    pub negatives: u64,
    pub avg_current_ma: f64,
    pub lifetime_years: f64,
}

impl From<&SimReport> for ComparisonRow {
    fn from(r: &SimReport) -> Self {
        Self {
            name: r.name.clone(),
            detection_rate: r.detection_rate,
            activations: r.total_activations,
            positives: r.positives,
            negatives: r.negatives,
            avg_current_ma: r.avg_current_ma,
            lifetime_years: r.lifetime_years,
        }
    }
}

pub const COMPARISON_HEADER: &str = "name,detection_rate,activations,positives,negatives,avg_current_ma,lifetime_years";

pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{COMPARISON_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.name, r.detection_rate, r.activations, r.positives, r.negatives, r.avg_current_ma, r.lifetime_years
        )?;
    }
    Ok(())
}

/// Runs every spec against the same trace and seed, in parallel.
pub fn compare_schedules(
    trace: &EventTrace,
    specs: &[(String, ScheduleSpec)],
    setup: &SimSetup,
    seed: u64,
) -> Result<Vec<(ComparisonRow, SimReport)>, SimError> {
    if specs.is_empty() {
        return Err(SimError::Invalid("no schedules to compare".into()));
    }
    specs
        .par_iter()
        .map(|(name, spec)| {
            let (mut report, _) = run_schedule(trace, spec, setup, seed)?;
            report.name = name.clone();
            Ok((ComparisonRow::from(&report), report))
        })
        .collect()
}
