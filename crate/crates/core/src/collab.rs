//! Networks of devices with overlapping sensing areas.
//!
//! Devices whose sensing disks pairwise intersect form clusters. After each
//! detection a device pings its neighbours with a hash of the event's
//! features, so each device can estimate how many others caught the same
//! event. A device is penalised for those duplicates unless it holds its
//! cluster's round-robin slot for the period.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qsched::{decay_epsilon, reward, select_action, ActionSpace, QTable, RewardInputs};
use crate::power::ActivityLog;
use crate::rng::{fnv1a64, SimRng, Streams};
use crate::sim::{train_policy, Device, QInit, SimError, SimSetup, TrainPlan};
use crate::trace::{Event, EventTrace, Point, SECONDS_PER_DAY};

const HOURS: usize = 24;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("trace events carry no locations")]
    MissingLocations,
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("invalid network config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceNode {
    pub id: u64,
    pub position: Point,
    pub sensing_radius: f64,
    pub comm_radius: f64,
    pub battery_level: f64,
    pub qtable: QTable,
}

impl DeviceNode {
    pub fn new(id: u64, position: Point, sensing_radius: f64, comm_radius: f64) -> Self {
        Self { id, position, sensing_radius, comm_radius, battery_level: 0.0, qtable: QTable::zeros(0, 0) }
    }

    pub fn senses(&self, at: Point) -> bool {
        self.position.distance(&at) <= self.sensing_radius
    }

    fn sensing_overlaps(&self, other: &DeviceNode) -> bool {
        self.position.distance(&other.position) <= self.sensing_radius + other.sensing_radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutDevice {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub sensing_radius: f64,
    pub comm_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub devices: Vec<LayoutDevice>,
}

impl Layout {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.devices.is_empty() {
            return Err(NetworkError::Layout("no devices".into()));
        }
        let mut ids = BTreeSet::new();
        for d in &self.devices {
            if !ids.insert(d.id) {
                return Err(NetworkError::Layout(format!("duplicate device id {}", d.id)));
            }
            if !(d.sensing_radius > 0.0) || !(d.comm_radius > 0.0) {
                return Err(NetworkError::Layout(format!("device {} needs positive radii", d.id)));
            }
            if !d.x.is_finite() || !d.y.is_finite() {
                return Err(NetworkError::Layout(format!("device {} has a non-finite position", d.id)));
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> Result<Vec<DeviceNode>, NetworkError> {
        self.validate()?;
        let mut nodes: Vec<_> = self
            .devices
            .iter()
            .map(|d| DeviceNode::new(d.id, Point { x: d.x, y: d.y }, d.sensing_radius, d.comm_radius))
            .collect();
        nodes.sort_by_key(|n| n.id);
        Ok(nodes)
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        let layout: Layout = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        layout.validate()?;
        Ok(layout)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub members: Vec<u64>,
    pub order: Vec<u64>,
}

impl Cluster {
    pub fn new(mut members: Vec<u64>) -> Self {
        members.sort_unstable();
        Self { order: members.clone(), members }
    }

    pub fn contains(&self, id: u64) -> bool {
        self.members.binary_search(&id).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub fn slot_holder(cluster: &Cluster, t: usize) -> u64 {
    cluster.order[t % cluster.order.len()]
}

/// All maximal cliques of two or more nodes in the sensing-overlap graph.
pub fn form_clusters(nodes: &[DeviceNode]) -> Vec<Cluster> {
    let n = nodes.len();
    let adj: Vec<BTreeSet<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && nodes[i].sensing_overlaps(&nodes[j])).collect())
        .collect();
    let mut cliques = Vec::new();
    bron_kerbosch(&adj, Vec::new(), (0..n).collect(), BTreeSet::new(), &mut cliques);
    let mut clusters: Vec<Cluster> = cliques
        .into_iter()
        .filter(|c| c.len() >= 2)
        .map(|c| Cluster::new(c.into_iter().map(|i| nodes[i].id).collect()))
        .collect();
    clusters.sort_by(|a, b| a.members.cmp(&b.members));
    clusters
}

fn bron_kerbosch(adj: &[BTreeSet<usize>], r: Vec<usize>, mut p: BTreeSet<usize>, mut x: BTreeSet<usize>, out: &mut Vec<Vec<usize>>) {
    if p.is_empty() && x.is_empty() {
        out.push(r);
        return;
    }
    let pivot = p.union(&x).max_by_key(|&&u| adj[u].intersection(&p).count()).copied();
    let candidates: Vec<usize> = match pivot {
        Some(u) => p.difference(&adj[u]).copied().collect(),
        None => Vec::new(),
    };
    for v in candidates {
        let mut r2 = r.clone();
        r2.push(v);
        let p2 = p.intersection(&adj[v]).copied().collect();
        let x2 = x.intersection(&adj[v]).copied().collect();
        bron_kerbosch(adj, r2, p2, x2, out);
        p.remove(&v);
        x.insert(v);
    }
}

/// Digest of an event's quantised features: band to 100 Hz, start to 1 s.
pub fn event_hash(event: &Event) -> u64 {
    let band = (event.band.unwrap_or(0.0) / 100.0).round() as i64;
    let start = event.start.round() as i64;
    let mut bytes = [0u8; 16];
    bytes[..8].copy_from_slice(&band.to_le_bytes());
    bytes[8..].copy_from_slice(&start.to_le_bytes());
    fnv1a64(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ping {
    pub sender: u64,
    pub event_hash: u64,
    pub period: usize,
}

/// One device's detection of one event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Detection {
    pub device: u64,
    pub event: u64,
    pub event_hash: u64,
}

/// Pings a device received that match one of its own detections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OverlapEstimate {
    pub event_hash: u64,
    pub senders: Vec<u64>,
}

impl OverlapEstimate {
    pub fn estimate(&self) -> usize {
        1 + self.senders.len()
    }
}

/// Broadcasts one ping per detection to every other device within the
/// sender's comm radius, each copy lost with probability `drop_rate`.
/// Returns, per detecting device, one estimate per detection it made.
pub fn deliver_pings<R: Rng>(
    nodes: &[&DeviceNode],
    detections: &[Detection],
    period: usize,
    drop_rate: f64,
    rng: &mut R,
) -> BTreeMap<u64, Vec<OverlapEstimate>> {
    let by_id: HashMap<u64, &DeviceNode> = nodes.iter().map(|n| (n.id, *n)).collect();
    let mut inbox: HashMap<u64, Vec<Ping>> = HashMap::new();
    for d in detections {
        let Some(sender) = by_id.get(&d.device) else { continue };
        let ping = Ping { sender: d.device, event_hash: d.event_hash, period };
        for n in nodes {
            if n.id == d.device || sender.position.distance(&n.position) > sender.comm_radius {
                continue;
            }
            if drop_rate > 0.0 && rng.random::<f64>() < drop_rate {
                continue;
            }
            inbox.entry(n.id).or_default().push(ping);
        }
    }
    let mut out: BTreeMap<u64, Vec<OverlapEstimate>> = BTreeMap::new();
    for d in detections {
        let senders: BTreeSet<u64> = inbox
            .get(&d.device)
            .map(|pings| pings.iter().filter(|p| p.event_hash == d.event_hash).map(|p| p.sender).collect())
            .unwrap_or_default();
        out.entry(d.device)
            .or_default()
            .push(OverlapEstimate { event_hash: d.event_hash, senders: senders.into_iter().collect() });
    }
    out
}

/// Per-device reward less `w2` per duplicate, where duplicates reported by
/// members of a cluster in which `device` holds the slot for `t` are free.
pub fn local_reward(
    device: u64,
    t: usize,
    inputs: RewardInputs,
    estimates: &[OverlapEstimate],
    clusters: &[Cluster],
    w1: f64,
    w2: f64,
) -> f64 {
    let exempt: BTreeSet<u64> = clusters
        .iter()
        .filter(|c| c.contains(device) && slot_holder(c, t) == device)
        .flat_map(|c| c.members.iter().copied())
        .collect();
    let duplicates: usize = estimates.iter().map(|e| e.senders.iter().filter(|s| !exempt.contains(s)).count()).sum();
    reward(inputs, w1) - w2 * duplicates as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkRewardInputs {
    pub n_pos: u64,
    pub n_neg: u64,
    pub overlaps: Vec<u64>,
    pub battery_sd: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

pub fn network_reward(inputs: &NetworkRewardInputs) -> f64 {
    let extra: u64 = inputs.overlaps.iter().map(|&o| o.saturating_sub(1)).sum();
    reward(RewardInputs { n_pos: inputs.n_pos, n_neg: inputs.n_neg }, inputs.w1)
        - inputs.w2 * extra as f64
        - inputs.w3 * inputs.battery_sd
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Takes a device out of the network at the start of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub device: u64,
    pub episode: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Training episodes, one simulated day each.
    pub episodes: usize,
    /// Greedy episodes after training, without updates. When non-zero the
    /// same days are also run with the starting tables as a baseline.
    pub eval_episodes: usize,
    pub w2: f64,
    pub w3: f64,
    pub drop_rate: f64,
    /// Lower edges of the detection-count bins above zero.
    pub bin_edges: Vec<u64>,
    /// Episodes of single-device pretraining whose policy seeds every
    /// device; zero starts from an empty table.
    pub pretrain_episodes: usize,
    pub failure: Option<Failure>,
    /// Former cluster mates of a failed device go back to the pretrained
    /// table and the starting ε.
    pub reseed_on_failure: bool,
    pub ping_energy: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            episodes: 30,
            eval_episodes: 0,
            w2: 1.0,
            w3: 0.01,
            drop_rate: 0.0,
            bin_edges: vec![1, 3, 6],
            pretrain_episodes: 30,
            failure: None,
            reseed_on_failure: true,
            ping_energy: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.episodes == 0 {
            return Err(NetworkError::Config("episodes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(NetworkError::Config("drop_rate must lie in [0, 1]".into()));
        }
        if !self.w2.is_finite() || !self.w3.is_finite() {
            return Err(NetworkError::Config("w2 and w3 must be finite".into()));
        }
        if self.bin_edges.first() == Some(&0) || self.bin_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(NetworkError::Config("bin_edges must be positive and strictly increasing".into()));
        }
        if let Some(f) = self.failure {
            if f.episode >= self.episodes {
                return Err(NetworkError::Config("failure must happen during training".into()));
            }
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.bin_edges.len() + 1
    }

    pub fn bin(&self, detections: usize) -> usize {
        self.bin_edges.iter().take_while(|&&e| detections as u64 >= e).count()
    }

    pub fn days_needed(&self) -> usize {
        self.episodes + self.eval_episodes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevicePeriod {
    pub episode: usize,
    pub period: usize,
    pub hour: usize,
    pub state: usize,
    pub interval: f64,
    pub activations: u64,
    pub positives: u64,
    pub negatives: u64,
    pub detections: u64,
    pub duplicates_estimated: u64,
    pub slot_holder: bool,
    pub local_reward: f64,
    pub battery_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub id: u64,
    pub failed_at_episode: Option<usize>,
    pub activations: u64,
    pub positives: u64,
    pub negatives: u64,
    pub detections: u64,
    pub charge_mah: f64,
    pub battery_level: f64,
    pub periods: Vec<DevicePeriod>,
}

impl DeviceReport {
    fn new(id: u64, battery_level: f64) -> Self {
        Self {
            id,
            failed_at_episode: None,
            activations: 0,
            positives: 0,
            negatives: 0,
            detections: 0,
            charge_mah: 0.0,
            battery_level,
            periods: Vec::new(),
        }
    }

    pub fn activations_in(&self, episodes: std::ops::Range<usize>) -> u64 {
        self.periods.iter().filter(|p| episodes.contains(&p.episode)).map(|p| p.activations).sum()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "episode,period,hour,state,interval,activations,positives,negatives,detections,duplicates_estimated,slot_holder,local_reward,battery_level"
        )?;
        for p in &self.periods {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                p.episode,
                p.period,
                p.hour,
                p.state,
                p.interval,
                p.activations,
                p.positives,
                p.negatives,
                p.detections,
                p.duplicates_estimated,
                p.slot_holder,
                p.local_reward,
                p.battery_level
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub greedy: bool,
    pub events_total: u64,
    pub events_detected: u64,
    pub detection_rate: f64,
    /// Extra detections beyond the first, per detected event.
    pub mean_duplicates: f64,
    /// Activations per device, in device order; failed devices report 0.
    pub activations: Vec<u64>,
    pub battery_sd: f64,
    pub global_reward: f64,
}

/// Totals over a run of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSummary {
    pub episodes: usize,
    pub events_total: u64,
    pub events_detected: u64,
    pub detection_rate: f64,
    pub mean_duplicates: f64,
    pub activations: u64,
    pub global_reward: f64,
}

impl NetworkSummary {
    pub fn over(episodes: &[EpisodeMetrics]) -> Self {
        let events_total: u64 = episodes.iter().map(|e| e.events_total).sum();
        let events_detected: u64 = episodes.iter().map(|e| e.events_detected).sum();
        let duplicates: f64 = episodes.iter().map(|e| e.mean_duplicates * e.events_detected as f64).sum();
        Self {
            episodes: episodes.len(),
            events_total,
            events_detected,
            detection_rate: if events_total == 0 { 1.0 } else { events_detected as f64 / events_total as f64 },
            mean_duplicates: if events_detected == 0 { 0.0 } else { duplicates / events_detected as f64 },
            activations: episodes.iter().flat_map(|e| &e.activations).sum(),
            global_reward: episodes.iter().map(|e| e.global_reward).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkReport {
    pub clusters: Vec<Cluster>,
    pub devices: Vec<DeviceReport>,
    pub episodes: Vec<EpisodeMetrics>,
    /// Battery spread across active devices at the end of every period.
    pub battery_sd: Vec<f64>,
    pub overall: NetworkSummary,
    pub eval: Option<NetworkSummary>,
    /// The evaluation days run greedily with the starting tables.
    pub baseline: Option<NetworkSummary>,
}

impl NetworkReport {
    pub fn write_episodes_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let ids: Vec<String> = self.devices.iter().map(|d| format!("activations_{}", d.id)).collect();
        writeln!(
            out,
            "episode,greedy,events_total,events_detected,detection_rate,mean_duplicates,battery_sd,global_reward,{}",
            ids.join(",")
        )?;
        for e in &self.episodes {
            let acts: Vec<String> = e.activations.iter().map(|a| a.to_string()).collect();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                e.episode,
                e.greedy,
                e.events_total,
                e.events_detected,
                e.detection_rate,
                e.mean_duplicates,
                e.battery_sd,
                e.global_reward,
                acts.join(",")
            )?;
        }
        Ok(())
    }

    pub fn write_battery_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "period,battery_sd")?;
        for (p, sd) in self.battery_sd.iter().enumerate() {
            writeln!(out, "{p},{sd}")?;
        }
        Ok(())
    }
}

pub struct NetworkOutcome {
    pub report: NetworkReport,
    pub nodes: Vec<DeviceNode>,
    pub logs: Vec<ActivityLog>,
}

/// Copies a per-hour table into every detection bin of a local table.
pub fn expand_table(global: &QTable, bins: usize) -> Result<QTable, NetworkError> {
    let k = global.actions();
    let mut values = Vec::with_capacity(global.states() * bins * k);
    for s in 0..global.states() {
        for _ in 0..bins {
            values.extend_from_slice(global.row(s));
        }
    }
    Ok(QTable::from_values(global.states() * bins, k, values).map_err(SimError::from)?)
}

fn visible_trace(trace: &EventTrace, node: &DeviceNode) -> Result<EventTrace, NetworkError> {
    let events: Vec<Event> = trace
        .events()
        .iter()
        .filter(|e| e.location.is_some_and(|at| node.senses(at)))
        .cloned()
        .collect();
    EventTrace::new(events, Some(trace.horizon()), trace.origin_hour()).map_err(|e| NetworkError::Config(e.to_string()))
}

struct Network<'a> {
    config: &'a NetworkConfig,
    setup: &'a SimSetup,
    actions: &'a ActionSpace,
    events: &'a EventIndex,
    seed_table: QTable,
    nodes: Vec<DeviceNode>,
    devices: Vec<Device<'a>>,
    explore: Vec<SimRng>,
    detect: Vec<SimRng>,
    streams: Streams,
    active: Vec<bool>,
    eps: Vec<f64>,
    prev_bin: Vec<usize>,
    updated: Vec<bool>,
    clusters: Vec<Cluster>,
    reports: Vec<DeviceReport>,
    battery_sd: Vec<f64>,
}

struct EventIndex {
    hash: HashMap<u64, u64>,
    start: HashMap<u64, f64>,
    sensed: BTreeSet<u64>,
}

impl<'a> Network<'a> {
    fn new(
        nodes: &[DeviceNode],
        visible: &'a [EventTrace],
        events: &'a EventIndex,
        seed_table: &QTable,
        streams: Streams,
        config: &'a NetworkConfig,
        setup: &'a SimSetup,
        actions: &'a ActionSpace,
    ) -> Self {
        let mut nodes = nodes.to_vec();
        for n in &mut nodes {
            n.battery_level = setup.profile.battery_mah;
            n.qtable = seed_table.clone();
        }
        let devices = visible
            .iter()
            .map(|t| {
                let mut d = Device::new(t, &setup.profile, &setup.detector);
                d.pings = config.ping_energy;
                d
            })
            .collect();
        let n = nodes.len();
        Self {
            config,
            setup,
            actions,
            events,
            seed_table: seed_table.clone(),
            explore: nodes.iter().map(|n| streams.indexed("device", n.id).child("explore").rng()).collect(),
            detect: nodes.iter().map(|n| streams.indexed("device", n.id).child("detector").rng()).collect(),
            clusters: form_clusters(&nodes),
            reports: nodes.iter().map(|n| DeviceReport::new(n.id, n.battery_level)).collect(),
            nodes,
            devices,
            streams,
            active: vec![true; n],
            eps: vec![setup.hp.eps_max; n],
            prev_bin: vec![0; n],
            updated: vec![false; n],
            battery_sd: Vec::new(),
        }
    }

    fn alive(&self) -> Vec<&DeviceNode> {
        self.nodes.iter().zip(&self.active).filter(|(_, a)| **a).map(|(n, _)| n).collect()
    }

    fn levels(&self) -> Vec<f64> {
        self.alive().iter().map(|n| n.battery_level).collect()
    }

    fn fail(&mut self, device: u64, episode: usize) {
        let Some(idx) = self.nodes.iter().position(|n| n.id == device) else { return };
        if !self.active[idx] {
            return;
        }
        self.active[idx] = false;
        self.reports[idx].failed_at_episode = Some(episode);
        if self.config.reseed_on_failure {
            for i in 0..self.nodes.len() {
                let id = self.nodes[i].id;
                if id != device && self.clusters.iter().any(|c| c.contains(device) && c.contains(id)) {
                    self.nodes[i].qtable = self.seed_table.clone();
                    self.eps[i] = self.setup.hp.eps_max;
                }
            }
        }
        let alive: Vec<DeviceNode> = self.alive().into_iter().cloned().collect();
        self.clusters = form_clusters(&alive);
    }

    /// Simulates trace day `day` as episode `episode`.
    fn episode(&mut self, episode: usize, day: usize, learn: bool) -> Result<EpisodeMetrics, NetworkError> {
        let hp = &self.setup.hp;
        let nb = self.config.bins();
        let n = self.nodes.len();
        let day_start = day as f64 * SECONDS_PER_DAY;
        let mut detectors_of: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        let mut episode_reward = 0.0;
        let mut activations = vec![0u64; n];

        for hour in 0..HOURS {
            let t = day * HOURS + hour;
            let start = day_start + hour as f64 * 3600.0;
            let end = start + 3600.0;
            let mut stepped = Vec::with_capacity(n);
            for i in 0..n {
                if !self.active[i] {
                    continue;
                }
                self.devices[i].ql_boundary(start, self.updated[i]);
                let state = hour * nb + self.prev_bin[i];
                let eps = if learn { self.eps[i] } else { 0.0 };
                let action = select_action(&self.nodes[i].qtable, state, eps, &mut self.explore[i]);
                let interval = self.actions.interval(action);
                let stats = self.devices[i].run_period(start, end, interval, &mut self.detect[i])?;
                stepped.push((i, state, action, interval, stats));
            }

            let detections: Vec<Detection> = stepped
                .iter()
                .flat_map(|(i, _, _, _, s)| {
                    let id = self.nodes[*i].id;
                    s.detected.iter().map(move |&e| (id, e))
                })
                .map(|(device, event)| Detection { device, event, event_hash: self.events.hash[&event] })
                .collect();
            let mut ping_rng = self.streams.indexed("pings", t as u64).rng();
            let estimates = deliver_pings(&self.alive(), &detections, t, self.config.drop_rate, &mut ping_rng);

            let mut per_event: BTreeMap<u64, u64> = BTreeMap::new();
            for d in &detections {
                *per_event.entry(d.event).or_default() += 1;
                detectors_of.entry(d.event).or_default().insert(d.device);
            }
            let (mut n_pos, mut n_neg) = (0, 0);
            let w1 = hp.w1_for(hour);
            for (i, state, action, interval, stats) in stepped {
                let id = self.nodes[i].id;
                let own = estimates.get(&id).map(Vec::as_slice).unwrap_or(&[]);
                let r = local_reward(id, t, stats.reward_inputs(), own, &self.clusters, w1, self.config.w2);
                let bin = self.config.bin(stats.detected.len());
                if learn {
                    let next = ((hour + 1) % HOURS) * nb + bin;
                    self.nodes[i].qtable.q_update(state, action, r, next, hp).map_err(SimError::from)?;
                }
                self.updated[i] = learn;
                self.prev_bin[i] = bin;
                self.nodes[i].battery_level = self.setup.profile.battery_mah - self.devices[i].charge();
                n_pos += stats.positives;
                n_neg += stats.negatives;
                activations[i] += stats.activations;
                let rep = &mut self.reports[i];
                rep.activations += stats.activations;
                rep.positives += stats.positives;
                rep.negatives += stats.negatives;
                rep.detections += stats.detected.len() as u64;
                rep.periods.push(DevicePeriod {
                    episode,
                    period: t,
                    hour,
                    state,
                    interval,
                    activations: stats.activations,
                    positives: stats.positives,
                    negatives: stats.negatives,
                    detections: stats.detected.len() as u64,
                    duplicates_estimated: own.iter().map(|e| e.senders.len() as u64).sum(),
                    slot_holder: self.clusters.iter().any(|c| c.contains(id) && slot_holder(c, t) == id),
                    local_reward: r,
                    battery_level: self.nodes[i].battery_level,
                });
            }
            let sd = std_dev(&self.levels());
            self.battery_sd.push(sd);
            episode_reward += network_reward(&NetworkRewardInputs {
                n_pos,
                n_neg,
                overlaps: per_event.values().copied().collect(),
                battery_sd: sd,
                w1,
                w2: self.config.w2,
                w3: self.config.w3,
            });
        }

        if learn {
            for i in 0..n {
                if self.active[i] {
                    self.eps[i] = decay_epsilon(self.eps[i], hp);
                }
            }
        }
        let day_end = day_start + SECONDS_PER_DAY;
        let in_day = |id: &u64| self.events.start.get(id).is_some_and(|&s| s >= day_start && s < day_end);
        let events_total = self.events.sensed.iter().filter(|id| in_day(id)).count() as u64;
        let counts: Vec<usize> = detectors_of.iter().filter(|(id, _)| in_day(id)).map(|(_, d)| d.len()).collect();
        let events_detected = counts.len() as u64;
        let duplicates: usize = counts.iter().map(|c| c - 1).sum();
        Ok(EpisodeMetrics {
            episode,
            greedy: !learn,
            events_total,
            events_detected,
            detection_rate: if events_total == 0 { 1.0 } else { events_detected as f64 / events_total as f64 },
            mean_duplicates: if events_detected == 0 { 0.0 } else { duplicates as f64 / events_detected as f64 },
            activations,
            battery_sd: std_dev(&self.levels()),
            global_reward: episode_reward,
        })
    }

    fn finish(self, horizon: f64) -> (Vec<DeviceNode>, Vec<DeviceReport>, Vec<ActivityLog>, Vec<Cluster>, Vec<f64>) {
        let Network { mut nodes, devices, active, mut reports, clusters, battery_sd, setup, .. } = self;
        let mut logs = Vec::with_capacity(nodes.len());
        for (i, mut dev) in devices.into_iter().enumerate() {
            if active[i] {
                dev.ql_update_only(dev.cursor().max(horizon));
                dev.sleep_until(horizon);
            }
            let charge = dev.charge();
            nodes[i].battery_level = setup.profile.battery_mah - charge;
            reports[i].charge_mah = charge;
            reports[i].battery_level = nodes[i].battery_level;
            logs.push(dev.into_log());
        }
        (nodes, reports, logs, clusters, battery_sd)
    }
}

/// Runs every device over the first `config.episodes` days of the trace in
/// lockstep, one period at a time, then `config.eval_episodes` greedy days.
/// Each device senses only events within its sensing radius, exchanges
/// pings after every period and updates its own table from its local
/// reward.
pub fn run_network(
    layout: &Layout,
    trace: &EventTrace,
    actions: &ActionSpace,
    config: &NetworkConfig,
    setup: &SimSetup,
    seed: u64,
) -> Result<NetworkOutcome, NetworkError> {
    config.validate()?;
    setup.validate()?;
    let nodes = layout.nodes()?;
    if !trace.is_empty() && !trace.has_locations() {
        return Err(NetworkError::MissingLocations);
    }
    if trace.origin_hour() != 0 {
        return Err(NetworkError::Config("network traces must start at hour 0".into()));
    }
    let needed = config.days_needed() as f64 * SECONDS_PER_DAY;
    if trace.horizon() < needed {
        return Err(SimError::TraceTooShort { horizon: trace.horizon(), needed }.into());
    }
    if let Some(f) = config.failure {
        if !nodes.iter().any(|n| n.id == f.device) {
            return Err(NetworkError::Config(format!("failure names unknown device {}", f.device)));
        }
    }
    let d_probe = setup.profile.d_probe();
    if actions.interval(0) < d_probe {
        return Err(SimError::IntervalTooShort { interval: actions.interval(0), probe: d_probe }.into());
    }

    let global = if config.pretrain_episodes > 0 {
        let plan = TrainPlan {
            train_days: config.episodes.min(config.pretrain_episodes),
            eval_days: 0,
            episodes: config.pretrain_episodes,
        };
        train_policy(trace, &plan, actions, &QInit::Zero, setup, seed)?.table
    } else {
        QTable::zeros(HOURS, actions.len())
    };
    let seed_table = expand_table(&global, config.bins())?;

    let visible: Vec<EventTrace> = nodes.iter().map(|n| visible_trace(trace, n)).collect::<Result<_, _>>()?;
    let events = EventIndex {
        hash: trace.events().iter().map(|e| (e.id, event_hash(e))).collect(),
        start: trace.events().iter().map(|e| (e.id, e.start)).collect(),
        sensed: visible.iter().flat_map(|t| t.events().iter().map(|e| e.id)).collect(),
    };
    let streams = Streams::new(seed).child("network");
    let mut net = Network::new(&nodes, &visible, &events, &seed_table, streams.clone(), config, setup, actions);
    let initial_clusters = net.clusters.clone();
    let mut episodes = Vec::with_capacity(config.days_needed());
    for e in 0..config.episodes {
        if let Some(f) = config.failure.filter(|f| f.episode == e) {
            net.fail(f.device, e);
        }
        episodes.push(net.episode(e, e, true)?);
    }
    for e in config.episodes..config.days_needed() {
        episodes.push(net.episode(e, e, false)?);
    }
    let (nodes_out, devices, logs, _, battery_sd) = net.finish(needed);

    let (eval, baseline) = if config.eval_episodes > 0 {
        let mut base = Network::new(&nodes, &visible, &events, &seed_table, streams.child("baseline"), config, setup, actions);
        let mut runs = Vec::with_capacity(config.eval_episodes);
        for e in config.episodes..config.days_needed() {
            runs.push(base.episode(e, e, false)?);
        }
        (Some(NetworkSummary::over(&episodes[config.episodes..])), Some(NetworkSummary::over(&runs)))
    } else {
        (None, None)
    };

    let report = NetworkReport {
        clusters: initial_clusters,
        devices,
        battery_sd,
        overall: NetworkSummary::over(&episodes),
        eval,
        baseline,
        episodes,
    };
    Ok(NetworkOutcome { report, nodes: nodes_out, logs })
}
