//! Tabular Q-learning over quantized periods and activation intervals.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_PERIODS: usize = 24;
pub const DEFAULT_PERIOD_LENGTH: f64 = 3600.0;

const MAGIC: &[u8; 4] = b"QTBL";
const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 2 + 2;

#[derive(Debug, Error, PartialEq)]
pub enum QError {
    #[error("state {state} out of range (table has {states})")]
    StateOutOfRange { state: usize, states: usize },
    #[error("action {action} out of range (table has {actions})")]
    ActionOutOfRange { action: usize, actions: usize },
    #[error("update produced non-finite value at ({state}, {action})")]
    NonFinite { state: usize, action: usize },
    #[error("corrupt q-table header: {0}")]
    CorruptHeader(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },
    #[error("invalid action space: {0}")]
    ActionSpace(String),
    #[error("invalid hyperparameters: {0}")]
    Hyperparameters(String),
    #[error("invalid event distribution: {0}")]
    Distribution(String),
}

/// Activation intervals in seconds, shortest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ActionSpace {
    intervals: Vec<f64>,
}

impl ActionSpace {
    pub fn new(intervals: Vec<f64>) -> Result<Self, QError> {
        if intervals.len() < 2 {
            return Err(QError::ActionSpace("need at least two actions".into()));
        }
        if intervals.iter().any(|i| !(i.is_finite() && *i > 0.0)) {
            return Err(QError::ActionSpace("intervals must be positive".into()));
        }
        if intervals.windows(2).any(|w| w[0] >= w[1]) {
            return Err(QError::ActionSpace("intervals must be strictly increasing".into()));
        }
        Ok(Self { intervals })
    }

    pub fn intervals(&self) -> &[f64] {
        &self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn interval(&self, action: usize) -> f64 {
        self.intervals[action]
    }
}

impl Default for ActionSpace {
    /// 3 s, 5 s, 1 min, 5 min, 30 min.
    fn default() -> Self {
        Self { intervals: vec![3.0, 5.0, 60.0, 300.0, 1800.0] }
    }
}

impl TryFrom<Vec<f64>> for ActionSpace {
    type Error = QError;
    fn try_from(v: Vec<f64>) -> Result<Self, QError> {
        Self::new(v)
    }
}

impl From<ActionSpace> for Vec<f64> {
    fn from(a: ActionSpace) -> Self {
        a.intervals
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    pub gamma: f64,
    pub alpha: f64,
    pub eps_max: f64,
    pub eps_min: f64,
    pub eps_decay: f64,
    /// Carried for completeness; no update rule reads it.
    pub beta: f64,
    /// Weight on negative activations.
    pub w1: f64,
    /// Optional per-period override of `w1`, indexed by hour of day.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w1_per_period: Option<Vec<f64>>,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            alpha: 0.1,
            eps_max: 0.3,
            eps_min: 0.1,
            eps_decay: 0.99,
            beta: 1e-5,
            w1: 0.01,
            w1_per_period: None,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<(), QError> {
        let bad = |m: &str| Err(QError::Hyperparameters(m.into()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1]");
        }
        if !(self.alpha >= 0.0 && self.alpha <= 1.0) {
            return bad("alpha must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.eps_min) || !(0.0..=1.0).contains(&self.eps_max) {
            return bad("epsilon bounds must be in [0, 1]");
        }
        if self.eps_min > self.eps_max {
            return bad("eps_min must not exceed eps_max");
        }
        if !(self.eps_decay > 0.0 && self.eps_decay <= 1.0) {
            return bad("eps_decay must be in (0, 1]");
        }
        if !self.beta.is_finite() {
            return bad("beta must be finite");
        }
        if !(self.w1.is_finite() && self.w1 >= 0.0) {
            return bad("w1 must be non-negative");
        }
        if let Some(ws) = &self.w1_per_period {
            if ws.is_empty() || ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return bad("w1_per_period entries must be non-negative");
            }
        }
        Ok(())
    }

    pub fn w1_for(&self, period: usize) -> f64 {
        match &self.w1_per_period {
            Some(ws) => ws[period % ws.len()],
            None => self.w1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardInputs {
    pub n_pos: u64,
    pub n_neg: u64,
}

/// Period reward: positives minus `w1`-weighted negatives.
pub fn reward(inputs: RewardInputs, w1: f64) -> f64 {
    inputs.n_pos as f64 - w1 * inputs.n_neg as f64
}

/// State × action value table. Values are stored in single precision and
/// all arithmetic on them is done in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    states: usize,
    actions: usize,
    values: Vec<f32>,
    visits: Vec<u32>,
    pub period_length: f64,
}

impl QTable {
    pub fn zeros(states: usize, actions: usize) -> Self {
        Self {
            states,
            actions,
            values: vec![0.0; states * actions],
            visits: vec![0; states * actions],
            period_length: DEFAULT_PERIOD_LENGTH,
        }
    }

    /// Table from row-major values; rejects non-finite entries.
    pub fn from_values(states: usize, actions: usize, values: Vec<f32>) -> Result<Self, QError> {
        if values.len() != states * actions {
            return Err(QError::DimensionMismatch {
                expected: format!("{}x{}", states, actions),
                found: format!("{} values", values.len()),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(QError::NonFinite { state: i / actions, action: i % actions });
        }
        Ok(Self { values, ..Self::zeros(states, actions) })
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn visit_counts(&self) -> &[u32] {
        &self.visits
    }

    fn check(&self, state: usize, action: usize) -> Result<usize, QError> {
        if state >= self.states {
            return Err(QError::StateOutOfRange { state, states: self.states });
        }
        if action >= self.actions {
            return Err(QError::ActionOutOfRange { action, actions: self.actions });
        }
        Ok(state * self.actions + action)
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.actions + action] as f64
    }

    pub fn set(&mut self, state: usize, action: usize, value: f64) -> Result<(), QError> {
        let i = self.check(state, action)?;
        let v = value as f32;
        if !v.is_finite() {
            return Err(QError::NonFinite { state, action });
        }
        self.values[i] = v;
        Ok(())
    }

    pub fn visits(&self, state: usize, action: usize) -> u32 {
        self.visits[state * self.actions + action]
    }

    pub fn row(&self, state: usize) -> &[f32] {
        &self.values[state * self.actions..(state + 1) * self.actions]
    }

    pub fn max_value(&self, state: usize) -> f64 {
        self.row(state).iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64
    }

    /// Greedy action; ties go to the lowest index.
    pub fn argmax(&self, state: usize) -> usize {
        let row = self.row(state);
        let mut best = 0;
        for (a, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn greedy_policy(&self) -> Vec<usize> {
        (0..self.states).map(|s| self.argmax(s)).collect()
    }

    /// One incremental Bellman step on `(state, action)`:
    /// `Q += alpha * (r + gamma * max Q(next, .) - Q)`.
    pub fn q_update(
        &mut self,
        state: usize,
        action: usize,
        r: f64,
        next_state: usize,
        hp: &Hyperparameters,
    ) -> Result<f64, QError> {
        let i = self.check(state, action)?;
        self.check(next_state, 0)?;
        let old = self.values[i] as f64;
        let target = r + hp.gamma * self.max_value(next_state);
        let new = old + hp.alpha * (target - old);
        let stored = new as f32;
        if !stored.is_finite() {
            return Err(QError::NonFinite { state, action });
        }
        self.values[i] = stored;
        self.visits[i] = self.visits[i].saturating_add(1);
        Ok(new)
    }
}

/// ε-greedy choice. Always consumes exactly one uniform draw, plus one more
/// when exploring.
pub fn select_action<R: Rng + ?Sized>(table: &QTable, state: usize, eps: f64, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    if u < eps {
        rng.random_range(0..table.actions())
    } else {
        table.argmax(state)
    }
}

/// Per-episode decay, floored at `eps_min`.
pub fn decay_epsilon(eps: f64, hp: &Hyperparameters) -> f64 {
    (eps * hp.eps_decay).max(hp.eps_min)
}

/// Seed a table from per-period event probabilities.
///
/// `Q(s, a) = scale * p[s] * w(a, s)` where `w` peaks at the action whose
/// rank matches the period's relative probability: the most probable period
/// favours the shortest interval, a period with relative probability zero
/// the longest, and `w` falls off linearly with rank distance.
pub fn init_from_distribution(event_prob: &[f64], scale: f64, actions: usize) -> Result<QTable, QError> {
    if actions < 2 {
        return Err(QError::ActionSpace("need at least two actions".into()));
    }
    if let Some(p) = event_prob.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(QError::Distribution(format!("probability {p} not in [0, 1]")));
    }
    if !scale.is_finite() {
        return Err(QError::Distribution("scale must be finite".into()));
    }
    let mut table = QTable::zeros(event_prob.len(), actions);
    let peak = event_prob.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return Ok(table);
    }
    let span = (actions - 1) as f64;
    for (s, &p) in event_prob.iter().enumerate() {
        let target = (1.0 - p / peak) * span;
        for a in 0..actions {
            let weight = 1.0 - (a as f64 - target).abs() / span;
            table.set(s, a, scale * p * weight)?;
        }
    }
    Ok(table)
}

pub fn save_qtable(table: &QTable) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * table.values.len());
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(table.states as u16).to_le_bytes());
    out.extend_from_slice(&(table.actions as u16).to_le_bytes());
    for v in &table.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for c in &table.visits {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out
}

pub fn load_qtable(bytes: &[u8]) -> Result<QTable, QError> {
    if bytes.len() < HEADER_LEN {
        return Err(QError::CorruptHeader(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(QError::CorruptHeader("bad magic".into()));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(QError::CorruptHeader(format!("unsupported version {}", bytes[4])));
    }
    let states = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
    let actions = u16::from_le_bytes([bytes[7], bytes[8]]) as usize;
    let cells = states * actions;
    let expected = HEADER_LEN + 8 * cells;
    if bytes.len() != expected {
        return Err(QError::DimensionMismatch {
            expected: format!("{expected} bytes for {states}x{actions}"),
            found: format!("{} bytes", bytes.len()),
        });
    }
    let words = bytes[HEADER_LEN..].chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    let values: Vec<f32> = words.clone().take(cells).map(f32::from_le_bytes).collect();
    let visits: Vec<u32> = words.skip(cells).map(u32::from_le_bytes).collect();
    let mut table = QTable::from_values(states, actions, values)?;
    table.visits = visits;
    Ok(table)
}

/// [`load_qtable`] plus a check against the expected shape.
pub fn load_qtable_shaped(bytes: &[u8], states: usize, actions: usize) -> Result<QTable, QError> {
    let t = load_qtable(bytes)?;
    if t.states != states || t.actions != actions {
        return Err(QError::DimensionMismatch {
            expected: format!("{states}x{actions}"),
            found: format!("{}x{}", t.states, t.actions),
        });
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;
    use proptest::prelude::*;

    fn hp(alpha: f64, gamma: f64) -> Hyperparameters {
        Hyperparameters { alpha, gamma, ..Default::default() }
    }

    #[test]
    fn reward_examples() {
        assert_eq!(reward(RewardInputs { n_pos: 0, n_neg: 0 }, 0.1), 0.0);
        assert!((reward(RewardInputs { n_pos: 5, n_neg: 10 }, 0.1) - 4.0).abs() < 1e-12);
        assert_eq!(reward(RewardInputs { n_pos: 0, n_neg: 20 }, 0.5), -10.0);
    }

    #[test]
    fn update_reduces_to_reward() {
        let mut t = QTable::zeros(24, 5);
        t.q_update(3, 2, 2.5, 4, &hp(1.0, 0.0)).unwrap();
        assert_eq!(t.get(3, 2), 2.5);
        assert_eq!(t.visits(3, 2), 1);
    }

    #[test]
    fn update_hand_evaluated() {
        // 0 + 0.1 * (1 + 0.9 * 2 - 0) = 0.28
        let mut t = QTable::zeros(24, 5);
        t.set(6, 4, 2.0).unwrap();
        t.q_update(5, 0, 1.0, 6, &hp(0.1, 0.9)).unwrap();
        assert!((t.get(5, 0) - 0.28).abs() < 1e-6);
    }

    #[test]
    fn zero_alpha_is_noop_on_values() {
        let mut t = QTable::zeros(4, 3);
        t.set(1, 1, 0.5).unwrap();
        let before = t.values().to_vec();
        t.q_update(1, 1, 100.0, 2, &hp(0.0, 0.9)).unwrap();
        assert_eq!(t.values(), before.as_slice());
    }

    #[test]
    fn update_rejects_bad_indices_and_overflow() {
        let mut t = QTable::zeros(4, 3);
        assert!(matches!(t.q_update(4, 0, 0.0, 0, &hp(0.1, 0.9)), Err(QError::StateOutOfRange { .. })));
        assert!(matches!(t.q_update(0, 3, 0.0, 0, &hp(0.1, 0.9)), Err(QError::ActionOutOfRange { .. })));
        assert!(matches!(t.q_update(0, 0, 0.0, 9, &hp(0.1, 0.9)), Err(QError::StateOutOfRange { .. })));
        assert!(matches!(t.q_update(0, 0, 1e300, 0, &hp(1.0, 0.0)), Err(QError::NonFinite { .. })));
        assert_eq!(t.get(0, 0), 0.0);
    }

    #[test]
    fn greedy_and_ties() {
        let mut rng = Streams::new(0).rng();
        let t = QTable::from_values(1, 3, vec![1.0, 3.0, 2.0]).unwrap();
        assert_eq!(select_action(&t, 0, 0.0, &mut rng), 1);
        let t = QTable::from_values(1, 3, vec![2.0, 2.0, 0.0]).unwrap();
        assert_eq!(select_action(&t, 0, 0.0, &mut rng), 0);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let t = QTable::zeros(1, 5);
        let mut rng = Streams::new(11).child("explore").rng();
        let n = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[select_action(&t, 0, 1.0, &mut rng)] += 1;
        }
        let p = 0.2;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn epsilon_decay() {
        let h = Hyperparameters::default();
        assert!((decay_epsilon(0.3, &h) - 0.297).abs() < 1e-12);
        assert_eq!(decay_epsilon(0.1, &h), 0.1);
        // 0.3 * 0.99^n < 0.1 once n >= 110
        let n_floor = (1.0f64 / 3.0).ln() / 0.99f64.ln();
        assert!(n_floor < 112.0);
        let eps = (0..200).fold(0.3, |e, _| decay_epsilon(e, &h));
        assert_eq!(eps, 0.1);
    }

    #[test]
    fn init_examples() {
        let t = init_from_distribution(&[0.0; 24], 10.0, 5).unwrap();
        assert!(t.values().iter().all(|&v| v == 0.0));

        let t = init_from_distribution(&[0.4; 24], 10.0, 5).unwrap();
        for s in 1..24 {
            assert_eq!(t.row(s), t.row(0));
        }

        let probs: Vec<f64> = (0..24).map(|i| (i + 1) as f64 / 24.0).collect();
        let t = init_from_distribution(&probs, 10.0, 5).unwrap();
        let policy = t.greedy_policy();
        assert!(policy.windows(2).all(|w| w[1] <= w[0]), "{policy:?}");
        assert_eq!(policy[23], 0);
        assert!(t.values().iter().all(|v| v.is_finite()));

        assert!(init_from_distribution(&[1.5], 1.0, 5).is_err());
    }

    #[test]
    fn serialization_layout() {
        let t = QTable::zeros(24, 7);
        let bytes = save_qtable(&t);
        assert_eq!(bytes.len(), 9 + 24 * 7 * 4 + 24 * 7 * 4);
        assert!(bytes.len() <= 4096);
        assert_eq!(&bytes[..4], b"QTBL");
        assert_eq!(u16::from_le_bytes([bytes[5], bytes[6]]), 24);
        assert_eq!(u16::from_le_bytes([bytes[7], bytes[8]]), 7);
    }

    #[test]
    fn corrupt_streams() {
        let bytes = save_qtable(&QTable::zeros(24, 5));
        assert!(matches!(load_qtable(&bytes[..6]), Err(QError::CorruptHeader(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_qtable(&bad), Err(QError::CorruptHeader(_))));
        assert!(matches!(load_qtable(&bytes[..bytes.len() - 1]), Err(QError::DimensionMismatch { .. })));
        assert!(matches!(load_qtable_shaped(&bytes, 24, 7), Err(QError::DimensionMismatch { .. })));
    }

    #[test]
    fn random_table_round_trip() {
        let mut rng = Streams::new(5).rng();
        let vals: Vec<f32> = (0..24 * 5).map(|_| rng.random_range(-100.0..100.0)).collect();
        let mut t = QTable::from_values(24, 5, vals).unwrap();
        t.q_update(2, 3, 1.0, 3, &hp(0.1, 0.9)).unwrap();
        let back = load_qtable(&save_qtable(&t)).unwrap();
        assert_eq!(back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(back, t);
    }

    #[test]
    fn values_stay_bounded() {
        // |r| <= R and gamma < 1 from zero init keeps |Q| <= R / (1 - gamma).
        let bound_r = 5.0;
        let h = hp(0.1, 0.9);
        let mut t = QTable::zeros(24, 5);
        let mut rng = Streams::new(17).rng();
        for _ in 0..100_000 {
            let s = rng.random_range(0..24);
            let a = rng.random_range(0..5);
            let r = rng.random_range(-bound_r..=bound_r);
            t.q_update(s, a, r, (s + 1) % 24, &h).unwrap();
        }
        let limit = bound_r / (1.0 - h.gamma) + 1e-3;
        assert!(t.values().iter().all(|v| (*v as f64).abs() <= limit));
    }

    proptest! {
        #[test]
        fn update_touches_one_cell(
            vals in proptest::collection::vec(-50.0f32..50.0, 12),
            s in 0usize..4, a in 0usize..3, next in 0usize..4,
            r in -10.0f64..10.0, alpha in 0.0f64..=1.0, gamma in 0.0f64..=1.0,
        ) {
            let h = hp(alpha, gamma);
            let mut t = QTable::from_values(4, 3, vals).unwrap();
            let before = t.clone();
            let expected = alpha * (r + gamma * before.max_value(next) - before.get(s, a));
            t.q_update(s, a, r, next, &h).unwrap();
            let total: f64 = t.values().iter().zip(before.values())
                .map(|(x, y)| (*x as f64 - *y as f64).abs()).sum();
            for i in 0..12 {
                if i != s * 3 + a {
                    prop_assert_eq!(t.values()[i].to_bits(), before.values()[i].to_bits());
                }
            }
            prop_assert!((total - expected.abs()).abs() <= 1e-4 * (1.0 + expected.abs()));
        }

        #[test]
        fn greedy_invariant_under_positive_affine(
            vals in proptest::collection::vec(-50.0f32..50.0, 5),
            scale in 0.01f64..100.0, shift in -100.0f64..100.0,
        ) {
            let t = QTable::from_values(1, 5, vals.clone()).unwrap();
            let mut best = 0;
            for a in 1..5 { if vals[a] > vals[best] { best = a; } }
            // compare in f64 so the transform itself cannot create ties
            let scaled: Vec<f64> = vals.iter().map(|&v| v as f64 * scale + shift).collect();
            let mut best_scaled = 0;
            for a in 1..5 { if scaled[a] > scaled[best_scaled] { best_scaled = a; } }
            prop_assert_eq!(t.argmax(0), best);
            prop_assert_eq!(best_scaled, best);
        }
    }
}
