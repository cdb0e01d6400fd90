//! End-to-end acceptance checks. Runs without the libtest harness so each
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any FAIL.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use dutycycle::collab::{
    form_clusters, network_reward, run_network, DeviceNode, Failure, Layout, LayoutDevice, NetworkConfig,
    NetworkRewardInputs,
};
use dutycycle::detect::goertzel_power;
use dutycycle::power::{charge_consumed, lifetime_years, ActivityLog, LogEntry, Mode, PowerProfile};
use dutycycle::qsched::{reward, ActionSpace, RewardInputs};
use dutycycle::sim::{run_schedule, train_policy, train_qlearn, QInit, ScheduleSpec, SimSetup, TrainPlan};
use dutycycle::trace::{generate_trace, DiurnalProfile, Event, EventTrace, Point, Region};

const DAY: f64 = 86_400.0;
const SEEDS: u64 = 10;
const SEEDS_REQUIRED: usize = 8;

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Check {
    Check { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- goertzel

fn naive_dft_power(x: &[f64], k: usize, cos_t: &[f64], sin_t: &[f64]) -> f64 {
    let n = x.len();
    let (mut re, mut im) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let idx = (k * i) % n;
        re += v * cos_t[idx];
        im -= v * sin_t[idx];
    }
    re * re + im * im
}

fn goertzel_matches_dft() -> Check {
    const N: usize = 1600;
    let cos_t: Vec<f64> = (0..N).map(|i| (2.0 * PI * i as f64 / N as f64).cos()).collect();
    let sin_t: Vec<f64> = (0..N).map(|i| (2.0 * PI * i as f64 / N as f64).sin()).collect();
    let mut r = rng(11);
    let signals: Vec<Vec<f64>> = (0..100).map(|_| (0..N).map(|_| r.random_range(-1.0..1.0)).collect()).collect();

    let start = Instant::now();
    let fast: Vec<Vec<f64>> =
        signals.iter().map(|s| (0..=N / 2).map(|k| goertzel_power(s, k, N).unwrap()).collect()).collect();
    let elapsed = start.elapsed();

    let mut worst = 0.0f64;
    for (s, g) in signals.iter().zip(&fast) {
        for (k, &p) in g.iter().enumerate() {
            let d = naive_dft_power(s, k, &cos_t, &sin_t);
            worst = worst.max((p - d).abs() / d);
        }
    }
    check(
        worst <= 1e-9 && elapsed < Duration::from_secs(10),
        format!("max relative error {worst:.2e} (tol 1e-9), 100 signals x 801 bins in {:.2} s (limit 10 s)", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- scheduler

struct SchedulerRun {
    ql_detection: f64,
    ql_activations: u64,
    ql_lifetime: f64,
    best_fixed: Option<(f64, u64)>,
    fixed3_lifetime: f64,
    elapsed: Duration,
}

const FIXED: [f64; 5] = [3.0, 5.0, 60.0, 300.0, 1800.0];

fn scheduler_run(seed: u64) -> SchedulerRun {
    let start = Instant::now();
    let setup = SimSetup::default();
    let plan = TrainPlan { train_days: 50, eval_days: 1, episodes: 50 };
    let trace = generate_trace(&DiurnalProfile::two_peak(40.0, 0.5), 51, seed).unwrap();
    let out = train_qlearn(&trace, &plan, &ActionSpace::default(), &QInit::Zero, &setup, seed).unwrap();
    let eval = trace.slice(50.0 * DAY, 51.0 * DAY);
    let fixed: Vec<_> = FIXED.iter().map(|&v| (v, run_schedule(&eval, &ScheduleSpec::fixed(v), &setup, seed).unwrap().0)).collect();
    let elapsed = start.elapsed();
    let best_fixed = fixed
        .iter()
        .filter(|(_, r)| r.detection_rate >= 0.99)
        .min_by_key(|(_, r)| r.total_activations)
        .map(|(v, r)| (*v, r.total_activations));
    SchedulerRun {
        ql_detection: out.eval.detection_rate,
        ql_activations: out.eval.total_activations,
        ql_lifetime: out.eval.lifetime_years,
        best_fixed,
        fixed3_lifetime: fixed[0].1.lifetime_years,
        elapsed,
    }
}

fn scheduler_headline(runs: &[SchedulerRun]) -> Check {
    let good = runs
        .iter()
        .filter(|r| {
            r.ql_detection >= 0.80 && r.best_fixed.is_some_and(|(_, a)| r.ql_activations as f64 <= 0.5 * a as f64)
        })
        .count();
    let worst_time = runs.iter().map(|r| r.elapsed).max().unwrap();
    let det: Vec<String> = runs.iter().map(|r| format!("{:.2}", r.ql_detection)).collect();
    let ratio: Vec<String> = runs
        .iter()
        .map(|r| r.best_fixed.map_or("-".into(), |(_, a)| format!("{:.2}", r.ql_activations as f64 / a as f64)))
        .collect();
    check(
        good >= SEEDS_REQUIRED && worst_time < Duration::from_secs(120),
        format!(
            "{good}/{SEEDS} seeds with detection >= 0.80 and activations <= 0.5x best fixed (need {SEEDS_REQUIRED}); detection [{}], ratio [{}]; slowest seed {:.1} s (limit 120 s)",
            det.join(" "),
            ratio.join(" "),
            worst_time.as_secs_f64()
        ),
    )
}

fn lifetime_gain(runs: &[SchedulerRun]) -> Check {
    let gains: Vec<f64> = runs.iter().map(|r| r.ql_lifetime / r.fixed3_lifetime - 1.0).collect();
    let good = gains.iter().filter(|&&g| g >= 0.30).count();
    let shown: Vec<String> = gains.iter().map(|g| format!("{:.0}%", g * 100.0)).collect();
    check(good == runs.len(), format!("{good}/{} seeds gain >= 30% over fixed 3 s: [{}]", runs.len(), shown.join(" ")))
}

// ---------------------------------------------------------------- energy

fn lifetime_arithmetic() -> Check {
    let p = PowerProfile::default();
    let years = lifetime_years(p.i_sleep, p.battery_mah).unwrap();
    let rel = (years - 15.76).abs() / 15.76;
    check(rel <= 1e-3, format!("sleep-only lifetime {years:.4} years vs 15.76 (rel err {rel:.1e}, tol 1e-3)"))
}

/// Integrates the log's current at 1 ms resolution.
fn integrate_ms(log: &ActivityLog, profile: &PowerProfile) -> f64 {
    let entries = log.entries();
    let total_ms = (log.cursor() * 1000.0).round() as u64;
    let mut idx = 0;
    let mut mah = 0.0;
    for ms in 0..total_ms {
        let t = (ms as f64 + 0.5) / 1000.0;
        while entries[idx].end <= t {
            idx += 1;
        }
        mah += profile.current(entries[idx].mode) * 0.001 / 3600.0;
    }
    mah
}

fn energy_oracle() -> Check {
    let profile = PowerProfile::default();
    let mut r = rng(23);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = r.random_range(1..=100);
        let mut ms = 0u64;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let d = r.random_range(1..=20_000u64);
            let mode = Mode::ALL[r.random_range(0..Mode::ALL.len())];
            entries.push(LogEntry { mode, start: ms as f64 / 1000.0, end: (ms + d) as f64 / 1000.0 });
            ms += d;
        }
        let log = ActivityLog::from_entries(entries);
        let exact = charge_consumed(&log, &profile).unwrap();
        let oracle = integrate_ms(&log, &profile);
        worst = worst.max((exact - oracle).abs() / oracle);
    }
    check(worst <= 1e-6, format!("50 random logs, max relative gap to 1 ms integration {worst:.1e} (tol 1e-6)"))
}

// ---------------------------------------------------------------- convergence

fn convergence() -> Check {
    let runs: Vec<(Option<usize>, Duration)> = (0..SEEDS)
        .into_par_iter()
        .map(|seed| {
            let start = Instant::now();
            let plan = TrainPlan { train_days: 100, eval_days: 0, episodes: 100 };
            let trace = generate_trace(&DiurnalProfile::two_peak(40.0, 0.5), 100, seed).unwrap();
            let out = train_policy(&trace, &plan, &ActionSpace::default(), &QInit::Zero, &SimSetup::default(), seed)
                .unwrap();
            (out.train.episodes_to_convergence, start.elapsed())
        })
        .collect();
    let conv: Vec<Option<usize>> = runs.iter().map(|r| r.0).collect();
    let worst_time = runs.iter().map(|r| r.1).max().unwrap();
    let good = conv.iter().filter(|c| c.is_some_and(|e| e <= 50)).count();
    let shown: Vec<String> = conv.iter().map(|c| c.map_or("-".into(), |e| e.to_string())).collect();
    check(
        good >= SEEDS_REQUIRED && worst_time < Duration::from_secs(120),
        format!(
            "{good}/{SEEDS} seeds with a greedy policy fixed from episode <= 50 of 100 (need {SEEDS_REQUIRED}): [{}]; slowest seed {:.1} s (limit 120 s)",
            shown.join(" "),
            worst_time.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- network

fn colocated(n: u64) -> Layout {
    Layout {
        devices: (0..n)
            .map(|id| LayoutDevice { id, x: 0.0, y: 0.1 * id as f64, sensing_radius: 50.0, comm_radius: 100.0 })
            .collect(),
    }
}

fn network_trace(days: usize, seed: u64) -> EventTrace {
    let mut p = DiurnalProfile::two_peak(40.0, 0.5);
    p.region = Some(Region { x_min: -10.0, x_max: 10.0, y_min: -10.0, y_max: 10.0 });
    generate_trace(&p, days, seed).unwrap()
}

fn collaboration() -> Check {
    let layout = colocated(3);
    let results: Vec<(f64, f64, f64, f64)> = (0..SEEDS)
        .into_par_iter()
        .map(|seed| {
            let cfg = NetworkConfig { episodes: 30, eval_episodes: 3, ..Default::default() };
            let trace = network_trace(cfg.days_needed(), seed);
            let out = run_network(&layout, &trace, &ActionSpace::default(), &cfg, &SimSetup::default(), seed).unwrap();
            let (eval, base) = (out.report.eval.unwrap(), out.report.baseline.unwrap());
            (base.mean_duplicates, eval.mean_duplicates, base.detection_rate, eval.detection_rate)
        })
        .collect();
    let good = results.iter().filter(|(bd, ed, bt, et)| ed < bd && (et - bt).abs() <= 0.05).count();
    let shown: Vec<String> =
        results.iter().map(|(bd, ed, bt, et)| format!("dup {bd:.2}->{ed:.2} det {bt:.2}->{et:.2}")).collect();
    check(
        good >= SEEDS_REQUIRED,
        format!("{good}/{SEEDS} seeds where duplicates drop and detection stays within 0.05 (need {SEEDS_REQUIRED}): {}", shown.join(", ")),
    )
}

fn failure_recovery() -> Check {
    const FAIL_AT: usize = 20;
    let layout = colocated(3);
    let results: Vec<(f64, f64, bool)> = (0..SEEDS)
        .into_par_iter()
        .map(|seed| {
            let cfg = NetworkConfig {
                episodes: 40,
                failure: Some(Failure { device: 0, episode: FAIL_AT }),
                ..Default::default()
            };
            let trace = network_trace(cfg.days_needed(), seed);
            let out = run_network(&layout, &trace, &ActionSpace::default(), &cfg, &SimSetup::default(), seed).unwrap();
            let survivors = &out.report.devices[1..];
            let mean = |r: std::ops::Range<usize>| {
                let n = r.len() as f64;
                survivors.iter().map(|d| d.activations_in(r.clone()) as f64).sum::<f64>() / n
            };
            let failed = &out.report.devices[0];
            let silent = failed.failed_at_episode == Some(FAIL_AT) && failed.activations_in(FAIL_AT..40) == 0;
            (mean(FAIL_AT - 5..FAIL_AT), mean(FAIL_AT..FAIL_AT + 10), silent)
        })
        .collect();
    let good = results.iter().filter(|(pre, post, silent)| post > pre && *silent).count();
    let shown: Vec<String> = results.iter().map(|(a, b, _)| format!("{a:.0}->{b:.0}")).collect();
    check(
        good >= SEEDS_REQUIRED,
        format!(
            "{good}/{SEEDS} seeds where survivors' activations per episode rise after device 0 fails at episode {FAIL_AT} (need {SEEDS_REQUIRED}): {}",
            shown.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- oracles

fn brute_force_cliques(nodes: &[DeviceNode]) -> BTreeSet<Vec<u64>> {
    let n = nodes.len();
    let adj = |i: usize, j: usize| {
        let (a, b) = (&nodes[i], &nodes[j]);
        let d = ((a.position.x - b.position.x).powi(2) + (a.position.y - b.position.y).powi(2)).sqrt();
        d <= a.sensing_radius + b.sensing_radius
    };
    let is_clique = |m: u32| (0..n).all(|i| m >> i & 1 == 0 || (i + 1..n).all(|j| m >> j & 1 == 0 || adj(i, j)));
    let mut out = BTreeSet::new();
    for m in 1u32..(1 << n) {
        if m.count_ones() < 2 || !is_clique(m) {
            continue;
        }
        if (0..n).any(|k| m >> k & 1 == 0 && is_clique(m | 1 << k)) {
            continue;
        }
        let mut ids: Vec<u64> = (0..n).filter(|i| m >> i & 1 == 1).map(|i| nodes[i].id).collect();
        ids.sort();
        out.insert(ids);
    }
    out
}

fn clusters_match_brute_force() -> Check {
    let mut r = rng(31);
    let mut mismatches = 0;
    let mut cliques = 0;
    for _ in 0..200 {
        let n = r.random_range(1..=10);
        let nodes: Vec<DeviceNode> = (0..n)
            .map(|i| {
                let p = Point::new(r.random_range(0.0..100.0), r.random_range(0.0..100.0));
                DeviceNode::new(i as u64 * 7 + 3, p, r.random_range(5.0..30.0), 100.0)
            })
            .collect();
        let got: BTreeSet<Vec<u64>> = form_clusters(&nodes).into_iter().map(|c| c.members).collect();
        let want = brute_force_cliques(&nodes);
        cliques += want.len();
        if got != want {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("200 random layouts ({cliques} maximal cliques), {mismatches} mismatches against subset enumeration"))
}

fn window_query_matches_scan() -> Check {
    let mut p = DiurnalProfile::two_peak(40.0, 2.0);
    p.duration_sd = 2.0;
    let trace = generate_trace(&p, 2, 5).unwrap();
    let mut r = rng(41);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let t0 = r.random_range(-10.0..2.0 * DAY);
        let t1 = if r.random_bool(0.05) { t0 - r.random_range(0.0..5.0) } else { t0 + r.random_range(0.0..600.0) };
        let got: Vec<u64> = trace.events_in_window(t0, t1).iter().map(|e| e.id).collect();
        let want: Vec<u64> = trace
            .events()
            .iter()
            .filter(|e: &&Event| t0 < t1 && e.start < t1 && e.start + e.duration > t0)
            .map(|e| e.id)
            .collect();
        if got != want {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("1000 random windows over {} events, {mismatches} mismatches against a linear scan", trace.len()))
}

fn network_reward_reduces() -> Check {
    let mut r = rng(53);
    let mut mismatches = 0;
    for i in 0..10_000 {
        // Equal batteries or a zero spread weight remove the balance term.
        let (battery_sd, w3) = if i % 2 == 0 { (0.0, r.random_range(0.0..1.0)) } else { (r.random_range(0.0..50.0), 0.0) };
        let n_pos = r.random_range(0..500);
        let n_neg = r.random_range(0..5000);
        let w1 = r.random_range(0.0..1.0);
        let inputs = NetworkRewardInputs {
            n_pos,
            n_neg,
            overlaps: vec![1; n_pos as usize],
            battery_sd,
            w1,
            w2: r.random_range(0.0..2.0),
            w3,
        };
        if network_reward(&inputs) != reward(RewardInputs { n_pos, n_neg }, w1) {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("10000 random inputs with unit overlaps and no battery term, {mismatches} differ from the single-device reward"))
}

// ---------------------------------------------------------------- determinism

const CLI_CONFIG: &str = r#"{
  "seed": 9,
  "trace": { "generate": { "days": 5, "profile": {
    "hourly_rate": [0.5,0.5,0.5,0.5,0.5,40,40,40,40,0.5,0.5,0.5,0.5,0.5,0.5,0.5,0.5,40,40,40,0.5,0.5,0.5,0.5],
    "duration_mean": 3, "duration_sd": 0,
    "region": { "x_min": -10, "x_max": 10, "y_min": -10, "y_max": 10 } } } },
  "plan": { "train_days": 3, "eval_days": 1, "episodes": 6 },
  "network": {
    "layout": { "devices": [
      { "id": 0, "x": 0, "y": 0, "sensing_radius": 50, "comm_radius": 100 },
      { "id": 1, "x": 0, "y": 0.1, "sensing_radius": 50, "comm_radius": 100 },
      { "id": 2, "x": 60, "y": 0, "sensing_radius": 20, "comm_radius": 100 } ] },
    "settings": { "episodes": 4, "eval_episodes": 1, "pretrain_episodes": 3 } }
}"#;

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_dutycycle")).args(args).output().map(|o| o.status.success()).unwrap_or(false)
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.json");
    std::fs::write(&config, CLI_CONFIG).unwrap();
    let config = config.to_str().unwrap();
    let mut failed = Vec::new();
    let mut compared = 0;
    for sub in ["gen-trace", "run", "run-network", "report"] {
        let dirs: Vec<_> = ["a", "b"].iter().map(|d| tmp.path().join(sub).join(d)).collect();
        let mut ok = true;
        for d in &dirs {
            let out = d.to_str().unwrap();
            ok &= if sub == "report" {
                let summary = tmp.path().join("run/a/summary.json");
                run_cli(&["report", "--input", summary.to_str().unwrap(), "--out", out])
            } else {
                run_cli(&[sub, "--config", config, "--out", out])
            };
        }
        let (a, b) = (dir_bytes(&dirs[0]), dir_bytes(&dirs[1]));
        compared += a.len();
        if !ok || a.is_empty() || a != b {
            failed.push(sub);
        }
    }
    check(
        failed.is_empty(),
        format!("4 subcommands rerun with the same config and seed, {compared} files compared, differing: [{}]", failed.join(" ")),
    )
}

// ----------------------------------------------------------------

fn main() {
    let mut all_pass = true;
    let mut report = |name: &str, c: Check| {
        all_pass &= c.pass;
        println!("{} {name}: {}", if c.pass { "PASS" } else { "FAIL" }, c.detail);
    };

    report("goertzel matches naive DFT", goertzel_matches_dft());

    let runs: Vec<SchedulerRun> = (0..SEEDS).into_par_iter().map(scheduler_run).collect();
    report("learned schedule vs best fixed schedule", scheduler_headline(&runs));

    report("sleep-only lifetime", lifetime_arithmetic());
    report("charge vs 1 ms integration", energy_oracle());
    report("lifetime gain over fixed 3 s", lifetime_gain(&runs));

    report("policy convergence", convergence());

    report("collaboration reduces duplicates", collaboration());
    report("survivors take over after a failure", failure_recovery());

    report("clusters vs brute force", clusters_match_brute_force());
    report("window query vs linear scan", window_query_matches_scan());
    report("network reward reduces to single-device reward", network_reward_reduces());

    report("CLI reruns are byte-identical", determinism());

    if !all_pass {
        std::process::exit(1);
    }
}
