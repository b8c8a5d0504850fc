//! Seeded evaluation protocol: greedy rollouts over a fixed scenario set,
//! success = no collision within the episode, plus report export and
//! cross-preset comparison.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rl::{act_greedy, QNetwork};
use crate::sim::{Action, EnvConfig, Highway, Observation, SimError};

pub const SCHEMA_VERSION: u32 = 1;
pub const PROTOCOL_SCENARIOS: u64 = 100;
pub const PROTOCOL_FRAMES: u32 = 40;

pub const REPORT_JSON: &str = "eval.json";
pub const REPORT_CSV: &str = "eval.csv";
pub const HISTOGRAM_CSV: &str = "success_steps_hist.csv";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid scenario set: {0}")]
    InvalidScenarioSet(String),
    #[error("policy expects {expected} observation values but preset `{preset}` produces {actual}")]
    ShapeMismatch {
        preset: String,
        expected: usize,
        actual: usize,
    },
    #[error("reports are not comparable: {0}")]
    Mismatch(String),
    #[error("{context}: {message}")]
    Io { context: String, message: String },
}

fn io_error(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> EvalError {
    let context = context.into();
    move |e| EvalError::Io {
        context,
        message: e.to_string(),
    }
}

/// Maps observations to actions. Policies receive a per-scenario random
/// stream; greedy policies ignore it.
pub trait Policy: Sync {
    fn act(&self, observation: &Observation, rng: &mut ChaCha8Rng) -> Action;

    /// Observation length the policy accepts, if fixed.
    fn input_len(&self) -> Option<usize> {
        None
    }
}

impl Policy for QNetwork {
    fn act(&self, observation: &Observation, _rng: &mut ChaCha8Rng) -> Action {
        act_greedy(self, observation.as_slice())
    }

    fn input_len(&self) -> Option<usize> {
        Some(QNetwork::input_len(self))
    }
}

/// Uniformly random actions.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn act(&self, _observation: &Observation, rng: &mut ChaCha8Rng) -> Action {
        Action::ALL[rng.random_range(0..Action::COUNT)]
    }
}

/// Adapts a closure into a deterministic policy.
pub struct FnPolicy<F>(pub F);

impl<F: Fn(&Observation) -> Action + Sync> Policy for FnPolicy<F> {
    fn act(&self, observation: &Observation, _rng: &mut ChaCha8Rng) -> Action {
        (self.0)(observation)
    }
}

/// A fixed list of seeded scenarios on one environment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub preset: String,
    pub env: EnvConfig,
    pub seeds: Vec<u64>,
    pub episode_frames: u32,
}

impl ScenarioSet {
    /// Seeds 0..100 at 40 frames on a named preset.
    pub fn protocol(preset: &str) -> Result<Self, EvalError> {
        let env = EnvConfig::preset(preset)?;
        Self::new(preset, env, (0..PROTOCOL_SCENARIOS).collect(), PROTOCOL_FRAMES)
    }

    pub fn new(preset: &str, env: EnvConfig, seeds: Vec<u64>, episode_frames: u32) -> Result<Self, EvalError> {
        let set = Self {
            preset: preset.to_string(),
            env: EnvConfig {
                duration_frames: episode_frames,
                ..env
            },
            seeds,
            episode_frames,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        self.env.validate()?;
        if self.seeds.is_empty() {
            return Err(EvalError::InvalidScenarioSet("no seeds".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(EvalError::InvalidScenarioSet(format!("duplicate seed {dup}")));
        }
        if self.episode_frames == 0 || self.env.duration_frames != self.episode_frames {
            return Err(EvalError::InvalidScenarioSet("episode length must be positive".into()));
        }
        Ok(())
    }

    pub fn observation_len(&self) -> usize {
        self.env.observation_vehicles * crate::sim::OBSERVATION_FEATURES
    }
}

/// Outcome of one scenario rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub seed: u64,
    pub success: bool,
    /// Collision-free frames: the episode length on success, else the
    /// number of frames completed before the colliding one.
    pub success_steps: u32,
    /// Mean ego speed over the frames simulated, m/s.
    pub mean_speed: f64,
    /// 1-based frame during which the ego collided.
    pub crash_frame: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub preset: String,
    pub episode_frames: u32,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub mean_success_steps: f64,
    pub mean_speed: f64,
    pub scenarios: Vec<ScenarioRecord>,
}

impl EvalReport {
    pub fn from_records(preset: &str, episode_frames: u32, scenarios: Vec<ScenarioRecord>) -> Self {
        let n = scenarios.len().max(1) as f64;
        let successes = scenarios.iter().filter(|r| r.success).count() as f64;
        let mean = |f: fn(&ScenarioRecord) -> f64| scenarios.iter().map(f).sum::<f64>() / n;
        Self {
            schema_version: SCHEMA_VERSION,
            preset: preset.to_string(),
            episode_frames,
            success_rate: successes / n,
            collision_rate: 1.0 - successes / n,
            mean_success_steps: mean(|r| f64::from(r.success_steps)),
            mean_speed: mean(|r| r.mean_speed),
            scenarios,
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.scenarios.iter().map(|r| r.seed).collect()
    }

    /// Nearest-rank percentile of success steps, `p` in [0, 100].
    pub fn success_steps_percentile(&self, p: f64) -> u32 {
        let mut steps: Vec<u32> = self.scenarios.iter().map(|r| r.success_steps).collect();
        if steps.is_empty() {
            return 0;
        }
        steps.sort_unstable();
        let rank = ((p.clamp(0.0, 100.0) / 100.0) * steps.len() as f64).ceil() as usize;
        steps[rank.saturating_sub(1).min(steps.len() - 1)]
    }

    /// Scenario count per success-step value `0..=episode_frames`.
    pub fn success_steps_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.episode_frames as usize + 1];
        for r in &self.scenarios {
            counts[(r.success_steps as usize).min(self.episode_frames as usize)] += 1;
        }
        counts
    }
}

/// The scalar `Q` of a report: its success rate.
pub fn scalar_quality(report: &EvalReport) -> f64 {
    report.success_rate
}

/// Orders reports by success rate, then mean success steps.
pub fn quality_cmp(a: &EvalReport, b: &EvalReport) -> std::cmp::Ordering {
    a.success_rate
        .total_cmp(&b.success_rate)
        .then(a.mean_success_steps.total_cmp(&b.mean_success_steps))
}

fn scenario_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_0F0F_F0F0)
}

/// Runs `policy` from `env` until it terminates.
pub fn rollout<P: Policy + ?Sized>(policy: &P, mut env: Highway, seed: u64) -> ScenarioRecord {
    let mut rng = scenario_rng(seed);
    let mut speed_sum = 0.0;
    let mut frames = 0u32;
    let mut crash_frame = None;
    let mut observation = env.observe();
    while !env.is_terminal() {
        let action = policy.act(&observation, &mut rng);
        let (next, info) = env.step(action);
        frames += 1;
        speed_sum += info.ego_speed;
        if info.crashed {
            crash_frame = Some(env.state().frame);
        }
        observation = next;
    }
    let episode_frames = env.config().duration_frames;
    ScenarioRecord {
        seed,
        success: crash_frame.is_none(),
        success_steps: crash_frame.map_or(episode_frames, |f| f - 1),
        mean_speed: if frames == 0 {
            0.0
        } else {
            speed_sum / f64::from(frames)
        },
        crash_frame,
    }
}

/// Evaluates every scenario in parallel; the report is ordered by the set's
/// seed list regardless of completion order.
pub fn evaluate_policy<P: Policy + ?Sized>(policy: &P, set: &ScenarioSet) -> Result<EvalReport, EvalError> {
    set.validate()?;
    if let Some(expected) = policy.input_len() {
        if expected != set.observation_len() {
            return Err(EvalError::ShapeMismatch {
                preset: set.preset.clone(),
                expected,
                actual: set.observation_len(),
            });
        }
    }
    let records = set
        .seeds
        .par_iter()
        .map(|&seed| Highway::reset(&set.env.with_seed(seed)).map(|env| rollout(policy, env, seed)))
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(EvalReport::from_records(&set.preset, set.episode_frames, records))
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    seed: u64,
    success: bool,
    success_steps: u32,
    mean_speed: f64,
    crash_frame: Option<u32>,
}

/// Writes the JSON report, a per-scenario CSV and a success-step histogram
/// CSV into `dir`. Returns the written paths.
pub fn export_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(dir).map_err(io_error(format!("creating {}", dir.display())))?;

    let json_path = dir.join(REPORT_JSON);
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(&json_path, json + "\n").map_err(io_error(format!("writing {}", json_path.display())))?;

    let csv_path = dir.join(REPORT_CSV);
    let csv_err = |e: csv::Error| EvalError::Io {
        context: format!("writing {}", csv_path.display()),
        message: e.to_string(),
    };
    let mut writer = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    for r in &report.scenarios {
        writer
            .serialize(CsvRow {
                seed: r.seed,
                success: r.success,
                success_steps: r.success_steps,
                mean_speed: r.mean_speed,
                crash_frame: r.crash_frame,
            })
            .map_err(csv_err)?;
    }
    writer
        .flush()
        .map_err(io_error(format!("writing {}", csv_path.display())))?;

    let hist_path = dir.join(HISTOGRAM_CSV);
    let mut hist = String::from("success_steps,count\n");
    for (steps, count) in report.success_steps_histogram().iter().enumerate() {
        hist.push_str(&format!("{steps},{count}\n"));
    }
    fs::write(&hist_path, hist).map_err(io_error(format!("writing {}", hist_path.display())))?;

    Ok(vec![json_path, csv_path, hist_path])
}

/// Reads a JSON report, from a file or a directory containing `eval.json`.
pub fn import_report(path: &Path) -> Result<EvalReport, EvalError> {
    let file = if path.is_dir() {
        path.join(REPORT_JSON)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(io_error(format!("reading {}", file.display())))?;
    let report: EvalReport = serde_json::from_str(&text).map_err(|e| EvalError::Io {
        context: format!("parsing {}", file.display()),
        message: e.to_string(),
    })?;
    if report.schema_version != SCHEMA_VERSION {
        return Err(EvalError::Io {
            context: format!("parsing {}", file.display()),
            message: format!("unsupported schema_version {}", report.schema_version),
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub preset: String,
    pub baseline_success_rate: f64,
    pub candidate_success_rate: f64,
    /// Candidate minus baseline, percentage points.
    pub delta_points: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub baseline: String,
    pub candidate: String,
    pub rows: Vec<ComparisonRow>,
    pub mean_delta_points: f64,
}

/// Per-preset success-rate deltas of `candidate` over `baseline`. Both lists
/// must cover the same presets on the same seeds and episode length.
pub fn compare(baseline: (&str, &[EvalReport]), candidate: (&str, &[EvalReport])) -> Result<Comparison, EvalError> {
    let (baseline_name, baseline_reports) = baseline;
    let (candidate_name, candidate_reports) = candidate;
    if baseline_reports.is_empty() {
        return Err(EvalError::Mismatch("no reports to compare".into()));
    }
    if baseline_reports.len() != candidate_reports.len() {
        return Err(EvalError::Mismatch(format!(
            "{} has {} presets, {} has {}",
            baseline_name,
            baseline_reports.len(),
            candidate_name,
            candidate_reports.len()
        )));
    }
    let mut rows = Vec::with_capacity(baseline_reports.len());
    for base in baseline_reports {
        let cand = candidate_reports
            .iter()
            .find(|r| r.preset == base.preset)
            .ok_or_else(|| {
                EvalError::Mismatch(format!("{candidate_name} has no report for preset `{}`", base.preset))
            })?;
        if cand.seeds() != base.seeds() || cand.episode_frames != base.episode_frames {
            return Err(EvalError::Mismatch(format!(
                "preset `{}` was evaluated on different scenario sets",
                base.preset
            )));
        }
        rows.push(ComparisonRow {
            preset: base.preset.clone(),
            baseline_success_rate: base.success_rate,
            candidate_success_rate: cand.success_rate,
            delta_points: 100.0 * (cand.success_rate - base.success_rate),
        });
    }
    let mean_delta_points = rows.iter().map(|r| r.delta_points).sum::<f64>() / rows.len() as f64;
    Ok(Comparison {
        baseline: baseline_name.to_string(),
        candidate: candidate_name.to_string(),
        rows,
        mean_delta_points,
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("preset,baseline_success_rate,candidate_success_rate,delta_points\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.4}\n",
                r.preset, r.baseline_success_rate, r.candidate_success_rate, r.delta_points
            ));
        }
        out.push_str(&format!("average,,,{:.4}\n", self.mean_delta_points));
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.preset.len()).max().unwrap_or(0).max(7);
        let mut out = format!(
            "{:width$}  {:>10}  {:>10}  {:>8}\n",
            "preset",
            truncate(&self.baseline, 10),
            truncate(&self.candidate, 10),
            "delta"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:width$}  {:>9.1}%  {:>9.1}%  {:>+7.2}\n",
                r.preset,
                100.0 * r.baseline_success_rate,
                100.0 * r.candidate_success_rate,
                r.delta_points
            ));
        }
        out.push_str(&format!(
            "{:width$}  {:>10}  {:>10}  {:>+7.2}\n",
            "average", "", "", self.mean_delta_points
        ));
        out
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
