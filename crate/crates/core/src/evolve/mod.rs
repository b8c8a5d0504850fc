//! The generate → train → evaluate → reflect search over reward programs.

mod run_dir;

use std::cmp::Ordering;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{self, DslError, EnvSnapshot, RewardProgram};
use crate::eval::{evaluate_policy, EvalError, EvalReport, ScenarioRecord, ScenarioSet};
use crate::llm::{
    extract_reward_source, prompt_hash, render_initial, render_reflection, ChatMessage, ChatProvider,
    EnvironmentDescription, MockEntry, MockScript, PromptTemplate, ProviderError, TemplateError, DEFAULT_TASK,
    SYSTEM_PROMPT,
};
use crate::rl::{self, TrainError, TrainResult, TrainerConfig};
use crate::sim::EnvConfig;

pub use run_dir::{create_fresh_dir, RunDirectory, BEST_FILE, CONFIG_FILE, LOG_FILE, REWARD_FILE};

#[derive(Debug, Error)]
pub enum EvolveError {
    #[error("invalid evolve config: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("provider failed: {source}")]
    Provider {
        #[source]
        source: ProviderError,
        /// Everything completed before the failure.
        partial: Box<EvolutionOutcome>,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("nothing to select: no scored candidates and no incumbent")]
    NothingToSelect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolveConfig {
    /// Maximum number of iterations `N`.
    pub iterations: usize,
    /// Candidates per iteration `C`.
    pub candidates: usize,
    /// Stop once the best quality strictly exceeds this.
    pub quality_threshold: f64,
    /// Extra attempts per candidate after an unusable response.
    pub generation_retries: u32,
    pub temperature: f64,
    pub reflection_temperature: f64,
    pub task_description: String,
    pub initial_template: PromptTemplate,
    pub reflection_template: PromptTemplate,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            candidates: 3,
            quality_threshold: 0.95,
            generation_retries: 2,
            temperature: 1.0,
            reflection_temperature: 0.7,
            task_description: DEFAULT_TASK.to_string(),
            initial_template: PromptTemplate::initial_default(),
            reflection_template: PromptTemplate::reflection_default(),
        }
    }
}

impl EvolveConfig {
    pub fn validate(&self) -> Result<(), EvolveError> {
        let invalid = |field: &str, reason: &str| {
            Err(EvolveError::InvalidConfig {
                field: field.to_string(),
                reason: reason.to_string(),
            })
        };
        if self.iterations == 0 {
            return invalid("iterations", "must be at least 1");
        }
        if self.candidates == 0 {
            return invalid("candidates", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.quality_threshold) {
            return invalid("quality_threshold", "must be in [0, 1]");
        }
        for (field, t) in [
            ("temperature", self.temperature),
            ("reflection_temperature", self.reflection_temperature),
        ] {
            if !(0.0..=2.0).contains(&t) {
                return invalid(field, "must be in [0, 2]");
            }
        }
        for (field, template) in [
            ("initial_template", &self.initial_template),
            ("reflection_template", &self.reflection_template),
        ] {
            if let Err(e) = template.placeholders() {
                return invalid(field, &e.to_string());
            }
        }
        Ok(())
    }

    /// Upper bound on provider calls for a full run.
    pub fn max_provider_calls(&self) -> usize {
        self.iterations * self.candidates * (1 + self.generation_retries as usize)
    }
}

/// Ordered by success rate, then mean success steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub success_rate: f64,
    pub mean_success_steps: f64,
}

impl Quality {
    /// Averages over scenario sets.
    pub fn of(reports: &[EvalReport]) -> Self {
        let n = reports.len().max(1) as f64;
        Self {
            success_rate: reports.iter().map(|r| r.success_rate).sum::<f64>() / n,
            mean_success_steps: reports.iter().map(|r| r.mean_success_steps).sum::<f64>() / n,
        }
    }

    pub fn compare(&self, other: &Quality) -> Ordering {
        self.success_rate
            .total_cmp(&other.success_rate)
            .then(self.mean_success_steps.total_cmp(&other.mean_success_steps))
    }
}

/// A generation attempt's product: a compiled program or the reason there
/// is none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CandidateOutcome {
    Valid { program: RewardProgram },
    Invalid { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardCandidate {
    /// Index within the iteration.
    pub id: usize,
    pub iteration: usize,
    pub outcome: CandidateOutcome,
    /// Last raw response, if any arrived.
    pub response: Option<String>,
    /// Attempts beyond the first.
    pub retries: u32,
}

impl RewardCandidate {
    pub fn program(&self) -> Option<&RewardProgram> {
        match &self.outcome {
            CandidateOutcome::Valid { program } => Some(program),
            CandidateOutcome::Invalid { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub episodes: usize,
    /// Mean return over the last tenth of episodes.
    pub final_mean_return: f64,
    pub final_mean_length: f64,
    pub wall_clock_seconds: f64,
}

impl TrainingSummary {
    pub fn of(result: &TrainResult) -> Self {
        let n = result.episode_returns.len();
        let tail = (n / 10).max(1).min(n);
        let mean = |xs: &[f64]| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        let lengths: Vec<f64> = result.episode_lengths[n - tail..]
            .iter()
            .map(|&l| f64::from(l))
            .collect();
        Self {
            episodes: n,
            final_mean_return: mean(&result.episode_returns[n - tail..]),
            final_mean_length: mean(&lengths),
            wall_clock_seconds: result.wall_clock_seconds,
        }
    }
}

/// What an evaluator reports for one program.
#[derive(Debug, Clone)]
pub struct CandidateScore {
    /// One report per scenario set; the first is the primary one.
    pub reports: Vec<EvalReport>,
    pub training: Option<TrainingSummary>,
    pub train_result: Option<TrainResult>,
}

/// Turns a reward program into a quality estimate. Errors mark the
/// candidate invalid.
pub trait CandidateEvaluator: Sync {
    fn evaluate(&self, program: &RewardProgram) -> Result<CandidateScore, String>;
}

/// Trains a policy on the program and evaluates it greedily.
#[derive(Debug, Clone)]
pub struct TrainAndEvaluate {
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    pub scenario_sets: Vec<ScenarioSet>,
}

impl CandidateEvaluator for TrainAndEvaluate {
    fn evaluate(&self, program: &RewardProgram) -> Result<CandidateScore, String> {
        let result = rl::train(&self.env, program, &self.trainer).map_err(|e| match e {
            TrainError::Dsl(d) => format!("reward failed during training: {}", d.render(program.source())),
            other => other.to_string(),
        })?;
        let reports = self
            .scenario_sets
            .iter()
            .map(|set| evaluate_policy(&result.network, set))
            .collect::<Result<Vec<_>, EvalError>>()
            .map_err(|e| e.to_string())?;
        Ok(CandidateScore {
            reports,
            training: Some(TrainingSummary::of(&result)),
            train_result: Some(result),
        })
    }
}

/// Scores a program by its value on a fixed snapshot, clamped to [0, 1]:
/// the program `0.7` has success rate 0.7. Exercises the search loop
/// without training.
#[derive(Debug, Clone)]
pub struct StaticEvaluator {
    pub snapshot: EnvSnapshot,
    pub scenarios: usize,
    pub episode_frames: u32,
}

impl Default for StaticEvaluator {
    fn default() -> Self {
        Self {
            snapshot: EnvSnapshot::default(),
            scenarios: 100,
            episode_frames: 40,
        }
    }
}

impl CandidateEvaluator for StaticEvaluator {
    fn evaluate(&self, program: &RewardProgram) -> Result<CandidateScore, String> {
        let value = dsl::evaluate(program, &self.snapshot).map_err(|e| e.render(program.source()))?;
        let wins = (value.clamp(0.0, 1.0) * self.scenarios as f64).round() as usize;
        let records = (0..self.scenarios)
            .map(|i| {
                let success = i < wins;
                ScenarioRecord {
                    seed: i as u64,
                    success,
                    success_steps: if success { self.episode_frames } else { 0 },
                    mean_speed: 0.0,
                    crash_frame: if success { None } else { Some(1) },
                }
            })
            .collect();
        Ok(CandidateScore {
            reports: vec![EvalReport::from_records("static", self.episode_frames, records)],
            training: None,
            train_result: None,
        })
    }
}

/// A candidate with its evaluation.
#[derive(Debug, Clone)]
pub struct ScoredCandidate {
    pub id: usize,
    pub iteration: usize,
    pub program: RewardProgram,
    pub quality: Quality,
    pub reports: Vec<EvalReport>,
    pub training: Option<TrainingSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub program: RewardProgram,
    /// `Q_best`: success rate, averaged over scenario sets.
    pub quality: f64,
    pub mean_success_steps: f64,
    pub iteration: usize,
    pub candidate: usize,
    pub reports: Vec<EvalReport>,
    pub training: Option<TrainingSummary>,
}

impl BestRecord {
    pub fn quality_key(&self) -> Quality {
        Quality {
            success_rate: self.quality,
            mean_success_steps: self.mean_success_steps,
        }
    }

    fn from_scored(c: &ScoredCandidate) -> Self {
        Self {
            program: c.program.clone(),
            quality: c.quality.success_rate,
            mean_success_steps: c.quality.mean_success_steps,
            iteration: c.iteration,
            candidate: c.id,
            reports: c.reports.clone(),
            training: c.training.clone(),
        }
    }
}

/// Best of `scored` and `incumbent`. The incumbent wins ties; among new
/// candidates the lowest id wins ties.
pub fn select_best(scored: &[ScoredCandidate], incumbent: Option<&BestRecord>) -> Result<BestRecord, EvolveError> {
    let mut challenger: Option<&ScoredCandidate> = None;
    for c in scored {
        let better = match challenger {
            None => true,
            Some(b) => {
                c.quality.compare(&b.quality) == Ordering::Greater
                    || (c.quality.compare(&b.quality) == Ordering::Equal && c.id < b.id)
            }
        };
        if better {
            challenger = Some(c);
        }
    }
    match (challenger, incumbent) {
        (None, None) => Err(EvolveError::NothingToSelect),
        (None, Some(inc)) => Ok(inc.clone()),
        (Some(c), None) => Ok(BestRecord::from_scored(c)),
        (Some(c), Some(inc)) => Ok(if c.quality.compare(&inc.quality_key()) == Ordering::Greater {
            BestRecord::from_scored(c)
        } else {
            inc.clone()
        }),
    }
}

/// One provider round trip as written to `log.jsonl`. Never holds
/// credentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub iteration: usize,
    pub candidate: usize,
    pub attempt: u32,
    pub model: String,
    pub temperature: f64,
    pub prompt_sha256: String,
    pub response: Option<String>,
    pub error: Option<String>,
    /// Transport-level retries inside the provider.
    pub retries: u32,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLog {
    pub candidate: RewardCandidate,
    pub quality: Option<Quality>,
    pub evaluation_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    /// The user prompt every candidate of this iteration started from.
    pub prompt: String,
    pub reflection: bool,
    pub exchanges: Vec<ExchangeRecord>,
    pub candidates: Vec<CandidateLog>,
    pub best_quality: Option<f64>,
    pub wall_clock_seconds: f64,
}

impl IterationLog {
    pub fn valid_candidates(&self) -> usize {
        self.candidates.iter().filter(|c| c.quality.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionOutcome {
    pub best: Option<BestRecord>,
    pub iterations: Vec<IterationLog>,
    pub stopped_early: bool,
}

impl EvolutionOutcome {
    /// `Q_best` after each iteration.
    pub fn best_series(&self) -> Vec<Option<f64>> {
        self.iterations.iter().map(|i| i.best_quality).collect()
    }

    pub fn provider_calls(&self) -> usize {
        self.iterations.iter().map(|i| i.exchanges.len()).sum()
    }
}

/// Receives progress as it happens, e.g. to persist a run directory.
pub trait EvolutionObserver {
    fn exchange(&mut self, _record: &ExchangeRecord) -> Result<(), EvolveError> {
        Ok(())
    }

    fn candidate(&mut self, _log: &CandidateLog, _score: Option<&CandidateScore>) -> Result<(), EvolveError> {
        Ok(())
    }

    fn iteration(&mut self, _log: &IterationLog, _best: Option<&BestRecord>) -> Result<(), EvolveError> {
        Ok(())
    }
}

impl EvolutionObserver for () {}

/// Provider, evaluator and prompt context for a run.
pub struct Evolution<'a> {
    pub config: &'a EvolveConfig,
    pub provider: &'a dyn ChatProvider,
    pub evaluator: &'a dyn CandidateEvaluator,
    pub environment: &'a EnvironmentDescription,
}

/// Candidate attempts plus the exchanges they produced.
pub struct Generated {
    pub candidates: Vec<RewardCandidate>,
    pub exchanges: Vec<ExchangeRecord>,
}

fn compile_response(text: &str) -> Result<RewardProgram, String> {
    let source = extract_reward_source(text).map_err(|e| e.to_string())?;
    RewardProgram::compile(&source).map_err(|e: DslError| e.render(&source))
}

/// Draws `count` candidates with independent provider calls. Unusable
/// responses are retried up to `retries` times with the rejection fed back;
/// a fatal provider error aborts.
pub fn generate_candidates(
    provider: &dyn ChatProvider,
    prompt: &str,
    count: usize,
    retries: u32,
    temperature: f64,
    iteration: usize,
    observer: &mut dyn EvolutionObserver,
) -> Result<Generated, (ProviderError, Generated)> {
    let mut out = Generated {
        candidates: Vec::with_capacity(count),
        exchanges: Vec::new(),
    };
    for id in 0..count {
        let mut messages = vec![ChatMessage::system(SYSTEM_PROMPT), ChatMessage::user(prompt)];
        let mut attempt = 0;
        let candidate = loop {
            let started = Instant::now();
            let reply = provider.complete(&messages, temperature);
            let mut record = ExchangeRecord {
                iteration,
                candidate: id,
                attempt,
                model: provider.model().to_string(),
                temperature,
                prompt_sha256: prompt_hash(&messages),
                response: None,
                error: None,
                retries: 0,
                latency_ms: 0,
            };
            let outcome = match reply {
                Ok(completion) => {
                    record.retries = completion.retries;
                    record.latency_ms = completion.latency.max(started.elapsed()).as_millis() as u64;
                    record.response = Some(completion.text.clone());
                    Ok(completion.text)
                }
                Err(e) => {
                    record.latency_ms = started.elapsed().as_millis() as u64;
                    record.error = Some(e.to_string());
                    Err(e)
                }
            };
            if let Err(e) = observer.exchange(&record) {
                return Err((ProviderError::Transport(e.to_string()), out));
            }
            out.exchanges.push(record);
            let (error, response) = match outcome {
                Ok(text) => match compile_response(&text) {
                    Ok(program) => {
                        break RewardCandidate {
                            id,
                            iteration,
                            outcome: CandidateOutcome::Valid { program },
                            response: Some(text),
                            retries: attempt,
                        }
                    }
                    Err(error) => (error, Some(text)),
                },
                Err(e) if e.is_fatal() => return Err((e, out)),
                Err(e) => (e.to_string(), None),
            };
            if attempt >= retries {
                break RewardCandidate {
                    id,
                    iteration,
                    outcome: CandidateOutcome::Invalid { error },
                    response,
                    retries: attempt,
                };
            }
            if let Some(text) = response {
                messages.push(ChatMessage {
                    role: "assistant".into(),
                    content: text,
                });
                messages.push(ChatMessage::user(format!(
                    "That program was rejected:\n{error}\nReply with a corrected program in one fenced code block."
                )));
            }
            attempt += 1;
        };
        out.candidates.push(candidate);
    }
    Ok(out)
}

/// Human-readable metrics for the reflection prompt.
pub fn describe_results(best: &BestRecord) -> String {
    let mut out = String::new();
    let line = |out: &mut String, s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    line(&mut out, format!("- success rate: {:.1}%", 100.0 * best.quality));
    line(
        &mut out,
        format!("- collision rate: {:.1}%", 100.0 * (1.0 - best.quality)),
    );
    line(
        &mut out,
        format!("- mean success steps: {:.2}", best.mean_success_steps),
    );
    for report in &best.reports {
        line(
            &mut out,
            format!(
                "- {} ({} scenarios, {} frames): success rate {:.1}%, success steps mean {:.2} / median {} / 10th percentile {}, mean ego speed {:.2} m/s",
                report.preset,
                report.scenarios.len(),
                report.episode_frames,
                100.0 * report.success_rate,
                report.mean_success_steps,
                report.success_steps_percentile(50.0),
                report.success_steps_percentile(10.0),
                report.mean_speed
            ),
        );
    }
    if let Some(t) = &best.training {
        line(
            &mut out,
            format!(
                "- training: {} episodes; over the last tenth, mean return {:.3} and mean episode length {:.1} frames",
                t.episodes, t.final_mean_return, t.final_mean_length
            ),
        );
    }
    out.trim_end().to_string()
}

/// The reflection prompt for `best`, plus any rejections from the last
/// iteration.
pub fn reflect(
    config: &EvolveConfig,
    environment: &EnvironmentDescription,
    best: &BestRecord,
    rejected: &[String],
) -> Result<String, TemplateError> {
    let mut results = describe_results(best);
    results.push_str(&rejections(rejected));
    render_reflection(
        &config.reflection_template,
        environment,
        &config.task_description,
        best.quality,
        &results,
        best.program.source(),
    )
}

fn rejections(rejected: &[String]) -> String {
    if rejected.is_empty() {
        return String::new();
    }
    let mut out = String::from("\n\nSome programs from the last round were rejected:\n");
    for error in rejected {
        out.push_str("- ");
        out.push_str(&error.replace('\n', "\n  "));
        out.push('\n');
    }
    out.trim_end().to_string()
}

/// Runs the search: draw `C` candidates from the initial prompt, score them
/// in parallel, keep the best, stop once it beats the threshold, otherwise
/// reflect on the best and draw again, for at most `N` iterations. No
/// reflection is requested after the last iteration, so `N = 1` scores the
/// initial candidates only.
pub fn run_evolution(
    run: &Evolution<'_>,
    observer: &mut dyn EvolutionObserver,
) -> Result<EvolutionOutcome, EvolveError> {
    let config = run.config;
    config.validate()?;
    let initial = render_initial(&config.initial_template, run.environment, &config.task_description)?;
    let mut outcome = EvolutionOutcome {
        best: None,
        iterations: Vec::new(),
        stopped_early: false,
    };
    let mut prompt = initial.clone();
    let mut reflection = false;

    for iteration in 0..config.iterations {
        let started = Instant::now();
        let temperature = if reflection {
            config.reflection_temperature
        } else {
            config.temperature
        };
        let generated = match generate_candidates(
            run.provider,
            &prompt,
            config.candidates,
            config.generation_retries,
            temperature,
            iteration,
            observer,
        ) {
            Ok(g) => g,
            Err((source, partial)) => {
                outcome.iterations.push(IterationLog {
                    iteration,
                    prompt,
                    reflection,
                    exchanges: partial.exchanges,
                    candidates: partial
                        .candidates
                        .into_iter()
                        .map(|candidate| CandidateLog {
                            candidate,
                            quality: None,
                            evaluation_error: Some("not evaluated: run aborted".into()),
                        })
                        .collect(),
                    best_quality: outcome.best.as_ref().map(|b| b.quality),
                    wall_clock_seconds: started.elapsed().as_secs_f64(),
                });
                return Err(EvolveError::Provider {
                    source,
                    partial: Box::new(outcome),
                });
            }
        };

        let evaluated: Vec<Option<Result<CandidateScore, String>>> = generated
            .candidates
            .par_iter()
            .map(|c| c.program().map(|p| run.evaluator.evaluate(p)))
            .collect();

        let mut scored = Vec::new();
        let mut logs = Vec::new();
        let mut rejected = Vec::new();
        for (candidate, result) in generated.candidates.into_iter().zip(evaluated) {
            let (log, score) = match result {
                None => {
                    if let CandidateOutcome::Invalid { error } = &candidate.outcome {
                        rejected.push(error.clone());
                    }
                    (
                        CandidateLog {
                            candidate,
                            quality: None,
                            evaluation_error: None,
                        },
                        None,
                    )
                }
                Some(Err(error)) => {
                    rejected.push(error.clone());
                    (
                        CandidateLog {
                            candidate,
                            quality: None,
                            evaluation_error: Some(error),
                        },
                        None,
                    )
                }
                Some(Ok(score)) => {
                    let quality = Quality::of(&score.reports);
                    scored.push(ScoredCandidate {
                        id: candidate.id,
                        iteration,
                        program: candidate.program().cloned().expect("evaluated candidates are valid"),
                        quality,
                        reports: score.reports.clone(),
                        training: score.training.clone(),
                    });
                    (
                        CandidateLog {
                            candidate,
                            quality: Some(quality),
                            evaluation_error: None,
                        },
                        Some(score),
                    )
                }
            };
            observer.candidate(&log, score.as_ref())?;
            logs.push(log);
        }

        match select_best(&scored, outcome.best.as_ref()) {
            Ok(best) => outcome.best = Some(best),
            Err(EvolveError::NothingToSelect) => {}
            Err(e) => return Err(e),
        }
        let log = IterationLog {
            iteration,
            prompt: std::mem::take(&mut prompt),
            reflection,
            exchanges: generated.exchanges,
            candidates: logs,
            best_quality: outcome.best.as_ref().map(|b| b.quality),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        };
        observer.iteration(&log, outcome.best.as_ref())?;
        outcome.iterations.push(log);

        if outcome
            .best
            .as_ref()
            .is_some_and(|b| b.quality > config.quality_threshold)
        {
            outcome.stopped_early = true;
            break;
        }
        if iteration + 1 == config.iterations {
            break;
        }
        match &outcome.best {
            Some(best) => {
                prompt = reflect(config, run.environment, best, &rejected)?;
                reflection = true;
            }
            None => {
                prompt = format!("{initial}{}", rejections(&rejected));
                reflection = false;
            }
        }
    }
    Ok(outcome)
}

/// A mock script that replays the responses recorded in `logs`, in order.
pub fn replay_script(logs: &[IterationLog]) -> MockScript {
    MockScript {
        responses: logs
            .iter()
            .flat_map(|l| &l.exchanges)
            .map(|x| MockEntry {
                when: None,
                text: x.response.clone().unwrap_or_default(),
                fail: match (&x.response, &x.error) {
                    (None, Some(e)) => Some(e.clone()),
                    (None, None) => Some("no response".into()),
                    _ => None,
                },
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{MockProvider, DEFAULT_TASK};

    fn env_desc() -> EnvironmentDescription {
        EnvironmentDescription::new("lane-3-density-1", &EnvConfig::preset("lane-3-density-1").unwrap())
    }

    fn fenced(q: f64) -> String {
        format!("Sure.\n```\n{q:?}\n```\n")
    }

    fn run_script(script: MockScript, config: &EvolveConfig) -> (Result<EvolutionOutcome, EvolveError>, usize) {
        let mock = MockProvider::new(script);
        let desc = env_desc();
        let evaluator = StaticEvaluator::default();
        let run = Evolution {
            config,
            provider: &mock,
            evaluator: &evaluator,
            environment: &desc,
        };
        let result = run_evolution(&run, &mut ());
        (result, mock.calls())
    }

    fn scored(id: usize, q: f64) -> ScoredCandidate {
        let report = StaticEvaluator::default()
            .evaluate(&RewardProgram::compile(&format!("{q:?}")).unwrap())
            .unwrap()
            .reports;
        ScoredCandidate {
            id,
            iteration: 0,
            program: RewardProgram::compile(&format!("{q:?}")).unwrap(),
            quality: Quality::of(&report),
            reports: report,
            training: None,
        }
    }

    #[test]
    fn select_best_takes_argmax() {
        let best = select_best(&[scored(0, 0.2), scored(1, 0.7), scored(2, 0.4)], None).unwrap();
        assert_eq!(best.candidate, 1);
        assert_eq!(best.quality, 0.7);
    }

    #[test]
    fn select_best_keeps_incumbent_on_tie() {
        let incumbent = select_best(&[scored(2, 0.7)], None).unwrap();
        let kept = select_best(&[scored(0, 0.7)], Some(&incumbent)).unwrap();
        assert_eq!(kept.candidate, 2);
        let replaced = select_best(&[scored(0, 0.71)], Some(&incumbent)).unwrap();
        assert_eq!(replaced.quality, 0.71);
        assert_eq!(replaced.candidate, 0);
    }

    #[test]
    fn select_best_breaks_ties_by_lowest_id() {
        let best = select_best(&[scored(3, 0.5), scored(1, 0.5), scored(2, 0.5)], None).unwrap();
        assert_eq!(best.candidate, 1);
    }

    #[test]
    fn select_best_needs_something() {
        assert!(matches!(select_best(&[], None), Err(EvolveError::NothingToSelect)));
    }

    #[test]
    fn early_stop_after_threshold() {
        let config = EvolveConfig {
            iterations: 3,
            candidates: 1,
            quality_threshold: 0.8,
            ..EvolveConfig::default()
        };
        let (outcome, calls) = run_script(MockScript::new([fenced(0.9), fenced(0.95), fenced(0.99)]), &config);
        let outcome = outcome.unwrap();
        assert!(outcome.stopped_early);
        assert_eq!(outcome.iterations.len(), 1);
        assert_eq!(calls, 1);
    }

    #[test]
    fn traced_best_over_three_iterations() {
        let config = EvolveConfig {
            iterations: 3,
            candidates: 1,
            quality_threshold: 1.0,
            ..EvolveConfig::default()
        };
        let (outcome, _) = run_script(MockScript::new([fenced(0.3), fenced(0.5), fenced(0.4)]), &config);
        let outcome = outcome.unwrap();
        let best = outcome.best.clone().unwrap();
        assert_eq!(best.quality, 0.5);
        assert_eq!(best.iteration, 1);
        assert_eq!(outcome.best_series(), vec![Some(0.3), Some(0.5), Some(0.5)]);
        assert!(outcome.iterations[1].reflection);
        assert!(outcome.iterations[1].prompt.contains("0.3"));
    }

    #[test]
    fn malformed_then_valid_counts_one_retry() {
        let config = EvolveConfig {
            iterations: 1,
            candidates: 1,
            ..EvolveConfig::default()
        };
        let (outcome, calls) = run_script(MockScript::new(["```\n0.5 +\n```".to_string(), fenced(0.5)]), &config);
        let outcome = outcome.unwrap();
        assert_eq!(calls, 2);
        let candidate = &outcome.iterations[0].candidates[0].candidate;
        assert_eq!(candidate.retries, 1);
        assert!(candidate.program().is_some());
    }

    #[test]
    fn all_invalid_iteration_continues_with_errors_in_prompt() {
        let config = EvolveConfig {
            iterations: 2,
            candidates: 1,
            generation_retries: 0,
            ..EvolveConfig::default()
        };
        let (outcome, _) = run_script(MockScript::new(["collided >".to_string(), fenced(0.4)]), &config);
        let outcome = outcome.unwrap();
        assert_eq!(outcome.iterations[0].valid_candidates(), 0);
        assert_eq!(outcome.iterations[0].best_quality, None);
        assert!(outcome.iterations[1].prompt.contains("rejected"));
        assert!(!outcome.iterations[1].reflection);
        assert_eq!(outcome.best.unwrap().quality, 0.4);
    }

    #[test]
    fn exhausted_script_aborts_with_partial_logs() {
        let config = EvolveConfig {
            iterations: 3,
            candidates: 2,
            quality_threshold: 1.0,
            ..EvolveConfig::default()
        };
        let (result, _) = run_script(MockScript::new([fenced(0.2), fenced(0.3), fenced(0.1)]), &config);
        match result {
            Err(EvolveError::Provider { source, partial }) => {
                assert!(matches!(source, ProviderError::MockExhausted { .. }));
                assert_eq!(partial.iterations.len(), 2);
                assert_eq!(partial.best.unwrap().quality, 0.3);
            }
            other => panic!("expected provider abort, got {other:?}"),
        }
    }

    #[test]
    fn eval_failures_mark_candidates_invalid() {
        let config = EvolveConfig {
            iterations: 1,
            candidates: 2,
            ..EvolveConfig::default()
        };
        let (outcome, _) = run_script(
            MockScript::new(["```\n1 / collided\n```".to_string(), fenced(0.2)]),
            &config,
        );
        let outcome = outcome.unwrap();
        let logs = &outcome.iterations[0].candidates;
        assert!(logs[0].evaluation_error.as_deref().unwrap().contains("eval-domain"));
        assert_eq!(logs[1].quality.unwrap().success_rate, 0.2);
    }

    #[test]
    fn reflection_is_deterministic_and_complete() {
        let best = select_best(&[scored(0, 0.62)], None).unwrap();
        let config = EvolveConfig::default();
        let a = reflect(&config, &env_desc(), &best, &[]).unwrap();
        let b = reflect(&config, &env_desc(), &best, &[]).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("- success rate: 62.0%"));
        assert!(a.contains("- collision rate: 38.0%"));
        assert!(a.contains(best.program.source()));
        assert!(!a.contains("redesigning it entirely"));
        let zero = select_best(&[scored(0, 0.0)], None).unwrap();
        assert!(reflect(&config, &env_desc(), &zero, &[])
            .unwrap()
            .contains("consider redesigning it entirely"));
        assert!(a.contains(DEFAULT_TASK));
    }

    #[test]
    fn replay_reproduces_best() {
        let config = EvolveConfig {
            iterations: 3,
            candidates: 2,
            quality_threshold: 1.0,
            ..EvolveConfig::default()
        };
        let script = MockScript::new([
            fenced(0.1),
            "nonsense (".to_string(),
            fenced(0.6),
            fenced(0.2),
            fenced(0.6),
            fenced(0.7),
            fenced(0.3),
        ]);
        let (first, _) = run_script(script, &config);
        let first = first.unwrap();
        let (second, _) = run_script(replay_script(&first.iterations), &config);
        assert_eq!(second.unwrap().best, first.best);
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = EvolveConfig {
            candidates: 0,
            ..EvolveConfig::default()
        };
        assert!(matches!(bad.validate(), Err(EvolveError::InvalidConfig { field, .. }) if field == "candidates"));
        assert_eq!(EvolveConfig::default().max_provider_calls(), 45);
    }
}
