mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reward_forge::dsl::{builtin_human_reward, RewardProgram};
use reward_forge::eval::{self, evaluate_policy, export_report, import_report, EvalReport, ScenarioSet};
use reward_forge::evolve::{
    self, create_fresh_dir, reflect, replay_script, BestRecord, CandidateLog, CandidateScore, Evolution,
    EvolutionObserver, EvolveError, ExchangeRecord, IterationLog, RunDirectory, TrainAndEvaluate,
};
use reward_forge::llm::{render_initial, ChatProvider, EnvironmentDescription, HttpProvider, MockProvider, MockScript};
use reward_forge::rl::{self, load_policy, save_train_dir, TrainError};
use reward_forge::sim::{EnvConfig, PRESET_NAMES};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Provider(String),
    Dsl(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Provider(_) => 3,
            CliError::Dsl(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Provider(m) => write!(f, "provider error: {m}"),
            CliError::Dsl(m) => write!(f, "reward error:\n{m}"),
            CliError::Other(m) => f.write_str(m),
        }
    }
}

fn other(e: impl fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

fn from_evolve(e: EvolveError) -> CliError {
    match e {
        EvolveError::InvalidConfig { field, reason } => CliError::Config(format!("{field}: {reason}")),
        EvolveError::Provider { source, .. } => CliError::Provider(source.to_string()),
        other => CliError::Other(other.to_string()),
    }
}

/// LLM-guided reward design for highway driving agents.
#[derive(Parser, Debug)]
#[command(name = "reward-forge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Search for a reward program with an LLM (or a scripted mock).
    Evolve(EvolveArgs),
    /// Train one DQN policy on a reward program.
    Train(TrainArgs),
    /// Evaluate a trained policy on the scenario protocol.
    Evaluate(EvaluateArgs),
    /// Compare two evaluation directories preset by preset.
    Compare(CompareArgs),
    /// Print the initial or reflection prompt.
    ShowPrompt(ShowPromptArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Trainer seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training steps per policy.
    #[arg(long)]
    steps: Option<u64>,
    /// Parent directory for outputs.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Output directory name; must not exist yet. Defaults to a timestamp.
    #[arg(long)]
    run_name: Option<String>,
    /// Worker threads for training and evaluation (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct EvolveArgs {
    #[command(flatten)]
    common: Common,
    /// Mock script (TOML) to use instead of the live provider.
    #[arg(long)]
    mock: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    /// Stop once the best success rate exceeds this.
    #[arg(long)]
    threshold: Option<f64>,
    /// Scenarios per evaluation preset.
    #[arg(long)]
    scenarios: Option<u64>,
    /// Evaluation preset; repeat for several.
    #[arg(long = "eval-preset")]
    eval_presets: Vec<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Reward program file, or `human` for the built-in baseline.
    #[arg(long)]
    reward: String,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Training directory or weights file.
    #[arg(long)]
    policy: PathBuf,
    /// Preset to evaluate on; repeat for several (default: all presets).
    #[arg(long = "preset")]
    presets: Vec<String>,
    #[arg(long, default_value_t = eval::PROTOCOL_SCENARIOS)]
    scenarios: u64,
    #[arg(long, default_value = "runs")]
    output: PathBuf,
    #[arg(long)]
    run_name: Option<String>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Directory written by `evaluate`.
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    candidate: PathBuf,
    /// Presets to compare (default: every preset evaluated in the baseline).
    #[arg(long = "preset")]
    presets: Vec<String>,
    /// Also write comparison.csv and comparison.txt here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PromptKind {
    Initial,
    Reflection,
}

#[derive(Args, Debug)]
struct ShowPromptArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_enum, default_value = "initial")]
    kind: PromptKind,
    /// `best.json` to reflect on (default: the human baseline, unscored).
    #[arg(long)]
    best: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Evolve(args) => cmd_evolve(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Compare(args) => cmd_compare(args),
        Command::ShowPrompt(args) => cmd_show_prompt(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn set_jobs(jobs: Option<usize>) -> Result<(), CliError> {
    match jobs {
        None => Ok(()),
        Some(0) => Err(CliError::Config("--jobs: must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--jobs: {e}"))),
    }
}

fn apply_common(config: &mut RunConfig, common: &Common) {
    if let Some(preset) = &common.preset {
        config.preset = preset.clone();
    }
    if let Some(seed) = common.seed {
        config.trainer.seed = seed;
    }
    if let Some(steps) = common.steps {
        config.trainer.total_steps = steps;
    }
    if let Some(output) = &common.output {
        config.output_dir = output.clone();
    }
}

fn evolve_config(args: &EvolveArgs) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::load_or_default(args.common.config.as_deref())?;
    apply_common(&mut config, &args.common);
    if let Some(mock) = &args.mock {
        config.mock_script = Some(mock.clone());
    }
    if let Some(n) = args.iterations {
        config.evolve.iterations = n;
    }
    if let Some(c) = args.candidates {
        config.evolve.candidates = c;
    }
    if let Some(q) = args.threshold {
        config.evolve.quality_threshold = q;
    }
    if let Some(s) = args.scenarios {
        config.evaluation.scenarios = s;
    }
    if !args.eval_presets.is_empty() {
        config.evaluation.presets = args.eval_presets.clone();
    }
    if let Some(model) = &args.model {
        config.provider.model = model.clone();
    }
    if let Some(endpoint) = &args.endpoint {
        config.provider.endpoint = endpoint.clone();
    }
    config.validate()?;
    Ok(config)
}

/// Prints progress and persists the run directory.
struct Progress {
    run: RunDirectory,
}

impl EvolutionObserver for Progress {
    fn exchange(&mut self, record: &ExchangeRecord) -> Result<(), EvolveError> {
        if let Some(error) = &record.error {
            eprintln!(
                "  iteration {} candidate {} attempt {}: provider error: {error}",
                record.iteration, record.candidate, record.attempt
            );
        }
        self.run.exchange(record)
    }

    fn candidate(&mut self, log: &CandidateLog, score: Option<&CandidateScore>) -> Result<(), EvolveError> {
        let c = &log.candidate;
        match (&log.quality, &log.evaluation_error, &c.outcome) {
            (Some(q), _, _) => eprintln!(
                "  iteration {} candidate {}: success rate {:.3}, mean success steps {:.2}",
                c.iteration, c.id, q.success_rate, q.mean_success_steps
            ),
            (None, Some(e), _) => eprintln!("  iteration {} candidate {}: evaluation failed: {e}", c.iteration, c.id),
            (None, None, evolve::CandidateOutcome::Invalid { error }) => {
                let first = error.lines().next().unwrap_or("");
                eprintln!("  iteration {} candidate {}: invalid: {first}", c.iteration, c.id)
            }
            (None, None, _) => {}
        }
        self.run.candidate(log, score)
    }

    fn iteration(&mut self, log: &IterationLog, best: Option<&BestRecord>) -> Result<(), EvolveError> {
        match best {
            Some(b) => eprintln!(
                "iteration {} done in {:.1}s: best success rate {:.3} (iteration {}, candidate {})",
                log.iteration, log.wall_clock_seconds, b.quality, b.iteration, b.candidate
            ),
            None => eprintln!("iteration {} done: no valid candidate yet", log.iteration),
        }
        self.run.iteration(log, best)
    }
}

fn cmd_evolve(args: EvolveArgs) -> Result<(), CliError> {
    let config = evolve_config(&args)?;
    set_jobs(args.common.jobs)?;
    let provider: Box<dyn ChatProvider> = match &config.mock_script {
        Some(path) => Box::new(MockProvider::new(
            MockScript::load(path).map_err(|e| CliError::Config(format!("mock_script: {e}")))?,
        )),
        None => Box::new(HttpProvider::from_env(&config.provider).map_err(|e| CliError::Provider(e.to_string()))?),
    };

    let env = config.env();
    let evaluator = TrainAndEvaluate {
        env: env.clone(),
        trainer: config.trainer.clone(),
        scenario_sets: config.scenario_sets()?,
    };
    let description = EnvironmentDescription::new(&config.preset, &env);
    let run = RunDirectory::create(&config.output_dir, args.common.run_name.as_deref())
        .map_err(from_evolve)?
        .with_training(env, config.trainer.clone());
    run.write_config(&config.to_toml()).map_err(from_evolve)?;
    let run_path = run.path().to_path_buf();
    eprintln!("run directory: {}", run_path.display());

    let evolution = Evolution {
        config: &config.evolve,
        provider: provider.as_ref(),
        evaluator: &evaluator,
        environment: &description,
    };
    let mut progress = Progress { run };
    let result = evolve::run_evolution(&evolution, &mut progress);
    let iterations = match &result {
        Ok(outcome) => &outcome.iterations,
        Err(EvolveError::Provider { partial, .. }) => &partial.iterations,
        Err(_) => return result.map(|_| ()).map_err(from_evolve),
    };
    fs::write(run_path.join("replay.toml"), replay_script(iterations).to_toml()).map_err(other)?;

    let outcome = result.map_err(from_evolve)?;
    match &outcome.best {
        Some(best) => {
            println!("{}", best.program.source().trim_end());
            println!(
                "Q_best = {:.4} (mean success steps {:.2}; iteration {}, candidate {}; {} iteration(s){})",
                best.quality,
                best.mean_success_steps,
                best.iteration,
                best.candidate,
                outcome.iterations.len(),
                if outcome.stopped_early { ", stopped early" } else { "" }
            );
            Ok(())
        }
        None => Err(CliError::Other("no valid reward program was produced".into())),
    }
}

fn load_reward(spec: &str) -> Result<RewardProgram, CliError> {
    if spec == "human" {
        return Ok(builtin_human_reward());
    }
    let source = fs::read_to_string(spec).map_err(|e| CliError::Config(format!("--reward: reading {spec}: {e}")))?;
    RewardProgram::compile(&source).map_err(|e| CliError::Dsl(format!("{spec}: {}", e.render(&source))))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut config = RunConfig::load_or_default(args.common.config.as_deref())?;
    apply_common(&mut config, &args.common);
    config.validate()?;
    set_jobs(args.common.jobs)?;
    let reward = load_reward(&args.reward)?;
    let env = config.env();
    let dir = create_fresh_dir(&config.output_dir, args.common.run_name.as_deref()).map_err(from_evolve)?;
    let result = rl::train(&env, &reward, &config.trainer).map_err(|e| match e {
        TrainError::Dsl(d) => CliError::Dsl(d.render(reward.source())),
        TrainError::InvalidConfig { field, reason } => CliError::Config(format!("trainer.{field}: {reason}")),
        other => CliError::Other(other.to_string()),
    })?;
    save_train_dir(&dir, &result, &env, &config.trainer, &reward).map_err(other)?;
    let n = result.episode_returns.len();
    let tail = &result.episode_returns[n.saturating_sub((n / 10).max(1))..];
    let mean_tail = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    println!("{}", dir.display());
    println!(
        "{} steps, {} episodes in {:.1}s; mean return over the last tenth {:.3}",
        config.trainer.total_steps, n, result.wall_clock_seconds, mean_tail
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    set_jobs(args.jobs)?;
    let presets: Vec<String> = if args.presets.is_empty() {
        PRESET_NAMES.iter().map(|p| p.to_string()).collect()
    } else {
        args.presets.clone()
    };
    let mut sets = Vec::new();
    for preset in &presets {
        let env = EnvConfig::preset(preset).map_err(|e| CliError::Config(format!("--preset: {e}")))?;
        if args.scenarios == 0 {
            return Err(CliError::Config("--scenarios: must be positive".into()));
        }
        sets.push(ScenarioSet::new(preset, env, (0..args.scenarios).collect(), eval::PROTOCOL_FRAMES).map_err(other)?);
    }
    let policy = load_policy(&args.policy).map_err(other)?;
    let mut reports = Vec::new();
    for set in &sets {
        reports.push(evaluate_policy(&policy, set).map_err(other)?);
    }
    let dir = create_fresh_dir(&args.output, args.run_name.as_deref()).map_err(from_evolve)?;
    println!("{}", dir.display());
    println!(
        "{:<20} {:>8} {:>10} {:>12} {:>10}",
        "preset", "success", "collision", "mean steps", "speed"
    );
    for report in &reports {
        export_report(report, &dir.join(&report.preset)).map_err(other)?;
        println!(
            "{:<20} {:>8.3} {:>10.3} {:>12.2} {:>10.2}",
            report.preset, report.success_rate, report.collision_rate, report.mean_success_steps, report.mean_speed
        );
    }
    Ok(())
}

/// Reports found under `dir/<preset>/eval.json`, in preset order.
fn read_reports(dir: &Path, presets: &[String]) -> Result<Vec<EvalReport>, CliError> {
    presets
        .iter()
        .map(|p| import_report(&dir.join(p).join("eval.json")).map_err(other))
        .collect()
}

fn evaluated_presets(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut presets: Vec<String> = fs::read_dir(dir)
        .map_err(|e| other(format!("reading {}: {e}", dir.display())))?
        .filter_map(Result::ok)
        .filter(|e| e.path().join("eval.json").is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    presets.sort();
    if presets.is_empty() {
        return Err(other(format!("{} holds no <preset>/eval.json reports", dir.display())));
    }
    Ok(presets)
}

fn dir_label(dir: &Path) -> String {
    dir.file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let presets = if args.presets.is_empty() {
        evaluated_presets(&args.baseline)?
    } else {
        args.presets.clone()
    };
    let baseline = read_reports(&args.baseline, &presets)?;
    let candidate = read_reports(&args.candidate, &presets)?;
    let (bn, cn) = (dir_label(&args.baseline), dir_label(&args.candidate));
    let comparison = eval::compare((&bn, &baseline), (&cn, &candidate)).map_err(other)?;
    let table = comparison.to_table();
    print!("{table}");
    if let Some(out) = &args.output {
        fs::create_dir_all(out).map_err(other)?;
        fs::write(out.join("comparison.csv"), comparison.to_csv()).map_err(other)?;
        fs::write(out.join("comparison.txt"), &table).map_err(other)?;
    }
    Ok(())
}

fn cmd_show_prompt(args: ShowPromptArgs) -> Result<(), CliError> {
    let mut config = RunConfig::load_or_default(args.config.as_deref())?;
    if let Some(preset) = &args.preset {
        config.preset = preset.clone();
    }
    config.validate()?;
    let description = EnvironmentDescription::new(&config.preset, &config.env());
    let text = match args.kind {
        PromptKind::Initial => render_initial(
            &config.evolve.initial_template,
            &description,
            &config.evolve.task_description,
        ),
        PromptKind::Reflection => {
            let best = match &args.best {
                Some(path) => {
                    let text =
                        fs::read_to_string(path).map_err(|e| other(format!("reading {}: {e}", path.display())))?;
                    serde_json::from_str::<BestRecord>(&text).map_err(|e| other(format!("{}: {e}", path.display())))?
                }
                None => BestRecord {
                    program: builtin_human_reward(),
                    quality: 0.0,
                    mean_success_steps: 0.0,
                    iteration: 0,
                    candidate: 0,
                    reports: Vec::new(),
                    training: None,
                },
            };
            reflect(&config.evolve, &description, &best, &[])
        }
    }
    .map_err(|e| CliError::Config(e.to_string()))?;
    println!("{text}");
    Ok(())
}
