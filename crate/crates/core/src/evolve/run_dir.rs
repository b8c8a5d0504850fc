use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{BestRecord, CandidateLog, CandidateScore, EvolutionObserver, EvolveError, ExchangeRecord, IterationLog};
use crate::eval::export_report;
use crate::rl::{save_train_dir, TrainerConfig};
use crate::sim::EnvConfig;

pub const LOG_FILE: &str = "log.jsonl";
pub const BEST_FILE: &str = "best.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const REWARD_FILE: &str = "reward.dsl";

/// On-disk record of one evolution run:
///
/// ```text
/// <root>/<name>/config.toml
/// <root>/<name>/log.jsonl                 one line per provider exchange
/// <root>/<name>/best.json                 rewritten after every iteration
/// <root>/<name>/iter-<k>/iteration.json
/// <root>/<name>/iter-<k>/candidate-<c>/{reward.dsl, candidate.json, train/, eval.json}
/// ```
///
/// A run directory is created fresh and never reused.
#[derive(Debug)]
pub struct RunDirectory {
    path: PathBuf,
    log: File,
    training: Option<(EnvConfig, TrainerConfig)>,
}

fn io_err(context: String) -> impl FnOnce(io::Error) -> EvolveError {
    move |source| EvolveError::Io { context, source }
}

impl RunDirectory {
    /// Creates a fresh directory under `root` (see [`create_fresh_dir`]).
    pub fn create(root: &Path, name: Option<&str>) -> Result<Self, EvolveError> {
        let path = create_fresh_dir(root, name)?;
        let log_path = path.join(LOG_FILE);
        let log = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(format!("creating {}", log_path.display())))?;
        Ok(Self {
            path,
            log,
            training: None,
        })
    }

    /// Also persist trained policies under each candidate's `train/`.
    pub fn with_training(mut self, env: EnvConfig, trainer: TrainerConfig) -> Self {
        self.training = Some((env, trainer));
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn iteration_dir(&self, iteration: usize) -> PathBuf {
        self.path.join(format!("iter-{iteration}"))
    }

    pub fn candidate_dir(&self, iteration: usize, candidate: usize) -> PathBuf {
        self.iteration_dir(iteration).join(format!("candidate-{candidate}"))
    }

    /// Writes the effective configuration echo.
    pub fn write_config(&self, text: &str) -> Result<PathBuf, EvolveError> {
        let path = self.path.join(CONFIG_FILE);
        write_new(&path, text.as_bytes())?;
        Ok(path)
    }
}

/// Creates `root/name`, failing if it exists. Without a name, a UTC
/// timestamp is used, suffixed with a counter if that is taken.
pub fn create_fresh_dir(root: &Path, name: Option<&str>) -> Result<PathBuf, EvolveError> {
    fs::create_dir_all(root).map_err(io_err(format!("creating {}", root.display())))?;
    match name {
        Some(name) => {
            if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
                return Err(EvolveError::InvalidConfig {
                    field: "run_name".into(),
                    reason: format!("'{name}' is not a plain directory name"),
                });
            }
            let path = root.join(name);
            fs::create_dir(&path).map_err(|source| EvolveError::Io {
                context: format!("creating run directory {} (run names must not collide)", path.display()),
                source,
            })?;
            Ok(path)
        }
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
            let mut suffix = 0;
            loop {
                let candidate = if suffix == 0 {
                    root.join(&stamp)
                } else {
                    root.join(format!("{stamp}-{suffix}"))
                };
                match fs::create_dir(&candidate) {
                    Ok(()) => return Ok(candidate),
                    Err(e) if e.kind() == io::ErrorKind::AlreadyExists => suffix += 1,
                    Err(e) => return Err(io_err(format!("creating {}", candidate.display()))(e)),
                }
            }
        }
    }
}

fn write_new(path: &Path, bytes: &[u8]) -> Result<(), EvolveError> {
    let mut file = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(io_err(format!("creating {}", path.display())))?;
    file.write_all(bytes)
        .map_err(io_err(format!("writing {}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), EvolveError> {
    let text = serde_json::to_string_pretty(value).expect("run records serialize");
    fs::write(path, text).map_err(io_err(format!("writing {}", path.display())))
}

impl EvolutionObserver for RunDirectory {
    fn exchange(&mut self, record: &ExchangeRecord) -> Result<(), EvolveError> {
        let mut line = serde_json::to_string(record).expect("exchange records serialize");
        line.push('\n');
        self.log
            .write_all(line.as_bytes())
            .and_then(|()| self.log.flush())
            .map_err(io_err(format!("appending to {}", self.path.join(LOG_FILE).display())))
    }

    fn candidate(&mut self, log: &CandidateLog, score: Option<&CandidateScore>) -> Result<(), EvolveError> {
        let dir = self.candidate_dir(log.candidate.iteration, log.candidate.id);
        fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
        if let Some(program) = log.candidate.program() {
            write_new(&dir.join(REWARD_FILE), program.source().as_bytes())?;
        }
        write_json(&dir.join("candidate.json"), log)?;
        let Some(score) = score else {
            return Ok(());
        };
        if let (Some(result), Some((env, trainer)), Some(program)) =
            (&score.train_result, &self.training, log.candidate.program())
        {
            save_train_dir(&dir.join("train"), result, env, trainer, program).map_err(|e| EvolveError::Io {
                context: format!("saving policy in {}", dir.display()),
                source: io::Error::other(e.to_string()),
            })?;
        }
        let export = |report, target: &Path| {
            export_report(report, target).map_err(|e| EvolveError::Io {
                context: format!("exporting evaluation to {}", target.display()),
                source: io::Error::other(e.to_string()),
            })
        };
        if let Some(primary) = score.reports.first() {
            export(primary, &dir)?;
        }
        if score.reports.len() > 1 {
            for report in &score.reports {
                export(report, &dir.join("eval").join(&report.preset))?;
            }
        }
        Ok(())
    }

    fn iteration(&mut self, log: &IterationLog, best: Option<&BestRecord>) -> Result<(), EvolveError> {
        let dir = self.iteration_dir(log.iteration);
        fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
        write_json(&dir.join("iteration.json"), log)?;
        if let Some(best) = best {
            write_json(&self.path.join(BEST_FILE), best)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_runs_never_collide() {
        let root = tempfile::tempdir().unwrap();
        let first = RunDirectory::create(root.path(), Some("a")).unwrap();
        assert!(first.path().join(LOG_FILE).exists());
        assert!(matches!(
            RunDirectory::create(root.path(), Some("a")),
            Err(EvolveError::Io { .. })
        ));
        assert!(matches!(
            RunDirectory::create(root.path(), Some("../x")),
            Err(EvolveError::InvalidConfig { .. })
        ));
    }

    #[test]
    fn timestamped_runs_get_distinct_directories() {
        let root = tempfile::tempdir().unwrap();
        let a = RunDirectory::create(root.path(), None).unwrap();
        let b = RunDirectory::create(root.path(), None).unwrap();
        assert_ne!(a.path(), b.path());
    }

    #[test]
    fn config_echo_is_write_once() {
        let root = tempfile::tempdir().unwrap();
        let run = RunDirectory::create(root.path(), Some("r")).unwrap();
        run.write_config("x = 1\n").unwrap();
        assert!(run.write_config("x = 2\n").is_err());
        assert_eq!(fs::read_to_string(run.path().join(CONFIG_FILE)).unwrap(), "x = 1\n");
    }
}
