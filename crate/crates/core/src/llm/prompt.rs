use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{Function, SNAPSHOT_VARIABLES};
use crate::sim::{Action, EnvConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unfilled placeholder `{0}`")]
    Unfilled(String),
    #[error("unterminated placeholder at byte {0}")]
    Unterminated(usize),
}

/// Text with `{name}` placeholders. `{{` and `}}` are literal braces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn initial_default() -> Self {
        Self::new(DEFAULT_INITIAL)
    }

    pub fn reflection_default() -> Self {
        Self::new(DEFAULT_REFLECTION)
    }

    /// Placeholder names in order of appearance, with repeats.
    pub fn placeholders(&self) -> Result<Vec<String>, TemplateError> {
        let mut names = Vec::new();
        self.walk(|piece| {
            if let Piece::Slot(name) = piece {
                names.push(name.to_string());
            }
        })?;
        Ok(names)
    }

    /// Substitutes every placeholder; any name missing from `values` is an
    /// error. Substituted text is not rescanned.
    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        for name in self.placeholders()? {
            if !values.contains_key(name.as_str()) {
                return Err(TemplateError::Unfilled(name));
            }
        }
        let mut out = String::with_capacity(self.text.len());
        self.walk(|piece| match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(name) => out.push_str(&values[name]),
        })?;
        Ok(out)
    }

    fn walk<'a>(&'a self, mut visit: impl FnMut(Piece<'a>)) -> Result<(), TemplateError> {
        let text = self.text.as_str();
        let mut rest_start = 0;
        let mut i = 0;
        let bytes = text.as_bytes();
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    visit(Piece::Text(&text[rest_start..=i]));
                    i += 2;
                    rest_start = i;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    visit(Piece::Text(&text[rest_start..=i]));
                    i += 2;
                    rest_start = i;
                }
                b'{' => {
                    let close = text[i..].find('}').ok_or(TemplateError::Unterminated(i))? + i;
                    visit(Piece::Text(&text[rest_start..i]));
                    visit(Piece::Slot(text[i + 1..close].trim()));
                    i = close + 1;
                    rest_start = i;
                }
                _ => i += 1,
            }
        }
        visit(Piece::Text(&text[rest_start..]));
        Ok(())
    }
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

pub const DEFAULT_TASK: &str = "\
The ego vehicle drives on a multilane highway shared with other traffic. It \
should reach a high speed while avoiding collisions with the vehicles around \
it, and it earns extra credit for driving in the rightmost lane.";

pub const DEFAULT_GUIDELINES: &str = "\
- Answer with exactly one reward program inside a single fenced code block.
- Use only the variables, functions and operators listed below; anything else is rejected.
- The program must evaluate to a number. Conditions (comparisons, and/or/not) are only valid inside `if`.
- Keep every term finite: avoid dividing by quantities that can reach zero and taking square roots of negatives.
- Make collisions clearly worse than any collision-free step, and keep per-step rewards on a modest scale, for example within [-1, 1].
- Prefer a few well-motivated terms over many small ones; use `let` to name intermediate quantities.";

const DEFAULT_INITIAL: &str = "\
You are an autonomous-driving engineer. Write a reward function for a \
reinforcement-learning agent trained in a highway driving simulator.

Task:
{task_description}

The reward is computed once per decision step from a snapshot of the \
simulator. Traffic layout matters: the number of lanes and the traffic \
density change how often the ego vehicle must interact with its neighbours, \
so take the configuration below into account.

Rules for your answer:
{guidelines}

Environment:
{environment_description}
";

const DEFAULT_REFLECTION: &str = "\
You are an autonomous-driving engineer. A reinforcement-learning agent was \
trained in a highway driving simulator with the reward function shown at the \
end, and it needs a better one.

Task:
{task_description}

Results of training with the current reward and evaluating the greedy policy:
{training_results}

{guidelines}

Environment:
{environment_description}

Current reward function:
```
{current_reward}
```
";

/// Guidance prepended to the rules in a reflection prompt.
pub fn reflection_guidance(success_rate: f64) -> &'static str {
    if success_rate < REDESIGN_BELOW {
        "The agent performed poorly, so consider redesigning it entirely rather than tuning weights."
    } else {
        "The agent performs reasonably; make targeted adjustments to the parts of the reward that explain the remaining failures."
    }
}

/// Success rate below which the reflection prompt asks for a redesign.
pub const REDESIGN_BELOW: f64 = 0.5;

pub const GRAMMAR_REFERENCE: &str = "\
program := expr
expr    := if cond then expr else expr | let name = expr in expr | sum
cond    := cond or cond | cond and cond | not cond | sum cmp sum | ( cond )
cmp     := < | <= | > | >= | == | !=
sum     := prod ((+ | -) prod)*
prod    := unary ((* | /) unary)*
unary   := - unary | number | name | func(args) | ( expr )
# starts a comment that runs to the end of the line.";

/// What the model is told about the environment in place of source code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentDescription {
    pub grammar: String,
    /// Function name and argument count.
    pub functions: Vec<(String, usize)>,
    /// Snapshot variable name and meaning.
    pub variables: Vec<(String, String)>,
    pub preset: String,
    pub lanes_count: usize,
    pub vehicles_density: f64,
    pub traffic_vehicles: usize,
    pub episode_frames: u32,
    pub policy_frequency: u32,
    pub speed_limits: [f64; 2],
}

impl EnvironmentDescription {
    pub fn new(preset: &str, config: &EnvConfig) -> Self {
        Self {
            grammar: GRAMMAR_REFERENCE.to_string(),
            functions: Function::ALL
                .iter()
                .map(|f| (f.name().to_string(), f.arity()))
                .collect(),
            variables: SNAPSHOT_VARIABLES
                .iter()
                .map(|(n, d)| (n.to_string(), d.to_string()))
                .collect(),
            preset: preset.to_string(),
            lanes_count: config.lanes_count,
            vehicles_density: config.vehicles_density,
            traffic_vehicles: config.traffic_count(),
            episode_frames: config.duration_frames,
            policy_frequency: config.policy_frequency,
            speed_limits: config.speed_limits,
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "Road: preset {}, {} lanes, traffic density {} ({} other vehicles).\n",
            self.preset, self.lanes_count, self.vehicles_density, self.traffic_vehicles
        ));
        out.push_str(&format!(
            "Episodes last {} decisions at {} Hz and end early on a collision. \
             The ego target speed ranges over [{}, {}] m/s.\n",
            self.episode_frames, self.policy_frequency, self.speed_limits[0], self.speed_limits[1]
        ));
        out.push_str("Actions:");
        for action in Action::ALL {
            out.push_str(&format!(" {} {:?};", action.code(), action));
        }
        out.pop();
        out.push_str(".\n\nReward language grammar:\n");
        out.push_str(&self.grammar);
        out.push_str("\n\nFunctions: ");
        let funcs: Vec<String> = self.functions.iter().map(|(n, a)| format!("{n}/{a}")).collect();
        out.push_str(&funcs.join(", "));
        out.push_str(".\n\nVariables:\n");
        for (name, meaning) in &self.variables {
            out.push_str(&format!("- {name}: {meaning}\n"));
        }
        out.push_str(
            "\nExample:\n```\nlet speed = clamp((ego_speed - speed_min) / (speed_max - speed_min), 0, 1) in\n\
             if collided > 0.5 then -1 else 0.8 * speed + 0.2 * on_rightmost_lane\n```\n",
        );
        out
    }
}

pub fn render_initial(
    template: &PromptTemplate,
    env: &EnvironmentDescription,
    task: &str,
) -> Result<String, TemplateError> {
    let values = BTreeMap::from([
        ("task_description", task.to_string()),
        ("guidelines", DEFAULT_GUIDELINES.to_string()),
        ("environment_description", env.render()),
    ]);
    template.render(&values)
}

pub fn render_reflection(
    template: &PromptTemplate,
    env: &EnvironmentDescription,
    task: &str,
    success_rate: f64,
    training_results: &str,
    current_reward: &str,
) -> Result<String, TemplateError> {
    let guidelines = format!(
        "{}\n\nRules for your answer:\n{}",
        reflection_guidance(success_rate),
        DEFAULT_GUIDELINES
    );
    let values = BTreeMap::from([
        ("task_description", task.to_string()),
        ("guidelines", guidelines),
        ("environment_description", env.render()),
        ("training_results", training_results.to_string()),
        ("current_reward", current_reward.trim_end().to_string()),
    ]);
    template.render(&values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::EnvSnapshot;

    fn desc() -> EnvironmentDescription {
        EnvironmentDescription::new("lane-3-density-1", &EnvConfig::preset("lane-3-density-1").unwrap())
    }

    #[test]
    fn initial_prompt_states_the_task() {
        let prompt = render_initial(&PromptTemplate::initial_default(), &desc(), DEFAULT_TASK).unwrap();
        assert!(prompt.contains("avoiding collisions"));
        assert!(prompt.contains("gap_front"));
        assert!(prompt.contains("3 lanes"));
        assert!(!prompt.contains('{') || prompt.matches('{').count() == prompt.matches('}').count());
    }

    #[test]
    fn unknown_placeholder_is_named() {
        let err = render_initial(&PromptTemplate::new("hello {foo}"), &desc(), DEFAULT_TASK).unwrap_err();
        assert_eq!(err, TemplateError::Unfilled("foo".into()));
        assert!(err.to_string().contains("foo"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let t = PromptTemplate::initial_default();
        assert_eq!(
            render_initial(&t, &desc(), DEFAULT_TASK).unwrap(),
            render_initial(&t, &desc(), DEFAULT_TASK).unwrap()
        );
    }

    #[test]
    fn braces_escape_and_values_are_not_rescanned() {
        let t = PromptTemplate::new("{{x}} {a}");
        let out = t.render(&BTreeMap::from([("a", "{b}".to_string())])).unwrap();
        assert_eq!(out, "{x} {b}");
        assert_eq!(
            PromptTemplate::new("oops {a").placeholders(),
            Err(TemplateError::Unterminated(5))
        );
    }

    #[test]
    fn catalog_matches_snapshot() {
        let d = desc();
        for (name, _) in &d.variables {
            assert!(EnvSnapshot::has_variable(name), "{name}");
            assert!(EnvSnapshot::default().get(name).is_some());
        }
        assert_eq!(d.variables.len(), SNAPSHOT_VARIABLES.len());
        let rendered = d.render();
        for (name, _) in SNAPSHOT_VARIABLES {
            assert!(rendered.contains(&format!("- {name}:")));
        }
    }

    #[test]
    fn example_in_description_compiles() {
        let rendered = desc().render();
        let start = rendered.find("```\n").unwrap() + 4;
        let end = rendered[start..].find("```").unwrap() + start;
        crate::dsl::RewardProgram::compile(&rendered[start..end]).unwrap();
    }

    #[test]
    fn reflection_branches_on_success() {
        let t = PromptTemplate::reflection_default();
        let low = render_reflection(&t, &desc(), DEFAULT_TASK, 0.0, "success rate: 0%", "ego_speed").unwrap();
        assert!(low.contains("consider redesigning it entirely"));
        assert!(low.contains("```\nego_speed\n```"));
        let high = render_reflection(&t, &desc(), DEFAULT_TASK, 0.9, "success rate: 90%", "ego_speed").unwrap();
        assert!(!high.contains("redesigning"));
    }
}
