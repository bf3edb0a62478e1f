//! Plain-text run configuration: `key = value` lines under `[task]`,
//! `[model]`, `[train]` and `[eval]` sections. `#` and `;` start comments.
//!
//! Every accepted key is listed in [`KEYS`] with its default; anything else
//! is rejected with the offending key and line number.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::env::{parse_perturbations, TaskConfig, TaskKind};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// `(section, key, default, description)`.
pub const KEYS: &[(&str, &str, &str, &str)] = &[
    ("task", "name", "dispersion", "dispersion | pressure_plate | wind_flocking"),
    ("task", "agents", "task default", "team size (dispersion 2, pressure_plate 3, wind_flocking 2)"),
    ("task", "goals", "task default", "goal count for dispersion (2); fixed by the layout elsewhere"),
    ("task", "horizon", "200", "steps per episode"),
    ("model", "feature_hidden", "128,128", "feature net widths; the last is the feature width d"),
    ("model", "critic_hidden", "128,128", "critic hidden widths"),
    ("model", "embed", "64", "hypernetwork token width"),
    ("model", "heads", "2", "attention heads per block"),
    ("model", "blocks", "2", "attention blocks"),
    ("model", "ff", "256", "feed-forward width inside each block"),
    ("model", "rank", "8", "LoRA rank r, at most d"),
    ("model", "init_log_std", "-0.6931471805599453", "initial shared log standard deviation (ln 0.5)"),
    ("train", "total_steps", "500000", "environment transitions to collect"),
    ("train", "envs", "128", "parallel environments per rollout wave"),
    ("train", "minibatches", "8", "minibatches per epoch"),
    ("train", "epochs", "4", "passes over each rollout wave"),
    ("train", "gamma", "0.99", "discount"),
    ("train", "lambda", "0.95", "GAE parameter"),
    ("train", "clip", "0.2", "surrogate ratio clip"),
    ("train", "entropy_coef", "0.01", "entropy bonus weight"),
    ("train", "value_coef", "0.5", "value loss weight"),
    ("train", "max_grad_norm", "0.5", "global gradient norm limit"),
    ("train", "reward_scale", "1", "reward multiplier applied before advantage estimation"),
    ("train", "learning_rate", "0.0006", "Adam step size"),
    ("train", "adam_beta1", "0.9", "Adam first-moment decay"),
    ("train", "adam_beta2", "0.999", "Adam second-moment decay"),
    ("train", "adam_eps", "0.00001", "Adam stabilizer"),
    ("train", "nmd_des_min", "0.05", "lower end of the log-uniform diversity target range"),
    ("train", "nmd_des_max", "2.0", "upper end of the diversity target range"),
    ("train", "nmd_obs_samples", "32", "observations per step the estimator compares at (0 = all)"),
    ("train", "single_query", "false", "query the hypernetwork only at episode start"),
    ("train", "freeze_alpha", "false", "treat the diversity scalar as a constant in the update"),
    ("train", "alpha_ema_decay", "0.99", "decay of the stored diversity-scalar average"),
    ("train", "seed", "0", "master seed (overridden by --seed)"),
    ("eval", "episodes", "16", "evaluation episodes, run as one synchronized batch"),
    ("eval", "nmd_des", "", "diversity target; empty means the geometric mean of the training range"),
    ("eval", "perturb", "", "perturbation list, e.g. remove:first_on_plate2"),
    ("eval", "deterministic", "true", "act with the mean instead of sampling"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    pub nmd_des: Option<f64>,
    pub perturb: String,
    pub deterministic: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 16,
            nmd_des: None,
            perturb: String::new(),
            deterministic: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::dispersion(2, 2),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

struct Entry<'a> {
    section: &'a str,
    key: &'a str,
    value: &'a str,
    line: usize,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses `text`; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, key: &str, message: String| Error::ConfigKey {
            path: origin.to_string(),
            line,
            key: key.to_string(),
            message,
        };
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        let mut section: Option<&str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split(['#', ';']).next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(line, content, "unterminated section header".into()))?
                    .trim();
                if !KEYS.iter().any(|(s, ..)| *s == name) {
                    return Err(err(line, name, "unknown section".into()));
                }
                section = Some(name);
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(line, content, "expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section.ok_or_else(|| err(line, key, "key outside any section".into()))?;
            if !KEYS.iter().any(|(s, k, ..)| *s == sec && *k == key) {
                return Err(err(line, key, format!("unknown key in [{sec}]")));
            }
            if !seen.insert((sec, key)) {
                return Err(err(line, key, "duplicate key".into()));
            }
            entries.push(Entry {
                section: sec,
                key,
                value,
                line,
            });
        }

        let mut cfg = RunConfig::default();
        // The task name selects the defaults that the other task keys refine.
        if let Some(e) = entries.iter().find(|e| e.section == "task" && e.key == "name") {
            let kind = TaskKind::from_str(e.value).map_err(|x| err(e.line, e.key, x.to_string()))?;
            cfg.task = match kind {
                TaskKind::Dispersion => TaskConfig::dispersion(2, 2),
                TaskKind::PressurePlate => TaskConfig::pressure_plate(),
                TaskKind::WindFlocking => TaskConfig::wind_flocking(),
            };
        }
        for e in &entries {
            cfg.apply(e).map_err(|m| err(e.line, e.key, m))?;
        }
        if let Err(x) = cfg.validate() {
            let msg = x.to_string();
            let (line, key) = entries
                .iter()
                .find(|e| msg.contains(e.key))
                .map_or((0, "(combined settings)"), |e| (e.line, e.key));
            return Err(err(line, key, msg));
        }
        Ok(cfg)
    }

    fn apply(&mut self, e: &Entry<'_>) -> std::result::Result<(), String> {
        let v = e.value;
        let t = &mut self.train;
        match (e.section, e.key) {
            ("task", "name") => {}
            ("task", "agents") => self.task.agents = num(v)?,
            ("task", "goals") => self.task.goals = num(v)?,
            ("task", "horizon") => self.task.horizon = num(v)?,
            ("model", "feature_hidden") => self.model.feature_hidden = list(v)?,
            ("model", "critic_hidden") => self.model.critic_hidden = list(v)?,
            ("model", "embed") => self.model.embed = num(v)?,
            ("model", "heads") => self.model.heads = num(v)?,
            ("model", "blocks") => self.model.blocks = num(v)?,
            ("model", "ff") => self.model.ff = num(v)?,
            ("model", "rank") => self.model.rank = num(v)?,
            ("model", "init_log_std") => self.model.init_log_std = num(v)?,
            ("train", "total_steps") => t.total_steps = num(v)?,
            ("train", "envs") => t.envs = num(v)?,
            ("train", "minibatches") => t.minibatches = num(v)?,
            ("train", "epochs") => t.epochs = num(v)?,
            ("train", "gamma") => t.gamma = num(v)?,
            ("train", "lambda") => t.lambda = num(v)?,
            ("train", "clip") => t.clip = num(v)?,
            ("train", "entropy_coef") => t.entropy_coef = num(v)?,
            ("train", "value_coef") => t.value_coef = num(v)?,
            ("train", "max_grad_norm") => t.max_grad_norm = num(v)?,
            ("train", "reward_scale") => t.reward_scale = num(v)?,
            ("train", "learning_rate") => t.adam.lr = num(v)?,
            ("train", "adam_beta1") => t.adam.beta1 = num(v)?,
            ("train", "adam_beta2") => t.adam.beta2 = num(v)?,
            ("train", "adam_eps") => t.adam.eps = num(v)?,
            ("train", "nmd_des_min") => t.nmd_des_min = num(v)?,
            ("train", "nmd_des_max") => t.nmd_des_max = num(v)?,
            ("train", "nmd_obs_samples") => t.nmd_obs_samples = num(v)?,
            ("train", "single_query") => t.single_query = num(v)?,
            ("train", "freeze_alpha") => t.freeze_alpha = num(v)?,
            ("train", "alpha_ema_decay") => t.alpha_ema_decay = num(v)?,
            ("train", "seed") => t.seed = num(v)?,
            ("eval", "episodes") => self.eval.episodes = num(v)?,
            ("eval", "nmd_des") => {
                self.eval.nmd_des = if v.is_empty() { None } else { Some(num(v)?) };
            }
            ("eval", "perturb") => {
                parse_perturbations(v).map_err(|x| x.to_string())?;
                self.eval.perturb = v.to_string();
            }
            ("eval", "deterministic") => self.eval.deterministic = num(v)?,
            (s, k) => return Err(format!("no handler for [{s}] {k}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval episodes must be positive".into()));
        }
        if let Some(d) = self.eval.nmd_des {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("eval nmd_des {d} must be a nonnegative number")));
            }
        }
        Ok(())
    }

    /// A complete configuration file listing every key at its default.
    pub fn default_file() -> String {
        let mut out = String::from("# mmrl run configuration; every key is shown at its default.\n");
        let mut current = "";
        for (section, key, default, doc) in KEYS {
            if *section != current {
                let _ = write!(out, "\n[{section}]\n");
                current = section;
            }
            let _ = writeln!(out, "# {doc}");
            if *default == "task default" {
                let _ = writeln!(out, "# {key} =");
            } else {
                let _ = writeln!(out, "{key} = {default}");
            }
        }
        out
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|p| num(p.trim())).collect()
}
