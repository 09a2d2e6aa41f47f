//! Strict plain-text configuration: `[section]` headers over `key = value`
//! lines with `#` comments. Every section and key must be known, values must
//! parse at their declared type, and violations carry line and key
//! diagnostics. Missing keys take the documented defaults; the loader reports
//! every default it applied so the run manifest can record them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use foliated_sde::averaging::NumericParams;
use foliated_sde::rate::{default_lambda_target, ExperimentConfig};
use foliated_sde::systems::SystemOverrides;

/// Experiment-wide parameters shared by every subcommand.
///
/// Defaults: `system = ou_lines`, `p = 2`, `t_horizon = 1`,
/// `eps_grid = 0.2, 0.1, 0.05, 0.025`, `n_paths = 200`,
/// `lambda_target = 0.8 (p-1)/p^2`, `c_constant = 1`, `seed = 42`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSection {
    pub system: String,
    pub p: f64,
    pub t_horizon: f64,
    pub eps_grid: Vec<f64>,
    pub n_paths: usize,
    pub lambda_target: f64,
    pub c_constant: f64,
    pub seed: u64,
}

/// Built-in system parameter overrides; every key optional, `None` keeps the
/// system's own default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OverridesSection {
    pub rate: Option<f64>,
    pub rate_tilde: Option<f64>,
    pub beta: Option<f64>,
    pub c0: Option<f64>,
    pub v_half_width: Option<f64>,
    pub omega: Option<f64>,
    pub constant_k: Option<f64>,
    pub initial: Option<Vec<f64>>,
}

impl OverridesSection {
    pub fn to_system_overrides(&self) -> SystemOverrides {
        SystemOverrides {
            rate: self.rate,
            rate_tilde: self.rate_tilde,
            beta: self.beta,
            c0: self.c0,
            v_half_width: self.v_half_width,
            omega: self.omega,
            constant_k: self.constant_k,
            initial: self.initial.clone(),
        }
    }
}

/// Averaged-drift tabulation. Defaults: `v_grid = -1, -0.5, 0, 0.5, 1`,
/// `time_horizon = 1000`, `replications = 64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateQSection {
    pub v_grid: Vec<f64>,
    pub time_horizon: f64,
    pub replications: usize,
}

/// Mixing-profile estimation. Defaults: `time_grid = 1, 4, 16, 64`,
/// `replications = 32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eta0Section {
    pub time_grid: Vec<f64>,
    pub replications: usize,
}

/// Error-decomposition study. Defaults: `eps = 0.1`, `realizations = 100`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposeSection {
    pub eps: f64,
    pub realizations: usize,
}

/// Comparison-bound sweep. Defaults: `p_grid = 2, 3, 4`,
/// `eps_t_grid = 0.01, 0.05, 0.1`, `c = 1`, `t_horizon = 1`,
/// `grid_points = 200`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BihariSection {
    pub p_grid: Vec<f64>,
    pub eps_t_grid: Vec<f64>,
    pub c: f64,
    pub t_horizon: f64,
    pub grid_points: usize,
}

/// Single-path simulation. Default: `eps = 0.1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSection {
    pub eps: f64,
}

/// The full resolved configuration; a snapshot of this struct plus the seed
/// determines every artifact byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliConfig {
    pub experiment: ExperimentSection,
    pub numeric: NumericParams,
    pub overrides: OverridesSection,
    pub estimate_q: EstimateQSection,
    pub eta0: Eta0Section,
    pub decompose: DecomposeSection,
    pub bihari: BihariSection,
    pub simulate: SimulateSection,
}

impl CliConfig {
    /// Maps the experiment and numeric sections onto the library's rate
    /// experiment configuration.
    pub fn to_experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            system: self.experiment.system.clone(),
            overrides: self.overrides.to_system_overrides(),
            p: self.experiment.p,
            t_horizon: self.experiment.t_horizon,
            eps_grid: self.experiment.eps_grid.clone(),
            n_paths: self.experiment.n_paths,
            lambda_target: self.experiment.lambda_target,
            c_constant: self.experiment.c_constant,
            seed: self.experiment.seed,
            numeric: self.numeric,
        }
    }

    /// Semantic validation across sections, with key-named diagnostics.
    pub fn validate(&self) -> Result<()> {
        self.to_experiment_config()
            .validate()
            .map_err(|e| anyhow::anyhow!("[experiment]/[numeric]: {e}"))?;
        if !(self.simulate.eps > 0.0 && self.simulate.eps <= 1.0) {
            bail!("[simulate] eps must lie in (0, 1], got {}", self.simulate.eps);
        }
        if !(self.decompose.eps > 0.0 && self.decompose.eps < 1.0) {
            bail!("[decompose] eps must lie in (0, 1), got {}", self.decompose.eps);
        }
        if self.decompose.realizations == 0 {
            bail!("[decompose] realizations must be >= 1");
        }
        if self.estimate_q.replications == 0 || self.eta0.replications == 0 {
            bail!("replications must be >= 1 in [estimate_q] and [eta0]");
        }
        if self.estimate_q.v_grid.len() < 2
            || !self.estimate_q.v_grid.windows(2).all(|w| w[0] < w[1])
        {
            bail!("[estimate_q] v_grid needs at least 2 strictly increasing points");
        }
        if self.eta0.time_grid.is_empty()
            || self.eta0.time_grid[0] <= 0.0
            || !self.eta0.time_grid.windows(2).all(|w| w[0] < w[1])
        {
            bail!("[eta0] time_grid must be positive and strictly increasing");
        }
        if self.bihari.p_grid.is_empty() || self.bihari.p_grid.iter().any(|&p| p < 2.0) {
            bail!("[bihari] p_grid entries must satisfy p >= 2");
        }
        if self.bihari.eps_t_grid.is_empty() || self.bihari.eps_t_grid.iter().any(|&s| s <= 0.0) {
            bail!("[bihari] eps_t_grid entries must be positive");
        }
        Ok(())
    }
}

/// One parsed `key = value` occurrence.
struct Entry {
    line: usize,
    value: String,
}

/// Keys of one section, consumed as they are read; leftovers are unknown.
struct SectionReader {
    name: &'static str,
    entries: BTreeMap<String, Entry>,
}

impl SectionReader {
    fn take_raw(&mut self, key: &str) -> Option<Entry> {
        self.entries.remove(key)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, entry: &Entry, kind: &str) -> Result<T> {
        entry.value.parse().map_err(|_| {
            anyhow::anyhow!(
                "line {}: [{}] {key}: expected {kind}, got {:?}",
                entry.line,
                self.name,
                entry.value
            )
        })
    }

    fn f64_or(&mut self, key: &str, default: f64, log: &mut Vec<String>) -> Result<f64> {
        match self.take_raw(key) {
            Some(e) => self.parse(key, &e, "a number"),
            None => {
                log.push(format!("{}.{key} = {default} (default)", self.name));
                Ok(default)
            }
        }
    }

    fn opt_f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.take_raw(key).map(|e| self.parse(key, &e, "a number")).transpose()
    }

    fn usize_or(&mut self, key: &str, default: usize, log: &mut Vec<String>) -> Result<usize> {
        match self.take_raw(key) {
            Some(e) => self.parse(key, &e, "a nonnegative integer"),
            None => {
                log.push(format!("{}.{key} = {default} (default)", self.name));
                Ok(default)
            }
        }
    }

    fn u32_or(&mut self, key: &str, default: u32, log: &mut Vec<String>) -> Result<u32> {
        match self.take_raw(key) {
            Some(e) => self.parse(key, &e, "a nonnegative integer"),
            None => {
                log.push(format!("{}.{key} = {default} (default)", self.name));
                Ok(default)
            }
        }
    }

    fn u64_or(&mut self, key: &str, default: u64, log: &mut Vec<String>) -> Result<u64> {
        match self.take_raw(key) {
            Some(e) => self.parse(key, &e, "a nonnegative integer"),
            None => {
                log.push(format!("{}.{key} = {default} (default)", self.name));
                Ok(default)
            }
        }
    }

    fn string_or(&mut self, key: &str, default: &str, log: &mut Vec<String>) -> Result<String> {
        match self.take_raw(key) {
            Some(e) => Ok(e.value),
            None => {
                log.push(format!("{}.{key} = {default} (default)", self.name));
                Ok(default.to_string())
            }
        }
    }

    fn parse_list(&self, key: &str, entry: &Entry) -> Result<Vec<f64>> {
        entry
            .value
            .split(',')
            .map(|item| {
                item.trim().parse::<f64>().map_err(|_| {
                    anyhow::anyhow!(
                        "line {}: [{}] {key}: expected comma-separated numbers, got {:?}",
                        entry.line,
                        self.name,
                        entry.value
                    )
                })
            })
            .collect()
    }

    fn list_or(&mut self, key: &str, default: &[f64], log: &mut Vec<String>) -> Result<Vec<f64>> {
        match self.take_raw(key) {
            Some(e) => self.parse_list(key, &e),
            None => {
                let mut text = String::new();
                for (i, v) in default.iter().enumerate() {
                    if i > 0 {
                        text.push(',');
                    }
                    let _ = write!(text, "{v}");
                }
                log.push(format!("{}.{key} = {text} (default)", self.name));
                Ok(default.to_vec())
            }
        }
    }

    fn opt_list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        self.take_raw(key).map(|e| self.parse_list(key, &e)).transpose()
    }

    fn finish(self) -> Result<()> {
        if let Some((key, entry)) = self.entries.into_iter().next() {
            bail!("line {}: unknown key {key:?} in [{}]", entry.line, self.name);
        }
        Ok(())
    }
}

const SECTION_NAMES: &[&str] =
    &["experiment", "numeric", "overrides", "estimate_q", "eta0", "decompose", "bihari", "simulate"];

/// Splits the text into per-section key maps, rejecting unknown sections,
/// duplicate sections, duplicate keys, and keys outside any section.
fn tokenize(text: &str) -> Result<BTreeMap<&'static str, SectionReader>> {
    let mut sections: BTreeMap<&'static str, SectionReader> = BTreeMap::new();
    let mut seen_lines: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut current: Option<&'static str> = None;
    for (index, raw_line) in text.lines().enumerate() {
        let line_no = index + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let Some(name) = inner.strip_suffix(']') else {
                bail!("line {line_no}: malformed section header {line:?}");
            };
            let Some(&known) = SECTION_NAMES.iter().find(|&&s| s == name) else {
                bail!("line {line_no}: unknown section [{name}]");
            };
            if let Some(first) = seen_lines.get(known) {
                bail!("line {line_no}: duplicate section [{name}] (first at line {first})");
            }
            seen_lines.insert(known, line_no);
            sections.insert(known, SectionReader { name: known, entries: BTreeMap::new() });
            current = Some(known);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {line_no}: expected `key = value`, got {line:?}");
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            bail!("line {line_no}: empty key");
        }
        let Some(section) = current else {
            bail!("line {line_no}: key {key:?} appears before any [section] header");
        };
        let reader = sections.get_mut(section).expect("current section was inserted");
        if let Some(prev) = reader.entries.get(key) {
            bail!("line {line_no}: duplicate key {key:?} in [{section}] (first at line {})", prev.line);
        }
        reader.entries.insert(key.to_string(), Entry { line: line_no, value: value.to_string() });
    }
    for &name in SECTION_NAMES {
        sections.entry(name).or_insert_with(|| SectionReader { name, entries: BTreeMap::new() });
    }
    Ok(sections)
}

/// Parses a configuration text. Returns the resolved configuration and the
/// list of applied defaults, one entry per missing key.
pub fn parse_config(text: &str) -> Result<(CliConfig, Vec<String>)> {
    let mut sections = tokenize(text)?;
    let mut log = Vec::new();

    let mut s = sections.remove("experiment").expect("tokenize fills every section");
    let p = s.f64_or("p", 2.0, &mut log)?;
    let experiment = ExperimentSection {
        system: s.string_or("system", "ou_lines", &mut log)?,
        p,
        t_horizon: s.f64_or("t_horizon", 1.0, &mut log)?,
        eps_grid: s.list_or("eps_grid", &[0.2, 0.1, 0.05, 0.025], &mut log)?,
        n_paths: s.usize_or("n_paths", 200, &mut log)?,
        lambda_target: s.f64_or("lambda_target", default_lambda_target(p), &mut log)?,
        c_constant: s.f64_or("c_constant", 1.0, &mut log)?,
        seed: s.u64_or("seed", 42, &mut log)?,
    };
    s.finish()?;

    let mut s = sections.remove("numeric").unwrap();
    let defaults = NumericParams::default();
    let numeric = NumericParams {
        grid_step: s.f64_or("grid_step", defaults.grid_step, &mut log)?,
        ode_steps: s.u32_or("ode_steps", defaults.ode_steps, &mut log)?,
        burn_in_frac: s.f64_or("burn_in_frac", defaults.burn_in_frac, &mut log)?,
    };
    s.finish()?;

    let mut s = sections.remove("overrides").unwrap();
    let overrides = OverridesSection {
        rate: s.opt_f64("rate")?,
        rate_tilde: s.opt_f64("rate_tilde")?,
        beta: s.opt_f64("beta")?,
        c0: s.opt_f64("c0")?,
        v_half_width: s.opt_f64("v_half_width")?,
        omega: s.opt_f64("omega")?,
        constant_k: s.opt_f64("constant_k")?,
        initial: s.opt_list("initial")?,
    };
    s.finish()?;

    let mut s = sections.remove("estimate_q").unwrap();
    let estimate_q = EstimateQSection {
        v_grid: s.list_or("v_grid", &[-1.0, -0.5, 0.0, 0.5, 1.0], &mut log)?,
        time_horizon: s.f64_or("time_horizon", 1000.0, &mut log)?,
        replications: s.usize_or("replications", 64, &mut log)?,
    };
    s.finish()?;

    let mut s = sections.remove("eta0").unwrap();
    let eta0 = Eta0Section {
        time_grid: s.list_or("time_grid", &[1.0, 4.0, 16.0, 64.0], &mut log)?,
        replications: s.usize_or("replications", 32, &mut log)?,
    };
    s.finish()?;

    let mut s = sections.remove("decompose").unwrap();
    let decompose = DecomposeSection {
        eps: s.f64_or("eps", 0.1, &mut log)?,
        realizations: s.usize_or("realizations", 100, &mut log)?,
    };
    s.finish()?;

    let mut s = sections.remove("bihari").unwrap();
    let bihari = BihariSection {
        p_grid: s.list_or("p_grid", &[2.0, 3.0, 4.0], &mut log)?,
        eps_t_grid: s.list_or("eps_t_grid", &[0.01, 0.05, 0.1], &mut log)?,
        c: s.f64_or("c", 1.0, &mut log)?,
        t_horizon: s.f64_or("t_horizon", 1.0, &mut log)?,
        grid_points: s.usize_or("grid_points", 200, &mut log)?,
    };
    s.finish()?;

    let mut s = sections.remove("simulate").unwrap();
    let simulate = SimulateSection { eps: s.f64_or("eps", 0.1, &mut log)? };
    s.finish()?;

    let config =
        CliConfig { experiment, numeric, overrides, estimate_q, eta0, decompose, bihari, simulate };
    config.validate()?;
    Ok((config, log))
}

/// Reads and parses a configuration file.
pub fn load_config(path: &Path) -> Result<(CliConfig, Vec<String>)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in config file {}", path.display()))
}
