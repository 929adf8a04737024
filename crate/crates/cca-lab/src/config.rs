//! Line-oriented experiment configuration: `[section]` headers and
//! `key = value` lines. Parsing validates everything up front and
//! reports every problem with its line number, not just the first.

use std::fmt;

use crate::alignment::{CcaHyperparams, TrainLoss, TrainOptions};
use crate::error::{Error, Result};
use crate::eval::SweepAxis;
use crate::guidance::{GuidanceKind, GuidanceSpec};
use crate::oracle::SpecFamily;
use crate::space::SequenceSpace;

/// One configuration problem, tied to the line that caused it. Line 0
/// marks problems that span the whole file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "config: {}", self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecConfig {
    pub family: SpecFamily,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_conditions: usize,
    pub concentration: f64,
    /// Explicit generator seed; derived from the master seed when absent.
    pub seed: Option<u64>,
}

impl Default for SpecConfig {
    fn default() -> Self {
        SpecConfig {
            family: SpecFamily::RandomDirichlet,
            vocab_size: 3,
            seq_len: 2,
            num_conditions: 3,
            concentration: 1.0,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out_dir: String,
    pub master_seed: u64,
    pub dataset_size: usize,
    pub record_every: usize,
    /// Worker threads for sweeps; 0 keeps the library default.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: "out".into(),
            master_seed: 0,
            dataset_size: 4096,
            record_every: 100,
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            learning_rate: 0.5,
            batch_size: 256,
            dropout_prob: 0.1,
        }
    }
}

/// How the negative-term weight is chosen for contrastive training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaMode {
    /// One global lambda for every negative.
    Global,
    /// Per-condition weights Z(c)^(1/s) with s = 1/beta, computed from
    /// the generated spec before training starts.
    Exact,
}

impl LambdaMode {
    pub fn name(&self) -> &'static str {
        match self {
            LambdaMode::Global => "global",
            LambdaMode::Exact => "exact",
        }
    }

    fn parse(text: &str) -> Option<Self> {
        match text {
            "global" => Some(LambdaMode::Global),
            "exact" => Some(LambdaMode::Exact),
            _ => None,
        }
    }
}

/// Which alignment objective the align stage runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignLossKind {
    Cca,
    Dpo,
    Unlearn,
    Mle,
}

impl AlignLossKind {
    pub fn name(&self) -> &'static str {
        match self {
            AlignLossKind::Cca => "cca",
            AlignLossKind::Dpo => "dpo",
            AlignLossKind::Unlearn => "unlearn",
            AlignLossKind::Mle => "mle",
        }
    }

    fn parse(text: &str) -> Option<Self> {
        match text {
            "cca" => Some(AlignLossKind::Cca),
            "dpo" => Some(AlignLossKind::Dpo),
            "unlearn" => Some(AlignLossKind::Unlearn),
            "mle" => Some(AlignLossKind::Mle),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignConfig {
    pub loss: AlignLossKind,
    pub beta: f64,
    pub lambda: f64,
    pub lambda_mode: LambdaMode,
    pub beta_d: f64,
    pub lambda_u: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_prob: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            loss: AlignLossKind::Cca,
            beta: 0.02,
            lambda: 300.0,
            lambda_mode: LambdaMode::Global,
            beta_d: 0.1,
            lambda_u: 0.05,
            steps: 2000,
            learning_rate: 1e-5,
            batch_size: 256,
            dropout_prob: 0.1,
        }
    }
}

impl AlignConfig {
    /// Training options for this stage. `lambda_per_condition` carries
    /// the exact-mode weights when the caller computed them.
    pub fn train_options(
        &self,
        record_every: usize,
        lambda_per_condition: Option<Vec<f64>>,
    ) -> TrainOptions {
        let loss = match self.loss {
            AlignLossKind::Cca => TrainLoss::Cca {
                hp: CcaHyperparams {
                    beta: self.beta,
                    lambda: self.lambda,
                    lambda_per_condition,
                },
                dropout_prob: self.dropout_prob,
            },
            AlignLossKind::Dpo => TrainLoss::Dpo { beta_d: self.beta_d },
            AlignLossKind::Unlearn => TrainLoss::Unlearn {
                lambda_u: self.lambda_u,
            },
            AlignLossKind::Mle => TrainLoss::MaximumLikelihood {
                dropout_prob: self.dropout_prob,
            },
        };
        TrainOptions {
            loss,
            steps: self.steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            record_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub kind: GuidanceKind,
    pub scale: f64,
    pub terminal_scale: Option<f64>,
    /// Scale of the sharpened target that evaluation measures against.
    /// Defaults to the guidance scale (terminal scale for the scheduled
    /// variant; 0 when guidance is off).
    pub eval_scale: Option<f64>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            kind: GuidanceKind::None,
            scale: 0.0,
            terminal_scale: None,
            eval_scale: None,
        }
    }
}

impl GuidanceConfig {
    pub fn guidance_spec(&self) -> GuidanceSpec {
        GuidanceSpec {
            kind: self.kind,
            scale: self.scale,
            terminal_scale: self.terminal_scale,
        }
    }

    pub fn resolved_eval_scale(&self) -> f64 {
        if let Some(s) = self.eval_scale {
            return s;
        }
        match self.kind {
            GuidanceKind::None => 0.0,
            GuidanceKind::Cfg | GuidanceKind::Classifier => self.scale,
            GuidanceKind::CfgV2 => self.terminal_scale.unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepConfig {
    pub axis: Option<SweepAxis>,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub spec: SpecConfig,
    pub run: RunConfig,
    pub pretrain: PretrainConfig,
    pub align: AlignConfig,
    pub guidance: GuidanceConfig,
    pub sweep: SweepConfig,
}

const SECTIONS: [&str; 6] = ["spec", "run", "pretrain", "align", "guidance", "sweep"];

struct RawEntry {
    section: String,
    key: String,
    value: String,
    line: usize,
    consumed: bool,
}

struct Parser {
    entries: Vec<RawEntry>,
    issues: Vec<ConfigIssue>,
}

impl Parser {
    fn scan(text: &str) -> Self {
        let mut entries: Vec<RawEntry> = Vec::new();
        let mut issues = Vec::new();
        let mut section: Option<(String, bool)> = None;
        for (number, raw) in text.lines().enumerate() {
            let line = number + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if trimmed.starts_with('[') {
                if !trimmed.ends_with(']') {
                    issues.push(ConfigIssue {
                        line,
                        message: format!("malformed section header '{trimmed}'"),
                    });
                    section = None;
                    continue;
                }
                let name = trimmed[1..trimmed.len() - 1].trim().to_string();
                if SECTIONS.contains(&name.as_str()) {
                    section = Some((name, true));
                } else {
                    issues.push(ConfigIssue {
                        line,
                        message: format!(
                            "unknown section '[{name}]' (expected one of: {})",
                            SECTIONS.join(", ")
                        ),
                    });
                    // Remember the bad section so its keys are skipped
                    // without a cascade of unknown-key errors.
                    section = Some((name, false));
                }
                continue;
            }
            let Some((key_part, value_part)) = trimmed.split_once('=') else {
                issues.push(ConfigIssue {
                    line,
                    message: format!("expected 'key = value', got '{trimmed}'"),
                });
                continue;
            };
            let key = key_part.trim().to_string();
            let value = value_part.trim().to_string();
            if key.is_empty() {
                issues.push(ConfigIssue {
                    line,
                    message: "empty key before '='".into(),
                });
                continue;
            }
            match &section {
                None => {
                    issues.push(ConfigIssue {
                        line,
                        message: format!("key '{key}' appears before any [section] header"),
                    });
                }
                Some((_, false)) => {}
                Some((name, true)) => {
                    if let Some(existing) = entries
                        .iter()
                        .find(|e| e.section == *name && e.key == key)
                    {
                        issues.push(ConfigIssue {
                            line,
                            message: format!(
                                "duplicate key '{key}' in [{name}] (first at line {})",
                                existing.line
                            ),
                        });
                        continue;
                    }
                    entries.push(RawEntry {
                        section: name.clone(),
                        key,
                        value,
                        line,
                        consumed: false,
                    });
                }
            }
        }
        Parser { entries, issues }
    }

    fn issue(&mut self, line: usize, message: impl Into<String>) {
        self.issues.push(ConfigIssue {
            line,
            message: message.into(),
        });
    }

    fn take(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        for entry in &mut self.entries {
            if entry.section == section && entry.key == key {
                entry.consumed = true;
                return Some((entry.value.clone(), entry.line));
            }
        }
        None
    }

    fn parse_with<T>(
        &mut self,
        section: &str,
        key: &str,
        expected: &str,
        convert: impl Fn(&str) -> Option<T>,
    ) -> Option<(T, usize)> {
        let (value, line) = self.take(section, key)?;
        match convert(&value) {
            Some(parsed) => Some((parsed, line)),
            None => {
                self.issue(
                    line,
                    format!("key '{key}' expects {expected}, got '{value}'"),
                );
                None
            }
        }
    }

    fn usize_field(&mut self, section: &str, key: &str, slot: &mut usize) -> Option<usize> {
        let parsed = self.parse_with(section, key, "a non-negative integer", |v| {
            v.parse::<usize>().ok()
        })?;
        *slot = parsed.0;
        Some(parsed.1)
    }

    fn u64_field(&mut self, section: &str, key: &str, slot: &mut u64) -> Option<usize> {
        let parsed = self.parse_with(section, key, "a non-negative integer", |v| {
            v.parse::<u64>().ok()
        })?;
        *slot = parsed.0;
        Some(parsed.1)
    }

    fn f64_field(&mut self, section: &str, key: &str, slot: &mut f64) -> Option<usize> {
        let parsed = self.parse_with(section, key, "a number", |v| {
            v.parse::<f64>().ok().filter(|x| x.is_finite())
        })?;
        *slot = parsed.0;
        Some(parsed.1)
    }

    fn finish(mut self, config: ExperimentConfig) -> std::result::Result<ExperimentConfig, Vec<ConfigIssue>> {
        for entry in &self.entries {
            if !entry.consumed {
                self.issues.push(ConfigIssue {
                    line: entry.line,
                    message: format!("unknown key '{}' in [{}]", entry.key, entry.section),
                });
            }
        }
        if self.issues.is_empty() {
            Ok(config)
        } else {
            self.issues.sort_by_key(|issue| issue.line);
            Err(self.issues)
        }
    }
}

/// Parse a configuration, applying defaults for absent keys and
/// collecting every problem instead of stopping at the first.
pub fn parse_config(text: &str) -> std::result::Result<ExperimentConfig, Vec<ConfigIssue>> {
    let mut parser = Parser::scan(text);
    let mut config = ExperimentConfig::default();

    // [spec]
    if let Some((value, line)) = parser.take("spec", "family") {
        match SpecFamily::parse(&value) {
            Ok(family) => config.spec.family = family,
            Err(_) => parser.issue(
                line,
                format!(
                    "key 'family' expects one of random-dirichlet, needle, independent; got '{value}'"
                ),
            ),
        }
    }
    if let Some(line) = parser.usize_field("spec", "vocab_size", &mut config.spec.vocab_size) {
        if config.spec.vocab_size < 2 {
            parser.issue(line, "vocab_size must be at least 2");
        }
    }
    if let Some(line) = parser.usize_field("spec", "seq_len", &mut config.spec.seq_len) {
        if config.spec.seq_len < 1 {
            parser.issue(line, "seq_len must be at least 1");
        }
    }
    if let Some(line) =
        parser.usize_field("spec", "num_conditions", &mut config.spec.num_conditions)
    {
        if config.spec.num_conditions < 1 {
            parser.issue(line, "num_conditions must be at least 1");
        }
    }
    if let Some(line) =
        parser.f64_field("spec", "concentration", &mut config.spec.concentration)
    {
        if config.spec.concentration <= 0.0 {
            parser.issue(line, "concentration must be positive");
        }
    }
    let mut spec_seed = 0u64;
    if parser.u64_field("spec", "seed", &mut spec_seed).is_some() {
        config.spec.seed = Some(spec_seed);
    }
    let dims_plausible = config.spec.vocab_size >= 2
        && config.spec.seq_len >= 1
        && config.spec.num_conditions >= 1;
    if dims_plausible {
        if let Err(err) = SequenceSpace::new(
            config.spec.vocab_size,
            config.spec.seq_len,
            config.spec.num_conditions,
        ) {
            parser.issue(0, format!("spec dimensions rejected: {err}"));
        }
    }

    // [run]
    if let Some((value, _)) = parser.take("run", "out_dir") {
        config.run.out_dir = value;
    }
    parser.u64_field("run", "master_seed", &mut config.run.master_seed);
    if let Some(line) = parser.usize_field("run", "dataset_size", &mut config.run.dataset_size) {
        if config.run.dataset_size < 2 {
            parser.issue(line, "dataset_size must be at least 2");
        }
    }
    if let Some(line) = parser.usize_field("run", "record_every", &mut config.run.record_every) {
        if config.run.record_every == 0 {
            parser.issue(line, "record_every must be at least 1");
        }
    }
    parser.usize_field("run", "jobs", &mut config.run.jobs);

    // [pretrain]
    parser.usize_field("pretrain", "steps", &mut config.pretrain.steps);
    if let Some(line) =
        parser.f64_field("pretrain", "learning_rate", &mut config.pretrain.learning_rate)
    {
        if config.pretrain.learning_rate <= 0.0 {
            parser.issue(line, "learning_rate must be positive");
        }
    }
    if let Some(line) =
        parser.usize_field("pretrain", "batch_size", &mut config.pretrain.batch_size)
    {
        if config.pretrain.batch_size == 0 {
            parser.issue(line, "batch_size must be at least 1");
        }
    }
    if let Some(line) =
        parser.f64_field("pretrain", "dropout_prob", &mut config.pretrain.dropout_prob)
    {
        if !(0.0..=1.0).contains(&config.pretrain.dropout_prob) {
            parser.issue(line, "dropout_prob must be in [0, 1]");
        }
    }

    // [align]
    if let Some((value, line)) = parser.take("align", "loss") {
        match AlignLossKind::parse(&value) {
            Some(kind) => config.align.loss = kind,
            None => parser.issue(
                line,
                format!("key 'loss' expects one of cca, dpo, unlearn, mle; got '{value}'"),
            ),
        }
    }
    if let Some(line) = parser.f64_field("align", "beta", &mut config.align.beta) {
        if config.align.beta <= 0.0 {
            parser.issue(line, "beta must be positive");
        }
    }
    if let Some(line) = parser.f64_field("align", "lambda", &mut config.align.lambda) {
        if config.align.lambda < 0.0 {
            parser.issue(line, "lambda must be non-negative");
        }
    }
    if let Some((value, line)) = parser.take("align", "lambda_mode") {
        match LambdaMode::parse(&value) {
            Some(mode) => config.align.lambda_mode = mode,
            None => parser.issue(
                line,
                format!("key 'lambda_mode' expects global or exact, got '{value}'"),
            ),
        }
    }
    if let Some(line) = parser.f64_field("align", "beta_d", &mut config.align.beta_d) {
        if config.align.beta_d <= 0.0 {
            parser.issue(line, "beta_d must be positive");
        }
    }
    if let Some(line) = parser.f64_field("align", "lambda_u", &mut config.align.lambda_u) {
        if config.align.lambda_u < 0.0 {
            parser.issue(line, "lambda_u must be non-negative");
        }
    }
    parser.usize_field("align", "steps", &mut config.align.steps);
    if let Some(line) =
        parser.f64_field("align", "learning_rate", &mut config.align.learning_rate)
    {
        if config.align.learning_rate <= 0.0 {
            parser.issue(line, "learning_rate must be positive");
        }
    }
    if let Some(line) = parser.usize_field("align", "batch_size", &mut config.align.batch_size) {
        if config.align.batch_size == 0 {
            parser.issue(line, "batch_size must be at least 1");
        }
    }
    if let Some(line) =
        parser.f64_field("align", "dropout_prob", &mut config.align.dropout_prob)
    {
        if !(0.0..=1.0).contains(&config.align.dropout_prob) {
            parser.issue(line, "dropout_prob must be in [0, 1]");
        }
    }
    if config.align.loss != AlignLossKind::Mle && config.align.batch_size < 2 {
        parser.issue(
            0,
            format!(
                "align batch_size must be at least 2 for the {} loss (negative assignment permutes the batch)",
                config.align.loss.name()
            ),
        );
    }

    // [guidance]
    if let Some((value, line)) = parser.take("guidance", "kind") {
        match GuidanceKind::parse(&value) {
            Ok(kind) => config.guidance.kind = kind,
            Err(_) => parser.issue(
                line,
                format!("key 'kind' expects one of none, cfg, cfgv2, classifier; got '{value}'"),
            ),
        }
    }
    if let Some(line) = parser.f64_field("guidance", "scale", &mut config.guidance.scale) {
        if config.guidance.scale < 0.0 {
            parser.issue(line, "scale must be non-negative");
        }
    }
    let mut terminal = 0.0f64;
    if let Some(line) = parser.f64_field("guidance", "terminal_scale", &mut terminal) {
        if terminal < 0.0 {
            parser.issue(line, "terminal_scale must be non-negative");
        }
        config.guidance.terminal_scale = Some(terminal);
    }
    let mut eval_scale = 0.0f64;
    if let Some(line) = parser.f64_field("guidance", "eval_scale", &mut eval_scale) {
        if eval_scale < 0.0 {
            parser.issue(line, "eval_scale must be non-negative");
        }
        config.guidance.eval_scale = Some(eval_scale);
    }
    if let Err(err) = config.guidance.guidance_spec().validate() {
        parser.issue(0, format!("guidance settings rejected: {err}"));
    }

    // [sweep]
    if let Some((value, line)) = parser.take("sweep", "axis") {
        match SweepAxis::parse(&value) {
            Ok(axis) => config.sweep.axis = Some(axis),
            Err(_) => parser.issue(
                line,
                format!("key 'axis' expects one of cca_lambda, cca_beta, cfg_s; got '{value}'"),
            ),
        }
    }
    if let Some((value, line)) = parser.take("sweep", "grid") {
        let mut grid = Vec::new();
        let mut ok = true;
        for piece in value.split(',') {
            let piece = piece.trim();
            if piece.is_empty() {
                continue;
            }
            match piece.parse::<f64>() {
                Ok(v) if v.is_finite() && v >= 0.0 => grid.push(v),
                _ => {
                    parser.issue(
                        line,
                        format!("grid entry '{piece}' is not a finite non-negative number"),
                    );
                    ok = false;
                }
            }
        }
        if ok {
            config.sweep.grid = grid;
        }
    }
    match (&config.sweep.axis, config.sweep.grid.is_empty()) {
        (Some(_), true) => parser.issue(0, "sweep axis set but grid is empty"),
        (None, false) => parser.issue(0, "sweep grid set but axis is missing"),
        _ => {}
    }

    parser.finish(config)
}

/// Parse, folding all issues into one error for callers that do not
/// inspect them individually.
pub fn parse_config_or_error(text: &str) -> Result<ExperimentConfig> {
    parse_config(text).map_err(|issues| {
        let joined = issues
            .iter()
            .map(|issue| issue.to_string())
            .collect::<Vec<_>>()
            .join("\n");
        Error::Config(joined)
    })
}

/// Serialize a configuration with every key written explicitly, in
/// canonical order. `parse_config(serialize_config(c)) == c`.
pub fn serialize_config(config: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut push = |line: String| {
        out.push_str(&line);
        out.push('\n');
    };
    push("[spec]".into());
    push(format!("family = {}", config.spec.family.name()));
    push(format!("vocab_size = {}", config.spec.vocab_size));
    push(format!("seq_len = {}", config.spec.seq_len));
    push(format!("num_conditions = {}", config.spec.num_conditions));
    push(format!("concentration = {}", config.spec.concentration));
    if let Some(seed) = config.spec.seed {
        push(format!("seed = {seed}"));
    }
    push(String::new());
    push("[run]".into());
    push(format!("out_dir = {}", config.run.out_dir));
    push(format!("master_seed = {}", config.run.master_seed));
    push(format!("dataset_size = {}", config.run.dataset_size));
    push(format!("record_every = {}", config.run.record_every));
    push(format!("jobs = {}", config.run.jobs));
    push(String::new());
    push("[pretrain]".into());
    push(format!("steps = {}", config.pretrain.steps));
    push(format!("learning_rate = {}", config.pretrain.learning_rate));
    push(format!("batch_size = {}", config.pretrain.batch_size));
    push(format!("dropout_prob = {}", config.pretrain.dropout_prob));
    push(String::new());
    push("[align]".into());
    push(format!("loss = {}", config.align.loss.name()));
    push(format!("beta = {}", config.align.beta));
    push(format!("lambda = {}", config.align.lambda));
    push(format!("lambda_mode = {}", config.align.lambda_mode.name()));
    push(format!("beta_d = {}", config.align.beta_d));
    push(format!("lambda_u = {}", config.align.lambda_u));
    push(format!("steps = {}", config.align.steps));
    push(format!("learning_rate = {}", config.align.learning_rate));
    push(format!("batch_size = {}", config.align.batch_size));
    push(format!("dropout_prob = {}", config.align.dropout_prob));
    push(String::new());
    push("[guidance]".into());
    push(format!("kind = {}", config.guidance.kind.name()));
    push(format!("scale = {}", config.guidance.scale));
    if let Some(terminal) = config.guidance.terminal_scale {
        push(format!("terminal_scale = {terminal}"));
    }
    if let Some(eval_scale) = config.guidance.eval_scale {
        push(format!("eval_scale = {eval_scale}"));
    }
    push(String::new());
    push("[sweep]".into());
    if let Some(axis) = config.sweep.axis {
        push(format!("axis = {}", axis.name()));
    }
    if !config.sweep.grid.is_empty() {
        let grid = config
            .sweep
            .grid
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(", ");
        push(format!("grid = {grid}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_align_section_applies_table_defaults() {
        let config = parse_config("[align]\n").unwrap();
        assert_eq!(config.align.beta, 0.02);
        assert_eq!(config.align.batch_size, 256);
        assert_eq!(config.align.learning_rate, 1e-5);
        assert_eq!(config.align.lambda, 300.0);
    }

    #[test]
    fn empty_text_is_the_default_config() {
        let config = parse_config("").unwrap();
        assert_eq!(config, ExperimentConfig::default());
    }

    #[test]
    fn dropout_out_of_range_reports_its_line() {
        let text = "[pretrain]\nsteps = 10\ndropout_prob = 1.5\n";
        let issues = parse_config(text).unwrap_err();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].line, 3);
        assert!(issues[0].message.contains("dropout_prob"), "{}", issues[0]);
    }

    #[test]
    fn duplicate_key_names_both_lines() {
        let text = "[align]\nbeta = 0.02\nlambda = 1\nbeta = 0.05\n";
        let issues = parse_config(text).unwrap_err();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].line, 4);
        assert!(
            issues[0].message.contains("first at line 2"),
            "{}",
            issues[0]
        );
    }

    #[test]
    fn unknown_key_and_section_are_rejected() {
        let text = "[align]\nbogus = 1\n[nonsense]\nwhatever = 2\n";
        let issues = parse_config(text).unwrap_err();
        assert_eq!(issues.len(), 2);
        assert!(issues.iter().any(|i| i.message.contains("unknown key 'bogus'")));
        assert!(issues
            .iter()
            .any(|i| i.message.contains("unknown section '[nonsense]'")));
        // The key inside the unknown section is not separately reported.
        assert!(!issues.iter().any(|i| i.message.contains("whatever")));
    }

    #[test]
    fn all_errors_are_collected_not_just_the_first() {
        let text = "[spec]\nvocab_size = 1\n[align]\nbeta = -3\nsteps = abc\n";
        let issues = parse_config(text).unwrap_err();
        let lines: Vec<usize> = issues.iter().map(|i| i.line).collect();
        assert_eq!(lines, vec![2, 4, 5]);
    }

    #[test]
    fn type_mismatch_reports_expected_type() {
        let text = "[run]\nmaster_seed = not-a-number\n";
        let issues = parse_config(text).unwrap_err();
        assert_eq!(issues.len(), 1);
        assert!(issues[0].message.contains("integer"), "{}", issues[0]);
    }

    #[test]
    fn budget_violation_is_a_config_error() {
        let text = "[spec]\nvocab_size = 10\nseq_len = 12\n";
        let issues = parse_config(text).unwrap_err();
        assert!(issues
            .iter()
            .any(|i| i.message.contains("spec dimensions rejected")));
    }

    #[test]
    fn sweep_requires_axis_and_grid_together() {
        let issues = parse_config("[sweep]\naxis = cfg_s\n").unwrap_err();
        assert!(issues.iter().any(|i| i.message.contains("grid is empty")));
        let issues = parse_config("[sweep]\ngrid = 1, 2\n").unwrap_err();
        assert!(issues.iter().any(|i| i.message.contains("axis is missing")));
    }

    #[test]
    fn roundtrip_preserves_the_config() {
        let text = "\
[spec]
family = needle
vocab_size = 4
seq_len = 3
num_conditions = 4
concentration = 0.5
seed = 99

[run]
out_dir = runs/alpha
master_seed = 7
dataset_size = 512
record_every = 25
jobs = 2

[pretrain]
steps = 100
learning_rate = 0.25
batch_size = 64
dropout_prob = 0.1

[align]
loss = dpo
beta = 0.04
lambda = 10
lambda_mode = exact
beta_d = 1
lambda_u = 0.01
steps = 50
learning_rate = 1e-4
batch_size = 32
dropout_prob = 0

[guidance]
kind = cfg
scale = 1.5
eval_scale = 1.5

[sweep]
axis = cfg_s
grid = 0, 0.5, 1, 2
";
        let config = parse_config(text).unwrap();
        let serialized = serialize_config(&config);
        let reparsed = parse_config(&serialized).unwrap();
        assert_eq!(config, reparsed);
        // A second serialize pass is byte-identical.
        assert_eq!(serialized, serialize_config(&reparsed));
    }

    #[test]
    fn default_roundtrips_too() {
        let config = ExperimentConfig::default();
        let reparsed = parse_config(&serialize_config(&config)).unwrap();
        assert_eq!(config, reparsed);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# top comment\n\n[align]\n# inner\nbeta = 0.03\n";
        let config = parse_config(text).unwrap();
        assert_eq!(config.align.beta, 0.03);
    }

    #[test]
    fn key_before_section_is_an_error() {
        let issues = parse_config("beta = 1\n").unwrap_err();
        assert!(issues[0].message.contains("before any [section]"));
    }

    #[test]
    fn cfgv2_without_terminal_scale_is_rejected() {
        let issues = parse_config("[guidance]\nkind = cfgv2\n").unwrap_err();
        assert!(issues
            .iter()
            .any(|i| i.message.contains("guidance settings rejected")));
    }

    #[test]
    fn batch_of_one_rejected_for_contrastive_losses() {
        let issues = parse_config("[align]\nloss = cca\nbatch_size = 1\n").unwrap_err();
        assert!(issues.iter().any(|i| i.message.contains("at least 2")));
    }

    #[test]
    fn train_options_carry_the_loss_kind() {
        let config = parse_config("[align]\nloss = unlearn\nlambda_u = 0.02\n").unwrap();
        let options = config.align.train_options(10, None);
        assert_eq!(
            options.loss,
            TrainLoss::Unlearn { lambda_u: 0.02 }
        );
        assert_eq!(options.record_every, 10);
    }
}
