//! Run configuration: a flat `section.key = value` text format.
//!
//! ```text
//! # comment
//! model.patterns = 2
//! graph.mode = fused
//! train.lr_milestones = 50, 80
//! ```
//!
//! Every key is validated against the table in [`RunConfig::entries`]; unknown
//! keys are rejected. Relative paths resolve against the config file's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    Fused,
    SpatialOnly,
    TemporalOnly,
    Predefined,
}

impl FromStr for GraphMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fused" => Ok(GraphMode::Fused),
            "spatial_only" => Ok(GraphMode::SpatialOnly),
            "temporal_only" => Ok(GraphMode::TemporalOnly),
            "predefined" => Ok(GraphMode::Predefined),
            other => Err(format!(
                "unknown graph mode `{other}` (fused, spatial_only, temporal_only, predefined)"
            )),
        }
    }
}

impl fmt::Display for GraphMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphMode::Fused => "fused",
            GraphMode::SpatialOnly => "spatial_only",
            GraphMode::TemporalOnly => "temporal_only",
            GraphMode::Predefined => "predefined",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv,
    Synthetic,
}

impl FromStr for DataSource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(DataSource::Csv),
            "synthetic" => Ok(DataSource::Synthetic),
            other => Err(format!("unknown data source `{other}` (csv, synthetic)")),
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataSource::Csv => "csv",
            DataSource::Synthetic => "synthetic",
        })
    }
}

/// Network shape and regularisation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    /// Th
    pub history: usize,
    /// Tf
    pub horizon: usize,
    /// C; ingestion is flow-only so this is 1 outside of tests.
    pub channels: usize,
    /// G
    pub patterns: usize,
    /// M, independently parameterised RGC blocks per pattern.
    pub rgc_blocks: usize,
    /// d
    pub hidden: usize,
    /// K, propagation depth of each RGC block.
    pub depth: usize,
    pub gamma: f64,
    pub dropout: f64,
    /// Nd
    pub node_dim: usize,
    /// D
    pub time_dim: usize,
    pub gate_hidden: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            history: 12,
            horizon: 12,
            channels: 1,
            patterns: 2,
            rgc_blocks: 2,
            hidden: 32,
            depth: 3,
            gamma: 0.1,
            dropout: 0.1,
            node_dim: 12,
            time_dim: 12,
            gate_hidden: 32,
            head_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GraphGenConfig {
    pub alpha: f64,
    pub beta: f64,
    pub heads: usize,
    /// 0 selects `max(8, N/4)`.
    pub head_dim: usize,
    pub k_spatial: usize,
    pub k_temporal: usize,
    pub mode: GraphMode,
}

impl Default for GraphGenConfig {
    fn default() -> Self {
        Self {
            alpha: 3.0,
            beta: 3.0,
            heads: 4,
            head_dim: 0,
            k_spatial: 10,
            k_temporal: 10,
            mode: GraphMode::Fused,
        }
    }
}

impl GraphGenConfig {
    pub fn resolved_head_dim(&self, nodes: usize) -> usize {
        if self.head_dim > 0 {
            self.head_dim
        } else {
            (nodes / 4).max(8)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr_decay: f64,
    pub lr_milestones: Vec<usize>,
    pub warmup_epochs: usize,
    /// Optional linear learning-rate ramp over the warm-up epochs.
    pub lr_warmup_ramp: bool,
    pub curriculum_step: usize,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs; 0 disables early stopping.
    pub patience: usize,
    pub seed: u64,
    pub mask_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 0.004,
            weight_decay: 1e-5,
            eps: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            lr_decay: 0.5,
            lr_milestones: vec![50, 80],
            warmup_epochs: 20,
            lr_warmup_ramp: false,
            curriculum_step: 3,
            max_epochs: 100,
            patience: 20,
            seed: 0,
            mask_threshold: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub series: Option<PathBuf>,
    /// Defaults to the series path with a `.json` extension.
    pub meta: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub graph_directed: bool,
    pub split: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            series: None,
            meta: None,
            graph: None,
            graph_directed: false,
            split: vec![0.6, 0.2, 0.2],
        }
    }
}

/// Parameters of the synthetic series used for desk-scale runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticConfig {
    pub nodes: usize,
    pub days: usize,
    /// Truncates the generated series; 0 keeps `days · steps_per_day`.
    pub steps: usize,
    pub steps_per_day: usize,
    pub first_step_day_of_week: usize,
    pub coupling: f64,
    /// Gaussian noise std, as a fraction of the mean daily amplitude.
    pub noise: f64,
    /// Weekly sinusoid amplitude, as a fraction of the mean daily amplitude.
    pub weekly_amplitude: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            nodes: 8,
            days: 14,
            steps: 0,
            steps_per_day: 288,
            first_step_day_of_week: 0,
            coupling: 0.5,
            noise: 0.02,
            weekly_amplitude: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn total_steps(&self) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.days * self.steps_per_day
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckSettings {
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
    /// Windows in the batch the loss is evaluated on.
    pub windows: usize,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self { h: 1e-6, tol: 1e-5, floor: 1e-4, windows: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub model: ModelConfig,
    pub graph: GraphGenConfig,
    pub train: TrainConfig,
    pub gradcheck: GradCheckSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            out_dir: PathBuf::from("runs/run"),
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            model: ModelConfig::default(),
            graph: GraphGenConfig::default(),
            train: TrainConfig::default(),
            gradcheck: GradCheckSettings::default(),
        }
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| format!("`{s}`: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(usize, u64, bool, String, GraphMode, DataSource);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|e| format!("`{s}`: {e}"))?;
        if !v.is_finite() {
            return Err(format!("`{s}` is not finite"));
        }
        Ok(v)
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for Option<PathBuf> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }
    fn render(&self) -> String {
        self.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(ConfigValue::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! key_table {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every accepted key.
        pub const KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(value)
                            .map_err(|e| Error::config(format!("{key}: {e}")))?;
                    })*
                    other => return Err(Error::config(format!("{other}: unknown key"))),
                }
                Ok(())
            }

            /// Canonical `(key, value)` listing, in table order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.render())),*]
            }
        }
    };
}

key_table! {
    "run.name" => name;
    "run.out_dir" => out_dir;
    "data.source" => data.source;
    "data.series" => data.series;
    "data.meta" => data.meta;
    "data.graph" => data.graph;
    "data.graph_directed" => data.graph_directed;
    "data.split" => data.split;
    "synthetic.nodes" => synthetic.nodes;
    "synthetic.days" => synthetic.days;
    "synthetic.steps" => synthetic.steps;
    "synthetic.steps_per_day" => synthetic.steps_per_day;
    "synthetic.first_step_day_of_week" => synthetic.first_step_day_of_week;
    "synthetic.coupling" => synthetic.coupling;
    "synthetic.noise" => synthetic.noise;
    "synthetic.weekly_amplitude" => synthetic.weekly_amplitude;
    "synthetic.seed" => synthetic.seed;
    "model.history" => model.history;
    "model.horizon" => model.horizon;
    "model.patterns" => model.patterns;
    "model.rgc_blocks" => model.rgc_blocks;
    "model.hidden" => model.hidden;
    "model.depth" => model.depth;
    "model.gamma" => model.gamma;
    "model.dropout" => model.dropout;
    "model.node_dim" => model.node_dim;
    "model.time_dim" => model.time_dim;
    "model.gate_hidden" => model.gate_hidden;
    "model.head_hidden" => model.head_hidden;
    "graph.alpha" => graph.alpha;
    "graph.beta" => graph.beta;
    "graph.heads" => graph.heads;
    "graph.head_dim" => graph.head_dim;
    "graph.k_spatial" => graph.k_spatial;
    "graph.k_temporal" => graph.k_temporal;
    "graph.mode" => graph.mode;
    "train.batch_size" => train.batch_size;
    "train.lr" => train.learning_rate;
    "train.weight_decay" => train.weight_decay;
    "train.eps" => train.eps;
    "train.beta1" => train.beta1;
    "train.beta2" => train.beta2;
    "train.lr_decay" => train.lr_decay;
    "train.lr_milestones" => train.lr_milestones;
    "train.warmup_epochs" => train.warmup_epochs;
    "train.lr_warmup_ramp" => train.lr_warmup_ramp;
    "train.curriculum_step" => train.curriculum_step;
    "train.max_epochs" => train.max_epochs;
    "train.patience" => train.patience;
    "train.seed" => train.seed;
    "train.mask_threshold" => train.mask_threshold;
    "gradcheck.h" => gradcheck.h;
    "gradcheck.tol" => gradcheck.tol;
    "gradcheck.floor" => gradcheck.floor;
    "gradcheck.windows" => gradcheck.windows;
}

impl RunConfig {
    /// Parses config text; `base` resolves relative paths.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key, value)?;
        }
        if let Some(base) = base {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, Some(base))
    }

    /// Applies `key=value` overrides in order, then re-validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{o}`: expected key=value")))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        for p in [&mut self.data.series, &mut self.data.meta, &mut self.data.graph]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    /// Renders the config back to its text form.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn meta_path(&self) -> Option<PathBuf> {
        self.data
            .meta
            .clone()
            .or_else(|| self.data.series.as_ref().map(|s| s.with_extension("json")))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: &str| Err(Error::config(format!("{key}: {msg}")));
        let m = &self.model;
        for (key, v) in [
            ("model.history", m.history),
            ("model.horizon", m.horizon),
            ("model.patterns", m.patterns),
            ("model.rgc_blocks", m.rgc_blocks),
            ("model.hidden", m.hidden),
            ("model.depth", m.depth),
            ("model.node_dim", m.node_dim),
            ("model.time_dim", m.time_dim),
            ("model.gate_hidden", m.gate_hidden),
            ("model.head_hidden", m.head_hidden),
            ("graph.heads", self.graph.heads),
            ("graph.k_spatial", self.graph.k_spatial),
            ("graph.k_temporal", self.graph.k_temporal),
            ("train.batch_size", self.train.batch_size),
            ("train.curriculum_step", self.train.curriculum_step),
            ("train.max_epochs", self.train.max_epochs),
            ("gradcheck.windows", self.gradcheck.windows),
        ] {
            if v == 0 {
                return fail(key, "must be positive");
            }
        }
        if m.channels == 0 {
            return fail("model.channels", "must be positive");
        }
        if !(0.0..=1.0).contains(&m.gamma) {
            return fail("model.gamma", "must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return fail("model.dropout", "must lie in [0, 1)");
        }
        let t = &self.train;
        if t.learning_rate < 0.0 {
            return fail("train.lr", "must be non-negative");
        }
        if t.weight_decay < 0.0 {
            return fail("train.weight_decay", "must be non-negative");
        }
        if t.eps <= 0.0 {
            return fail("train.eps", "must be positive");
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return fail("train.beta1", "betas must lie in [0, 1)");
        }
        if !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) {
            return fail("train.lr_decay", "must lie in (0, 1]");
        }
        if t.lr_milestones.windows(2).any(|w| w[0] > w[1]) {
            return fail("train.lr_milestones", "must be sorted ascending");
        }
        if t.mask_threshold < 0.0 {
            return fail("train.mask_threshold", "must be non-negative");
        }
        let d = &self.data;
        if d.split.len() != 3 || d.split.iter().any(|&r| r < 0.0) {
            return fail("data.split", "needs three non-negative ratios");
        }
        if (d.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail("data.split", "ratios must sum to 1");
        }
        if d.source == DataSource::Csv && d.series.is_none() {
            return fail("data.series", "required when data.source = csv");
        }
        if self.graph.mode == GraphMode::Predefined && d.graph.is_none() {
            return fail("data.graph", "graph.mode = predefined needs a graph file");
        }
        let s = &self.synthetic;
        if s.nodes < 2 {
            return fail("synthetic.nodes", "needs at least 2 nodes for coupling");
        }
        if s.days < 2 && s.steps == 0 {
            return fail("synthetic.days", "needs at least 2 days");
        }
        if s.steps_per_day == 0 {
            return fail("synthetic.steps_per_day", "must be positive");
        }
        if s.first_step_day_of_week > 6 {
            return fail("synthetic.first_step_day_of_week", "must lie in 0..=6");
        }
        if !(0.0..=1.0).contains(&s.coupling) {
            return fail("synthetic.coupling", "must lie in [0, 1]");
        }
        if s.noise < 0.0 || s.weekly_amplitude < 0.0 {
            return fail("synthetic.noise", "amplitudes must be non-negative");
        }
        let g = &self.gradcheck;
        if g.h <= 0.0 || g.tol <= 0.0 || g.floor < 0.0 {
            return fail("gradcheck.h", "h and tol must be positive, floor non-negative");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&cfg.to_text(), None).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.entries().len(), KEYS.len());
    }

    #[test]
    fn unknown_key_is_rejected_with_its_path() {
        let err = RunConfig::parse("graph.alpah = 3", None).unwrap_err();
        assert!(err.to_string().contains("graph.alpah"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = RunConfig::parse("model.gamma = 1.5", None).unwrap_err();
        assert!(err.to_string().contains("model.gamma"));
        let err = RunConfig::parse("train.batch_size = many", None).unwrap_err();
        assert!(err.to_string().contains("train.batch_size"));
        let err = RunConfig::parse("data.split = 0.5, 0.2, 0.2", None).unwrap_err();
        assert!(err.to_string().contains("data.split"));
    }

    #[test]
    fn predefined_mode_needs_graph_file() {
        let err = RunConfig::parse("graph.mode = predefined", None).unwrap_err();
        assert!(err.to_string().contains("data.graph"));
        RunConfig::parse("graph.mode = predefined\ndata.graph = g.csv", None).unwrap();
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["train.lr=0.01", "train.lr = 0.02", "graph.mode=spatial_only"])
            .unwrap();
        assert_eq!(cfg.train.learning_rate, 0.02);
        assert_eq!(cfg.graph.mode, GraphMode::SpatialOnly);
        assert!(cfg.apply_overrides(&["nonsense"]).is_err());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let cfg = RunConfig::parse(
            "data.source = csv\ndata.series = d/flow.csv\nrun.out_dir = out",
            Some(Path::new("/cfg")),
        )
        .unwrap();
        assert_eq!(cfg.data.series.as_deref(), Some(Path::new("/cfg/d/flow.csv")));
        assert_eq!(cfg.meta_path().unwrap(), PathBuf::from("/cfg/d/flow.json"));
        assert_eq!(cfg.out_dir, PathBuf::from("/cfg/out"));
    }

    #[test]
    fn head_dim_defaults_to_quarter_nodes_with_floor() {
        let g = GraphGenConfig::default();
        assert_eq!(g.resolved_head_dim(170), 42);
        assert_eq!(g.resolved_head_dim(8), 8);
    }
}
