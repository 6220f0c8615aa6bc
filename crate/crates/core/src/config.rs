//! Run configuration: every tunable under a dotted key, resolved in layers
//! (defaults, preset, config file, flags, `key=value` overrides).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use toml::{Table, Value};

use crate::config_value::{
    as_bool, as_f64, as_list, as_parsed, as_str, as_u32, as_u64, as_usize, list, string, uint,
};
use crate::data::{BatchSpec, Protocol, SynthSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{LrSchedule, TrainOptions, TripletConfig};

/// Name of the resolved configuration written into every output directory.
pub const ECHO_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Synthetic data, small channel plan; trains on a CPU in minutes.
    Desk,
    CasiaB,
    OuMvlp,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::CasiaB => "casia-b",
            Preset::OuMvlp => "ou-mvlp",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "casia-b" => Ok(Preset::CasiaB),
            "ou-mvlp" => Ok(Preset::OuMvlp),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected desk, casia-b or ou-mvlp)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Casia,
    Oumvlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub root: PathBuf,
    pub layout: Layout,
    /// `casia_b` or `synthetic` for the CASIA layout; ignored for OU-MVLP.
    pub protocol: String,
    pub train_subjects: u32,
    pub gallery_runs: u32,
}

impl DataConfig {
    pub fn protocol(&self) -> Result<Protocol> {
        match (self.layout, self.protocol.as_str()) {
            (Layout::Oumvlp, _) => Ok(Protocol::OuMvlp {
                train_subjects: self.train_subjects,
            }),
            (Layout::Casia, "casia_b") => Ok(Protocol::CasiaB),
            (Layout::Casia, "synthetic") => Ok(Protocol::Synthetic {
                train_subjects: self.train_subjects,
                gallery_runs: self.gallery_runs,
            }),
            (_, other) => Err(Error::Config(format!(
                "unknown data.protocol `{other}` (expected casia_b or synthetic)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch: BatchSpec,
    pub triplet: TripletConfig,
    /// `casia_b`, `ou_mvlp` or `custom` (uses `lr`, `milestones`, `gamma`).
    pub schedule: String,
    pub lr: f64,
    pub milestones: Vec<u64>,
    pub gamma: f64,
    pub checkpoint_every: u64,
    /// Seconds; 0 disables the limit.
    pub time_limit: f64,
    pub tape_budget_mb: usize,
    /// Evaluate on the held-out split every this many steps (0: never).
    pub eval_every: u64,
    /// Stop once the evaluated mean rank-1 reaches this percentage (0: never).
    pub target_rank1: f64,
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<LrSchedule> {
        match self.schedule.as_str() {
            "casia_b" => Ok(LrSchedule::CasiaB),
            "ou_mvlp" => Ok(LrSchedule::OuMvlp),
            "custom" => Ok(LrSchedule::Custom {
                base: self.lr,
                milestones: self.milestones.clone(),
                gamma: self.gamma,
            }),
            other => Err(Error::Config(format!(
                "unknown train.schedule `{other}` (expected casia_b, ou_mvlp or custom)"
            ))),
        }
    }

    pub fn options(&self, seed: u64) -> Result<TrainOptions> {
        Ok(TrainOptions {
            iterations: self.iterations,
            batch: self.batch,
            triplet: self.triplet,
            schedule: self.schedule()?,
            seed,
            checkpoint_every: self.checkpoint_every,
            time_limit: (self.time_limit > 0.0).then(|| Duration::from_secs_f64(self.time_limit)),
            tape_budget: self.tape_budget_mb << 20,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub exclude_identical_view: bool,
    /// Use the gallery split as the probe set too (a sanity run).
    pub gallery_as_probe: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// One operation name, or `all`.
    pub op: String,
    pub op_tolerance: f64,
    pub end_to_end_tolerance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateConfig {
    /// Any of `bie`, `mfa`, `window`.
    pub tables: Vec<String>,
    pub windows: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub synth: SynthSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut model = ModelConfig::default();
        let mut cfg = RunConfig {
            preset,
            seed: 0,
            out: PathBuf::from("runs/desk"),
            model: model.clone(),
            synth: SynthSpec::default(),
            data: DataConfig {
                root: PathBuf::from("data/synth"),
                layout: Layout::Casia,
                protocol: "synthetic".into(),
                train_subjects: 10,
                gallery_runs: 4,
            },
            train: TrainConfig {
                iterations: 5_000,
                batch: BatchSpec::default(),
                triplet: TripletConfig::default(),
                schedule: "custom".into(),
                lr: 1e-3,
                milestones: Vec::new(),
                gamma: 0.1,
                checkpoint_every: 500,
                time_limit: 0.0,
                tape_budget_mb: 1536,
                eval_every: 250,
                target_rank1: 0.0,
            },
            eval: EvalConfig {
                exclude_identical_view: true,
                gallery_as_probe: false,
            },
            gradcheck: GradcheckConfig {
                op: "all".into(),
                op_tolerance: 1e-6,
                end_to_end_tolerance: 1e-4,
            },
            ablate: AblateConfig {
                tables: vec!["bie".into(), "mfa".into(), "window".into()],
                windows: vec![3, 5, 7, 9, 11],
            },
        };
        match preset {
            Preset::Desk => {
                model.channels = [8, 16, 32];
                cfg.model = model;
            }
            Preset::CasiaB => {
                cfg.out = PathBuf::from("runs/casia-b");
                cfg.data.root = PathBuf::from("data/casia-b");
                cfg.data.protocol = "casia_b".into();
                cfg.data.train_subjects = 74;
                cfg.train.iterations = 150_000;
                cfg.train.batch.p = 8;
                cfg.train.batch.k = 6;
                cfg.train.schedule = "casia_b".into();
                cfg.train.checkpoint_every = 10_000;
                cfg.train.eval_every = 0;
            }
            Preset::OuMvlp => {
                model.channels = [64, 128, 256];
                cfg.model = model;
                cfg.out = PathBuf::from("runs/ou-mvlp");
                cfg.data.root = PathBuf::from("data/ou-mvlp");
                cfg.data.layout = Layout::Oumvlp;
                cfg.data.train_subjects = 5153;
                cfg.train.iterations = 300_000;
                cfg.train.batch.p = 6;
                cfg.train.batch.k = 4;
                cfg.train.schedule = "ou_mvlp".into();
                cfg.train.checkpoint_every = 10_000;
                cfg.train.eval_every = 0;
            }
        }
        cfg
    }

    /// Every accepted key, model keys included.
    pub fn keys() -> Vec<&'static str> {
        let mut k: Vec<&'static str> = RunConfig::preset(Preset::Desk)
            .entries()
            .into_iter()
            .map(|(k, _)| k)
            .collect();
        k.sort_unstable();
        k
    }

    /// Sets one dotted key. Unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        if self.model.set(key, v)? {
            return Ok(());
        }
        let (s, t, d, g) = (
            &mut self.synth,
            &mut self.train,
            &mut self.data,
            &mut self.gradcheck,
        );
        match key {
            "preset" => self.preset = as_parsed(key, v)?,
            "seed" => self.seed = as_u64(key, v)?,
            "out" => self.out = PathBuf::from(as_str(key, v)?),
            "synth.subjects" => s.subjects = as_u32(key, v)?,
            "synth.views" => s.views = as_list(key, v, as_u32)?,
            "synth.sequences" => s.sequences = as_u32(key, v)?,
            "synth.frames" => s.frames = as_usize(key, v)?,
            "synth.height" => s.height = as_u32(key, v)?,
            "synth.width" => s.width = as_u32(key, v)?,
            "synth.noise" => s.noise = as_f64(key, v)?,
            "synth.twins" => s.twins = as_bool(key, v)?,
            "synth.twin_period" => s.twin_period = as_u32(key, v)?,
            "synth.twin_stride" => s.twin_stride = as_u32(key, v)?,
            "data.root" => d.root = PathBuf::from(as_str(key, v)?),
            "data.layout" => {
                d.layout = match as_str(key, v)? {
                    "casia" => Layout::Casia,
                    "oumvlp" => Layout::Oumvlp,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown data.layout `{other}` (expected casia or oumvlp)"
                        )))
                    }
                }
            }
            "data.protocol" => d.protocol = as_str(key, v)?.to_string(),
            "data.train_subjects" => d.train_subjects = as_u32(key, v)?,
            "data.gallery_runs" => d.gallery_runs = as_u32(key, v)?,
            "train.iterations" => t.iterations = as_u64(key, v)?,
            "train.p" => t.batch.p = as_usize(key, v)?,
            "train.k" => t.batch.k = as_usize(key, v)?,
            "train.segment_len" => t.batch.segment_len = as_usize(key, v)?,
            "train.margin" => t.triplet.margin = as_f64(key, v)?,
            "train.normalization" => t.triplet.normalization = as_parsed(key, v)?,
            "train.sign" => t.triplet.sign = as_parsed(key, v)?,
            "train.schedule" => t.schedule = as_str(key, v)?.to_string(),
            "train.lr" => t.lr = as_f64(key, v)?,
            "train.milestones" => t.milestones = as_list(key, v, as_u64)?,
            "train.gamma" => t.gamma = as_f64(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = as_u64(key, v)?,
            "train.time_limit" => t.time_limit = as_f64(key, v)?,
            "train.tape_budget_mb" => t.tape_budget_mb = as_usize(key, v)?,
            "train.eval_every" => t.eval_every = as_u64(key, v)?,
            "train.target_rank1" => t.target_rank1 = as_f64(key, v)?,
            "eval.exclude_identical_view" => self.eval.exclude_identical_view = as_bool(key, v)?,
            "eval.gallery_as_probe" => self.eval.gallery_as_probe = as_bool(key, v)?,
            "gradcheck.op" => g.op = as_str(key, v)?.to_string(),
            "gradcheck.op_tolerance" => g.op_tolerance = as_f64(key, v)?,
            "gradcheck.end_to_end_tolerance" => g.end_to_end_tolerance = as_f64(key, v)?,
            "ablate.tables" => {
                self.ablate.tables = as_list(key, v, |k, x| as_str(k, x).map(str::to_string))?
            }
            "ablate.windows" => self.ablate.windows = as_list(key, v, as_usize)?,
            _ => {
                return Err(Error::Config(format!("unknown configuration key `{key}`")));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, Value)> {
        let (s, t, d, g) = (&self.synth, &self.train, &self.data, &self.gradcheck);
        let u = |x: usize| uint(x as u64);
        let path = |p: &Path| string(p.display());
        let mut e = vec![
            ("preset", string(self.preset)),
            ("seed", uint(self.seed)),
            ("out", path(&self.out)),
        ];
        e.extend(self.model.entries());
        e.extend([
            ("synth.subjects", uint(s.subjects.into())),
            ("synth.views", list(&s.views, |v| uint(v.into()))),
            ("synth.sequences", uint(s.sequences.into())),
            ("synth.frames", u(s.frames)),
            ("synth.height", uint(s.height.into())),
            ("synth.width", uint(s.width.into())),
            ("synth.noise", Value::Float(s.noise)),
            ("synth.twins", Value::Boolean(s.twins)),
            ("synth.twin_period", uint(s.twin_period.into())),
            ("synth.twin_stride", uint(s.twin_stride.into())),
            ("data.root", path(&d.root)),
            (
                "data.layout",
                string(match d.layout {
                    Layout::Casia => "casia",
                    Layout::Oumvlp => "oumvlp",
                }),
            ),
            ("data.protocol", string(&d.protocol)),
            ("data.train_subjects", uint(d.train_subjects.into())),
            ("data.gallery_runs", uint(d.gallery_runs.into())),
            ("train.iterations", uint(t.iterations)),
            ("train.p", u(t.batch.p)),
            ("train.k", u(t.batch.k)),
            ("train.segment_len", u(t.batch.segment_len)),
            ("train.margin", Value::Float(t.triplet.margin)),
            ("train.normalization", string(t.triplet.normalization)),
            ("train.sign", string(t.triplet.sign)),
            ("train.schedule", string(&t.schedule)),
            ("train.lr", Value::Float(t.lr)),
            ("train.milestones", list(&t.milestones, uint)),
            ("train.gamma", Value::Float(t.gamma)),
            ("train.checkpoint_every", uint(t.checkpoint_every)),
            ("train.time_limit", Value::Float(t.time_limit)),
            ("train.tape_budget_mb", u(t.tape_budget_mb)),
            ("train.eval_every", uint(t.eval_every)),
            ("train.target_rank1", Value::Float(t.target_rank1)),
            (
                "eval.exclude_identical_view",
                Value::Boolean(self.eval.exclude_identical_view),
            ),
            (
                "eval.gallery_as_probe",
                Value::Boolean(self.eval.gallery_as_probe),
            ),
            ("gradcheck.op", string(&g.op)),
            ("gradcheck.op_tolerance", Value::Float(g.op_tolerance)),
            (
                "gradcheck.end_to_end_tolerance",
                Value::Float(g.end_to_end_tolerance),
            ),
            (
                "ablate.tables",
                list(
                    &self
                        .ablate
                        .tables
                        .iter()
                        .map(String::as_str)
                        .collect::<Vec<_>>(),
                    string,
                ),
            ),
            ("ablate.windows", list(&self.ablate.windows, u)),
        ]);
        e
    }

    /// Checks every section; the synthetic spec is checked by the synth command.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.protocol()?;
        self.train.batch.validate()?;
        self.train.triplet.validate()?;
        self.train.schedule()?.validate()?;
        if !(self.train.time_limit >= 0.0
            && self.train.target_rank1 >= 0.0
            && self.train.target_rank1 <= 100.0)
        {
            return Err(Error::Config(
                "train.time_limit must be >= 0 and train.target_rank1 within [0, 100]".into(),
            ));
        }
        for t in &self.ablate.tables {
            if !matches!(t.as_str(), "bie" | "mfa" | "window") {
                return Err(Error::Config(format!(
                    "unknown ablation table `{t}` (expected bie, mfa or window)"
                )));
            }
        }
        if !(self.gradcheck.op_tolerance > 0.0 && self.gradcheck.end_to_end_tolerance > 0.0) {
            return Err(Error::Config(
                "gradcheck tolerances must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The resolved configuration as a TOML document that [`RunConfig::resolve`]
    /// reads back to the same value.
    pub fn to_toml(&self) -> String {
        let mut root = Table::new();
        for (key, value) in self.entries() {
            let mut table = &mut root;
            let mut parts: Vec<&str> = key.split('.').collect();
            let leaf = parts.pop().expect("non-empty key");
            for p in parts {
                table = table
                    .entry(p)
                    .or_insert_with(|| Value::Table(Table::new()))
                    .as_table_mut()
                    .expect("sections are tables");
            }
            table.insert(leaf.to_string(), value);
        }
        toml::to_string(&root).expect("configuration values serialize")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(ECHO_FILE);
        fs::write(&path, self.to_toml())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }

    /// Applies the layers in order: preset defaults (flag, else the file's
    /// `preset` key, else desk), the config file, `--seed`/`--out`, then
    /// dotted overrides.
    pub fn resolve(
        preset: Option<Preset>,
        file: Option<&Path>,
        seed: Option<u64>,
        out: Option<&Path>,
        overrides: &[(String, Value)],
    ) -> Result<Self> {
        let file_entries = match file {
            Some(path) => read_entries(path)?,
            None => Vec::new(),
        };
        let file_preset = file_entries
            .iter()
            .find(|(k, _)| k == "preset")
            .map(|(k, v)| as_parsed::<Preset>(k, v))
            .transpose()?;
        let mut cfg = RunConfig::preset(preset.or(file_preset).unwrap_or(Preset::Desk));
        for (k, v) in &file_entries {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        if let Some(out) = out {
            cfg.out = out.to_path_buf();
        }
        for (k, v) in overrides {
            if k == "preset" {
                return Err(Error::Config(
                    "select a preset with --preset, not an override".into(),
                ));
            }
            cfg.set(k, v)?;
        }
        cfg.synth.seed = cfg.seed;
        Ok(cfg)
    }
}

/// Flattens a TOML document into dotted keys.
fn read_entries(path: &Path) -> Result<Vec<(String, Value)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let table: Table = text
        .parse()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    flatten("", table, &mut out);
    Ok(out)
}

fn flatten(prefix: &str, table: Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            v => out.push((key, v)),
        }
    }
}

/// Splits a `key=value` override; the value is read as TOML, falling back
/// to a bare string.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{raw}` is not of the form key=value")))?;
    Ok((
        k.trim().to_string(),
        crate::config_value::parse_cli_value(v.trim()),
    ))
}
