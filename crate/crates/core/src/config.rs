//! Flat `key=value` experiment configuration with dotted sections.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::model::ModelConfig;
use crate::ree::{ExitSchedule, ReeConfig};
use crate::training::{TrainConfig, TrainMode};

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSection {
    /// Number of evenly spaced exits, used when neither list nor spacing is set.
    pub exits: usize,
    pub exit_blocks: Option<Vec<usize>>,
    pub every_k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    /// Dataset file; synthetic data is generated when absent.
    pub path: Option<PathBuf>,
    pub per_class: usize,
    pub noise: f64,
    pub alpha: f64,
    pub split_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSection {
    pub kd_enabled: bool,
    pub modulation_enabled: bool,
    pub ree_everywhere: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationSection {
    pub clients: usize,
    pub sample_fraction: f64,
    pub total_rounds: usize,
    pub eval_interval: usize,
    pub exclude_underbudget: bool,
    /// 0 defers to `REEFL_THREADS`, then to the machine's parallelism.
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub backbone: BackboneConfig,
    pub ree: ReeConfig,
    pub schedule: ScheduleSection,
    /// `total_rounds`, `kd_enabled` and `modulation` are taken from the
    /// federation and ablation sections.
    pub train: TrainConfig,
    pub federation: FederationSection,
    pub data: DataSection,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            backbone: BackboneConfig {
                depth: 8,
                hidden_dim: 16,
                heads: 4,
                channels: 1,
                image_size: 8,
                patch_size: 4,
                num_classes: 4,
            },
            ree: ReeConfig::default(),
            schedule: ScheduleSection {
                exits: 4,
                exit_blocks: None,
                every_k: None,
            },
            train: TrainConfig {
                total_rounds: 100,
                ..TrainConfig::default()
            },
            federation: FederationSection {
                clients: 20,
                sample_fraction: 0.25,
                total_rounds: 100,
                eval_interval: 10,
                exclude_underbudget: false,
                threads: 0,
            },
            data: DataSection {
                path: None,
                per_class: 250,
                noise: 0.4,
                alpha: 1.0,
                split_ratio: 0.8,
            },
            ablation: AblationSection {
                kd_enabled: true,
                modulation_enabled: true,
                ree_everywhere: true,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e: T::Err| Error::Parse {
        key: key.to_string(),
        detail: format!("cannot parse {value:?}: {e}"),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_mode(key: &str, value: &str) -> Result<TrainMode> {
    match value.trim() {
        "full" => Ok(TrainMode::Full),
        "frozen" => Ok(TrainMode::Frozen),
        other => Err(Error::Parse {
            key: key.to_string(),
            detail: format!("expected full or frozen, got {other:?}"),
        }),
    }
}

fn invalid(key: &str, detail: impl Into<String>) -> Error {
    Error::Parse {
        key: key.to_string(),
        detail: detail.into(),
    }
}

fn opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or(String::new(), |v| v.to_string())
}

impl ExperimentConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let empty = v.is_empty();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "model.depth" => self.backbone.depth = parse(key, v)?,
            "model.hidden_dim" => self.backbone.hidden_dim = parse(key, v)?,
            "model.heads" => self.backbone.heads = parse(key, v)?,
            "model.channels" => self.backbone.channels = parse(key, v)?,
            "model.image_size" => self.backbone.image_size = parse(key, v)?,
            "model.patch_size" => self.backbone.patch_size = parse(key, v)?,
            "model.num_classes" => self.backbone.num_classes = parse(key, v)?,
            "ree.heads" => self.ree.heads = parse(key, v)?,
            "ree.bottleneck" => self.ree.bottleneck = parse(key, v)?,
            "ree.mlp_ratio" => self.ree.mlp_ratio = parse(key, v)?,
            "schedule.exits" => self.schedule.exits = parse(key, v)?,
            "schedule.exit_blocks" => self.schedule.exit_blocks = if empty { None } else { Some(parse_list(key, v)?) },
            "schedule.every_k" => self.schedule.every_k = if empty { None } else { Some(parse(key, v)?) },
            "train.mode" => self.train.mode = parse_mode(key, v)?,
            "train.lr0" => self.train.lr0 = parse(key, v)?,
            "train.lr_min" => self.train.lr_min = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.local_epochs" => self.train.local_epochs = parse(key, v)?,
            "train.clip" => self.train.clip = parse(key, v)?,
            "train.tau" => self.train.tau = parse(key, v)?,
            "train.zeta" => self.train.zeta = parse(key, v)?,
            "train.eta_max" => self.train.eta_max = parse(key, v)?,
            "train.ramp_rounds" => self.train.ramp_rounds = parse(key, v)?,
            "train.detach_teacher" => self.train.detach_teacher = parse(key, v)?,
            "federation.clients" => self.federation.clients = parse(key, v)?,
            "federation.sample_fraction" => self.federation.sample_fraction = parse(key, v)?,
            "federation.total_rounds" => self.federation.total_rounds = parse(key, v)?,
            "federation.eval_interval" => self.federation.eval_interval = parse(key, v)?,
            "federation.exclude_underbudget" => self.federation.exclude_underbudget = parse(key, v)?,
            "federation.threads" => self.federation.threads = parse(key, v)?,
            "data.path" => self.data.path = if empty { None } else { Some(PathBuf::from(v)) },
            "data.per_class" => self.data.per_class = parse(key, v)?,
            "data.noise" => self.data.noise = parse(key, v)?,
            "data.alpha" => self.data.alpha = parse(key, v)?,
            "data.split_ratio" => self.data.split_ratio = parse(key, v)?,
            "ablation.kd_enabled" => self.ablation.kd_enabled = parse(key, v)?,
            "ablation.modulation_enabled" => self.ablation.modulation_enabled = parse(key, v)?,
            "ablation.ree_everywhere" => self.ablation.ree_everywhere = parse(key, v)?,
            _ => return Err(invalid(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let b = &self.backbone;
        let t = &self.train;
        let f = &self.federation;
        let mode = match t.mode {
            TrainMode::Full => "full",
            TrainMode::Frozen => "frozen",
        };
        vec![
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("model.depth", b.depth.to_string()),
            ("model.hidden_dim", b.hidden_dim.to_string()),
            ("model.heads", b.heads.to_string()),
            ("model.channels", b.channels.to_string()),
            ("model.image_size", b.image_size.to_string()),
            ("model.patch_size", b.patch_size.to_string()),
            ("model.num_classes", b.num_classes.to_string()),
            ("ree.heads", self.ree.heads.to_string()),
            ("ree.bottleneck", self.ree.bottleneck.to_string()),
            ("ree.mlp_ratio", self.ree.mlp_ratio.to_string()),
            ("schedule.exits", self.schedule.exits.to_string()),
            (
                "schedule.exit_blocks",
                self.schedule.exit_blocks.as_ref().map_or(String::new(), |v| {
                    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
                }),
            ),
            ("schedule.every_k", opt(&self.schedule.every_k)),
            ("train.mode", mode.to_string()),
            ("train.lr0", t.lr0.to_string()),
            ("train.lr_min", t.lr_min.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.local_epochs", t.local_epochs.to_string()),
            ("train.clip", t.clip.to_string()),
            ("train.tau", t.tau.to_string()),
            ("train.zeta", t.zeta.to_string()),
            ("train.eta_max", t.eta_max.to_string()),
            ("train.ramp_rounds", t.ramp_rounds.to_string()),
            ("train.detach_teacher", t.detach_teacher.to_string()),
            ("federation.clients", f.clients.to_string()),
            ("federation.sample_fraction", f.sample_fraction.to_string()),
            ("federation.total_rounds", f.total_rounds.to_string()),
            ("federation.eval_interval", f.eval_interval.to_string()),
            ("federation.exclude_underbudget", f.exclude_underbudget.to_string()),
            ("federation.threads", f.threads.to_string()),
            (
                "data.path",
                self.data
                    .path
                    .as_ref()
                    .map_or(String::new(), |p| p.display().to_string()),
            ),
            ("data.per_class", self.data.per_class.to_string()),
            ("data.noise", self.data.noise.to_string()),
            ("data.alpha", self.data.alpha.to_string()),
            ("data.split_ratio", self.data.split_ratio.to_string()),
            ("ablation.kd_enabled", self.ablation.kd_enabled.to_string()),
            (
                "ablation.modulation_enabled",
                self.ablation.modulation_enabled.to_string(),
            ),
            ("ablation.ree_everywhere", self.ablation.ree_everywhere.to_string()),
        ]
    }

    /// Applies a config text on top of `self`. Blank lines and `#` comments
    /// are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                key: line.to_string(),
                detail: format!("line {} is not key=value", n + 1),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies `--key=value` (or `key=value`) overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let body = o.strip_prefix("--").unwrap_or(o);
            let (key, value) = body.split_once('=').ok_or_else(|| Error::Parse {
                key: body.to_string(),
                detail: "override must be key=value".into(),
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Defaults, then the file text, then overrides; validated.
    pub fn resolve<S: AsRef<str>>(file_text: Option<&str>, overrides: &[S]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(text) = file_text {
            cfg.apply_text(text)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn exit_schedule(&self) -> Result<ExitSchedule> {
        let depth = self.backbone.depth;
        let every = self.ablation.ree_everywhere;
        let s = &self.schedule;
        match (&s.exit_blocks, s.every_k) {
            (Some(_), Some(_)) => Err(invalid(
                "schedule.exit_blocks",
                "set either schedule.exit_blocks or schedule.every_k, not both",
            )),
            (Some(blocks), None) => ExitSchedule::new(blocks.clone(), depth, every)
                .map_err(|e| invalid("schedule.exit_blocks", e.to_string())),
            (None, Some(k)) => {
                ExitSchedule::every(k, depth, every).map_err(|e| invalid("schedule.every_k", e.to_string()))
            }
            (None, None) => {
                if s.exits == 0 || !depth.is_multiple_of(s.exits) {
                    return Err(invalid(
                        "schedule.exits",
                        format!("{} exits cannot be spaced evenly over {depth} blocks", s.exits),
                    ));
                }
                ExitSchedule::every(depth / s.exits, depth, every).map_err(|e| invalid("schedule.exits", e.to_string()))
            }
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            backbone: self.backbone.clone(),
            ree: self.ree.clone(),
            schedule: self.exit_schedule()?,
        };
        self.backbone.validate().map_err(|e| invalid("model", e.to_string()))?;
        self.ree.validate().map_err(|e| invalid("ree", e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            total_rounds: self.federation.total_rounds,
            kd_enabled: self.ablation.kd_enabled,
            modulation: self.ablation.modulation_enabled,
            ..self.train.clone()
        }
    }

    pub fn federation_config(&self) -> FederationConfig {
        FederationConfig {
            sample_fraction: self.federation.sample_fraction,
            total_rounds: self.federation.total_rounds,
            eval_interval: self.federation.eval_interval,
            exclude_underbudget: self.federation.exclude_underbudget,
            seed: self.seed,
            threads: (self.federation.threads > 0).then_some(self.federation.threads),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.model_config()?.schedule;
        let t = &self.train;
        let checks: [(&str, bool, &str); 14] = [
            ("train.zeta", t.zeta > 0.0 && t.zeta <= 1.0, "must lie in (0, 1]"),
            ("train.tau", t.tau > 0.0, "must be positive"),
            ("train.clip", t.clip > 0.0, "must be positive"),
            ("train.lr0", t.lr0 > 0.0, "must be positive"),
            (
                "train.lr_min",
                t.lr_min >= 0.0 && t.lr_min <= t.lr0,
                "must lie in [0, lr0]",
            ),
            ("train.batch_size", t.batch_size > 0, "must be positive"),
            ("train.local_epochs", t.local_epochs > 0, "must be positive"),
            ("train.eta_max", t.eta_max >= 0.0, "must be nonnegative"),
            (
                "federation.total_rounds",
                self.federation.total_rounds > 0,
                "must be positive",
            ),
            (
                "federation.eval_interval",
                self.federation.eval_interval > 0,
                "must be positive",
            ),
            (
                "federation.sample_fraction",
                self.federation.sample_fraction > 0.0 && self.federation.sample_fraction <= 1.0,
                "must lie in (0, 1]",
            ),
            (
                "federation.clients",
                self.federation.clients >= schedule.num_exits(),
                "must be at least the number of exits",
            ),
            ("data.alpha", self.data.alpha > 0.0, "must be positive"),
            (
                "data.split_ratio",
                self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0,
                "must lie in (0, 1)",
            ),
        ];
        for (key, ok, detail) in checks {
            if !ok {
                return Err(invalid(key, detail));
            }
        }
        if self.data.path.is_none() {
            if self.data.per_class == 0 {
                return Err(invalid("data.per_class", "must be positive"));
            }
            if !(self.data.noise >= 0.0) {
                return Err(invalid("data.noise", "must be nonnegative"));
            }
        }
        Ok(())
    }
}

/// Model-shaping keys of `cfg`, as stored in checkpoint headers.
pub fn model_keys(cfg: &ModelConfig, modulation: bool) -> String {
    let b = &cfg.backbone;
    let blocks: Vec<String> = cfg.schedule.exit_blocks().iter().map(usize::to_string).collect();
    [
        ("model.depth", b.depth.to_string()),
        ("model.hidden_dim", b.hidden_dim.to_string()),
        ("model.heads", b.heads.to_string()),
        ("model.channels", b.channels.to_string()),
        ("model.image_size", b.image_size.to_string()),
        ("model.patch_size", b.patch_size.to_string()),
        ("model.num_classes", b.num_classes.to_string()),
        ("ree.heads", cfg.ree.heads.to_string()),
        ("ree.bottleneck", cfg.ree.bottleneck.to_string()),
        ("ree.mlp_ratio", cfg.ree.mlp_ratio.to_string()),
        ("schedule.exit_blocks", blocks.join(",")),
        ("ablation.ree_everywhere", cfg.schedule.ree_everywhere().to_string()),
        ("ablation.modulation_enabled", modulation.to_string()),
    ]
    .iter()
    .map(|(k, v)| format!("{k}={v}\n"))
    .collect()
}

/// Inverse of [`model_keys`].
pub fn parse_model_keys(text: &str) -> Result<(ModelConfig, bool)> {
    let mut cfg = ExperimentConfig::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, value) = line.split_once('=').ok_or_else(|| invalid(line, "not key=value"))?;
        if !(key.starts_with("model.")
            || key.starts_with("ree.")
            || key.starts_with("schedule.")
            || key.starts_with("ablation."))
        {
            return Err(invalid(key, "not a model key"));
        }
        cfg.set(key, value)?;
    }
    Ok((cfg.model_config()?, cfg.ablation.modulation_enabled))
}
