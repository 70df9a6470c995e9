//! Run configuration: a TOML file checked against the shipped schema, with
//! command-line overrides taking precedence over file values and file
//! values over defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use leafnet::augment::{AugmentConfig, FillMode};
use leafnet::models::{ModelName, ModelSpec};
use leafnet::optim::{OptimizerConfig, ScheduleKind, Variant};
use leafnet::train::{EarlyStopping, Monitor, ScheduleConfig, TrainConfig};
use serde::Deserialize;
use toml::Value;

use crate::error::{CliResult, Failure};

pub const SCHEMA_TOML: &str = include_str!("../schema.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyType {
    String,
    Path,
    Int,
    Float,
    Bool,
    Enum,
    Floats,
    Scales,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeySpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: KeyType,
    #[serde(default)]
    pub values: Vec<String>,
    pub default: Option<Value>,
    pub doc: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub key: Vec<KeySpec>,
}

pub fn schema() -> &'static Schema {
    static SCHEMA: OnceLock<Schema> = OnceLock::new();
    SCHEMA.get_or_init(|| toml::from_str(SCHEMA_TOML).expect("shipped schema parses"))
}

impl Schema {
    pub fn get(&self, name: &str) -> Option<&KeySpec> {
        self.key.iter().find(|k| k.name == name)
    }

    /// Help section listing every key with its type, default and description.
    pub fn help(&self) -> String {
        let mut out = String::from(
            "CONFIGURATION KEYS (precedence: flag > file > default):\n",
        );
        for k in &self.key {
            let ty = match k.kind {
                KeyType::Enum => k.values.join("|"),
                KeyType::Floats => "[float, ...]".into(),
                KeyType::Scales => "[[height, width], ...]".into(),
                other => format!("{other:?}").to_lowercase(),
            };
            let default = k
                .default
                .as_ref()
                .map(|v| format!(" = {v}"))
                .unwrap_or_default();
            let _ = writeln!(out, "  {} <{ty}>{default}\n      {}", k.name, k.doc);
        }
        out
    }
}

/// Where a value came from; relative paths resolve against a file's
/// directory or the working directory.
#[derive(Debug, Clone, PartialEq)]
enum Origin {
    Default,
    File(PathBuf),
    Flag,
}

/// Validated values keyed by dotted name.
#[derive(Debug, Clone, Default)]
pub struct Values {
    map: BTreeMap<String, (Value, Origin)>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let name = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&name, t, out),
            other => out.push((name, other.clone())),
        }
    }
}

fn type_error(key: &KeySpec, v: &Value, what: &str) -> Failure {
    Failure::user(
        "config",
        format!("key `{}` expects {what}, got `{v}`", key.name),
    )
}

fn check_value(key: &KeySpec, v: &Value) -> CliResult<Value> {
    let number = |v: &Value| match v {
        Value::Integer(i) => Some(*i as f64),
        Value::Float(f) => Some(*f),
        _ => None,
    };
    match key.kind {
        KeyType::String | KeyType::Path => match v {
            Value::String(_) => Ok(v.clone()),
            _ => Err(type_error(key, v, "a string")),
        },
        KeyType::Int => match v {
            Value::Integer(i) if *i >= 0 => Ok(v.clone()),
            _ => Err(type_error(key, v, "a non-negative integer")),
        },
        KeyType::Float => number(v)
            .map(Value::Float)
            .ok_or_else(|| type_error(key, v, "a number")),
        KeyType::Bool => match v {
            Value::Boolean(_) => Ok(v.clone()),
            _ => Err(type_error(key, v, "true or false")),
        },
        KeyType::Enum => match v {
            Value::String(s) if key.values.contains(s) => Ok(v.clone()),
            _ => Err(type_error(key, v, &format!("one of {}", key.values.join(", ")))),
        },
        KeyType::Floats => match v {
            Value::Array(a) => a
                .iter()
                .map(|x| number(x).map(Value::Float))
                .collect::<Option<Vec<_>>>()
                .map(Value::Array)
                .ok_or_else(|| type_error(key, v, "an array of numbers")),
            _ => Err(type_error(key, v, "an array of numbers")),
        },
        KeyType::Scales => {
            let pair = |x: &Value| match x {
                Value::Array(p) if p.len() == 2 => p
                    .iter()
                    .all(|d| matches!(d, Value::Integer(i) if *i > 0))
                    .then(|| x.clone()),
                _ => None,
            };
            match v {
                Value::Array(a) if !a.is_empty() => a
                    .iter()
                    .map(pair)
                    .collect::<Option<Vec<_>>>()
                    .map(Value::Array)
                    .ok_or_else(|| type_error(key, v, "[[height, width], ...] with positive sizes")),
                _ => Err(type_error(key, v, "[[height, width], ...] with positive sizes")),
            }
        }
    }
}

/// Parses a `--set` value as a TOML value, falling back to a bare string.
pub fn parse_flag_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

impl Values {
    /// Schema defaults only.
    pub fn defaults() -> Self {
        let mut v = Values::default();
        for k in &schema().key {
            if let Some(d) = &k.default {
                let d = check_value(k, d).expect("schema defaults match their types");
                v.map.insert(k.name.clone(), (d, Origin::Default));
            }
        }
        v
    }

    fn merge(&mut self, entries: Vec<(String, Value)>, origin: Origin) -> CliResult<()> {
        let unknown: Vec<&str> = entries
            .iter()
            .map(|(k, _)| k.as_str())
            .filter(|k| schema().get(k).is_none())
            .collect();
        if !unknown.is_empty() {
            return Err(Failure::user(
                "config",
                format!("unknown configuration keys: {}", unknown.join(", ")),
            ));
        }
        for (k, v) in entries {
            let checked = check_value(schema().get(&k).expect("checked above"), &v)?;
            self.map.insert(k, (checked, origin.clone()));
        }
        Ok(())
    }

    /// Layers the file's values over the current ones.
    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::user("config", format!("{}: {e}", path.display())))?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| {
            Failure::user("config", format!("{}: {}", path.display(), e.message()))
        })?;
        let mut entries = Vec::new();
        flatten("", &table, &mut entries);
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        self.merge(entries, Origin::File(dir))
    }

    /// Layers command-line values over the current ones.
    pub fn apply_flags(&mut self, entries: Vec<(String, Value)>) -> CliResult<()> {
        self.merge(entries, Origin::Flag)
    }

    fn get(&self, key: &str) -> Option<&Value> {
        debug_assert!(schema().get(key).is_some(), "{key} is not in the schema");
        self.map.get(key).map(|(v, _)| v)
    }

    fn usize(&self, key: &str) -> Option<usize> {
        self.get(key).and_then(Value::as_integer).map(|i| i as usize)
    }

    fn u64(&self, key: &str) -> Option<u64> {
        self.get(key).and_then(Value::as_integer).map(|i| i as u64)
    }

    fn f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(Value::as_float)
    }

    fn bool(&self, key: &str) -> Option<bool> {
        self.get(key).and_then(Value::as_bool)
    }

    fn str(&self, key: &str) -> Option<&str> {
        self.get(key).and_then(Value::as_str)
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let (v, origin) = self.map.get(key)?;
        let p = PathBuf::from(v.as_str()?);
        Some(match origin {
            Origin::File(dir) if p.is_relative() => dir.join(p),
            _ => p,
        })
    }
}

/// Everything a training command needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    /// Unset `model.num_classes` is filled in from the data.
    pub num_classes: Option<usize>,
    pub train: TrainConfig,
}

fn parse<T: std::str::FromStr<Err = leafnet::Error>>(s: &str) -> CliResult<T> {
    s.parse().map_err(|e: leafnet::Error| Failure::user("config", e.to_string()))
}

impl RunConfig {
    pub fn resolve(v: &Values) -> CliResult<Self> {
        let data_root = v.path("data.root").ok_or_else(|| {
            Failure::user("config", "`data.root` is required (set it in the file or pass --data)")
        })?;
        let out_dir = v.path("output.dir").expect("output.dir has a default");

        let name: ModelName = parse(v.str("model.name").expect("default"))?;
        let num_classes = v.usize("model.num_classes");
        let mut model = ModelSpec::new(name, num_classes.unwrap_or(2));
        if let Some(Value::Array(scales)) = v.get("model.scales") {
            model.input_scales = scales
                .iter()
                .map(|p| {
                    let p = p.as_array().expect("validated pair");
                    (
                        p[0].as_integer().expect("validated") as usize,
                        p[1].as_integer().expect("validated") as usize,
                    )
                })
                .collect();
        }
        model.width_multiplier = v.f64("model.width").expect("default");
        if let Some(d) = v.f64("model.dropout") {
            model.dropout = d;
        }
        model.seed = v.u64("model.seed").expect("default");

        let variant: Variant = parse(v.str("optimizer.name").expect("default"))?;
        let optimizer = OptimizerConfig {
            variant,
            lr: v.f64("optimizer.lr").expect("default"),
            weight_decay: v.f64("optimizer.weight_decay").expect("default"),
            beta1: v.f64("optimizer.beta1").expect("default"),
            beta2: v.f64("optimizer.beta2").expect("default"),
            eps: v.f64("optimizer.eps").expect("default"),
            momentum: v.f64("optimizer.momentum").expect("default"),
            rho: v.f64("optimizer.rho").expect("default"),
        };

        let schedule = ScheduleConfig {
            kind: match v.str("schedule.kind").expect("default") {
                "cosine_annealing" => ScheduleKind::CosineAnnealing,
                _ => ScheduleKind::Constant,
            },
            eta_min: v.f64("schedule.eta_min").expect("default"),
            period: v.usize("schedule.period"),
        };

        let split = match v.get("train.split") {
            Some(Value::Array(a)) if a.len() == 3 => [
                a[0].as_float().expect("validated"),
                a[1].as_float().expect("validated"),
                a[2].as_float().expect("validated"),
            ],
            Some(other) => {
                return Err(Failure::user(
                    "config",
                    format!("key `train.split` needs three fractions, got `{other}`"),
                ))
            }
            None => unreachable!("train.split has a default"),
        };

        let early_stopping = EarlyStopping {
            metric: match v.str("early_stopping.metric").expect("default") {
                "val_accuracy" => Monitor::ValAccuracy,
                _ => Monitor::ValLoss,
            },
            patience: v.usize("early_stopping.patience").expect("default"),
        };

        let augment = AugmentConfig {
            horizontal_flip: v.bool("augment.horizontal_flip").expect("default"),
            rotation_range: v.f64("augment.rotation_range").expect("default"),
            zoom_range: v.f64("augment.zoom_range").expect("default"),
            shift_range: v.f64("augment.shift_range").expect("default"),
            fill_mode: FillMode::Reflect,
            seed: v.u64("augment.seed").expect("default"),
        };

        let train = TrainConfig {
            model,
            optimizer,
            schedule,
            batch_size: v.usize("train.batch_size").expect("default"),
            epochs: v.usize("train.epochs").expect("default"),
            early_stopping,
            augment,
            balance: v.bool("train.balance").expect("default"),
            split,
            kfold: v.usize("train.kfold"),
            seed: v.u64("train.seed").expect("default"),
            deterministic: v.bool("train.deterministic").expect("default"),
        };
        let cfg = RunConfig {
            data_root,
            out_dir,
            num_classes,
            train,
        };
        // Everything except the class count can be checked before any data
        // is read.
        let mut probe = cfg.train.clone();
        probe.model.num_classes = num_classes.unwrap_or(2);
        probe
            .validate()
            .map_err(|e| Failure::user("config", e.to_string()))?;
        Ok(cfg)
    }

    /// Sets the class count from the data unless the file fixed it.
    pub fn bind_classes(&mut self, found: usize) -> CliResult<()> {
        match self.num_classes {
            Some(k) if k != found => Err(Failure::user(
                "data",
                format!("model.num_classes is {k} but the data has {found} classes"),
            )),
            _ => {
                self.train.model.num_classes = found;
                self.train
                    .validate()
                    .map_err(|e| Failure::user("config", e.to_string()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_defaults_match_core_defaults() {
        let mut v = Values::defaults();
        v.apply_flags(vec![("data.root".into(), Value::String("d".into()))])
            .unwrap();
        let cfg = RunConfig::resolve(&v).unwrap();
        let core = TrainConfig::default();
        assert_eq!(cfg.train.optimizer, core.optimizer);
        assert_eq!(cfg.train.schedule, core.schedule);
        assert_eq!(cfg.train.batch_size, core.batch_size);
        assert_eq!(cfg.train.epochs, core.epochs);
        assert_eq!(cfg.train.early_stopping, core.early_stopping);
        assert_eq!(cfg.train.augment, core.augment);
        assert_eq!(cfg.train.split, core.split);
        assert_eq!(cfg.train.model.name, core.model.name);
        assert_eq!(cfg.train.model.input_scales, core.model.input_scales);
    }

    #[test]
    fn unknown_keys_are_all_named() {
        let mut v = Values::defaults();
        let err = v
            .apply_flags(vec![
                ("model.colour".into(), Value::Boolean(true)),
                ("train.epochs".into(), Value::Integer(2)),
                ("bogus".into(), Value::Integer(1)),
            ])
            .unwrap_err();
        assert!(err.message.contains("model.colour") && err.message.contains("bogus"));
        assert!(!err.message.contains("train.epochs"));
    }

    #[test]
    fn types_are_checked() {
        let mut v = Values::defaults();
        assert!(v
            .apply_flags(vec![("train.epochs".into(), Value::String("ten".into()))])
            .is_err());
        assert!(v
            .apply_flags(vec![("optimizer.name".into(), Value::String("lbfgs".into()))])
            .is_err());
        assert!(v
            .apply_flags(vec![("optimizer.lr".into(), Value::Integer(1))])
            .is_ok());
    }

    #[test]
    fn flag_values_parse_as_toml() {
        assert_eq!(parse_flag_value("3"), Value::Integer(3));
        assert_eq!(parse_flag_value("adam"), Value::String("adam".into()));
        assert_eq!(parse_flag_value("true"), Value::Boolean(true));
        assert!(matches!(parse_flag_value("[[32, 32]]"), Value::Array(_)));
    }
}
