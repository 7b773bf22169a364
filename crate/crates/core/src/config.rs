//! Versioned TOML run configuration with `key=value` overrides.
//!
//! ```toml
//! version = 1
//! name = "crcd-r20-r8"
//! seed = 0
//!
//! [data]
//! kind = "cifar10"
//! subset_fraction = 0.1
//!
//! [teacher]
//! model = "resnet20"
//! checkpoint = "runs/teacher-r20/teacher.json"
//!
//! [student]
//! model = "resnet8"
//!
//! [distill]
//! tau = 0.05
//! negatives = 500
//! ```
//!
//! Override keys are dotted paths (`distill.tau=0.1`) or a bare field name
//! that occurs exactly once in the schema (`tau=0.1`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetHandle;
use crate::engine::{DistillConfig, OptimConfig};
use crate::error::{CrcdError, Result};
use crate::models::ModelSpec;

pub const CONFIG_VERSION: u32 = 1;

/// A zoo entry (`resnet20`, `resnet8x4`, `vgg8`, ...) or `mlp` with explicit layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub model: String,
    pub hidden: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            model: "mlp".into(),
            hidden: Vec::new(),
            feature_dim: Some(8),
        }
    }
}

fn model_spec(
    section: &str,
    model: &str,
    hidden: &[usize],
    feature_dim: Option<usize>,
    data: &DatasetHandle,
) -> Result<ModelSpec> {
    let input = data.input_shape();
    let classes = data.class_count();
    if model == "mlp" {
        let fd = feature_dim.ok_or_else(|| CrcdError::Schema {
            field: format!("{section}.feature_dim"),
            message: "required for mlp models".into(),
        })?;
        let mut spec = ModelSpec::mlp(input.iter().product(), hidden, fd, classes);
        spec.input_shape = input;
        spec.validate()?;
        return Ok(spec);
    }
    ModelSpec::preset(model, &input, classes).map_err(|e| CrcdError::Schema {
        field: format!("{section}.model"),
        message: e.to_string(),
    })
}

impl StudentConfig {
    pub fn spec(&self, data: &DatasetHandle) -> Result<ModelSpec> {
        model_spec("student", &self.model, &self.hidden, self.feature_dim, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub model: String,
    pub hidden: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    /// Where `train-teacher` writes and `distill` reads the teacher.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            model: "mlp".into(),
            hidden: vec![32],
            feature_dim: Some(16),
            checkpoint: None,
            epochs: 30,
            batch_size: 64,
            optimizer: OptimConfig::default(),
        }
    }
}

impl TeacherConfig {
    pub fn spec(&self, data: &DatasetHandle) -> Result<ModelSpec> {
        model_spec("teacher", &self.model, &self.hidden, self.feature_dim, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DatasetHandle,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub student: StudentConfig,
    #[serde(default)]
    pub distill: DistillConfig,
}

impl RunConfig {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            version: CONFIG_VERSION,
            name: name.into(),
            seed: 0,
            data: DatasetHandle::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            distill: DistillConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text)
            .map_err(|e| CrcdError::config(format!("invalid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        match table.get("version") {
            Some(toml::Value::Integer(v)) if *v == CONFIG_VERSION as i64 => {}
            Some(other) => {
                return Err(CrcdError::Schema {
                    field: "version".into(),
                    message: format!("unsupported config version {other}, expected {CONFIG_VERSION}"),
                })
            }
            None => {
                return Err(CrcdError::Schema {
                    field: "version".into(),
                    message: "missing".into(),
                })
            }
        }
        let text = toml::to_string(&table).map_err(|e| CrcdError::config(e.to_string()))?;
        let de = toml::Deserializer::parse(&text).map_err(|e| CrcdError::config(e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CrcdError::Schema {
                field: if path == "." { "(root)".into() } else { path },
                message: e.into_inner().message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CrcdError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CrcdError::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(CrcdError::Schema {
                field: "name".into(),
                message: "must not be empty".into(),
            });
        }
        self.data.validate()?;
        self.teacher.spec(&self.data)?;
        self.student.spec(&self.data)?;
        self.teacher.optimizer.validate("teacher.optimizer")?;
        if self.teacher.batch_size == 0 {
            return Err(CrcdError::Schema {
                field: "teacher.batch_size".into(),
                message: "must be at least 1".into(),
            });
        }
        self.distill.validate()
    }

    /// Hash of the configuration without `name` and `seed`; runs that differ
    /// only in seed share it.
    pub fn config_hash(&self) -> String {
        self.hash_without(&[])
    }

    /// Like [`config_hash`](Self::config_hash), additionally ignoring the given dotted paths.
    pub fn hash_without(&self, paths: &[&str]) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is a table");
        obj.remove("name");
        obj.remove("seed");
        for p in paths {
            remove_path(&mut v, p);
        }
        let canonical = serde_json::to_string(&v).expect("json");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Value at a dotted path, as JSON.
    pub fn lookup(&self, path: &str) -> Option<serde_json::Value> {
        let v = serde_json::to_value(self).ok()?;
        path.split('.').try_fold(v, |cur, k| cur.get(k).cloned())
    }

    pub fn teacher_checkpoint(&self) -> PathBuf {
        self.teacher
            .checkpoint
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(format!("teacher-{}", self.teacher.model)).join("teacher.json"))
    }
}

fn remove_path(v: &mut serde_json::Value, path: &str) {
    let mut parts: Vec<&str> = path.split('.').collect();
    let Some(last) = parts.pop() else { return };
    let mut cur = v;
    for p in parts {
        match cur.get_mut(p) {
            Some(next) => cur = next,
            None => return,
        }
    }
    if let Some(obj) = cur.as_object_mut() {
        obj.remove(last);
    }
}

/// Every dotted field path of the schema, from a fully populated default config.
pub fn schema_paths() -> Vec<String> {
    fn walk(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
        if let toml::Value::Table(t) = v {
            for (k, child) in t {
                let p = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                out.push(p.clone());
                walk(&p, child, out);
            }
        }
    }
    let mut cfg = RunConfig::new("x");
    cfg.teacher.checkpoint = Some(PathBuf::from("t"));
    cfg.data.url = Some(String::new());
    let value = toml::Value::try_from(&cfg).expect("config serializes");
    let mut out = Vec::new();
    walk("", &value, &mut out);
    out
}

/// Resolves a bare key to its unique dotted path; dotted keys pass through.
pub fn resolve_key(key: &str) -> Result<String> {
    let paths = schema_paths();
    if key.contains('.') || paths.iter().any(|p| p == key) {
        return Ok(key.to_string());
    }
    let hits: Vec<&String> = paths
        .iter()
        .filter(|p| p.rsplit('.').next() == Some(key))
        .collect();
    match hits.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(CrcdError::Schema {
            field: key.into(),
            message: "unknown configuration key".into(),
        }),
        many => Err(CrcdError::Schema {
            field: key.into(),
            message: format!(
                "ambiguous key; use one of {}",
                many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ),
        }),
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `key=value` override to a parsed config table.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item.split_once('=').ok_or_else(|| {
        CrcdError::usage(format!("override `{item}` is not of the form key=value"))
    })?;
    let path = resolve_key(key.trim())?;
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(CrcdError::Schema {
                    field: path.clone(),
                    message: format!("`{p}` is not a table"),
                })
            }
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::PairSelection;

    const BASE: &str = r#"
version = 1
name = "t"
seed = 3

[data]
kind = "synthetic"
num_classes = 3
sample_shape = [6]

[teacher]
model = "mlp"
hidden = [8]
feature_dim = 5

[student]
model = "mlp"
feature_dim = 4

[distill]
negatives = 16
batch_size = 8
"#;

    #[test]
    fn parses_and_defaults() {
        let c = RunConfig::from_toml_str(BASE, &[]).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.distill.negatives, 16);
        assert_eq!(c.distill.tau, 0.05);
        assert_eq!(c.distill.pairs_per_batch, PairSelection::All);
        let again = RunConfig::from_toml_str(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn overrides_dotted_and_bare() {
        let c = RunConfig::from_toml_str(BASE, &["tau=0.1".into(), "distill.pairs_per_batch=\"diagonal\"".into()]).unwrap();
        assert_eq!(c.distill.tau, 0.1);
        assert_eq!(c.distill.pairs_per_batch, PairSelection::Diagonal);
        let c = RunConfig::from_toml_str(BASE, &["sampling_policy=random".into()]).unwrap();
        assert_eq!(c.distill.sampling_policy, crate::queue::SamplingPolicy::Random);
        let err = RunConfig::from_toml_str(BASE, &["lr=0.1".into()]).unwrap_err();
        assert!(err.to_string().contains("ambiguous"), "{err}");
        assert!(RunConfig::from_toml_str(BASE, &["nonsense=1".into()]).is_err());
        assert!(RunConfig::from_toml_str(BASE, &["tau".into()]).is_err());
    }

    #[test]
    fn schema_errors_name_the_field() {
        let bad = BASE.replace("negatives = 16", "negatives = \"many\"");
        match RunConfig::from_toml_str(&bad, &[]).unwrap_err() {
            CrcdError::Schema { field, .. } => assert_eq!(field, "distill.negatives"),
            e => panic!("{e}"),
        }
        let bad = BASE.replace("negatives = 16", "negatives = 16\ntemperature = 2");
        match RunConfig::from_toml_str(&bad, &[]).unwrap_err() {
            CrcdError::Schema { field, .. } => assert!(field.starts_with("distill"), "{field}"),
            e => panic!("{e}"),
        }
        let bad = BASE.replace("version = 1", "version = 2");
        assert!(matches!(RunConfig::from_toml_str(&bad, &[]), Err(CrcdError::Schema { field, .. }) if field == "version"));
        let bad = BASE.replace("negatives = 16", "tau = -1.0");
        assert!(matches!(RunConfig::from_toml_str(&bad, &[]), Err(CrcdError::Schema { field, .. }) if field == "distill.tau"));
    }

    #[test]
    fn hash_ignores_seed_and_name_only() {
        let a = RunConfig::from_toml_str(BASE, &[]).unwrap();
        let b = RunConfig::from_toml_str(BASE, &["seed=9".into(), "name=\"other\"".into()]).unwrap();
        let c = RunConfig::from_toml_str(BASE, &["tau=0.2".into()]).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.hash_without(&["distill.tau"]), c.hash_without(&["distill.tau"]));
        assert_eq!(a.lookup("distill.negatives"), Some(serde_json::json!(16)));
    }

    #[test]
    fn model_presets_resolve() {
        let mut c = RunConfig::from_toml_str(BASE, &[]).unwrap();
        c.data = DatasetHandle::cifar10("x", 0.1);
        c.teacher.model = "resnet20".into();
        assert_eq!(c.teacher.spec(&c.data).unwrap().feature_dim, 64);
        c.teacher.model = "resnet9000x".into();
        assert!(matches!(c.teacher.spec(&c.data), Err(CrcdError::Schema { .. })));
    }
}
