use std::collections::BTreeMap;
use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::models::{BooleOrbitSpec, FunnelChainSpec, TailRule};
use crate::montecarlo::EnsembleSpec;

use super::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Evolve,
    Cesaro,
    Backforth,
    Invariance,
    FiberVerify,
    Funnel,
    Boole,
    Sl2,
    Schottky,
    Contrast,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Evolve => "evolve",
            Self::Cesaro => "cesaro",
            Self::Backforth => "backforth",
            Self::Invariance => "invariance",
            Self::FiberVerify => "fiber-verify",
            Self::Funnel => "funnel",
            Self::Boole => "boole",
            Self::Sl2 => "sl2",
            Self::Schottky => "schottky",
            Self::Contrast => "contrast",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    /// ℤ^d in the box `[−radius, radius]^d`.
    Lattice { dimension: usize, radius: i64 },
    /// Disjoint copies of ℤ/order; generator labels are the shifts.
    Cyclic {
        order: u32,
        #[serde(default = "one")]
        copies: u32,
    },
    /// Funnel birth-death chain on `0..=truncation_size`.
    Funnel {
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        prefix: Vec<f64>,
        tail: TailRule,
        step_scale: f64,
        truncation_size: u64,
    },
}

fn one() -> u32 {
    1
}

impl ModelConfig {
    pub fn funnel_spec(&self) -> Option<FunnelChainSpec> {
        match self {
            ModelConfig::Funnel {
                prefix,
                tail,
                step_scale,
                truncation_size,
            } => Some(FunnelChainSpec {
                prefix: prefix.clone(),
                tail: tail.clone(),
                step_scale: *step_scale,
                truncation_size: *truncation_size,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LawConfig {
    /// Uniform on the model's generators; the rows themselves for chains.
    Simple,
    /// Weights by generator label.
    Atoms { atoms: BTreeMap<String, f64> },
    /// Drive a kernel-row model by its rows.
    Chain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub n_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<Vec<usize>>,
}

/// A box of states from `lo` to `hi` (coordinates; a single index for
/// cyclic and funnel models).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl WindowConfig {
    pub fn display(&self) -> String {
        if let Some(label) = &self.label {
            return label.clone();
        }
        let parts: Vec<String> = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(lo, hi)| if lo == hi { format!("{{{lo}}}") } else { format!("{{{lo}..{hi}}}") })
            .collect();
        parts.join("x")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct InvarianceConfig {
    /// Each set is a list of points (coordinates or indices).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sets: Vec<Vec<Vec<i64>>>,
    /// Check every subset of the model's states (at most 16 states).
    #[serde(default)]
    pub exhaustive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FiberConfig {
    /// `Z1`, `Z2`, `Z3`, `Z4` or `V4`, acting on itself by translation.
    #[serde(default = "default_group")]
    pub group: String,
    /// Weights by group element; uniform when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub law: Option<BTreeMap<String, f64>>,
    #[serde(default = "default_fiber_n")]
    pub n_max: usize,
    #[serde(default = "default_identity_n")]
    pub identity_n_max: usize,
    /// Values of f on the points; the indicator of 0 when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observable: Option<Vec<f64>>,
    /// Run over every small model instead of one group.
    #[serde(default)]
    pub catalog: bool,
}

fn default_group() -> String {
    "Z2".into()
}

fn default_fiber_n() -> usize {
    3
}

fn default_identity_n() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ContrastConfig {
    pub finite: EnsembleSpec,
    pub infinite: EnsembleSpec,
}

/// Optional bounds on the main series; failing one exits with status 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    /// Upper bound on the last value of the main series.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_at_most: Option<f64>,
    /// Lower bound on every value of the main series.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub always_at_least: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    /// File stem of the CSV output; the experiment name by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub law: Option<LawConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub windows: Vec<WindowConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invariance: Option<InvarianceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fiber: Option<FiberConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boole: Option<BooleOrbitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<ContrastConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<Expectations>,
    /// Overrides the default tolerance of the experiment's checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    /// Overrides every ensemble seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputConfig>,
}

/// JSON pointer of a deserialization path.
fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for segment in path.iter() {
        let piece = match segment {
            Segment::Seq { index } => index.to_string(),
            Segment::Map { key } => key.replace('~', "~0").replace('/', "~1"),
            Segment::Enum { variant } => variant.replace('~', "~0").replace('/', "~1"),
            Segment::Unknown => continue,
        };
        out.push('/');
        out.push_str(&piece);
    }
    out
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
            pointer: pointer(e.path()),
            message: e.inner().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Sorted-key JSON without whitespace.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self)
            .expect("config serializes")
            .to_string()
    }

    /// 64-bit FNV-1a of the canonical JSON, as 16 hex digits. The output
    /// section is left out so moving a run does not change its hash.
    pub fn params_hash(&self) -> String {
        use std::hash::Hasher;
        let mut params = self.clone();
        params.output = None;
        let mut hasher = fnv::FnvHasher::default();
        hasher.write(params.canonical_json().as_bytes());
        format!("{:016x}", hasher.finish())
    }

    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<String>, n_steps: Option<usize>) {
        if let Some(seed) = seed {
            self.seed = Some(seed);
        }
        if let Some(seed) = self.seed {
            if let Some(e) = &mut self.ensemble {
                e.master_seed = seed;
            }
            if let Some(c) = &mut self.contrast {
                c.finite.master_seed = seed;
                c.infinite.master_seed = seed;
            }
        }
        if let Some(dir) = out {
            let name = self.output.take().and_then(|o| o.name);
            self.output = Some(OutputConfig { dir, name });
        }
        if let Some(n) = n_steps {
            if let Some(s) = &mut self.schedule {
                s.n_steps = n;
            }
            if let Some(e) = &mut self.ensemble {
                e.n_steps = n;
            }
            if let Some(c) = &mut self.contrast {
                c.finite.n_steps = n;
                c.infinite.n_steps = n;
            }
            if let Some(b) = &mut self.boole {
                b.horizon = n;
            }
        }
    }
}

pub fn schema_json() -> String {
    let schema = schemars::schema_for!(ExperimentConfig);
    serde_json::to_string_pretty(&schema).expect("schema serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    const EVOLVE: &str = r#"{
        "experiment": "evolve",
        "model": {"kind": "lattice", "dimension": 1, "radius": 20},
        "law": {"kind": "simple"},
        "schedule": {"n_steps": 8, "every": 1},
        "windows": [{"lo": [0], "hi": [0]}]
    }"#;

    #[test]
    fn parses_and_round_trips() {
        let config = ExperimentConfig::from_json(EVOLVE).unwrap();
        let canonical = config.canonical_json();
        let again = ExperimentConfig::from_json(&canonical).unwrap();
        assert_eq!(again.canonical_json(), canonical);
        assert_eq!(config.windows[0].display(), "{0}");
    }

    #[test]
    fn negative_steps_point_at_the_field() {
        let bad = EVOLVE.replace("\"n_steps\": 8", "\"n_steps\": -3");
        match ExperimentConfig::from_json(&bad) {
            Err(CliError::Config { pointer, .. }) => assert_eq!(pointer, "/schedule/n_steps"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = EVOLVE.replace("\"every\": 1", "\"every\": 1, \"evry\": 2");
        match ExperimentConfig::from_json(&bad) {
            Err(CliError::Config { pointer, message }) => {
                assert_eq!(pointer, "/schedule/evry");
                assert!(message.contains("evry"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_is_stable() {
        let a = ExperimentConfig::from_json(EVOLVE).unwrap();
        let b = ExperimentConfig::from_json(&EVOLVE.replace("\n", " ")).unwrap();
        assert_eq!(a.params_hash(), b.params_hash());
        let mut c = a.clone();
        c.apply_overrides(None, None, Some(9));
        assert_ne!(a.params_hash(), c.params_hash());
        let mut d = a.clone();
        d.apply_overrides(None, Some("elsewhere".into()), None);
        assert_eq!(a.params_hash(), d.params_hash());
    }

    #[test]
    fn fnv_reference() {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        h.write(b"a");
        assert_eq!(h.finish(), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn funnel_model_parses() {
        let text = r#"{"kind": "funnel", "tail": {"geometric": {"first": 0.5, "ratio": 0.5}},
                       "step_scale": 0.25, "truncation_size": 10}"#;
        let model: ModelConfig = serde_json::from_str(text).unwrap();
        assert_eq!(model.funnel_spec().unwrap().truncation_size, 10);
    }
}
