//! Run configuration files (JSON) and dotted-key overrides.
//!
//! A run is described by one JSON document; `--set key.path=value` overrides
//! individual fields before deserialization, and unknown keys are rejected.

use std::path::Path;

use distillkit_core::distill::{DistillPlan, DistillSuite};
use distillkit_core::encoder::EncoderConfig;
use distillkit_core::train::RunConfig;
use serde::{Deserialize, Serialize};

use crate::{IoError, Result};

/// Serializable distillation-plan settings; the projection matrices and the
/// layer map are materialized from the model shapes at run time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    pub suite: DistillSuite,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphas: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mobile_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub swap_attention_kl: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paper_exact: Option<bool>,
}

impl PlanSpec {
    /// Materialize the plan for a student/teacher pair.
    pub fn build(
        &self,
        student: &EncoderConfig,
        teacher: &EncoderConfig,
        seed: u64,
    ) -> distillkit_core::Result<DistillPlan> {
        let mut plan = DistillPlan::build(self.suite, student, teacher, seed)?;
        if let Some(a) = self.alphas {
            plan.alphas = a;
        }
        if let Some(a) = self.mobile_alpha {
            plan.mobile_alpha = a;
        }
        if let Some(l) = &self.lambdas {
            plan.lambdas = l.clone();
        }
        if let Some(t) = self.temperature {
            plan.temperature = t;
        }
        if let Some(s) = self.swap_attention_kl {
            plan.swap_attention_kl = s;
        }
        if let Some(p) = self.paper_exact {
            plan.paper_exact = p;
        }
        plan.validate()?;
        Ok(plan)
    }
}

/// One run described as a JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub run: RunConfig,
    /// Vocabulary file (one token per line).
    pub vocab: String,
    /// Student architecture (distillation, or pretraining from scratch).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub student: Option<EncoderConfig>,
    /// Teacher checkpoint (distillation).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<String>,
    /// Starting checkpoint (pretraining and fine-tuning).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanSpec>,
    /// Plain-text MLM corpus (distillation and pretraining).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
    /// Held-out MLM corpus for evaluation points.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout: Option<String>,
    /// Labelled dataset (fine-tuning): CoNLL for token tasks, TSV pairs for
    /// sequence tasks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub output_dir: String,
}

/// Parse `key.path=value` into path segments and a JSON value; bare words
/// become strings.
fn parse_override(raw: &str) -> Result<(Vec<String>, serde_json::Value)> {
    let Some((key, value)) = raw.split_once('=') else {
        return Err(IoError::format("--set", format!("expected key=value, got {raw:?}")));
    };
    let segments: Vec<String> = key.split('.').map(|s| s.to_string()).collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(IoError::format("--set", format!("empty key segment in {key:?}")));
    }
    let parsed = serde_json::from_str(value)
        .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
    Ok((segments, parsed))
}

fn apply_override(
    root: &mut serde_json::Value,
    path: &[String],
    value: serde_json::Value,
) -> Result<()> {
    let mut node = root;
    for (i, segment) in path.iter().enumerate() {
        let last = i + 1 == path.len();
        match node {
            serde_json::Value::Object(map) => {
                if last {
                    map.insert(segment.clone(), value);
                    return Ok(());
                }
                node = map
                    .entry(segment.clone())
                    .or_insert_with(|| serde_json::Value::Object(Default::default()));
            }
            serde_json::Value::Array(items) => {
                let idx: usize = segment.parse().map_err(|_| {
                    IoError::format("--set", format!("{segment:?} is not an array index"))
                })?;
                if idx >= items.len() {
                    return Err(IoError::format(
                        "--set",
                        format!("index {idx} out of bounds ({} items)", items.len()),
                    ));
                }
                if last {
                    items[idx] = value;
                    return Ok(());
                }
                node = &mut items[idx];
            }
            _ => {
                return Err(IoError::format(
                    "--set",
                    format!("cannot descend into scalar at {segment:?}"),
                ))
            }
        }
    }
    unreachable!("override paths are never empty")
}

/// Load a run spec, apply dotted overrides, and deserialize strictly
/// (unknown keys are errors).
pub fn load_run_spec(path: &Path, overrides: &[String]) -> Result<RunSpec> {
    let text =
        std::fs::read_to_string(path).map_err(|e| IoError::file(path.display().to_string(), e))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| IoError::format(path.display().to_string(), e.to_string()))?;
    for raw in overrides {
        let (segments, v) = parse_override(raw)?;
        apply_override(&mut value, &segments, v)?;
    }
    let spec: RunSpec = serde_json::from_value(value)
        .map_err(|e| IoError::format(path.display().to_string(), e.to_string()))?;
    spec.run.validate()?;
    Ok(spec)
}

/// The fully resolved configuration as a JSON value (for manifests; feeding
/// it back reproduces the run).
pub fn resolved_json(spec: &RunSpec) -> serde_json::Value {
    serde_json::to_value(spec).expect("run spec serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use distillkit_core::corpus::MaskPolicy;
    use distillkit_core::train::RunMode;

    fn base_spec() -> RunSpec {
        RunSpec {
            run: RunConfig {
                mode: RunMode::Distill,
                steps: 100,
                epochs: 0,
                batch_size: 4,
                learning_rate: 5e-4,
                warmup_fraction: 0.06,
                seed: 7,
                eval_every: 50,
                max_len: 32,
                dropout: 0.1,
                grad_clip: 1.0,
                weight_decay: 0.01,
                mask_policy: MaskPolicy::default(),
            },
            vocab: "vocab.txt".into(),
            student: None,
            teacher_checkpoint: Some("teacher.ckpt".into()),
            init_checkpoint: None,
            plan: Some(PlanSpec {
                suite: DistillSuite::DistilTriple,
                alphas: None,
                mobile_alpha: None,
                lambdas: None,
                temperature: None,
                swap_attention_kl: None,
                paper_exact: None,
            }),
            corpus: Some("corpus.txt".into()),
            heldout: None,
            dataset: None,
            output_dir: "out".into(),
        }
    }

    #[test]
    fn overrides_change_nested_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, serde_json::to_string(&base_spec()).unwrap()).unwrap();
        let spec = load_run_spec(
            &path,
            &["plan.suite=\"tiny_layerwise\"".into(), "run.steps=7".into(), "run.seed=9".into()],
        )
        .unwrap();
        assert_eq!(spec.plan.unwrap().suite, DistillSuite::TinyLayerwise);
        assert_eq!(spec.run.steps, 7);
        assert_eq!(spec.run.seed, 9);
        // bare strings work without JSON quoting
        let spec = load_run_spec(&path, &["plan.suite=compact_hybrid".into()]).unwrap();
        assert_eq!(spec.plan.unwrap().suite, DistillSuite::CompactHybrid);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut value = serde_json::to_value(base_spec()).unwrap();
        value["no_such_key"] = serde_json::json!(1);
        std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        assert!(load_run_spec(&path, &[]).is_err());
        // unknown keys introduced by overrides are rejected too
        std::fs::write(&path, serde_json::to_string(&base_spec()).unwrap()).unwrap();
        assert!(load_run_spec(&path, &["run.no_such=1".into()]).is_err());
    }

    #[test]
    fn resolved_config_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, serde_json::to_string(&base_spec()).unwrap()).unwrap();
        let spec = load_run_spec(&path, &["run.steps=3".into()]).unwrap();
        // writing the resolved config back and reloading reproduces it
        let resolved = resolved_json(&spec);
        let path2 = dir.path().join("resolved.json");
        std::fs::write(&path2, serde_json::to_string(&resolved).unwrap()).unwrap();
        let again = load_run_spec(&path2, &[]).unwrap();
        assert_eq!(serde_json::to_value(&again).unwrap(), resolved);
    }

    #[test]
    fn malformed_overrides_error() {
        assert!(parse_override("no_equals").is_err());
        assert!(parse_override(".bad=1").is_err());
    }
}
