//! Layering of defaults, the config file and flags.

use std::fs;

use anyhow::{Context, Result};
use serde_json::{Map, Value};

use addit_core::model::ModelConfig;
use addit_core::pipeline::{Mode, PipelineConfig};
use addit_core::Error;

use crate::{GlobalOpts, ModeArg};

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn section(file: &Value, name: &str) -> Value {
    file.get(name).cloned().unwrap_or(Value::Object(Map::new()))
}

/// Defaults, overlaid with the config file, overlaid with flags. The mode
/// picks the default `t_struct`.
pub fn resolve(opts: &GlobalOpts) -> Result<(ModelConfig, PipelineConfig)> {
    let file: Value = match &opts.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => Value::Object(Map::new()),
    };
    if !file.is_object() {
        return Err(Error::Config("config file must hold a JSON object".into()).into());
    }

    let model: ModelConfig = serde_json::from_value(section(&file, "model"))
        .map_err(|e| Error::Config(format!("model section: {e}")))?;
    model.validate()?;

    let pipeline_patch = section(&file, "pipeline");
    let file_mode = pipeline_patch
        .get("mode")
        .cloned()
        .map(serde_json::from_value::<Mode>)
        .transpose()
        .map_err(|e| Error::Config(format!("pipeline.mode: {e}")))?;
    let mode = match opts.mode {
        Some(ModeArg::Generated) => Mode::Generated,
        Some(ModeArg::Real) => Mode::Real,
        None => file_mode.unwrap_or(Mode::Generated),
    };
    let base = match mode {
        Mode::Generated => PipelineConfig::default(),
        Mode::Real => PipelineConfig::real(),
    };
    let mut value = serde_json::to_value(&base)?;
    merge(&mut value, &pipeline_patch);
    let mut pipeline: PipelineConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("pipeline section: {e}")))?;
    pipeline.mode = mode;

    if let Some(t) = opts.t_struct {
        pipeline.t_struct = Some(t);
    }
    if let Some(t) = opts.t_blend {
        pipeline.t_blend = Some(t);
    }
    if let Some(g) = opts.gamma {
        pipeline.gamma = g;
    }
    if let Some(t) = opts.ext_multi_until {
        pipeline.extension.multi_stream_until = t;
    }
    if let Some(t) = opts.ext_single_until {
        pipeline.extension.single_stream_until = t;
    }
    if let Some(n) = opts.steps {
        pipeline.num_steps = n;
    }
    if let Some(s) = opts.seed {
        pipeline.target_seed = s;
    }
    if let Some(s) = opts.source_seed {
        pipeline.source_seed = Some(s);
    }
    pipeline.validate()?;
    Ok((model, pipeline))
}
