//! Preset, then `--config` JSON, then individual flags.

use std::fs;
use std::path::Path;

use ade_core::pipeline::PipelineConfig;
use serde_json::Value;

use crate::commands::CliError;
use crate::{ConfigFlags, Preset};

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn resolve(preset: Preset, file: Option<&Path>, flags: &ConfigFlags) -> Result<PipelineConfig, CliError> {
    let base = match preset {
        Preset::Desk => PipelineConfig::default(),
        Preset::Reference => PipelineConfig::reference(),
    };
    let mut config = match file {
        None => base,
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let over: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let mut merged = serde_json::to_value(&base).expect("config serializes");
            merge(&mut merged, over);
            serde_json::from_value(merged).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        }
    };
    apply(&mut config, flags);
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

fn apply(c: &mut PipelineConfig, f: &ConfigFlags) {
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = f.$flag { c.$($field).+ = v.into(); })*
        };
    }
    set! {
        seed => seed,
        classifier_k => classifier_k,
        qa_k => qa_k,
        threshold => threshold,
        max_answer_len => max_answer_len,
        min_count => min_count,
        relevance_epochs => relevance.epochs,
        relevance_lr => relevance.lr,
        relevance_dim => relevance.dim,
        relevance_hidden => relevance.hidden,
        relevance_batch_size => relevance.batch_size,
        qa_epochs => qa.epochs,
        qa_lr => qa.lr,
        qa_dim => qa.dim,
        qa_batch_size => qa.batch_size,
        label_smoothing => qa.label_smoothing,
        match_selection => match_selection,
        multi_pair => multi_pair,
    }
}
