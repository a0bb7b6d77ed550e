use std::fs;
use std::path::Path;

use harmonize_core::toy::{save_snapshot, train_toy};
use harmonize_core::Error;
use serde::Serialize;

use crate::config::{load, TrainConfigFile};
use crate::exit::{io_failure, CliResult, Failure};

pub const SNAPSHOT: &str = "toy.snap";
pub const CHECKPOINT: &str = "toy.checkpoint.snap";
pub const LOSS_CSV: &str = "training_loss.csv";
pub const SUMMARY: &str = "train_summary.json";

#[derive(Serialize)]
struct Summary {
    content_hash: String,
    initial_eval_mse: f64,
    final_eval_mse: f64,
    mismatched_eval_mse: f64,
    seconds: f64,
}

pub fn cmd_train_toy(config_path: &Path, seed: Option<u64>) -> CliResult<()> {
    let mut file: TrainConfigFile = load(config_path)?;
    if let Some(s) = seed {
        file.train.seed = s;
    }
    let out = &file.output_dir;
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let start = std::time::Instant::now();
    let outcome = match train_toy(&file.train) {
        Ok(o) => o,
        Err(Error::Training {
            epoch,
            message,
            checkpoint,
        }) => {
            if let Some(model) = checkpoint {
                save_snapshot(&model, Some(file.train.dataset), out.join(CHECKPOINT))?;
            }
            return Err(Error::Training {
                epoch,
                message,
                checkpoint: None,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    let header = save_snapshot(&outcome.model, Some(file.train.dataset), out.join(SNAPSHOT))?;

    let path = out.join(LOSS_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Failure::config(e.to_string()))?;
    w.write_record(["epoch", "eps_mse"]).map_err(|e| Failure::config(e.to_string()))?;
    for (i, l) in outcome.epoch_losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(|e| Failure::config(e.to_string()))?;
    }
    w.flush().map_err(|e| io_failure(&path, e))?;

    let summary = Summary {
        content_hash: header.content_hash,
        initial_eval_mse: outcome.initial_eval_mse,
        final_eval_mse: outcome.final_eval_mse,
        mismatched_eval_mse: outcome.mismatched_eval_mse,
        seconds: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Failure::config(e.to_string()))?;
    fs::write(out.join(SUMMARY), json).map_err(|e| io_failure(out, e))?;
    Ok(())
}
