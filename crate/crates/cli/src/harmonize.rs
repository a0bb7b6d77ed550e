use std::fs;
use std::path::Path;

use harmonize_core::harmonizer::{HarmonizeConfig, HarmonizeResult, Harmonizer, RunRecord};
use harmonize_core::toy::ToyDenoiser;
use serde::Serialize;

use crate::config::{load, load_backend, read_inputs, Backend, Inputs, RunConfigFile};
use crate::exit::{io_failure, CliResult, Failure};

pub const FUSED_PNG: &str = "fused.png";
pub const RUN_RECORD: &str = "run_record.json";
pub const LOSS_TRACE: &str = "loss_trace.csv";

#[derive(Serialize)]
struct TraceRow {
    round_index: usize,
    level: usize,
    round: usize,
    evaluations: usize,
    total: f64,
    style: f64,
    content: f64,
    histogram: f64,
    tv: f64,
    weighted_style: f64,
    weighted_content: f64,
    weighted_stability: f64,
}

pub fn harmonizer<'a>(b: &'a Backend, sched: &'a harmonize_core::diffusion::NoiseSchedule) -> CliResult<Harmonizer<'a>> {
    Ok(Harmonizer::new(&b.model, &b.encoder, &b.codec, sched)?)
}

pub fn schedule(model: &ToyDenoiser) -> CliResult<harmonize_core::diffusion::NoiseSchedule> {
    Ok(model.config().schedule()?)
}

pub fn run(
    h: &Harmonizer<'_>,
    inputs: &Inputs,
    cfg: &HarmonizeConfig,
) -> CliResult<(HarmonizeResult, RunRecord)> {
    let result = h.harmonize(&inputs.background, &inputs.foreground, &inputs.mask, cfg)?;
    let record = result.run_record(h, &inputs.background, &inputs.foreground, &inputs.mask);
    Ok((result, record))
}

pub fn write_trace(path: &Path, result: &HarmonizeResult) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    for (i, (r, rec)) in result.loss_trace.iter().zip(&result.rounds).enumerate() {
        w.serialize(TraceRow {
            round_index: i,
            level: rec.level,
            round: rec.round,
            evaluations: rec.evaluations,
            total: r.total,
            style: r.style,
            content: r.content,
            histogram: r.histogram,
            tv: r.tv,
            weighted_style: r.weighted_style,
            weighted_content: r.weighted_content,
            weighted_stability: r.weighted_stability,
        })
        .map_err(|e| Failure::config(e.to_string()))?;
    }
    w.flush().map_err(|e| io_failure(path, e))
}

pub fn cmd_harmonize(config_path: &Path, seed: Option<u64>, strict_paper: bool) -> CliResult<()> {
    let mut file: RunConfigFile = load(config_path)?;
    if let Some(s) = seed {
        file.harmonize.seed = s;
    }
    file.harmonize.strict_paper |= strict_paper;
    let inputs = read_inputs(&file.foreground, &file.background, &file.mask)?;
    let backend = load_backend(&file.backend, file.codec_factor)?;
    let sched = schedule(&backend.model)?;
    let h = harmonizer(&backend, &sched)?;
    let (result, record) = run(&h, &inputs, &file.harmonize)?;

    let out = &file.output_dir;
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    result.fused_image.write_png(out.join(FUSED_PNG))?;
    let json = serde_json::to_string_pretty(&record).map_err(|e| Failure::config(e.to_string()))?;
    fs::write(out.join(RUN_RECORD), json).map_err(|e| io_failure(out, e))?;
    write_trace(&out.join(LOSS_TRACE), &result)?;
    log::info!(
        "harmonized in {:.1}s; final loss {:.4e}",
        result.timing.total_secs,
        result.final_report.total
    );
    Ok(())
}
