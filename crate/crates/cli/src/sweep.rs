use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use harmonize_core::harmonizer::HarmonizeConfig;
use harmonize_core::metrics::{psnr_region, Region};
use serde::Serialize;

use crate::config::{load, load_backend, Axis, AxisValue, Inputs, SweepSpec, MAX_SWEEP_RUNS};
use crate::exit::{io_failure, CliResult, Failure, SWEEP};
use crate::harmonize::{harmonizer, run, schedule};
use crate::plot;

pub const METRICS_CSV: &str = "metrics.csv";

/// One row of the sweep table. Loss and PSNR columns are empty for failed runs.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsRow {
    pub run: usize,
    pub fixture: String,
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub status: String,
    pub error: String,
    pub total: Option<f64>,
    pub style: Option<f64>,
    pub content: Option<f64>,
    pub histogram: Option<f64>,
    pub tv: Option<f64>,
    pub fg_psnr: Option<f64>,
    pub bg_psnr: Option<f64>,
    pub seconds: Option<f64>,
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::TAugRatio => "t_aug_ratio",
        Axis::OmegaSty => "omega_sty",
        Axis::OmegaC => "omega_c",
        Axis::OmegaSta => "omega_sta",
        Axis::Prompt => "prompt",
    }
}

/// `base` with the axis set to `value`.
pub fn apply_axis(base: &HarmonizeConfig, axis: Axis, value: &AxisValue, num_steps: usize) -> CliResult<HarmonizeConfig> {
    let mut cfg = base.clone();
    let number = || match value {
        AxisValue::Number(v) if v.is_finite() => Ok(*v),
        _ => Err(Failure::config(format!("{} needs numeric values, got {:?}", axis_name(axis), value.label()))),
    };
    match axis {
        Axis::TAugRatio => {
            let r = number()?;
            cfg.t_aug = Some(((r * num_steps as f64) + 1e-9).floor().max(1.0) as usize);
        }
        Axis::OmegaSty => cfg.weights.omega_sty = number()?,
        Axis::OmegaC => cfg.weights.omega_c = number()?,
        Axis::OmegaSta => cfg.weights.omega_sta = number()?,
        Axis::Prompt => match value {
            AxisValue::Text(s) => cfg.prompt = s.clone(),
            AxisValue::Number(_) => return Err(Failure::config("prompt axis needs string values")),
        },
    }
    Ok(cfg)
}

pub fn cmd_sweep(spec_path: &Path, jobs: usize, seed: Option<u64>, strict_paper: bool) -> CliResult<()> {
    let mut spec: SweepSpec = load(spec_path)?;
    if let Some(s) = seed {
        spec.seeds = vec![s];
    }
    spec.base.strict_paper |= strict_paper;
    if spec.values.is_empty() {
        return Err(Failure::config("values: sweep axis has no values"));
    }
    if spec.seeds.is_empty() {
        return Err(Failure::config("seeds: sweep needs at least one seed"));
    }
    if spec.fixtures.is_empty() {
        return Err(Failure::config("fixtures: sweep needs at least one fixture"));
    }
    let count = spec.values.len() * spec.seeds.len() * spec.fixtures.len();
    if count > MAX_SWEEP_RUNS {
        return Err(Failure::config(format!("sweep has {count} runs, the cap is {MAX_SWEEP_RUNS}")));
    }

    let backend = load_backend(&spec.backend, spec.codec_factor)?;
    let sched = schedule(&backend.model)?;
    let h = harmonizer(&backend, &sched)?;
    let fixtures: Vec<(String, Inputs)> = spec
        .fixtures
        .iter()
        .map(|f| Ok((f.name(), f.materialize()?)))
        .collect::<CliResult<_>>()?;
    let mut plan = Vec::with_capacity(count);
    for (fi, _) in fixtures.iter().enumerate() {
        for value in &spec.values {
            let cfg = apply_axis(&spec.base, spec.axis, value, sched.num_steps())?;
            for &s in &spec.seeds {
                plan.push((fi, value.label(), HarmonizeConfig { seed: s, ..cfg.clone() }));
            }
        }
    }

    let next = AtomicUsize::new(0);
    let rows = Mutex::new(Vec::with_capacity(count));
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, count) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((fi, label, cfg)) = plan.get(i) else { break };
                let (name, inputs) = &fixtures[*fi];
                let mut row = MetricsRow {
                    run: i,
                    fixture: name.clone(),
                    axis: axis_name(spec.axis).into(),
                    value: label.clone(),
                    seed: cfg.seed,
                    status: "ok".into(),
                    error: String::new(),
                    total: None,
                    style: None,
                    content: None,
                    histogram: None,
                    tv: None,
                    fg_psnr: None,
                    bg_psnr: None,
                    seconds: None,
                };
                let measured = run(&h, inputs, cfg).and_then(|(res, _)| {
                    let fg = psnr_region(&res.fused_image, &inputs.foreground, Some(&inputs.mask), Region::Inside)?;
                    let bg = psnr_region(&res.fused_image, &inputs.background, Some(&inputs.mask), Region::Outside)?;
                    Ok((res, fg, bg))
                });
                match measured {
                    Ok((res, fg, bg)) => {
                        let r = res.final_report;
                        row.total = Some(r.total);
                        row.style = Some(r.style);
                        row.content = Some(r.content);
                        row.histogram = Some(r.histogram);
                        row.tv = Some(r.tv);
                        row.fg_psnr = Some(fg);
                        row.bg_psnr = Some(bg);
                        row.seconds = Some(res.timing.total_secs);
                    }
                    Err(f) => {
                        log::warn!("run {i} failed: {f}");
                        row.status = "failed".into();
                        row.error = f.message;
                    }
                }
                rows.lock().expect("rows lock").push(row);
            });
        }
    });
    let mut rows = rows.into_inner().expect("rows lock");
    rows.sort_by_key(|r| r.run);

    let out = &spec.output_dir;
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let path = out.join(METRICS_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Failure::config(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Failure::config(e.to_string()))?;
    }
    w.flush().map_err(|e| io_failure(&path, e))?;
    let labels: Vec<String> = spec.values.iter().map(AxisValue::label).collect();
    plot::write_summary_plots(out, axis_name(spec.axis), &labels, &rows)?;

    let ok = rows.iter().filter(|r| r.status == "ok").count();
    if ok * 10 < rows.len() * 9 {
        return Err(Failure {
            code: SWEEP,
            message: format!("only {ok} of {} runs succeeded", rows.len()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_aug_ratio_floors_against_schedule_length() {
        let base = HarmonizeConfig::default();
        let at = |r: f64| apply_axis(&base, Axis::TAugRatio, &AxisValue::Number(r), 100).unwrap().t_aug;
        assert_eq!(at(0.3), Some(30));
        assert_eq!(at(0.29), Some(29));
        assert_eq!(at(0.001), Some(1));
    }

    #[test]
    fn weight_and_prompt_axes_set_one_field() {
        let base = HarmonizeConfig::default();
        let c = apply_axis(&base, Axis::OmegaC, &AxisValue::Number(1e12), 100).unwrap();
        assert_eq!(c.weights.omega_c, 1e12);
        assert_eq!(c.weights.omega_sty, base.weights.omega_sty);
        let p = apply_axis(&base, Axis::Prompt, &AxisValue::Text("disc".into()), 100).unwrap();
        assert_eq!(p.prompt, "disc");
    }

    #[test]
    fn mistyped_values_are_rejected() {
        let base = HarmonizeConfig::default();
        assert!(apply_axis(&base, Axis::OmegaSty, &AxisValue::Text("big".into()), 100).is_err());
        assert!(apply_axis(&base, Axis::Prompt, &AxisValue::Number(1.0), 100).is_err());
        assert!(apply_axis(&base, Axis::OmegaSta, &AxisValue::Number(f64::NAN), 100).is_err());
    }
}
