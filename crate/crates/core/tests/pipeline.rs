//! Public-API round trip on a tiny untrained toy model: snapshot save/load,
//! harmonization with a codec factor of 2, and the run record.

use harmonize_core::codec::SpaceToDepth;
use harmonize_core::diffusion::{DenoiserBackend, Sampler};
use harmonize_core::harmonizer::{HarmonizeConfig, Harmonizer};
use harmonize_core::toy::{load_snapshot, save_snapshot, texture_fixture, StubTextEncoder, ToyConfig, ToyDenoiser};

fn tiny() -> ToyDenoiser {
    let cfg = ToyConfig {
        base_width: 4,
        text_dim: 8,
        attn_dim: 4,
        time_dim: 8,
        num_steps: 20,
        in_channels: 12,
        ..ToyConfig::default()
    };
    ToyDenoiser::init(cfg, 9).freeze()
}

fn quick(seed: u64) -> HarmonizeConfig {
    HarmonizeConfig {
        seed,
        inner_rounds: 2,
        sampler: Sampler::Deterministic,
        ..HarmonizeConfig::default()
    }
}

#[test]
fn snapshot_round_trip_preserves_harmonization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.snap");
    let model = tiny();
    save_snapshot(&model, None, &path).unwrap();
    let (loaded, _) = load_snapshot(&path).unwrap();
    assert_eq!(model.snapshot_hash(), loaded.snapshot_hash());

    let sched = model.config().schedule().unwrap();
    let enc = StubTextEncoder::new(model.config().text_dim, model.config().text_seed);
    let codec = SpaceToDepth::new(2).unwrap();
    let fx = texture_fixture(16, 0);

    let a = Harmonizer::new(&model, &enc, &codec, &sched)
        .unwrap()
        .harmonize(&fx.background, &fx.foreground, &fx.mask, &quick(3))
        .unwrap();
    let b = Harmonizer::new(&loaded, &enc, &codec, &sched)
        .unwrap()
        .harmonize(&fx.background, &fx.foreground, &fx.mask, &quick(3))
        .unwrap();
    assert_eq!(a.fused_image, b.fused_image);
    assert_eq!(a.loss_trace.len(), a.t_aug * 2);
    assert!(a.fused_image.all_finite());
    assert!(a.final_report.satisfies_decomposition(&a.config.weights));
}

#[test]
fn run_record_names_inputs_and_design() {
    let model = tiny();
    let sched = model.config().schedule().unwrap();
    let enc = StubTextEncoder::new(model.config().text_dim, model.config().text_seed);
    let codec = SpaceToDepth::new(2).unwrap();
    let fx = texture_fixture(16, 1);
    let h = Harmonizer::new(&model, &enc, &codec, &sched).unwrap();
    let mut cfg = quick(0);
    cfg.refinement.enabled = false;
    let r = h.harmonize(&fx.background, &fx.foreground, &fx.mask, &cfg).unwrap();
    let record = r.run_record(&h, &fx.background, &fx.foreground, &fx.mask);
    let json = serde_json::to_value(&record).unwrap();
    assert!(json["hashes"].is_object());
    assert!(json["design"].is_object());
    assert_eq!(json["t_aug"], serde_json::json!(r.t_aug));
}
