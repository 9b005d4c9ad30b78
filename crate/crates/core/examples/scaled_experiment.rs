//! Trains the desk-scale model on synthetic stroke phantoms and reports
//! held-out PSNR/SSIM for the noisy inputs and the model outputs.
//!
//! `EPOCHS=32 cargo run --release -p pawave --example scaled_experiment`

use std::time::Instant;

use pawave::checkpoint;
use pawave::metrics::{self, MetricConstants};
use pawave::phantom::{self, DegradationPreset, FluenceLabel, PhantomSpec};
use pawave::train::{self, TrainConfig};
use pawave::{build_model, model, Image, ModelConfig};

fn main() -> pawave::Result<()> {
    let epochs: usize = std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(256);
    let scenes: Vec<PhantomSpec> = (0..200).map(|s| PhantomSpec::strokes(64, 4, s)).collect();
    let preset = DegradationPreset::custom(FluenceLabel::mj(0.25), 0.5, 0.2)?;
    let data = phantom::build_dataset(&scenes, &[preset], 1)?.normalized();
    let cfg = TrainConfig {
        epochs,
        seed: 1,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train::train(build_model(ModelConfig::desk(), 1)?, &data, &cfg)?;
    if let Ok(path) = std::env::var("CHECKPOINT") {
        checkpoint::save(&out.params, path)?;
    }
    for e in &out.log {
        println!(
            "epoch {:3} train {:10.4} test {:10.4}",
            e.epoch,
            e.train,
            e.test.unwrap_or(f64::NAN)
        );
    }
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());

    let c = MetricConstants::default();
    let (mut pn, mut po, mut sn, mut so) = (0.0, 0.0, 0.0, 0.0);
    for p in &out.split.test.pairs {
        let y = model::forward(&out.params, &p.noisy.to_tensor())?;
        let y = Image::from_tensor(&y, 0, p.noisy.spacing_mm())?;
        let n = metrics::evaluate_pair("noisy", &p.noisy, &p.clean, c)?;
        let o = metrics::evaluate_pair("output", &y, &p.clean, c)?;
        pn += n.psnr_db.and_then(|d| d.value()).unwrap_or(f64::NAN);
        po += o.psnr_db.and_then(|d| d.value()).unwrap_or(f64::NAN);
        sn += n.ssim.unwrap_or(f64::NAN);
        so += o.ssim.unwrap_or(f64::NAN);
    }
    let k = out.split.test.len() as f64;
    println!(
        "psnr noisy {:.3} output {:.3}; ssim noisy {:.4} output {:.4}",
        pn / k,
        po / k,
        sn / k,
        so / k
    );
    depth_cnr(&out.params)
}

/// CNR per target depth before and after denoising, for each LED preset.
fn depth_cnr(params: &pawave::ModelParams) -> pawave::Result<()> {
    let mu: f64 = std::env::var("ATTENUATION").ok().and_then(|v| v.parse().ok()).unwrap_or(0.03);
    let spec = PhantomSpec::depth_targets(mu, 5);
    let clean = phantom::generate_frame(&spec, 0)?;
    for preset in phantom::LED_PRESETS {
        let noisy = train::normalize(&phantom::degrade_with_attenuation(&clean, &preset, mu, 9)?);
        let y = model::forward(params, &noisy.to_tensor())?;
        let output = metrics::clamp_unit(&Image::from_tensor(&y, 0, noisy.spacing_mm())?);
        for d in phantom::depth_rois(&spec, &clean)? {
            let before = metrics::cnr(&noisy, &d.objects, &d.backgrounds)?;
            let after = metrics::cnr(&output, &d.objects, &d.backgrounds)?;
            println!("{} depth {:5.1} mm: noisy {before} output {after}", preset.label, d.depth_mm);
        }
    }
    Ok(())
}
