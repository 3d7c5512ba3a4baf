//! Trains on generated phantoms and reports held-out tissue accuracy.
//!
//! Usage: desk_run <n_train> <n_test> '<config json patch>'

use std::time::Instant;

use ctxlate::evaluation::{emit_report, PatientVolumes, ReportInputs, VolumeInput};
use ctxlate::phantom::{select_rois, DatasetSpec, Tissue};
use ctxlate::preprocess::masked_scaled_slices;
use ctxlate::trainer::{load_checkpoint, run_training, TrainConfig, TrainingSet};
use ctxlate::translator::{air_dice, Direction, Translator};

fn main() -> ctxlate::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let n_test: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let patch = args.get(3).cloned().unwrap_or_else(|| "{}".into());
    let mut cfg = TrainConfig::from_json(&patch)?;
    cfg.out_dir = std::env::temp_dir().join(format!("desk_run_{}", cfg.seed));
    let spec = DatasetSpec::default();

    let mut data = TrainingSet { cb: Vec::new(), plan: Vec::new() };
    for i in 0..n_train {
        let (truth, cbct) = spec.generate_patient(i)?;
        data.cb.extend(masked_scaled_slices(&cbct, cfg.mask_mode)?);
        data.plan.extend(masked_scaled_slices(&truth.volume, cfg.mask_mode)?);
    }
    let state = match std::env::var("CKPT") {
        Ok(path) => load_checkpoint(path)?,
        Err(_) => {
            let start = Instant::now();
            let outcome = run_training(&cfg, &data, None)?;
            println!("trained {} iterations in {:.0}s", outcome.state.iteration, start.elapsed().as_secs_f64());
            outcome.state
        }
    };
    println!("epoch cycle means {:?}", state.epoch_cycle_means);

    let translator = Translator::new(state.g_cp, state.g_pc).with_crop(Some(cfg.crop));
    let mut patients = Vec::new();
    let mut dice = Vec::new();
    for i in n_train..n_train + n_test {
        let (truth, cbct) = spec.generate_patient(i)?;
        let syn = translator.translate_volume(&cbct, Direction::CToP)?;
        for p in translator.translate_scaled(&cbct, Direction::CToP)? {
            dice.push(air_dice(p.input.view(), p.output.view(), -0.9)?);
        }
        patients.push(PatientVolumes {
            patient_id: truth.spec.patient_id.clone(),
            rois: select_rois(&truth.labels, spec.rois_per_class, spec.roi_size),
            volumes: vec![
                VolumeInput { role: "truth".into(), volume: truth.volume.clone(), source: None },
                VolumeInput { role: "cbct".into(), volume: cbct, source: None },
                VolumeInput { role: "synplanct".into(), volume: syn, source: None },
            ],
            cycle: None,
        });
    }
    let mut inputs = ReportInputs::new(patients);
    inputs.write_plots = true;
    let report = emit_report(&inputs, cfg.out_dir.join("eval"))?;
    for role in ["truth", "cbct", "synplanct"] {
        for t in Tissue::SOFT {
            if let Some(s) = report.tissue(role, t) {
                println!("{role:9} {:9} mean {:8.1} sd {:6.1} gap {:?}", t.name(), s.mean_hu, s.sd_hu, s.gap_to_truth_hu);
            }
        }
        let s = report.self_ssim_of(role).unwrap();
        println!("{role:9} selfssim {:.3} +- {:.3}", s.mean, s.sd);
    }
    let min = dice.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = dice.iter().sum::<f64>() / dice.len() as f64;
    println!("air dice mean {mean:.4} min {min:.4}");
    Ok(())
}

