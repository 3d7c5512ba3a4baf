//! Prints per-tissue ROI statistics and SelfSSIM of generated phantoms.

use ctxlate::evaluation::{emit_report, PatientVolumes, ReportInputs, VolumeInput};
use ctxlate::phantom::{select_rois, DatasetSpec, Tissue};

fn main() -> ctxlate::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let mut spec = DatasetSpec::default();
    if let Ok(text) = std::env::var("DEGRADATION") {
        let mut base = serde_json::to_value(&spec.degradation).unwrap();
        let patch: serde_json::Value = serde_json::from_str(&text).unwrap();
        for (k, v) in patch.as_object().unwrap() {
            base[k] = v.clone();
        }
        spec.degradation = serde_json::from_value(base).unwrap();
    }
    let mut patients = Vec::new();
    for i in 0..n {
        let (truth, cbct) = spec.generate_patient(i)?;
        patients.push(PatientVolumes {
            patient_id: truth.spec.patient_id.clone(),
            rois: select_rois(&truth.labels, spec.rois_per_class, spec.roi_size),
            volumes: vec![
                VolumeInput { role: "truth".into(), volume: truth.volume.clone(), source: None },
                VolumeInput { role: "cbct".into(), volume: cbct, source: None },
            ],
            cycle: None,
        });
    }
    let mut inputs = ReportInputs::new(patients);
    inputs.write_json = false;
    inputs.write_csv = false;
    inputs.write_plots = false;
    let report = emit_report(&inputs, std::env::temp_dir().join("phantom_stats"))?;
    for role in ["truth", "cbct"] {
        for t in Tissue::SOFT {
            if let Some(s) = report.tissue(role, t) {
                println!("{role:6} {:9} mean {:8.1} sd {:6.1} n {}", t.name(), s.mean_hu, s.sd_hu, s.n_rois);
            }
        }
        let s = report.self_ssim_of(role).unwrap();
        println!("{role:6} selfssim {:.3} +- {:.3}", s.mean, s.sd);
    }
    Ok(())
}
