//! Evaluation report: JSON summary, per-ROI CSV and figure-style plots.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::plots::{Plot, BLUE, GREEN, RED};
use super::{
    centered_rois, cycle_difference_image, roi_image, roi_stats, self_ssim, volume_histogram, CycleDifferenceSummary,
    DEFAULT_HISTOGRAM_BINS, DEFAULT_HISTOGRAM_RANGE,
};
use crate::error::{Error, Result};
use crate::phantom::{Roi, Tissue};
use crate::preprocess::clip_and_scale_value;
use crate::volume::CtVolume;

pub const REPORT_VERSION: u32 = 1;

/// One volume under evaluation, e.g. role `truth`, `synplanct` or `cbct`.
#[derive(Clone, Debug)]
pub struct VolumeInput {
    pub role: String,
    pub volume: CtVolume,
    pub source: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct PatientVolumes {
    pub patient_id: String,
    pub rois: Vec<Roi>,
    pub volumes: Vec<VolumeInput>,
    /// Preprocessed input and its cyclic reconstruction, both in HU.
    pub cycle: Option<(CtVolume, CtVolume)>,
}

#[derive(Clone, Debug)]
pub struct ReportInputs {
    pub patients: Vec<PatientVolumes>,
    pub checkpoint: Option<String>,
    /// Side of the centered SelfSSIM windows.
    pub self_ssim_size: usize,
    /// Number of SelfSSIM windows per role.
    pub self_ssim_count: usize,
    pub histogram_bins: usize,
    pub histogram_range: (f64, f64),
    pub write_json: bool,
    pub write_csv: bool,
    pub write_plots: bool,
}

impl ReportInputs {
    pub fn new(patients: Vec<PatientVolumes>) -> Self {
        ReportInputs {
            patients,
            checkpoint: None,
            self_ssim_size: 32,
            self_ssim_count: 30,
            histogram_bins: DEFAULT_HISTOGRAM_BINS,
            histogram_range: DEFAULT_HISTOGRAM_RANGE,
            write_json: true,
            write_csv: true,
            write_plots: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiRecord {
    pub volume: String,
    pub patient_id: String,
    pub role: String,
    pub roi_id: String,
    pub tissue: Tissue,
    pub slice: usize,
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    pub mean_hu: f64,
    pub sd_hu: f64,
}

/// Per role and tissue: the mean of ROI means and the mean of ROI sds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueSummary {
    pub role: String,
    pub tissue: Tissue,
    pub n_rois: usize,
    pub mean_hu: f64,
    pub sd_hu: f64,
    /// `mean_hu` minus the `truth` role's value, when a truth role exists.
    pub gap_to_truth_hu: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRecord {
    pub patient_id: String,
    pub role: String,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfSsimRecord {
    pub role: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub patient_id: String,
    pub summary: CycleDifferenceSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub volumes: Vec<String>,
    pub checkpoint: Option<String>,
    pub self_ssim_sampling: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub provenance: Provenance,
    pub rois: Vec<RoiRecord>,
    pub tissues: Vec<TissueSummary>,
    pub histograms: Vec<HistogramRecord>,
    pub self_ssim: Vec<SelfSsimRecord>,
    pub cycle_difference: Vec<CycleRecord>,
}

impl EvalReport {
    pub fn tissue(&self, role: &str, tissue: Tissue) -> Option<&TissueSummary> {
        self.tissues.iter().find(|t| t.role == role && t.tissue == tissue)
    }

    pub fn self_ssim_of(&self, role: &str) -> Option<&SelfSsimRecord> {
        self.self_ssim.iter().find(|s| s.role == role)
    }

    /// JSON schema of the serialized report.
    pub fn schema() -> serde_json::Value {
        let num = json!({"type": "number"});
        let int = json!({"type": "integer", "minimum": 0});
        let string = json!({"type": "string"});
        let tissue = json!({"enum": ["air", "fat", "muscle", "prostate", "bladder", "bone"]});
        json!({
            "$schema": "https://json-schema.org/draft/2020-12/schema",
            "title": "EvalReport",
            "type": "object",
            "required": ["version", "provenance", "rois", "tissues", "histograms", "self_ssim", "cycle_difference"],
            "properties": {
                "version": {"const": REPORT_VERSION},
                "provenance": {
                    "type": "object",
                    "required": ["volumes", "checkpoint", "self_ssim_sampling"],
                    "properties": {
                        "volumes": {"type": "array", "items": string},
                        "checkpoint": {"type": ["string", "null"]},
                        "self_ssim_sampling": string
                    }
                },
                "rois": {"type": "array", "items": {
                    "type": "object",
                    "required": ["volume", "patient_id", "role", "roi_id", "tissue", "slice", "row", "col", "height", "width", "mean_hu", "sd_hu"],
                    "properties": {
                        "volume": string, "patient_id": string, "role": string, "roi_id": string, "tissue": tissue,
                        "slice": int, "row": int, "col": int,
                        "height": {"type": "integer", "minimum": 1}, "width": {"type": "integer", "minimum": 1},
                        "mean_hu": num, "sd_hu": {"type": "number", "minimum": 0}
                    }
                }},
                "tissues": {"type": "array", "items": {
                    "type": "object",
                    "required": ["role", "tissue", "n_rois", "mean_hu", "sd_hu", "gap_to_truth_hu"],
                    "properties": {
                        "role": string, "tissue": tissue, "n_rois": int, "mean_hu": num, "sd_hu": num,
                        "gap_to_truth_hu": {"type": ["number", "null"]}
                    }
                }},
                "histograms": {"type": "array", "items": {
                    "type": "object",
                    "required": ["patient_id", "role", "edges", "counts"],
                    "properties": {
                        "patient_id": string, "role": string,
                        "edges": {"type": "array", "items": num, "minItems": 3},
                        "counts": {"type": "array", "items": int, "minItems": 2}
                    }
                }},
                "self_ssim": {"type": "array", "items": {
                    "type": "object",
                    "required": ["role", "n", "mean", "sd", "values"],
                    "properties": {
                        "role": string, "n": int, "mean": num, "sd": num,
                        "values": {"type": "array", "items": {"type": "number", "minimum": -1, "maximum": 1}}
                    }
                }},
                "cycle_difference": {"type": "array", "items": {
                    "type": "object",
                    "required": ["patient_id", "summary"],
                    "properties": {
                        "patient_id": string,
                        "summary": {
                            "type": "object",
                            "required": ["mean_abs", "max_abs", "rms"],
                            "properties": {"mean_abs": num, "max_abs": num, "rms": num}
                        }
                    }
                }}
            }
        })
    }
}

fn role_color(role: &str) -> [u8; 3] {
    match role {
        "cbct" => RED,
        "synplanct" => BLUE,
        "truth" | "plan" => GREEN,
        _ => [120, 120, 120],
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    (m, (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
}

fn roles(inputs: &ReportInputs) -> Vec<String> {
    let mut roles: Vec<String> = Vec::new();
    for p in &inputs.patients {
        for v in &p.volumes {
            if !roles.contains(&v.role) {
                roles.push(v.role.clone());
            }
        }
    }
    roles
}

/// Slice positions of the SelfSSIM windows: window `i` goes to patient
/// `i mod P`, and each patient's windows sit on evenly spaced slices.
fn self_ssim_positions(inputs: &ReportInputs) -> Vec<(usize, usize)> {
    let p = inputs.patients.len();
    if p == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (pi, patient) in inputs.patients.iter().enumerate() {
        let n = (0..inputs.self_ssim_count).filter(|i| i % p == pi).count();
        let Some(first) = patient.volumes.first() else {
            continue;
        };
        let d = first.volume.n_slices();
        for j in 0..n {
            out.push((pi, (((j as f64 + 0.5) * d as f64 / n as f64) as usize).min(d - 1)));
        }
    }
    out
}

/// Computes the report and writes the requested files into `out_dir`.
pub fn emit_report(inputs: &ReportInputs, out_dir: impl AsRef<Path>) -> Result<EvalReport> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let roles = roles(inputs);

    let mut rois = Vec::new();
    let mut histograms = Vec::new();
    let mut sources = Vec::new();
    for p in &inputs.patients {
        for v in &p.volumes {
            sources.push(match &v.source {
                Some(path) => path.display().to_string(),
                None => format!("{}/{}", p.patient_id, v.role),
            });
            for roi in &p.rois {
                let (mean_hu, sd_hu) = roi_stats(&v.volume, roi)?;
                rois.push(RoiRecord {
                    volume: format!("{}/{}", p.patient_id, v.role),
                    patient_id: p.patient_id.clone(),
                    role: v.role.clone(),
                    roi_id: roi.id.clone(),
                    tissue: roi.tissue,
                    slice: roi.slice,
                    row: roi.row,
                    col: roi.col,
                    height: roi.height,
                    width: roi.width,
                    mean_hu,
                    sd_hu,
                });
            }
            let h = volume_histogram(&v.volume, inputs.histogram_bins, inputs.histogram_range)?;
            histograms.push(HistogramRecord {
                patient_id: p.patient_id.clone(),
                role: v.role.clone(),
                edges: h.edges,
                counts: h.counts,
            });
        }
    }

    let mut tissues = Vec::new();
    for role in &roles {
        for tissue in Tissue::SOFT {
            let recs: Vec<&RoiRecord> = rois.iter().filter(|r| &r.role == role && r.tissue == tissue).collect();
            if recs.is_empty() {
                continue;
            }
            let means: Vec<f64> = recs.iter().map(|r| r.mean_hu).collect();
            let sds: Vec<f64> = recs.iter().map(|r| r.sd_hu).collect();
            tissues.push(TissueSummary {
                role: role.clone(),
                tissue,
                n_rois: recs.len(),
                mean_hu: mean_sd(&means).0,
                sd_hu: mean_sd(&sds).0,
                gap_to_truth_hu: None,
            });
        }
    }
    let truth: Vec<(Tissue, f64)> = tissues.iter().filter(|t| t.role == "truth").map(|t| (t.tissue, t.mean_hu)).collect();
    for t in &mut tissues {
        if let Some((_, m)) = truth.iter().find(|(tt, _)| *tt == t.tissue) {
            t.gap_to_truth_hu = Some(t.mean_hu - m);
        }
    }

    let positions = self_ssim_positions(inputs);
    let mut self_ssim_records = Vec::new();
    for role in &roles {
        let mut values = Vec::new();
        for &(pi, k) in &positions {
            let patient = &inputs.patients[pi];
            let Some(v) = patient.volumes.iter().find(|v| &v.role == role) else {
                continue;
            };
            let size = inputs.self_ssim_size.min(v.volume.dims()[0]).min(v.volume.dims()[1]);
            for roi in centered_rois(&v.volume, &[k], size)? {
                values.push(self_ssim(roi_image(&v.volume, &roi).view())?);
            }
        }
        let (mean, sd) = mean_sd(&values);
        self_ssim_records.push(SelfSsimRecord {
            role: role.clone(),
            n: values.len(),
            mean,
            sd,
            values,
        });
    }

    let mut cycle_difference = Vec::new();
    let mut cycle_maps = Vec::new();
    for p in &inputs.patients {
        let Some((input, cycled)) = &p.cycle else {
            continue;
        };
        if input.voxels().dim() != cycled.voxels().dim() {
            return Err(Error::shape(input.voxels().shape(), cycled.voxels().shape()));
        }
        let mut all = Vec::new();
        let mid = input.n_slices() / 2;
        for k in 0..input.n_slices() {
            let x = input.slice(k).mapv(|v| clip_and_scale_value(v as f64));
            let xc = cycled.slice(k).mapv(|v| clip_and_scale_value(v as f64));
            let map = cycle_difference_image(x.view(), xc.view())?;
            if k == mid {
                cycle_maps.push((p.patient_id.clone(), map.clone()));
            }
            all.push(map);
        }
        let views: Vec<_> = all.iter().map(|m| m.view()).collect();
        let stacked = ndarray::stack(Axis(0), &views).expect("equal slice shapes");
        let flat = stacked.to_shape((stacked.len(), 1)).expect("contiguous").to_owned();
        cycle_difference.push(CycleRecord {
            patient_id: p.patient_id.clone(),
            summary: CycleDifferenceSummary::of(flat.view()),
        });
    }

    let report = EvalReport {
        version: REPORT_VERSION,
        provenance: Provenance {
            volumes: sources,
            checkpoint: inputs.checkpoint.clone(),
            self_ssim_sampling: format!(
                "{} centered {}x{} windows per role; window i on patient i mod {}, evenly spaced slices per patient",
                inputs.self_ssim_count,
                inputs.self_ssim_size,
                inputs.self_ssim_size,
                inputs.patients.len()
            ),
        },
        rois,
        tissues,
        histograms,
        self_ssim: self_ssim_records,
        cycle_difference,
    };

    if inputs.write_json {
        let path = out_dir.join("report.json");
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    if inputs.write_csv {
        write_roi_csv(&report, &out_dir.join("rois.csv"))?;
    }
    if inputs.write_plots {
        write_plots(inputs, &report, &roles, &cycle_maps, out_dir)?;
    }
    Ok(report)
}

fn write_roi_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    })?;
    w.write_record(["volume", "roi_id", "tissue", "mean_hu", "sd_hu"])?;
    for r in &report.rois {
        w.write_record([
            r.volume.clone(),
            r.roi_id.clone(),
            r.tissue.name().to_string(),
            format!("{:.3}", r.mean_hu),
            format!("{:.3}", r.sd_hu),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_plots(
    inputs: &ReportInputs,
    report: &EvalReport,
    roles: &[String],
    cycle_maps: &[(String, ndarray::Array2<f64>)],
    out_dir: &Path,
) -> Result<()> {
    for p in &inputs.patients {
        let hists: Vec<(super::Histogram, [u8; 3])> = report
            .histograms
            .iter()
            .filter(|h| h.patient_id == p.patient_id)
            .map(|h| {
                (
                    super::Histogram {
                        edges: h.edges.clone(),
                        counts: h.counts.clone(),
                    },
                    role_color(&h.role),
                )
            })
            .collect();
        let series: Vec<(&super::Histogram, [u8; 3])> = hists.iter().map(|(h, c)| (h, *c)).collect();
        Plot::histogram_overlay(&series, 480, 240).save(out_dir.join(format!("histogram_{}.png", p.patient_id)))?;

        let pick = |role: &str| p.volumes.iter().find(|v| v.role == role);
        let pair = match (pick("cbct"), pick("synplanct")) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => (p.volumes.len() >= 2).then(|| (&p.volumes[0], &p.volumes[1])),
        };
        if let Some((a, b)) = pair {
            let k = a.volume.n_slices() / 2;
            let sa = a.volume.slice(k).mapv(|v| v as f64);
            let sb = b.volume.slice(k).mapv(|v| v as f64);
            let board = super::checkerboard(sa.view(), sb.view(), 8)?;
            Plot::grayscale(board.view(), -400.0, 200.0, 4).save(out_dir.join(format!("checkerboard_{}.png", p.patient_id)))?;
        }
    }

    let mut groups = Vec::new();
    for tissue in Tissue::SOFT {
        let mut group = Vec::new();
        for role in roles {
            let mut values = Vec::new();
            for p in &inputs.patients {
                let Some(v) = p.volumes.iter().find(|v| &v.role == role) else {
                    continue;
                };
                for roi in p.rois.iter().filter(|r| r.tissue == tissue) {
                    values.extend(roi_image(&v.volume, roi).iter().copied());
                }
            }
            group.push((role_color(role), values));
        }
        groups.push(group);
    }
    Plot::violins(&groups, DEFAULT_HISTOGRAM_RANGE, 640, 320).save(out_dir.join("roi_violins.png"))?;

    for (id, map) in cycle_maps {
        let limit = map.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Plot::diverging(map.view(), limit, 4).save(out_dir.join(format!("cycle_difference_{id}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_truth, PhantomSpec};

    fn patient(id: &str, seed: u64) -> PatientVolumes {
        let truth = generate_truth(&PhantomSpec::pelvis(id, [72, 88], 3, seed)).unwrap();
        let rois = crate::phantom::select_rois(&truth.labels, 2, 10);
        let shifted = truth.volume.with_voxels(truth.volume.voxels().mapv(|v| if v > -465 { v - 100 } else { v }), crate::volume::Modality::PhantomCbct).unwrap();
        PatientVolumes {
            patient_id: id.into(),
            rois,
            volumes: vec![
                VolumeInput {
                    role: "truth".into(),
                    volume: truth.volume.clone(),
                    source: None,
                },
                VolumeInput {
                    role: "cbct".into(),
                    volume: shifted,
                    source: None,
                },
            ],
            cycle: Some((truth.volume.clone(), truth.volume)),
        }
    }

    #[test]
    fn report_files_rows_and_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let inputs = ReportInputs::new(vec![patient("A", 1), patient("B", 2)]);
        let report = emit_report(&inputs, dir.path()).unwrap();
        let n_rois: usize = inputs.patients.iter().map(|p| p.rois.len()).sum();
        assert_eq!(report.rois.len(), n_rois * 2);
        let csv = fs::read_to_string(dir.path().join("rois.csv")).unwrap();
        assert_eq!(csv.lines().count(), n_rois * 2 + 1);
        assert!(csv.starts_with("volume,roi_id,tissue,mean_hu,sd_hu"));
        let gap = report.tissue("cbct", Tissue::Muscle).unwrap().gap_to_truth_hu.unwrap();
        assert!((gap + 100.0).abs() < 1e-9);
        assert_eq!(report.self_ssim_of("truth").unwrap().n, 30);
        assert_eq!(report.cycle_difference[0].summary.max_abs, 0.0);
        for name in ["report.json", "roi_violins.png", "histogram_A.png", "checkerboard_B.png", "cycle_difference_A.png"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let parsed: EvalReport = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn format_switches() {
        let dir = tempfile::tempdir().unwrap();
        let mut inputs = ReportInputs::new(vec![patient("A", 1)]);
        inputs.write_json = false;
        inputs.write_plots = false;
        emit_report(&inputs, dir.path()).unwrap();
        assert!(dir.path().join("rois.csv").exists());
        assert!(!dir.path().join("report.json").exists());
    }
}
