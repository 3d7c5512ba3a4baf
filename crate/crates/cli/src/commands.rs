use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use ctxlate::evaluation::{
    cycle_difference_image, emit_report, CycleDifferenceSummary, PatientVolumes, Plot, ReportInputs, VolumeInput,
};
use ctxlate::phantom::{emit_dataset, DatasetSpec, Manifest, MANIFEST_NAME};
use ctxlate::preprocess::{clip_and_scale_value, masked_scaled_slices, unscale, CropSpec, MaskMode};
use ctxlate::trainer::{load_checkpoint, run_training, set_dotted, unflatten, TrainConfig, TrainingSet};
use ctxlate::translator::{Direction, Translator};
use ctxlate::volume::{load_volume, save_volume, volume_paths, CtVolume};
use serde_json::Value;

use crate::{DirectionArg, EvaluateArgs, FormatArg, MaskArg, PhantomArgs, PreprocessArgs, TrainArgs, TranslateArgs};

pub const SEED_ENV: &str = "CTXLATE_SEED";

/// An error with the process exit code it maps to.
pub struct Failure {
    pub error: anyhow::Error,
    pub code: u8,
}

type Outcome = Result<(), Failure>;

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure { error: error.into(), code: 2 }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure { error: error.into(), code: 1 }
}

/// Validation failures count as usage errors, everything else as runtime.
impl From<ctxlate::Error> for Failure {
    fn from(e: ctxlate::Error) -> Self {
        match e {
            ctxlate::Error::Invalid { .. } => usage(e),
            other => runtime(other),
        }
    }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| usage(anyhow!("{SEED_ENV}={s:?} is not an unsigned integer: {e}"))),
        Err(_) => Ok(None),
    }
}

fn read_json(path: &Path) -> Result<Value, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(usage)
}

/// Overlays `patch` onto `base`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
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

fn mask_mode(m: MaskArg) -> MaskMode {
    match m {
        MaskArg::PerSlice => MaskMode::PerSlice,
        MaskArg::PerVolume => MaskMode::PerVolume,
    }
}

fn crop_spec(size: Option<[usize; 2]>) -> Result<Option<CropSpec>, Failure> {
    size.map(|[h, w]| CropSpec::new(h, w, 0)).transpose().map_err(Failure::from)
}

fn load_manifest(path: &Path) -> Result<(Manifest, PathBuf), Failure> {
    let file = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    if !file.is_file() {
        return Err(runtime(anyhow!("manifest not found: expected {}", file.display())));
    }
    let manifest = Manifest::load(&file)?;
    let dir = file.parent().unwrap_or(Path::new("")).to_path_buf();
    Ok((manifest, dir))
}

fn select_patients<'a>(manifest: &'a Manifest, ids: &[String]) -> Result<Vec<&'a ctxlate::phantom::PatientEntry>, Failure> {
    if ids.is_empty() {
        return Ok(manifest.patients.iter().collect());
    }
    ids.iter()
        .map(|id| manifest.patient(id).ok_or_else(|| usage(anyhow!("patient {id:?} is not in the manifest"))))
        .collect()
}

/// `<stem><suffix>` next to the volume at `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let (json, _) = volume_paths(path);
    let mut s = json.with_extension("").into_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn phantom(args: PhantomArgs) -> Outcome {
    let mut value = serde_json::to_value(DatasetSpec::default()).expect("dataset spec serializes");
    if let Some(seed) = env_seed()? {
        value["seed"] = seed.into();
    }
    if let Some(path) = &args.config {
        merge(&mut value, read_json(path)?);
    }
    let mut spec: DatasetSpec = serde_json::from_value(value).context("dataset config").map_err(usage)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.slices {
        spec.n_slices = n;
    }
    if let Some(c) = args.canvas {
        spec.canvas = c;
    }
    if args.patients == 0 {
        return Err(usage(anyhow!("--patients must be positive")));
    }
    let manifest = emit_dataset(args.patients, &spec, &args.out)?;
    log::info!("wrote {} patients to {}", manifest.patients.len(), args.out.display());
    println!("{}", args.out.join(MANIFEST_NAME).display());
    Ok(())
}

pub fn preprocess(args: PreprocessArgs) -> Outcome {
    let vol = load_volume(&args.input)?;
    let crop = crop_spec(args.crop)?;
    let mut slices = Vec::with_capacity(vol.n_slices());
    for s in masked_scaled_slices(&vol, mask_mode(args.mask_mode))? {
        let s = match &crop {
            Some(c) => ctxlate::preprocess::center_crop(s.view(), c, 0)?,
            None => s,
        };
        slices.push(unscale(s.view())?);
    }
    let out = CtVolume::from_slices(&slices, vol.spacing, vol.modality, vol.patient_id.clone())?;
    let path = save_volume(&out, &args.output)?;
    println!("{}", path.display());
    Ok(())
}

/// Config precedence: defaults, CTXLATE_SEED, config file, flags.
fn train_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut value = Value::Object(Default::default());
    if let Some(seed) = env_seed()? {
        value["seed"] = seed.into();
    }
    if let Some(path) = &args.config {
        let mut file = unflatten(read_json(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for key in ["cb_set", "plan_set"] {
            if let Some(Value::Array(items)) = file.get_mut(key) {
                for item in items {
                    if let Some(p) = item.as_str().map(PathBuf::from).filter(|p| p.is_relative()) {
                        *item = Value::String(base.join(p).to_string_lossy().into_owned());
                    }
                }
            }
        }
        merge(&mut value, file);
    }
    for kv in &args.set {
        let (key, raw) = kv.split_once('=').ok_or_else(|| usage(anyhow!("--set expects KEY=VALUE, got {kv:?}")))?;
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_dotted(&mut value, key.trim(), v)?;
    }
    if let Some(seed) = args.seed {
        value["seed"] = seed.into();
    }
    if let Some(e) = args.epochs {
        value["epochs"] = e.into();
    }
    if let Some(out) = &args.out {
        value["out_dir"] = out.to_string_lossy().into_owned().into();
    }
    let mut cfg = TrainConfig::from_value(value)?;
    if let Some(m) = &args.manifest {
        let (manifest, dir) = load_manifest(m)?;
        let patients = select_patients(&manifest, &args.patients)?;
        cfg.cb_set = patients.iter().map(|p| dir.join(&p.cbct)).collect();
        cfg.plan_set = patients.iter().map(|p| dir.join(&p.truth)).collect();
    } else if !args.patients.is_empty() {
        return Err(usage(anyhow!("--patients needs --manifest")));
    }
    cfg.validate()?;
    if cfg.cb_set.is_empty() || cfg.plan_set.is_empty() {
        return Err(usage(anyhow!("no training data: give --manifest or cb_set and plan_set in the config")));
    }
    Ok(cfg)
}

pub fn train(args: TrainArgs) -> Outcome {
    let mut cfg = train_config(&args)?;
    let resume = match &args.resume {
        Some(path) => {
            let state = load_checkpoint(path)?;
            if state.g_cp.spec() != &cfg.generator || state.d_p.spec() != &cfg.discriminator {
                return Err(usage(anyhow!(
                    "{}: network settings differ from the config",
                    path.display()
                )));
            }
            if state.seed != cfg.seed {
                log::warn!("resuming with the checkpoint's seed {} instead of {}", state.seed, cfg.seed);
                cfg.seed = state.seed;
            }
            log::info!("resuming at epoch {} (iteration {})", state.epoch, state.iteration);
            Some(state)
        }
        None => None,
    };
    let data = TrainingSet::load(&cfg)?;
    log::info!(
        "training on {} CBCT and {} planning CT slices, {} steps per epoch",
        data.cb.len(),
        data.plan.len(),
        data.steps_per_epoch()
    );
    let outcome = run_training(&cfg, &data, resume)?;
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

pub fn translate(args: TranslateArgs) -> Outcome {
    let translator = Translator::from_checkpoint(&args.checkpoint)?
        .with_crop(crop_spec(args.crop)?)
        .with_mask_mode(mask_mode(args.mask_mode));
    let direction = match args.direction {
        DirectionArg::CToP => Direction::CToP,
        DirectionArg::PToC => Direction::PToC,
    };
    let input = load_volume(&args.input)?;
    let start = std::time::Instant::now();
    let out = translator.translate_volume(&input, direction)?;
    let seconds = start.elapsed().as_secs_f64();
    log::info!(
        "translated {} slices in {seconds:.2}s ({:.1} slices/s)",
        input.n_slices(),
        input.n_slices() as f64 / seconds.max(1e-9)
    );
    println!("{}", save_volume(&out, &args.output)?.display());
    if args.cycle {
        let cycled = translator.cycle_translate(&input, direction)?;
        let reference = translator.preprocessed(&input)?;
        println!("{}", save_volume(&cycled, sibling(&args.output, "_cycle"))?.display());
        let (csv_path, png_path) = write_cycle_difference(&reference, &cycled, &sibling(&args.output, "_cycle_difference"))?;
        println!("{}", csv_path.display());
        println!("{}", png_path.display());
    }
    Ok(())
}

/// Per-slice summaries as CSV and all slice maps tiled into one PNG.
fn write_cycle_difference(reference: &CtVolume, cycled: &CtVolume, stem: &Path) -> Result<(PathBuf, PathBuf), Failure> {
    let [h, w, d] = reference.dims();
    let cols = (d as f64).sqrt().ceil() as usize;
    let rows = d.div_ceil(cols);
    let mut tiled = ndarray::Array2::<f64>::zeros((rows * h, cols * w));
    let mut csv = String::from("slice,mean_abs,max_abs,rms\n");
    for k in 0..d {
        let x = reference.slice(k).mapv(|v| clip_and_scale_value(v as f64));
        let xc = cycled.slice(k).mapv(|v| clip_and_scale_value(v as f64));
        let map = cycle_difference_image(x.view(), xc.view())?;
        let s = CycleDifferenceSummary::of(map.view());
        csv.push_str(&format!("{k},{},{},{}\n", s.mean_abs, s.max_abs, s.rms));
        let (r, c) = (k / cols * h, k % cols * w);
        tiled.slice_mut(ndarray::s![r..r + h, c..c + w]).assign(&map);
    }
    let limit = tiled.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let csv_path = stem.with_extension("csv");
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display())).map_err(runtime)?;
    let png_path = stem.with_extension("png");
    Plot::diverging(tiled.view(), limit, 2).save(&png_path)?;
    Ok((csv_path, png_path))
}

pub fn evaluate(args: EvaluateArgs) -> Outcome {
    let (manifest, dir) = load_manifest(&args.manifest)?;
    let patients = select_patients(&manifest, &args.patients)?;
    let translator = match &args.checkpoint {
        Some(c) => Some(Translator::from_checkpoint(c)?.with_crop(crop_spec(args.crop)?)),
        None => None,
    };
    let mut inputs = Vec::with_capacity(patients.len());
    for p in patients {
        let truth_path = dir.join(&p.truth);
        let cbct_path = dir.join(&p.cbct);
        let truth = load_volume(&truth_path)?;
        let cbct = load_volume(&cbct_path)?;
        let mut volumes = vec![
            VolumeInput { role: "truth".into(), volume: truth, source: Some(truth_path) },
            VolumeInput { role: "cbct".into(), volume: cbct.clone(), source: Some(cbct_path) },
        ];
        let mut cycle = None;
        if let Some(t) = &translator {
            volumes.push(VolumeInput {
                role: "synplanct".into(),
                volume: t.translate_volume(&cbct, Direction::CToP)?,
                source: args.checkpoint.clone(),
            });
            cycle = Some((t.preprocessed(&cbct)?, t.cycle_translate(&cbct, Direction::CToP)?));
        } else if let Some(syn_dir) = &args.synplanct {
            let path = syn_dir.join(format!("{}_synplanct", p.patient_id));
            volumes.push(VolumeInput { role: "synplanct".into(), volume: load_volume(&path)?, source: Some(path) });
        }
        inputs.push(PatientVolumes { patient_id: p.patient_id.clone(), rois: p.rois.clone(), volumes, cycle });
    }
    let mut report_inputs = ReportInputs::new(inputs);
    report_inputs.checkpoint = args.checkpoint.as_ref().map(|c| c.display().to_string());
    if !args.format.is_empty() {
        report_inputs.write_json = args.format.contains(&FormatArg::Json);
        report_inputs.write_csv = args.format.contains(&FormatArg::Csv);
    }
    report_inputs.write_plots = !args.no_plots;
    let report = emit_report(&report_inputs, &args.out)?;
    for t in &report.tissues {
        let gap = t.gap_to_truth_hu.map(|g| format!("{g:+.1}")).unwrap_or_else(|| "-".into());
        println!("{}\t{}\t{:.1}\t{:.1}\t{gap}", t.role, t.tissue.name(), t.mean_hu, t.sd_hu);
    }
    for s in &report.self_ssim {
        println!("{}\tselfssim\t{:.4}\t{:.4}", s.role, s.mean, s.sd);
    }
    Ok(())
}
