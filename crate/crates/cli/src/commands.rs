use std::io::Write;
use std::path::{Path, PathBuf};

use acnet_core::config::{DataSource, RunConfig};
use acnet_core::data::pnm::{self, Raster};
use acnet_core::data::{
    export_gate_heatmap, load_manifest, save_dataset, synth_generate, synth_generate_range, LabelMap,
    SegmentationSample, CLASS_NAMES, IGNORE_INDEX,
};
use acnet_core::network::{load_checkpoint, Architecture, Model, OUTPUT_STRIDE};
use acnet_core::tensor::Tensor;
use acnet_core::training::{evaluate, predict_labels, train as run_training, TrainOutputs, MS_SCALES};
use acnet_core::verify::{run_suite, Scope};
use acnet_core::Error;

use crate::Failure;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Writes the resolved configuration next to the command's outputs.
fn write_snapshot(cfg: &RunConfig, command: &str) -> Result<(), Failure> {
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(format!("{command}.config"));
    std::fs::write(&path, cfg.serialize()).map_err(|e| io_err(&path, e))
}

fn class_name(k: usize, num_classes: usize) -> String {
    if num_classes == CLASS_NAMES.len() {
        CLASS_NAMES[k].to_string()
    } else {
        format!("class{k}")
    }
}

fn datasets(cfg: &RunConfig) -> Result<(Vec<SegmentationSample>, Vec<SegmentationSample>), Failure> {
    match &cfg.data {
        DataSource::Synth { train_count, val_count, .. } => {
            let synth = cfg.synth_config().expect("synthetic source");
            Ok((synth_generate(&synth, *train_count)?, synth_generate_range(&synth, *train_count, *val_count)?))
        }
        DataSource::Manifest { train, val } => {
            let val = if val.as_os_str().is_empty() { Vec::new() } else { load_manifest(val)? };
            Ok((load_manifest(train)?, val))
        }
    }
}

fn validation_set(cfg: &RunConfig) -> Result<Vec<SegmentationSample>, Failure> {
    let val = match &cfg.data {
        DataSource::Synth { train_count, val_count, .. } => {
            synth_generate_range(&cfg.synth_config().expect("synthetic source"), *train_count, *val_count)?
        }
        DataSource::Manifest { val, .. } if !val.as_os_str().is_empty() => load_manifest(val)?,
        DataSource::Manifest { .. } => Vec::new(),
    };
    if val.is_empty() {
        return Err(Failure::Usage("the configuration has no validation samples".into()));
    }
    Ok(val)
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model, Failure> {
    let mut model = Model::new(&cfg.network, cfg.seed)?;
    if let Some(path) = checkpoint {
        if !path.exists() {
            return Err(Failure::Runtime(format!("checkpoint {} does not exist", path.display())));
        }
        load_checkpoint(&mut model.params, path)?;
    }
    Ok(model)
}

pub fn synth(cfg: &RunConfig, count: usize) -> Result<(), Failure> {
    let synth = cfg
        .synth_config()
        .ok_or_else(|| Failure::Usage("synth needs data.source = synth".into()))?;
    let samples = synth_generate(&synth, count)?;
    let manifest = save_dataset(&cfg.output_dir, &samples)?;
    write_snapshot(cfg, "synth")?;
    if count == 0 {
        eprintln!("warning: --count 0 wrote an empty manifest");
    }
    let mut hist = [0u64; CLASS_NAMES.len()];
    for s in &samples {
        for &l in &s.labels.data {
            hist[l as usize] += 1;
        }
    }
    let total = hist.iter().sum::<u64>().max(1) as f64;
    println!("wrote {count} samples, manifest {}", manifest.display());
    for (name, n) in CLASS_NAMES.iter().zip(hist) {
        println!("{name} {n} {:.4}", n as f64 / total);
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let (train_set, val_set) = datasets(cfg)?;
    let mut model = Model::new(&cfg.network, cfg.seed)?;
    write_snapshot(cfg, "train")?;
    let outputs = TrainOutputs { dir: cfg.output_dir.clone() };
    let stdout = std::io::stdout();
    let report = run_training(&mut model, &train_set, &val_set, &cfg.train_config(), Some(&outputs), &mut stdout.lock())?;
    println!(
        "{} trained for {} iterations; smoothed loss {:.4}",
        cfg.network.architecture.name(),
        report.losses.len(),
        report.smoothed_loss(20)
    );
    if let Some(best) = report.best {
        println!("best mIoU {:.4} at iteration {}", best.miou, best.iter);
    }
    println!("checkpoints {} {}", outputs.final_checkpoint().display(), outputs.best_checkpoint().display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, ms: bool, mirror: bool) -> Result<(), Failure> {
    let val = validation_set(cfg)?;
    let mut model = load_model(cfg, Some(checkpoint))?;
    write_snapshot(cfg, "eval")?;
    let scales: &[f64] = if ms { &MS_SCALES } else { &[1.0] };
    let k = cfg.network.num_classes;
    let report = evaluate(&mut model, &val, k, scales, mirror)?;
    let mut text = String::new();
    for (c, iou) in report.scores.per_class.iter().enumerate() {
        text.push_str(&format!("{} {}\n", class_name(c, k), iou.map_or("nan".into(), |v| format!("{v:.6}"))));
    }
    text.push_str(&format!("mIoU {:.6}\npixAcc {:.6}\n", report.scores.miou, report.scores.pixel_accuracy));
    print!("{text}");
    let path = cfg.output_dir.join("eval.txt");
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))
}

const PALETTE: [[u8; 3]; 5] = [[40, 40, 40], [230, 160, 40], [220, 40, 60], [60, 120, 230], [60, 190, 90]];

fn colourise(labels: &LabelMap) -> Raster {
    let data = labels
        .data
        .iter()
        .flat_map(|&l| match l {
            IGNORE_INDEX => [0, 0, 0],
            l if (l as usize) < PALETTE.len() => PALETTE[l as usize],
            l => [l.wrapping_mul(67), l.wrapping_mul(151), l.wrapping_mul(29)],
        })
        .collect();
    Raster::new(labels.width, labels.height, 3, data)
}

fn pad_to_stride(image: &Tensor) -> Tensor {
    let s = image.shape();
    let round = |v: usize| v.div_ceil(OUTPUT_STRIDE) * OUTPUT_STRIDE;
    let (h, w) = (round(s.h), round(s.w));
    Tensor::from_fn([s.n, s.c, h, w], |n, c, y, x| if y < s.h && x < s.w { image.at(n, c, y, x) } else { 0.0 })
}

pub fn viz(cfg: &RunConfig, checkpoint: Option<&Path>, samples: usize) -> Result<(), Failure> {
    let val = validation_set(cfg)?;
    let mut model = load_model(cfg, checkpoint)?;
    write_snapshot(cfg, "viz")?;
    let dir = cfg.output_dir.join("viz");
    create_dir(&dir)?;
    let gate_names: Vec<String> = match cfg.network.architecture {
        Architecture::Fcn => Vec::new(),
        Architecture::Gcm => vec!["gcm".into()],
        Architecture::Acnet { blocks } => (1..=blocks).map(|k| format!("acb{k}")).collect(),
    };
    let mut written: Vec<PathBuf> = Vec::new();
    for sample in val.iter().take(samples) {
        let padded = pad_to_stride(&sample.image);
        let inference = model.infer(&padded)?;
        for (gate, name) in inference.gates.iter().zip(&gate_names) {
            gate.check_invariants()?;
            let path = dir.join(format!("{}_{name}_gate.pgm", sample.id));
            export_gate_heatmap(gate, 0, &path, None)?;
            written.push(path);
        }
        let pred = predict_labels(&mut model, &sample.image, &[1.0], false)?;
        for (suffix, labels) in [("pred", &pred), ("label", &sample.labels)] {
            let path = dir.join(format!("{}_{suffix}.ppm", sample.id));
            pnm::write(&path, &colourise(labels))?;
            written.push(path);
        }
    }
    for p in &written {
        let r = pnm::read(p)?;
        println!("{} {}x{}", p.display(), r.width, r.height);
    }
    Ok(())
}

pub fn gradcheck(scope: Scope, seed: u64) -> Result<(), Failure> {
    let start = std::time::Instant::now();
    let outcomes = run_suite(scope, seed)?;
    let mut failed = 0;
    let mut out = std::io::stdout().lock();
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        failed += usize::from(!o.passed);
        writeln!(out, "{status} {:<32} max_rel_err {:.3e} checked {} skipped {}", o.name, o.max_rel_error, o.checked, o.skipped)
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    writeln!(out, "{} checks, {failed} failed, {:.1}s", outcomes.len(), start.elapsed().as_secs_f64())
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    if failed > 0 {
        return Err(Failure::Verification(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(Error::Io { path: PathBuf::new(), source: e }.to_string())
    }
}
