use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use aeroreformer::metrics::{build_report, iou, BinaryMask, EvalSample};
use aeroreformer::model::{
    predict_mask, read_checkpoint, synthetic_sample, train_smoke, write_checkpoint,
    CheckpointError, TrainError,
};
use aeroreformer::suite::{run_suite, SuiteOptions};
use aeroreformer::{Model64, Tensor64, TensorError};
use aeroreformer_datagen::export::RefEntry;
use aeroreformer_datagen::{
    read_annotations, run_pipeline, CaptionProvider, ClassTable, DatagenError, HttpProvider,
    ProviderKind, StubProvider,
};
use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;

pub enum Status {
    Ok,
    /// The command ran but an internal check did not pass.
    ChecksFailed,
}

/// `[category] message` for the error's root cause.
pub fn describe(e: &anyhow::Error) -> String {
    let category = e.chain().find_map(|c| {
        if let Some(d) = c.downcast_ref::<DatagenError>() {
            Some(match d {
                DatagenError::Ingest { .. } => "ingest",
                DatagenError::Io { .. } => "io",
                DatagenError::Config(_) => "config",
                DatagenError::Provider(_) => "provider",
                DatagenError::Export(_) => "export",
            })
        } else if c.is::<TrainError>() {
            Some("training")
        } else if c.is::<CheckpointError>() {
            Some("checkpoint")
        } else if c.is::<TensorError>() {
            Some("model")
        } else if c.is::<std::io::Error>() {
            Some("io")
        } else {
            None
        }
    });
    format!("[{}] {e:#}", category.unwrap_or("usage"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn datagen(cfg: &RunConfig) -> Result<Status> {
    let input = cfg
        .datagen
        .input
        .as_ref()
        .ok_or_else(|| anyhow!("datagen needs --input or datagen.input"))?;
    if !input.is_dir() {
        return Err(DatagenError::ingest(input, "input directory not found").into());
    }
    let classes = cfg
        .datagen
        .classes
        .clone()
        .unwrap_or_else(|| input.join("classes.toml"));
    let table = ClassTable::load(&classes)?;
    let mut pipeline = cfg.datagen.pipeline.clone();
    pipeline.seed = cfg.seed;
    let provider: Box<dyn CaptionProvider> = match pipeline.provider {
        ProviderKind::Stub => Box::new(StubProvider { seed: cfg.seed }),
        ProviderKind::Http => Box::new(HttpProvider::from_config(&pipeline.http)),
    };
    let (report, paths) = run_pipeline(input, &table, &cfg.out, &pipeline, provider.as_ref())?;
    println!("{}", report.summary());
    println!("annotations: {}", paths.annotations.display());
    Ok(Status::Ok)
}

pub fn gradcheck(cfg: &RunConfig, fault: Option<String>) -> Result<Status> {
    let opts = SuiteOptions {
        seeds: cfg.gradcheck.seeds,
        first_seed: cfg.seed,
        only: cfg.gradcheck.only.clone(),
        fault,
        tolerance: cfg.gradcheck.tolerance,
    };
    let start = Instant::now();
    let report = run_suite(&opts)?;
    let text = report.render();
    print!("{text}");
    println!(
        "cases {}  worst {:.3e}  tolerance {:.0e}  {:.1}s",
        report.cases.len(),
        report.worst(),
        report.tolerance,
        start.elapsed().as_secs_f64()
    );
    let path = cfg.out.join("gradcheck.txt");
    fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    let failures = report.failures();
    if failures.is_empty() {
        Ok(Status::Ok)
    } else {
        for f in failures {
            eprintln!(
                "gradient check failed for {}: max_rel_err {:.3e}",
                f.name, f.max_rel_err
            );
        }
        Ok(Status::ChecksFailed)
    }
}

#[derive(Serialize)]
struct TrainSummary {
    iters: usize,
    param_count: usize,
    enable_vlcam: bool,
    enable_ramsf: bool,
    initial_loss: f64,
    final_loss: f64,
    loss_ratio: f64,
    iou: f64,
    seconds: f64,
}

pub fn train_demo(cfg: &RunConfig) -> Result<Status> {
    let mut model_cfg = cfg.train.model.clone();
    model_cfg.seed = cfg.seed;
    let mut optim = cfg.train.optim.clone();
    optim.seed = cfg.seed;
    let mut model = Model64::new(model_cfg.clone())?;
    let sample = synthetic_sample::<f64>(model_cfg.image_size, cfg.seed);
    let start = Instant::now();
    let history = train_smoke(&mut model, &sample, &optim)?;
    let seconds = start.elapsed().as_secs_f64();

    let path = cfg.out.join("loss_history.csv");
    let mut w = BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    );
    writeln!(w, "iteration,loss")?;
    for (i, l) in history.iter().enumerate() {
        writeln!(w, "{i},{l:.17e}")?;
    }
    w.flush()?;

    let logits = model.infer(&sample.image, &sample.tokens)?;
    let pred = predict_mask(&logits)?;
    let iou = iou(&pred, &sample.mask)?;
    let ckpt = cfg.out.join("model.ckpt");
    write_checkpoint(&model.store, BufWriter::new(File::create(&ckpt)?))?;

    let (first, last) = (history[0], history[history.len() - 1]);
    let summary = TrainSummary {
        iters: history.len(),
        param_count: model.param_count(),
        enable_vlcam: model_cfg.enable_vlcam,
        enable_ramsf: model_cfg.enable_ramsf,
        initial_loss: first,
        final_loss: last,
        loss_ratio: last / first,
        iou,
        seconds,
    };
    write_json(&cfg.out.join("train_summary.json"), &summary)?;
    println!(
        "params {}  iters {}  loss {:.4} -> {:.4} ({:.1}%)  IoU {:.4}  {:.1}s",
        summary.param_count,
        summary.iters,
        first,
        last,
        100.0 * summary.loss_ratio,
        iou,
        seconds
    );
    Ok(Status::Ok)
}

fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)
        .with_context(|| format!("reading prediction {}", path.display()))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(BinaryMask::new(
        h,
        w,
        img.into_raw().into_iter().map(|v| v != 0).collect(),
    )?)
}

pub fn eval(cfg: &RunConfig) -> Result<Status> {
    let e = &cfg.eval;
    let pred_dir = e
        .pred
        .as_ref()
        .ok_or_else(|| anyhow!("eval needs --pred or eval.pred"))?;
    let ann_path = e
        .annotations
        .as_ref()
        .ok_or_else(|| anyhow!("eval needs --annotations or eval.annotations"))?;
    let file = read_annotations(ann_path)?;
    let refs: Vec<&RefEntry> = file
        .refs
        .iter()
        .filter(|r| match &e.split {
            Some(s) => {
                serde_json::to_value(r.split)
                    .ok()
                    .and_then(|v| v.as_str().map(|v| v == s))
                    == Some(true)
            }
            None => true,
        })
        .collect();
    if refs.is_empty() {
        bail!("no references to evaluate in {}", ann_path.display());
    }
    let missing: Vec<u64> = refs
        .iter()
        .filter(|r| !pred_dir.join(format!("{}.png", r.ref_id)).is_file())
        .map(|r| r.ref_id)
        .collect();
    if !missing.is_empty() {
        let ids: Vec<String> = missing.iter().map(u64::to_string).collect();
        bail!(
            "{} prediction(s) missing from {}: ref_id {}",
            missing.len(),
            pred_dir.display(),
            ids.join(", ")
        );
    }
    let load = |r: &&RefEntry| -> Result<EvalSample> {
        let ann = file
            .annotation(r.ann_id)
            .ok_or_else(|| anyhow!("ref {} has no annotation", r.ref_id))?;
        let [h, w] = ann.segmentation.size;
        let gt = BinaryMask::new(h, w, ann.segmentation.decode()?)?;
        let pred = load_mask(&pred_dir.join(format!("{}.png", r.ref_id)))?;
        Ok(EvalSample {
            pred,
            gt,
            category: r.category.clone(),
            image_id: r.image_id,
        })
    };
    let samples: Vec<EvalSample> = if e.parallel {
        refs.par_iter().map(load).collect::<Result<_>>()?
    } else {
        refs.iter().map(load).collect::<Result<_>>()?
    };
    let report = build_report(&samples)?;
    let table = report.render_table();
    print!("{table}");
    let txt = cfg.out.join("report.txt");
    fs::write(&txt, &table).with_context(|| format!("writing {}", txt.display()))?;
    write_json(&cfg.out.join("report.json"), &report)?;
    Ok(Status::Ok)
}

fn load_image(path: &Path, size: usize) -> Result<Tensor64> {
    let img = image::open(path)
        .with_context(|| format!("reading image {}", path.display()))?
        .to_rgb8();
    if (img.width() as usize, img.height() as usize) != (size, size) {
        bail!(
            "{} is {}x{}, the model expects {size}x{size}",
            path.display(),
            img.width(),
            img.height()
        );
    }
    let n = size * size;
    let mut data = vec![0.0; 3 * n];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor64::new(vec![3, size, size], data)?)
}

#[derive(Serialize)]
struct ForwardSummary {
    logits_shape: Vec<usize>,
    foreground_pixels: u64,
    param_count: usize,
    iou_vs_synthetic: Option<f64>,
}

pub fn forward(cfg: &RunConfig) -> Result<Status> {
    let f = &cfg.forward;
    let mut model_cfg = f.model.clone();
    model_cfg.seed = cfg.seed;
    let mut model = Model64::new(model_cfg.clone())?;
    if let Some(ckpt) = &f.checkpoint {
        let file = File::open(ckpt).with_context(|| format!("opening {}", ckpt.display()))?;
        let records = read_checkpoint(BufReader::new(file))?;
        model.store.load_records(&records)?;
    }
    let size = model_cfg.image_size;
    let (image, tokens, gt) = match &f.image {
        Some(p) => {
            let tokens = if f.tokens.is_empty() {
                vec![1]
            } else {
                f.tokens.clone()
            };
            (load_image(p, size)?, tokens, None)
        }
        None => {
            let s = synthetic_sample::<f64>(size, cfg.seed);
            let tokens = if f.tokens.is_empty() {
                s.tokens
            } else {
                f.tokens.clone()
            };
            (s.image, tokens, Some(s.mask))
        }
    };
    let logits = model.infer(&image, &tokens)?;
    let mask = predict_mask(&logits)?;
    let png = image::GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.bits()
            .iter()
            .map(|&b| if b { 255 } else { 0 })
            .collect(),
    )
    .expect("mask buffer matches its size");
    let path = cfg.out.join("mask.png");
    png.save(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    let summary = ForwardSummary {
        logits_shape: logits.shape().to_vec(),
        foreground_pixels: mask.count(),
        param_count: model.param_count(),
        iou_vs_synthetic: gt.map(|g| iou(&mask, &g)).transpose()?,
    };
    write_json(&cfg.out.join("forward.json"), &summary)?;
    println!(
        "logits {:?}  foreground {} px  mask {}",
        summary.logits_shape,
        summary.foreground_pixels,
        path.display()
    );
    Ok(Status::Ok)
}
