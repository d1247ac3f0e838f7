use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use spark_core::data::{crop, load_ppm, save_ppm, synth_images, synth_record, DatasetManifest, ImageRecord};
use spark_core::masking::zero_out_image;
use spark_core::model::{conversion_gap, encoder_macs, DenseEncoder, EncoderConfig, SparkModel};
use spark_core::rng::stream;
use spark_core::training::{restore_model, Checkpoint, CheckpointKind, LrRule, MetricsWriter, Trainer};
use spark_core::verify::{run_suite, Suite};
use spark_core::Tensor;

use crate::config::{DataSource, RunConfig};
use crate::{ConvertArgs, FlopsArgs, PretrainArgs, ReconstructArgs, VerifyArgs};

/// Invalid flags or configuration, reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

const CONVERSION_TOLERANCE: f64 = 1e-6;
const MASK_SEED_STREAM: u64 = 4;

/// Applies command-line overrides on top of `cfg`.
pub fn apply_flags(cfg: &mut RunConfig, a: &PretrainArgs) -> Result<()> {
    if let Some(p) = &a.data {
        cfg.data = DataSource::Dir { path: p.clone() };
    }
    if let Some(image_size) = a.image_size {
        cfg.model.image_size = image_size;
    }
    if let Some(n) = a.synth {
        cfg.data = DataSource::Synth {
            count: n,
            size: cfg.model.image_size,
            seed: a.seed.unwrap_or(cfg.train.seed),
        };
    }
    if let DataSource::Synth { size, .. } = &mut cfg.data {
        *size = (*size).max(cfg.model.image_size);
    }
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch {
        t.batch_size = v;
    }
    if let Some(v) = a.max_steps {
        t.max_steps = Some(v);
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.optimizer {
        t.optimizer = v;
    }
    if let Some(v) = a.base_lr {
        t.lr = LrRule::Scaled { base: v };
    }
    if let Some(v) = a.peak_lr {
        t.lr = LrRule::Peak { value: v };
    }
    if let Some(v) = a.warmup {
        t.warmup_steps = Some(v);
    }
    if let Some(v) = a.weight_decay {
        t.hyper.weight_decay = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    let m = &mut cfg.model;
    if let Some(v) = a.mask_ratio {
        m.mask.ratio = v;
    }
    if let Some(v) = a.patch {
        m.mask.patch_size = v;
    }
    let widths = match (&a.widths, a.stages) {
        (Some(w), Some(s)) if w.len() != s => {
            return Err(usage(format!("--stages {} does not match {} --widths", s, w.len())))
        }
        (Some(w), _) => Some(w.clone()),
        (None, Some(s)) => Some((0..s).map(|i| 16 << i).collect()),
        (None, None) => None,
    };
    if let Some(w) = widths {
        m.encoder.stages = w.len();
        m.decoder.fea_dim = 2 * w.last().copied().unwrap_or(0);
        m.encoder.widths = w;
        m.decoder.upsample_ratio = m.encoder.total_stride();
    }
    if let Some(v) = a.fea_dim {
        m.decoder.fea_dim = v;
    }
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    m.ablation = cfg.variant.ablation();
    Ok(())
}

fn load_data(src: &DataSource) -> Result<Vec<ImageRecord>> {
    match src {
        DataSource::Dir { path } => {
            let manifest =
                DatasetManifest::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
            Ok(manifest.load()?)
        }
        DataSource::Synth { count, size, seed } => Ok(synth_images(*count, *size, *seed)?),
    }
}

fn write_config(out: &Path, json: &str) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.json"), json)?;
    print!("{json}");
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let (mut model, mut trainer, cfg) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let prev = path
                .parent()
                .map(|d| d.join("config.json"))
                .filter(|p| p.exists())
                .ok_or_else(|| usage("--resume needs the config.json of the original run beside the checkpoint"))?;
            let cfg = RunConfig::from_file(&prev)?;
            let (model, trainer) = Trainer::resume(&ckpt)?;
            (model, trainer, cfg)
        }
        None => {
            let mut cfg = match &a.config {
                Some(p) => RunConfig::from_file(p).map_err(|e| usage(format!("{e:#}")))?,
                None => RunConfig::default(),
            };
            apply_flags(&mut cfg, &a)?;
            cfg.model.validate().map_err(|e| usage(e.to_string()))?;
            cfg.train.validate().map_err(|e| usage(e.to_string()))?;
            let mut rng = stream(cfg.train.seed, &[0]);
            let model = SparkModel::new(cfg.model.clone(), &mut rng)?;
            let trainer = Trainer::new(cfg.train.clone(), &model)?;
            (model, trainer, cfg)
        }
    };
    write_config(&a.out, &cfg.to_json()?)?;
    let data = load_data(&cfg.data)?;
    let total = cfg.train.total_steps(data.len())?;
    let metrics_path = a.out.join("metrics.csv");
    let mut metrics = if a.resume.is_some() && metrics_path.exists() {
        truncate_metrics(&metrics_path, trainer.step)?;
        MetricsWriter::append(BufWriter::new(File::options().append(true).open(&metrics_path)?))
    } else {
        MetricsWriter::new(BufWriter::new(File::create(&metrics_path)?))?
    };
    let every = cfg.checkpoint_every;
    let out = a.out.clone();
    trainer.run(&mut model, &data, |log, tr, m| {
        metrics.write(log)?;
        println!(
            "step {}/{} epoch {} lr {:.3e} loss {:.6}",
            log.step, total, log.epoch, log.lr, log.loss
        );
        if every > 0 && log.step % every == 0 {
            tr.checkpoint(m)
                .save(out.join(format!("ckpt_step{:06}.sprk", log.step)))?;
        }
        Ok(())
    })?;
    drop(metrics);
    let last = a.out.join("ckpt_last.sprk");
    trainer.checkpoint(&model).save(&last)?;
    println!("saved {}", last.display());
    Ok(())
}

/// Drops metric rows logged after `step`, e.g. by a run that continued past
/// the checkpoint being resumed.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let text = fs::read_to_string(path)?;
    let kept: String = text
        .lines()
        .enumerate()
        .filter(|(i, l)| {
            *i == 0
                || l.split(',')
                    .next()
                    .and_then(|s| s.parse::<u64>().ok())
                    .is_some_and(|s| s <= step)
        })
        .map(|(_, l)| format!("{l}\n"))
        .collect();
    fs::write(path, kept)?;
    Ok(())
}

/// Centre crop to `size`, or an error if the image is smaller.
fn fit(img: &Tensor, size: usize) -> Result<Tensor> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if h < size || w < size {
        bail!("image is {h}x{w}, smaller than the model input {size}x{size}");
    }
    Ok(crop(img, (h - size) / 2, (w - size) / 2, size)?)
}

pub fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let mut model = restore_model(&ckpt)?;
    let cfg = model.config().clone();
    let image = fit(&load_ppm(&a.image)?, cfg.image_size)?;
    let batch = Tensor::stack(&[image])?;
    let mut mask_cfg = cfg.mask.clone();
    if let Some(r) = a.mask_ratio {
        mask_cfg.ratio = r;
    }
    mask_cfg
        .validate(cfg.encoder.total_stride())
        .map_err(|e| usage(e.to_string()))?;
    let grid = cfg.grid();
    let masks = vec![mask_cfg.generate(grid, grid, &mut stream(a.seed, &[MASK_SEED_STREAM]))?];

    let echo = serde_json::json!({
        "ckpt": a.ckpt,
        "image": a.image,
        "seed": a.seed,
        "mask_ratio": mask_cfg.ratio,
        "model": cfg,
    });
    write_config(&a.out, &(serde_json::to_string_pretty(&echo)? + "\n"))?;

    let tape = spark_core::Tape::new();
    let mut session = model.session(&tape, false);
    let out = session.forward(&batch, &masks)?;
    let loss = out.loss.item();
    let pred = out
        .targets
        .denormalize(out.recon.value().as_ref())?
        .map(|v| v.clamp(0.0, 1.0));

    let masked_px = masks[0].masked_pixel_map();
    let size = cfg.image_size;
    let plane = size * size;
    let mut composite = batch.clone();
    for c in 0..3 {
        for (i, &m) in masked_px.iter().enumerate() {
            if m {
                composite.data_mut()[c * plane + i] = pred.data()[c * plane + i];
            }
        }
    }
    save_ppm(a.out.join("masked_input.ppm"), &zero_out_image(&batch, &masks)?)?;
    save_ppm(a.out.join("reconstruction.ppm"), &pred)?;
    save_ppm(a.out.join("composite.ppm"), &composite)?;
    println!("masked patches {}/{}", masks[0].masked_count(), grid * grid);
    println!("masked mse (normalized) {loss:.6}");
    Ok(())
}

pub fn convert(a: ConvertArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let model = restore_model(&ckpt)?;
    let cfg = model.config().clone();
    let mut dense = DenseEncoder::from_store(&cfg, model.store())?;
    let export = Checkpoint {
        kind: CheckpointKind::Encoder,
        model: cfg.clone(),
        train: None,
        step: ckpt.step,
        rng: None,
        params: dense.store().clone(),
        optimizer: None,
    };
    let echo = serde_json::json!({ "ckpt": a.ckpt, "seed": a.seed, "model": cfg });
    write_config(&a.out, &(serde_json::to_string_pretty(&echo)? + "\n"))?;
    let path = a.out.join("encoder.sprk");
    export.save(&path)?;
    println!("saved {} ({} tensors)", path.display(), export.params.len());

    let probe = synth_record(cfg.image_size, a.seed, 0)?;
    let image = Tensor::stack(&[probe.pixels])?;
    let gap = conversion_gap(&model, &mut dense, &image)?;
    let ok = gap < CONVERSION_TOLERANCE;
    println!(
        "self-check: dense vs sparse (nothing masked) max abs diff {gap:.3e} {}",
        if ok { "PASS" } else { "FAIL" }
    );
    if !ok {
        bail!("converted encoder deviates from the sparse encoder by {gap:.3e}");
    }
    Ok(())
}

pub fn flops_csv(a: &FlopsArgs) -> Result<String> {
    let widths = a
        .widths
        .clone()
        .unwrap_or_else(|| (0..a.stages).map(|i| 32 << i).collect());
    if widths.len() != a.stages {
        return Err(usage(format!(
            "--stages {} does not match {} --widths",
            a.stages,
            widths.len()
        )));
    }
    let enc = EncoderConfig {
        stages: a.stages,
        widths,
        ..EncoderConfig::default()
    };
    enc.validate().map_err(|e| usage(e.to_string()))?;
    if !a.image_size.is_multiple_of(a.patch) {
        return Err(usage(format!(
            "image size {} is not a multiple of patch {}",
            a.image_size, a.patch
        )));
    }
    let mask_cfg = spark_core::masking::MaskConfig {
        patch_size: a.patch,
        ratio: a.mask_ratio,
        ..Default::default()
    };
    mask_cfg
        .validate(enc.total_stride())
        .map_err(|e| usage(e.to_string()))?;
    if a.batch == 0 {
        return Err(usage("batch must be positive"));
    }
    let grid = a.image_size / a.patch;
    let mut rng = stream(a.seed, &[MASK_SEED_STREAM]);
    let masks = (0..a.batch)
        .map(|_| mask_cfg.generate(grid, grid, &mut rng))
        .collect::<spark_core::Result<Vec<_>>>()?;
    let mut csv = String::from("layer,scale,sparse_macs,dense_macs,ratio\n");
    for l in encoder_macs(&enc, &masks)? {
        csv += &format!("{},{},{},{},{:.6}\n", l.layer, l.scale, l.sparse, l.dense, l.ratio());
    }
    Ok(csv)
}

pub fn flops(a: FlopsArgs) -> Result<()> {
    let csv = flops_csv(&a)?;
    print!("{csv}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("flops.csv"), &csv)?;
    }
    Ok(())
}

pub fn verify(a: VerifyArgs) -> Result<()> {
    let suites: Vec<Suite> = a.suite.map_or_else(|| Suite::ALL.to_vec(), |s| vec![s]);
    let mut failed = Vec::new();
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for s in suites {
        let report = run_suite(s, a.seed)?;
        writeln!(lock, "{report}")?;
        if !report.passed() {
            failed.push(s.name());
        }
    }
    if !failed.is_empty() {
        bail!("failed suites: {}", failed.join(", "));
    }
    Ok(())
}
