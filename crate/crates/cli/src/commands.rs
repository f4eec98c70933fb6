use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rockseg::bench::{
    evaluate_on, fit_and_evaluate, point_config, run_ablation, run_classical, run_classification, run_probing,
    run_sweep, aggregate, results_csv, Extractor, FeatureSource, FinetuneSeg, MethodSpec, RunRecord, RunStore,
};
use rockseg::classical::{segment, ClassOrderMapping, ClassicalMethod};
use rockseg::config::ExperimentConfig;
use rockseg::ingest::{
    auto_contrast, convert, convert_labels, load_mask, load_slice, make_split, save_features, save_mask, save_slice,
    DatasetCatalog, SampleRole, SliceRef,
};
use rockseg::interpret::{
    barycenter_figure, center_crop_slice, confusion_values, coords_csv, mask_gallery, mask_to_rgb, pca_figure,
    pca_rgb, render_confusion, scatter_figure, sweep_figure, tsne_embed, EmbeddingSet, GalleryRow,
};
use rockseg::metrics::{confusion_matrix, ConfusionMatrix};
use rockseg::neural::{
    image_embedding, load_checkpoint, BackboneSize, BackboneSpec, HeadKind, HeadSpec, LoraConfig, ModelSpec,
    QuantConfig, TrainConfig, UnetSize,
};
use rockseg::preprocess::{bfe, nl_means_with};
use rockseg::{ClassPalette, Error, EvalReport, GraySlice, LabelMask, Result};

use crate::{
    Cli, Command, ConvertArgs, EvaluateArgs, ExtractArgs, FigureKind, FinetuneArgs, Head, PreprocessArgs, ProbeArgs,
    SegmentArgs, SweepArgs, SweepKind, VisualizeArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.global.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg = cfg.with_overrides(&cli.global.sets)?;
    if let Some(o) = cli.global.output {
        cfg.output = o;
    }
    match cli.command {
        Command::Convert(a) => cmd_convert(cfg, a),
        Command::Preprocess(a) => cmd_preprocess(cfg, a),
        Command::Segment(a) => cmd_segment(cfg, a),
        Command::Extract(a) => cmd_extract(cfg, a),
        Command::Probe(a) => cmd_probe(cfg, a),
        Command::Finetune(a) => cmd_finetune(cfg, a),
        Command::Evaluate(a) => cmd_evaluate(cfg, a),
        Command::Sweep(a) => cmd_sweep(cfg, a),
        Command::Visualize(a) => cmd_visualize(cfg, a),
    }
}

fn emit(v: serde_json::Value) {
    println!("{v}");
}

/// A single `.npy` file, or every `.npy` in a directory in name order.
fn list_slices(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::MissingDataset {
            path: input.to_path_buf(),
            hint: "pass a .npy slice or a directory of them (see `rockseg convert`)".into(),
        });
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "npy"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::NoSlices(input.to_path_buf()));
    }
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn sample_name(p: &Path) -> String {
    let dir = if p.is_dir() { Some(p) } else { p.parent() };
    dir.and_then(|d| d.file_name()).map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into())
}

fn parse_palette(name: &str, n_classes: usize) -> Result<Arc<ClassPalette>> {
    let pal = match name {
        "carbonates" => ClassPalette::carbonates(),
        "sandstones" => ClassPalette::sandstones(),
        "indexed" => ClassPalette::indexed(n_classes)?,
        other => return Err(Error::Config(format!("unknown palette {other:?} (carbonates, sandstones, indexed)"))),
    };
    if pal.len() != n_classes {
        return Err(Error::Config(format!("palette {name} has {} classes, expected {n_classes}", pal.len())));
    }
    Ok(Arc::new(pal))
}

fn parse_features(s: &str) -> Result<FeatureSource> {
    if s == "bfe" {
        return Ok(FeatureSource::Bfe {
            config: Default::default(),
            denoise: Some(Default::default()),
        });
    }
    let size = s
        .strip_prefix("dinov2-")
        .ok_or_else(|| Error::Config(format!("unknown features {s:?} (bfe, dinov2-small, dinov2-base, dinov2-large)")))?;
    let size: BackboneSize = size.parse()?;
    Ok(FeatureSource::Dinov2 {
        backbone: BackboneSpec::new(size, 1),
    })
}

fn load_catalog(cfg: &ExperimentConfig) -> Result<DatasetCatalog> {
    let p = cfg
        .catalog
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset catalog: set `catalog` in the config or pass --set catalog=PATH".into()))?;
    if !p.is_file() {
        return Err(Error::MissingDataset {
            path: p.clone(),
            hint: "write a catalog listing sample directories and palettes (see README)".into(),
        });
    }
    let c = DatasetCatalog::load(p)?;
    c.validate()?;
    Ok(c)
}

fn save_mask_files(dir: &Path, name: &str, mask: &LabelMask) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_mask(dir.join(format!("{name}.npy")), mask)?;
    mask_to_rgb(mask).save(dir.join(format!("{name}.png")))?;
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn file_id(r: &SliceRef) -> String {
    format!("{}_{:05}", r.sample_id, r.index)
}

fn cmd_convert(cfg: ExperimentConfig, a: ConvertArgs) -> Result<()> {
    cfg.validate()?;
    if !a.input.is_dir() {
        return Err(Error::MissingDataset {
            path: a.input.clone(),
            hint: "directory of TIFF scans expected".into(),
        });
    }
    cfg.write_resolved(&cfg.output)?;
    let n = if a.labels {
        convert_labels(&a.input, &cfg.output)?
    } else {
        convert(&a.input, &cfg.output)?
    };
    emit(serde_json::json!({ "slices": n, "output": cfg.output }));
    Ok(())
}

fn cmd_preprocess(mut cfg: ExperimentConfig, a: PreprocessArgs) -> Result<()> {
    if a.no_denoise {
        cfg.preprocess.denoise = false;
    }
    if a.bfe {
        cfg.preprocess.bfe = true;
    }
    cfg.validate()?;
    let files = list_slices(&a.input)?;
    cfg.write_resolved(&cfg.output)?;
    let p = &cfg.preprocess;
    let sample = sample_name(&a.input);
    let slices_dir = cfg.output.join("slices");
    let feat_dir = cfg.output.join("features");
    fs::create_dir_all(&slices_dir)?;
    for (i, f) in files.iter().enumerate() {
        let mut s = load_slice(f, &sample, i)?;
        if let Some(sat) = p.contrast_saturation {
            s = auto_contrast(&s, sat)?;
        }
        if p.denoise {
            s = nl_means_with(&s, &p.nlmeans)?;
        }
        save_slice(slices_dir.join(format!("{}.npy", stem(f))), &s)?;
        if p.bfe {
            fs::create_dir_all(&feat_dir)?;
            save_features(feat_dir.join(format!("{}.npy", stem(f))), &bfe(&s, &p.bfe_config)?)?;
        }
        log::info!("preprocessed {}", f.display());
    }
    emit(serde_json::json!({ "slices": files.len(), "output": cfg.output }));
    Ok(())
}

fn cmd_segment(mut cfg: ExperimentConfig, a: SegmentArgs) -> Result<()> {
    if let Some(m) = &a.method {
        cfg.segment.method = m.parse::<ClassicalMethod>()?;
    }
    if let Some(n) = a.classes {
        cfg.segment.n_classes = n;
    }
    cfg.validate()?;
    let seg = &cfg.segment;
    let files = list_slices(&a.input)?;
    let palette = parse_palette(&a.palette, seg.n_classes)?;
    cfg.write_resolved(&cfg.output)?;
    let sample = sample_name(&a.input);
    let mut slices = Vec::new();
    let mut clusters = Vec::new();
    let mut fits = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let s = load_slice(f, &sample, i)?;
        let (mask, fit) = segment(&s, seg.method, seg.n_classes, cfg.seed, &seg.classical)?;
        fits.push(serde_json::json!({ "file": f.file_name().map(|n| n.to_string_lossy()), "fit": fit }));
        slices.push(s);
        clusters.push(mask);
    }
    let masks_dir = cfg.output.join("masks");
    let mut evaluation = None;
    if let Some(gt_dir) = &a.gt {
        let gts: Vec<LabelMask> = files
            .iter()
            .map(|f| load_mask(gt_dir.join(f.file_name().expect("file")), palette.clone()))
            .collect::<Result<_>>()?;
        let mapping = ClassOrderMapping::from_gt(slices.iter().zip(&gts))?;
        let mut cm = ConfusionMatrix::zeros(palette.len());
        for ((f, c), gt) in files.iter().zip(&clusters).zip(&gts) {
            let m = mapping.apply(c)?;
            cm.merge(&confusion_matrix(&m, gt)?)?;
            save_mask_files(&masks_dir, &stem(f), &m)?;
        }
        let rep = EvalReport::from_confusion(cm, palette.names().to_vec(), seg.method.name(), 0, cfg.seed)?;
        render_confusion(&rep, cfg.visualize.normalize).save(&cfg.output.join("figures").join("confusion"))?;
        evaluation = Some(rep);
    } else {
        for (f, c) in files.iter().zip(&clusters) {
            let m = LabelMask::new(c.labels().clone(), palette.clone())?;
            save_mask_files(&masks_dir, &stem(f), &m)?;
        }
    }
    let report = serde_json::json!({
        "method": seg.method.name(),
        "n_classes": seg.n_classes,
        "slices": fits,
        "evaluation": evaluation,
    });
    write_json(&cfg.output.join("report.json"), &report)?;
    emit(serde_json::json!({
        "masks": files.len(),
        "output": cfg.output,
        "mean_iou": evaluation.as_ref().map(|r| r.mean_iou),
    }));
    Ok(())
}

fn cmd_extract(mut cfg: ExperimentConfig, a: ExtractArgs) -> Result<()> {
    if let Some(f) = &a.features {
        cfg.extract.features = parse_features(f)?;
    }
    cfg.validate()?;
    let files = list_slices(&a.input)?;
    let dev = cfg.device()?;
    let ex = Extractor::new(&cfg.extract.features, &dev)?;
    cfg.write_resolved(&cfg.output)?;
    let dir = cfg.output.join("features");
    fs::create_dir_all(&dir)?;
    let sample = sample_name(&a.input);
    let mut shapes = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let fm = ex.extract(&load_slice(f, &sample, i)?)?;
        save_features(dir.join(format!("{}.npy", stem(f))), &fm)?;
        shapes.push(fm.dim());
    }
    write_json(
        &cfg.output.join("features.json"),
        &serde_json::json!({ "extractor": cfg.extract.features.label(), "files": files, "shapes": shapes }),
    )?;
    emit(serde_json::json!({ "features": files.len(), "output": dir }));
    Ok(())
}

/// Fits one method on the configured split, then writes masks, the model
/// (when there is one), the report and a confusion figure into its run dir.
fn run_single(cfg: &ExperimentConfig, catalog: &DatasetCatalog, method: &MethodSpec) -> Result<()> {
    let dev = cfg.device()?;
    let split = cfg.split.spec(cfg.seed);
    let view = cfg.split.view.as_ref();
    let store = RunStore::new(&cfg.output)?;
    let (_, hash) = point_config(method, &split, view);
    let dir = store.run_dir(&hash);
    cfg.write_resolved(&dir)?;
    let masks = dir.join("masks");
    let mut sink = |r: &SliceRef, m: &LabelMask| save_mask_files(&masks, &file_id(r), m);
    let (rec, fitted) = fit_and_evaluate(catalog, method, &split, view, &dev, Some(&mut sink))?;
    let model = fitted.save(&dir)?;
    store.save(&rec)?;
    render_confusion(&rec.report, cfg.visualize.normalize).save(&dir.join("figures").join("confusion"))?;
    emit(serde_json::json!({
        "run_dir": dir,
        "method": rec.method,
        "mean_iou": rec.report.mean_iou,
        "per_class_iou": rec.report.per_class_iou,
        "n_trainable": rec.n_trainable,
        "model": model,
    }));
    Ok(())
}

fn method_features(m: &MethodSpec) -> Option<FeatureSource> {
    match m {
        MethodSpec::Knn { features, .. } | MethodSpec::Probe { features, .. } => Some(features.clone()),
        MethodSpec::RandomForest { features, .. } => Some(features.clone()),
        _ => None,
    }
}

fn cmd_probe(mut cfg: ExperimentConfig, a: ProbeArgs) -> Result<()> {
    let features = match &a.features {
        Some(f) => parse_features(f)?,
        None => method_features(&cfg.probe.method)
            .ok_or_else(|| Error::Config("probe.method needs features (knn or probe)".into()))?,
    };
    let (knn, probe) = match &cfg.probe.method {
        MethodSpec::Knn { knn, .. } => (knn.clone(), Default::default()),
        MethodSpec::Probe { probe, .. } => (Default::default(), probe.clone()),
        _ => Default::default(),
    };
    let head = a.head.or(match &cfg.probe.method {
        MethodSpec::Knn { .. } => Some(Head::Knn),
        MethodSpec::Probe { head: HeadKind::Conv, .. } => Some(Head::Conv),
        MethodSpec::Probe { .. } => Some(Head::Linear),
        _ => None,
    });
    cfg.probe.method = match head {
        Some(Head::Knn) => MethodSpec::Knn { features, knn },
        Some(Head::Linear) => MethodSpec::Probe {
            features,
            head: HeadKind::Linear,
            probe,
        },
        Some(Head::Conv) => MethodSpec::Probe {
            features,
            head: HeadKind::Conv,
            probe,
        },
        None => return Err(Error::Config("probe.method must be knn or probe".into())),
    };
    if let Some(n) = a.n_train {
        cfg.split.n_train = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let catalog = load_catalog(&cfg)?;
    run_single(&cfg, &catalog, &cfg.probe.method.clone())
}

fn set_n_classes(spec: &mut ModelSpec, n: usize) {
    match spec {
        ModelSpec::Vit { head, .. } | ModelSpec::ResnetConvHead { head, .. } => head.n_classes = n,
        ModelSpec::Unet { n_classes, .. } => *n_classes = n,
    }
}

fn apply_finetune_flags(cfg: &mut ExperimentConfig, a: &FinetuneArgs) -> Result<()> {
    let n = cfg.finetune.model.n_classes();
    let spec = &mut cfg.finetune.model;
    if let Some(m) = &a.model {
        *spec = match m.as_str() {
            "vit" => match spec {
                ModelSpec::Vit { .. } => spec.clone(),
                _ => ModelSpec::Vit {
                    backbone: BackboneSpec::new(BackboneSize::Base, 1),
                    head: HeadSpec::new(HeadKind::Conv, n),
                    lora: Some(LoraConfig::default()),
                    quant: Some(QuantConfig::default()),
                },
            },
            "unet-small" | "unet-large" => ModelSpec::Unet {
                size: if m == "unet-small" { UnetSize::Small } else { UnetSize::Large },
                n_classes: n,
            },
            "resnet152" => ModelSpec::ResnetConvHead {
                head: HeadSpec::new(HeadKind::Conv, n),
                lora: Some(LoraConfig::default()),
                quant: None,
                checkpoint: None,
                random_init: false,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown model {other:?} (vit, unet-small, unet-large, resnet152)"
                )))
            }
        };
        cfg.finetune.train.batch_size = TrainConfig::for_model(spec).batch_size;
    }
    let is_unet = matches!(spec, ModelSpec::Unet { .. });
    if let Some(b) = &a.backbone {
        let ModelSpec::Vit { backbone, .. } = spec else {
            return Err(Error::Config("--backbone applies to the vit model only".into()));
        };
        *backbone = BackboneSpec::new(b.parse()?, backbone.layers_used.len().max(1));
    }
    if let Some(h) = a.head {
        let kind = match h {
            Head::Linear => HeadKind::Linear,
            Head::Conv => HeadKind::Conv,
            Head::Knn => return Err(Error::Config("knn is not a trainable head; use `rockseg probe --head knn`".into())),
        };
        match spec {
            ModelSpec::Vit { head, .. } | ModelSpec::ResnetConvHead { head, .. } => head.kind = kind,
            ModelSpec::Unet { .. } => return Err(Error::Config("--head does not apply to unet".into())),
        }
    }
    if a.lora_r.is_some() || a.quant.is_some() {
        if is_unet {
            return Err(Error::Config("--lora-r and --quant do not apply to unet".into()));
        }
        let (ModelSpec::Vit { lora, quant, .. } | ModelSpec::ResnetConvHead { lora, quant, .. }) = spec else {
            unreachable!()
        };
        if let Some(r) = a.lora_r {
            *lora = (r > 0).then(|| LoraConfig {
                rank: r,
                alpha: r as f64,
                ..lora.clone().unwrap_or_default()
            });
        }
        match a.quant.as_deref() {
            Some("4bit") => *quant = Some(QuantConfig::default()),
            Some(_) => *quant = None,
            None => {}
        }
    }
    if let Some(n) = a.n_train {
        cfg.split.n_train = n;
    }
    if let Some(e) = a.epochs {
        cfg.finetune.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    Ok(())
}

fn cmd_finetune(mut cfg: ExperimentConfig, a: FinetuneArgs) -> Result<()> {
    apply_finetune_flags(&mut cfg, &a)?;
    let catalog = load_catalog(&cfg)?;
    let n = catalog.palette_of(&cfg.split.test_sample)?.len();
    set_n_classes(&mut cfg.finetune.model, n);
    cfg.validate()?;
    let method = MethodSpec::Finetune {
        model: cfg.finetune.model.clone(),
        train: cfg.finetune.train.clone(),
        val_fraction: cfg.finetune.val_fraction,
    };
    run_single(&cfg, &catalog, &method)
}

fn cmd_evaluate(cfg: ExperimentConfig, a: EvaluateArgs) -> Result<()> {
    cfg.validate()?;
    if !a.checkpoint.is_file() {
        return Err(Error::MissingCheckpoint {
            path: a.checkpoint.clone(),
            hint: "train one with `rockseg finetune`; it is written as <run_dir>/model.safetensors".into(),
        });
    }
    let catalog = load_catalog(&cfg)?;
    let dev = cfg.device()?;
    let (model, meta) = load_checkpoint(&a.checkpoint, &dev)?;
    let palette = catalog.palette_of(&cfg.split.test_sample)?;
    if palette.len() != model.n_classes() {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes but sample {} has {}",
            model.n_classes(),
            cfg.split.test_sample,
            palette.len()
        )));
    }
    let mut split = cfg.split.spec(cfg.seed);
    split.n_train_images = 0;
    let (_, test) = make_split(&catalog, &split)?;
    cfg.write_resolved(&cfg.output)?;
    let seg = FinetuneSeg::from_model(model, palette);
    let masks = cfg.output.join("masks");
    let mut sink = |r: &SliceRef, m: &LabelMask| save_mask_files(&masks, &file_id(r), m);
    let report = evaluate_on(
        &catalog,
        &seg,
        &test,
        cfg.split.view.as_ref(),
        Some(&mut sink),
        (meta.model.label(), 0, meta.seed),
    )?;
    write_json(&cfg.output.join("report.json"), &report)?;
    render_confusion(&report, cfg.visualize.normalize).save(&cfg.output.join("figures").join("confusion"))?;
    emit(serde_json::json!({
        "checkpoint": a.checkpoint,
        "mean_iou": report.mean_iou,
        "per_class_iou": report.per_class_iou,
        "output": cfg.output,
    }));
    Ok(())
}

fn cmd_sweep(cfg: ExperimentConfig, a: SweepArgs) -> Result<()> {
    cfg.validate()?;
    let catalog = load_catalog(&cfg)?;
    let dev = cfg.device()?;
    let store = RunStore::new(&cfg.output)?;
    cfg.write_resolved(&cfg.output)?;
    let result = match a.kind {
        SweepKind::DataRegime => {
            let mut spec = cfg
                .sweep
                .clone()
                .ok_or_else(|| Error::Config("a [sweep] section with at least `methods` is required".into()))?;
            spec.resume |= a.resume;
            run_sweep(&spec, &catalog, &dev, Some(&store))?
        }
        SweepKind::Ablation => run_ablation(&cfg.ablation.clone().unwrap_or_default(), &catalog, &dev, Some(&store))?,
        SweepKind::Probing => {
            let spec = cfg
                .probing
                .clone()
                .ok_or_else(|| Error::Config("a [probing] section with `n_train` is required".into()))?;
            run_probing(&spec, &catalog, &dev, Some(&store))?
        }
        SweepKind::Classical => {
            let mut samples = cfg.split.train_samples.clone();
            samples.push(cfg.split.test_sample.clone());
            let table = run_classical(
                &catalog,
                &samples,
                &ClassicalMethod::ALL,
                &cfg.segment.classical,
                cfg.split.n_test_images,
                cfg.seed,
            )?;
            let csv = table.to_csv();
            fs::write(cfg.output.join("classical.csv"), &csv)?;
            write_json(&cfg.output.join("classical_reports.json"), &table.reports)?;
            print!("{csv}");
            return Ok(());
        }
        SweepKind::Classification => {
            let spec = cfg.classification.clone().unwrap_or_default();
            let cells = run_classification(&spec, &catalog, &dev)?;
            let mut csv = String::from("k,resolution,accuracy\n");
            for c in &cells {
                csv.push_str(&format!("{},{},{:.6}\n", c.k, c.resolution, c.accuracy));
            }
            fs::write(cfg.output.join("classification.csv"), &csv)?;
            print!("{csv}");
            return Ok(());
        }
    };
    print!("{}", results_csv(&result.table));
    Ok(())
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path)?;
    if let Ok(r) = serde_json::from_str::<RunRecord>(&text) {
        return Ok(r.report);
    }
    let v: serde_json::Value = serde_json::from_str(&text)?;
    // segment writes the report under "evaluation"
    let inner = v.get("evaluation").filter(|e| !e.is_null()).cloned().unwrap_or(v);
    serde_json::from_value(inner).map_err(|e| Error::Format(format!("{}: not an evaluation report ({e})", path.display())))
}

fn cmd_visualize(cfg: ExperimentConfig, a: VisualizeArgs) -> Result<()> {
    cfg.validate()?;
    let figs = cfg.output.join("figures");
    let need = |p: &Option<PathBuf>, flag: &str| -> Result<PathBuf> {
        p.clone().ok_or_else(|| Error::Config(format!("--{flag} is required for this figure")))
    };
    let written = match a.kind {
        FigureKind::Confusion => {
            let rep = read_report(&need(&a.report, "report")?)?;
            cfg.write_resolved(&cfg.output)?;
            let vals = confusion_values(&rep, cfg.visualize.normalize);
            let mut csv = format!("true\\pred,{}\n", rep.class_names.join(","));
            for (name, row) in rep.class_names.iter().zip(&vals) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
                csv.push_str(&format!("{name},{}\n", cells.join(",")));
            }
            fs::create_dir_all(&figs)?;
            fs::write(figs.join("confusion.csv"), csv)?;
            render_confusion(&rep, cfg.visualize.normalize).save(&figs.join("confusion"))?
        }
        FigureKind::Sweep => {
            let runs = a.runs.clone().unwrap_or_else(|| cfg.output.clone());
            let table = aggregate(&RunStore::new(&runs)?.ledger()?);
            cfg.write_resolved(&cfg.output)?;
            fs::create_dir_all(&figs)?;
            fs::write(figs.join("sweep.csv"), results_csv(&table))?;
            sweep_figure(&table)?.save(&figs.join("sweep"))?
        }
        FigureKind::Pca => {
            let input = need(&a.input, "input")?;
            let dev = cfg.device()?;
            let ex = Extractor::new(&cfg.extract.features, &dev)?;
            cfg.write_resolved(&cfg.output)?;
            let s = load_slice(&input, &sample_name(&input), 0)?;
            let view = pca_rgb(&ex.extract(&s)?)?;
            for w in &view.warnings {
                log::warn!("{w}");
            }
            let title = format!("PCA of {} features", cfg.extract.features.label());
            pca_figure(&view, &title).save(&figs.join(format!("pca_{}", stem(&input))))?
        }
        FigureKind::Tsne => tsne_figures(&cfg, &figs)?,
        FigureKind::Gallery => {
            let images = need(&a.input, "input")?;
            let gt_dir = need(&a.gt, "gt")?;
            if a.pred.is_empty() {
                return Err(Error::Config("--pred is required at least once for a gallery".into()));
            }
            let pal = match a.palette.split_once(':') {
                Some(("indexed", n)) => {
                    let n = n.parse().map_err(|_| Error::Config(format!("bad palette {:?}", a.palette)))?;
                    parse_palette("indexed", n)?
                }
                _ => {
                    let p = match a.palette.as_str() {
                        "carbonates" => ClassPalette::carbonates(),
                        "sandstones" => ClassPalette::sandstones(),
                        other => return Err(Error::Config(format!("unknown palette {other:?}"))),
                    };
                    Arc::new(p)
                }
            };
            let mut rows = Vec::new();
            for (i, f) in list_slices(&images)?.iter().enumerate() {
                if rows.len() == a.rows {
                    break;
                }
                let name = f.file_name().expect("file");
                let gt = gt_dir.join(name);
                if !gt.is_file() || a.pred.iter().any(|d| !d.join(name).is_file()) {
                    continue;
                }
                rows.push(GalleryRow {
                    image: load_slice(f, &sample_name(&images), i)?,
                    gt: load_mask(&gt, pal.clone())?,
                    predictions: a
                        .pred
                        .iter()
                        .map(|d| load_mask(d.join(name), pal.clone()))
                        .collect::<Result<_>>()?,
                });
            }
            let captions: Vec<String> = match &a.captions {
                Some(c) => c.split(',').map(|s| s.trim().to_string()).collect(),
                None => ["image".to_string(), "ground truth".to_string()]
                    .into_iter()
                    .chain(a.pred.iter().map(|d| sample_name(&d.join("x"))))
                    .collect(),
            };
            cfg.write_resolved(&cfg.output)?;
            mask_gallery(&rows, &captions)?.save(&figs.join("gallery"))?
        }
    };
    emit(serde_json::json!({ "png": written.0, "pdf": written.1 }));
    Ok(())
}

/// Class-token embeddings of classification samples, embedded with t-SNE.
fn tsne_figures(cfg: &ExperimentConfig, figs: &Path) -> Result<(PathBuf, PathBuf)> {
    let catalog = load_catalog(cfg)?;
    let dev = cfg.device()?;
    let src = FeatureSource::Dinov2 {
        backbone: BackboneSpec::new(cfg.visualize.backbone, 1),
    };
    let Extractor::Vit { vit, device } = Extractor::new(&src, &dev)? else {
        unreachable!("transformer source")
    };
    cfg.write_resolved(&cfg.output)?;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut labels = Vec::new();
    let mut crops: Vec<GraySlice> = Vec::new();
    for e in catalog.samples.iter().filter(|e| e.role == SampleRole::Classification) {
        let label = e.label.clone().unwrap_or_else(|| e.id.clone());
        for r in catalog.slices(&e.id)?.iter().take(cfg.visualize.n_per_sample) {
            let s = r.load()?;
            rows.push(image_embedding(&vit, &s, &device)?);
            labels.push(label.clone());
            crops.push(center_crop_slice(&s, rockseg::interpret::plots::CROP)?);
        }
    }
    if rows.is_empty() {
        return Err(Error::Config("catalog has no classification samples to embed".into()));
    }
    let d = rows[0].len();
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    let vectors = ndarray_from(flat, d)?;
    let set = EmbeddingSet::new(vectors, labels, src.label())?;
    let coords = tsne_embed(&set, &cfg.visualize.tsne)?;
    fs::create_dir_all(figs)?;
    fs::write(figs.join("tsne_coords.csv"), coords_csv(&coords, &set.labels))?;
    barycenter_figure(&coords, &set.labels, &crops)?.save(&figs.join("tsne_barycenters"))?;
    scatter_figure(&coords, &set.labels, &format!("t-SNE of {}", src.label()))?.save(&figs.join("tsne"))
}

fn ndarray_from(flat: Vec<f32>, d: usize) -> Result<ndarray::Array2<f32>> {
    let n = flat.len() / d;
    ndarray::Array2::from_shape_vec((n, d), flat).map_err(|e| Error::InvalidInput(e.to_string()))
}
