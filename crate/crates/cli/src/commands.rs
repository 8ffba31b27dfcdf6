use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rcps_core::dataset::{load_phantom_dataset, save_phantom_dataset};
use rcps_core::error::{Error, Result};
use rcps_core::infer::sliding_window_predict;
use rcps_core::metrics::evaluate_model;
use rcps_core::network::{load_checkpoint, UNet3d};
use rcps_core::phantom::generate_split;
use rcps_core::trainer::Trainer;
use rcps_core::{nifti, volume};

use crate::{
    apply_overrides, load_config, plot, resolve_out, EvalArgs, InferArgs, MakePhantomsArgs,
    PlotArgs, TrainArgs,
};

fn dir_is_nonempty(path: &Path) -> Result<bool> {
    if !path.exists() {
        return Ok(false);
    }
    Ok(std::fs::read_dir(path)?.next().is_some())
}

pub fn make_phantoms(args: MakePhantomsArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.phantom.seed = seed;
    }
    let out = resolve_out(&args.out);
    if dir_is_nonempty(&out)? && !args.force {
        return Err(Error::InvalidArgument(format!(
            "output directory {} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    let (train, test) = generate_split(&cfg.phantom, args.labeled, args.unlabeled, args.test)?;
    save_phantom_dataset(&out, &train, &test, &cfg.phantom)?;
    println!(
        "wrote {} labeled + {} unlabeled + {} test phantoms to {}",
        train.n_labeled(),
        train.m_unlabeled(),
        test.len(),
        out.display()
    );
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, &args.overrides);
    cfg.validate()?;

    let (mut data, _, _) = load_phantom_dataset(&args.data)?;
    if let Some(ratio) = cfg.labeled_ratio {
        data = data.with_labeled_ratio(ratio)?;
    }

    let run_name = args.run_name.clone().unwrap_or_else(|| {
        let ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        format!("run-{ms}-s{}", cfg.train.seed)
    });
    let run_dir = resolve_out(&args.out).join(run_name);
    std::fs::create_dir_all(&run_dir)?;
    cfg.save(run_dir.join("resolved-config.toml"))?;

    let mut trainer = match &args.resume {
        Some(ckpt) => Trainer::resume(ckpt, cfg.train.clone())?,
        None => Trainer::new(UNet3d::new(cfg.network.clone(), cfg.train.seed)?, cfg.train.clone())?,
    };
    let summary = trainer.fit(&data, &run_dir)?;
    println!(
        "trained {} steps on {} labeled + {} unlabeled cases",
        summary.steps_run,
        data.n_labeled(),
        data.m_unlabeled()
    );
    println!("run directory: {}", run_dir.display());
    println!("final checkpoint: {}", summary.final_checkpoint.display());
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let expected = args.config.as_ref().map(|_| &cfg.network);
    let (net, meta, _) = load_checkpoint::<f32>(&args.checkpoint, expected)?;

    let (_, test, _) = load_phantom_dataset(&args.data)?;
    if test.is_empty() {
        return Err(Error::InvalidArgument("dataset has no test split to evaluate".into()));
    }
    let spacing_aware = args.spacing_aware || cfg.spacing_aware;
    let (report, preds) = evaluate_model(&net, &test, &cfg.window, spacing_aware)?;

    let out = match &args.out {
        Some(o) => resolve_out(o),
        None => args
            .checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| std::path::PathBuf::from(".")),
    };
    std::fs::create_dir_all(&out)?;
    let csv_path = out.join("metrics.csv");
    report.write_csv(&csv_path)?;
    if args.save_preds {
        let pred_dir = out.join("preds");
        std::fs::create_dir_all(&pred_dir)?;
        for ((volume, _), pred) in test.iter().zip(&preds) {
            let path = pred_dir.join(format!("{}.nii.gz", volume.identifier));
            nifti::save_label(path, pred, volume.spacing)?;
        }
    }
    println!(
        "evaluated {} cases from checkpoint at epoch {}: mean DSC {:.4}",
        test.len(),
        meta.epoch,
        report.mean_dsc()
    );
    println!("metrics: {}", csv_path.display());
    Ok(())
}

pub fn infer(args: InferArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let expected = args.config.as_ref().map(|_| &cfg.network);
    let (net, _, _) = load_checkpoint::<f32>(&args.checkpoint, expected)?;
    let out = resolve_out(&args.out);
    std::fs::create_dir_all(&out)?;
    for input in &args.input {
        let (volume, _) = nifti::load_nifti(input)?;
        let pred = sliding_window_predict(&net, &volume, &cfg.window)?;
        let path = out.join(format!("{}_pred.nii.gz", volume.identifier));
        nifti::save_label(&path, &pred, volume.spacing)?;
        println!("{} -> {}", input.display(), path.display());
    }
    Ok(())
}

pub fn plot(args: PlotArgs) -> Result<()> {
    let out = resolve_out(&args.out);
    std::fs::create_dir_all(&out)?;
    let mut produced = Vec::new();

    if let Some(log) = &args.log {
        produced.extend(plot::training_curves(log, &out)?);
    }
    if let Some(pred) = &args.pred {
        let vol_path = args.volume.as_ref().ok_or_else(|| {
            Error::InvalidArgument("--pred needs --volume for the underlay image".into())
        })?;
        let (vol, _) = nifti::load_nifti(vol_path)?;
        let load_labels = |p: &Path| -> Result<volume::LabelMap> {
            let (raw, lab) = nifti::load_nifti(p)?;
            match lab {
                Some(l) => Ok(l),
                None => {
                    let data = raw.data.mapv(|v| v as u8);
                    let classes = data.iter().copied().max().unwrap_or(0) as usize + 1;
                    volume::LabelMap::new(data, classes.max(2))
                }
            }
        };
        let pred = load_labels(pred)?;
        let gt = args.gt.as_ref().map(|p| load_labels(p)).transpose()?;
        produced.push(plot::overlay(&vol, &pred, gt.as_ref(), &out)?);
    }

    if produced.is_empty() {
        return Err(Error::InvalidArgument(
            "nothing to plot: pass --log and/or --volume with --pred".into(),
        ));
    }
    for p in produced {
        println!("wrote {}", p.display());
    }
    Ok(())
}
