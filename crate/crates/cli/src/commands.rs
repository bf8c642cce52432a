use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use adaflow_core::ensemble::{init_ensemble, EnsembleState, SIDECAR, THETA_P};
use adaflow_core::harness::{
    evaluate_offline, fmt6, frame_file_name, make_triplets, mean_ssim, pretrain, read_sequence, run_online_eval,
    scene_triplets, trend_rows, write_csv, write_ppm, write_table, Triplet, TREND_HEADER,
};
use adaflow_core::networks::{PredictionParams, WeightNetParams};
use adaflow_core::tensor::ParamSet;
use adaflow_core::{Error, Frame, Mode, Result, RunConfig};

pub const LOSS_CURVE: &str = "loss_curve.csv";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const SUMMARY: &str = "summary.csv";
pub const METRICS: &str = "metrics.csv";
pub const TREND: &str = "trend.csv";
pub const ENSEMBLE_DIR: &str = "ensemble";
pub const PREDICTIONS_DIR: &str = "predictions";

pub fn run(mode: Mode, config: &Path, checkpoint_dir: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if cfg.mode != mode {
        return Err(Error::Config(format!(
            "{}: mode is {:?} but the {:?} command was run",
            config.display(),
            cfg.mode,
            mode
        )));
    }
    if let Some(out) = out {
        cfg.output_dir = out.to_path_buf();
    }
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write(&out.join(RESOLVED_CONFIG), cfg.to_json().as_bytes())?;
    match mode {
        Mode::Pretrain => cmd_pretrain(&cfg, checkpoint_dir, &out),
        Mode::Eval => cmd_eval(&cfg, require(checkpoint_dir)?, &out),
        Mode::Stream => cmd_stream(&cfg, require(checkpoint_dir)?, &out),
    }
}

fn require(dir: Option<&Path>) -> Result<&Path> {
    dir.ok_or_else(|| Error::Config("--checkpoint-dir is required for this command".into()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_pretrained(cfg: &RunConfig, dir: &Path) -> Result<PredictionParams> {
    PredictionParams::from_flat(&ParamSet::load(&dir.join(THETA_P))?, &cfg.architecture)
}

fn triplets(cfg: &RunConfig, scenes: &[adaflow_core::harness::SceneSpec]) -> Result<Vec<Triplet>> {
    match &cfg.data.input_dir {
        Some(dir) => Ok(make_triplets(&read_sequence(dir)?, cfg.data.k)),
        None => scene_triplets(scenes, cfg.data.k),
    }
}

fn cmd_pretrain(cfg: &RunConfig, init_from: Option<&Path>, out: &Path) -> Result<()> {
    let tri = triplets(cfg, &cfg.data.train_scenes)?;
    let init = match init_from {
        Some(dir) => load_pretrained(cfg, dir)?,
        None => PredictionParams::init(&cfg.architecture, cfg.seed),
    };
    let settings = cfg.pretrain_settings()?;
    eprintln!("pre-training on {} triplets for {} epochs", tri.len(), settings.epochs);
    let outcome = pretrain(&tri, init, &settings, |epoch, loss| {
        eprintln!("epoch {:>4}  loss {loss:.6}", epoch + 1)
    })?;
    outcome.params.flatten().save(&out.join(THETA_P))?;
    let rows: Vec<Vec<String>> = outcome
        .loss_curve
        .iter()
        .enumerate()
        .map(|(i, l)| vec![(i + 1).to_string(), fmt6(*l)])
        .collect();
    write_table(&out.join(LOSS_CURVE), &["epoch", "loss"], &rows)?;
    println!("theta_p sha256 {}", outcome.params.checksum());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let params = load_pretrained(cfg, checkpoint)?;
    let tri = triplets(cfg, &cfg.data.test_scenes)?;
    let s = evaluate_offline(&tri, &params, &cfg.architecture, cfg.data.crop)?;
    let rows = vec![
        vec![
            "pretrained".into(),
            s.count.to_string(),
            fmt6(s.model_ssim),
            fmt6(s.model_psnr),
        ],
        vec![
            "repeat".into(),
            s.count.to_string(),
            fmt6(s.repeat_ssim),
            fmt6(s.repeat_psnr),
        ],
    ];
    write_table(&out.join(SUMMARY), &["method", "count", "ssim", "psnr"], &rows)?;
    println!("{:<12}{:>8}{:>12}{:>12}", "method", "count", "ssim", "psnr");
    for r in &rows {
        println!("{:<12}{:>8}{:>12}{:>12}", r[0], r[1], r[2], r[3]);
    }
    Ok(())
}

fn cmd_stream(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let mut state = if checkpoint.join(SIDECAR).exists() {
        EnsembleState::load_checkpoint(checkpoint, cfg.ensemble_config())?
    } else {
        let pretrained = load_pretrained(cfg, checkpoint)?;
        init_ensemble(
            pretrained,
            WeightNetParams::init(&cfg.architecture, cfg.seed),
            cfg.ensemble_config(),
        )?
    };
    let frames: Vec<(usize, Frame)> = match (&cfg.data.input_dir, &cfg.data.stream) {
        (Some(dir), _) => read_sequence(dir)?.into_iter().map(|f| (0, f)).collect(),
        (None, Some(script)) => script.render()?,
        (None, None) => unreachable!("validated config has a stream source"),
    };
    let theta_p = state.theta_p().checksum();
    let dumps = out.join(PREDICTIONS_DIR);
    let mut scored = 0u64;
    let records = run_online_eval(frames, &mut state, cfg.data.crop, |rec, pred| {
        scored += 1;
        match cfg.data.dump_every {
            Some(n) if scored.is_multiple_of(n) => {
                fs::create_dir_all(&dumps).map_err(|e| Error::io(&dumps, e))?;
                let name: PathBuf = dumps.join(frame_file_name(rec.frame_index as usize));
                write_ppm(&pred.prediction.x_hat.clamped(), &name)
            }
            _ => Ok(()),
        }
    })?;
    if state.theta_p().checksum() != theta_p {
        return Err(Error::Params {
            name: "theta_p".into(),
            detail: "pre-trained parameters changed during the stream".into(),
        });
    }
    write_csv(&records, &out.join(METRICS))?;
    write_table(
        &out.join(TREND),
        &TREND_HEADER,
        &trend_rows(&records, cfg.schedule.trend_window),
    )?;
    state.save_checkpoint(&out.join(ENSEMBLE_DIR))?;

    let updates = records.iter().filter(|r| r.updated).count();
    println!("{} scored frames, {updates} updates", records.len());
    let ids: BTreeSet<usize> = records.iter().map(|r| r.scene_id).collect();
    println!(
        "{:<8}{:>12}{:>12}{:>12}{:>12}",
        "scene", "ensemble", "pretrained", "continuous", "repeat"
    );
    for id in ids {
        if let Some(m) = mean_ssim(&records, |s| s == id) {
            println!(
                "{id:<8}{:>12}{:>12}{:>12}{:>12}",
                fmt6(m[0]),
                fmt6(m[1]),
                fmt6(m[2]),
                fmt6(m[3])
            );
        }
    }
    Ok(())
}
