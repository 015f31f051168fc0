use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use avloc::attention::{response_map, to_pgm};
use avloc::encoders::{encode_audio, encode_vision, EncoderParams};
use avloc::metrics::{ablate_k, compare_methods, evaluate, modes_to_csv, report_to_csv, summary_line, sweep_to_csv};
use avloc::synthdata::{generate, load_dataset, load_features, save_dataset, save_features, Dataset, FEATURES_FILE};
use avloc::trainer::{
    extract_features, grad_check, logs_to_csv, mine, mine_features, tiny_instance, train_stage1, train_stage2, Mode,
    TrainConfig, TrainLogRecord,
};
use avloc::Error;

use crate::args::{AblateArgs, CompareArgs, EvalArgs, ExportArgs, GenDataArgs, GradCheckArgs, MineArgs, TrainArgs};
use crate::CliError;

pub const PARAMS_FILE: &str = "params.avp";
pub const STAGE1_FILE: &str = "stage1.avp";
pub const SIDECAR_FILE: &str = "params.cfg";
pub const LOG_FILE: &str = "log.csv";
pub const INDEX_FILE: &str = "index.csv";
pub const DIVERGED_FILE: &str = "last_finite.avp";

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

fn in_file(path: &Path, e: Error) -> CliError {
    match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    load_dataset(path).map_err(|e| in_file(path, e))
}

fn load_params(path: &Path) -> Result<EncoderParams, CliError> {
    EncoderParams::load(path).map_err(|e| in_file(path, e))
}

fn ids(data: &Dataset) -> Vec<usize> {
    data.samples.iter().map(|s| s.id).collect()
}

pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let data = generate(&a.synth.to_config())?;
    create_dir(&a.out)?;
    save_dataset(&data, &a.out)?;
    if let Some(p) = &a.features_from {
        let params = load_params(p)?;
        save_features(&extract_features(&params, &data)?, a.out.join(FEATURES_FILE))?;
    }
    Ok(())
}

/// The training flags of a run as a config file accepted by `train --config`.
pub fn sidecar(cfg: &TrainConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
    kv("mode", cfg.mode.to_string());
    kv("k", cfg.k.to_string());
    kv("epochs-stage1", cfg.epochs_stage1.to_string());
    kv("epochs-stage2", cfg.epochs_stage2.to_string());
    kv("batch-size", cfg.batch_size.to_string());
    kv("lr", format!("{:?}", cfg.learning_rate));
    kv("epsilon", format!("{:?}", cfg.epsilon));
    kv("tau", format!("{:?}", cfg.tau));
    kv("seed", cfg.seed.to_string());
    kv("stop-grad-mask", cfg.stop_grad_mask.to_string());
    kv("remine-every", cfg.remine_every.to_string());
    kv("channels", cfg.channels.to_string());
    kv("patch", cfg.patch.to_string());
    s
}

fn on_divergence(out: &Path, logs: &[TrainLogRecord], e: Error) -> CliError {
    if let Error::Diverged { last_finite, .. } = &e {
        // Best effort: the divergence is the error worth reporting.
        let _ = last_finite.save(out.join(DIVERGED_FILE));
        let _ = fs::write(out.join(LOG_FILE), logs_to_csv(logs));
    }
    e.into()
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = a.train.to_config(a.mode, a.k);
    cfg.validate()?;
    let data = load_data(&a.data)?;
    create_dir(&a.out)?;
    write(&a.out.join(SIDECAR_FILE), &sidecar(&cfg))?;
    let stage1 = train_stage1(&data, &cfg).map_err(|e| on_divergence(&a.out, &[], e))?;
    stage1.params.save(a.out.join(STAGE1_FILE))?;
    let index = if cfg.mode == Mode::Hp {
        // Mined here so the stage-1 features and index land next to the checkpoint.
        let features = extract_features(&stage1.params, &data)?;
        save_features(&features, a.out.join(FEATURES_FILE))?;
        Some(mine_features(&features, cfg.k.min(data.len() - 1))?)
    } else {
        None
    };
    let stage2 =
        train_stage2(&data, &stage1.params, index.as_ref(), &cfg).map_err(|e| on_divergence(&a.out, &stage1.logs, e))?;
    let logs: Vec<TrainLogRecord> = stage1.logs.iter().chain(&stage2.logs).copied().collect();
    write(&a.out.join(LOG_FILE), &logs_to_csv(&logs))?;
    if let Some(ix) = &stage2.index {
        ix.save(a.out.join(INDEX_FILE), &ids(&data))?;
    }
    stage2.params.save(a.out.join(PARAMS_FILE))?;
    Ok(())
}

pub fn mine_cmd(a: &MineArgs) -> Result<(), CliError> {
    let (index, ids) = match (&a.features, &a.params, &a.data) {
        (Some(f), _, _) => {
            let features = load_features(f).map_err(|e| in_file(f, e))?;
            let ids: Vec<usize> = features.records.iter().map(|r| r.id).collect();
            (mine_features(&features, a.k)?, ids)
        }
        (None, Some(p), Some(d)) => {
            let data = load_data(d)?;
            (mine(&load_params(p)?, &data, a.k)?, ids(&data))
        }
        _ => return Err(CliError::Usage("need --features or --params with --data".into())),
    };
    index.save(&a.out, &ids)?;
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let params = load_params(&a.params)?;
    let data = load_data(&a.data)?;
    let report = evaluate(&params, &data)?;
    if let Some(out) = &a.out {
        write(out, &report_to_csv(&report))?;
    }
    println!("{}", summary_line(&report));
    Ok(())
}

fn eval_set(path: Option<&Path>) -> Result<Option<Dataset>, CliError> {
    Ok(match path {
        Some(p) => Some(load_data(p)?),
        None => None,
    })
}

pub fn ablate(a: &AblateArgs) -> Result<(), CliError> {
    let cfg = a.train.to_config(a.mode, 1);
    cfg.validate()?;
    let data = load_data(&a.data)?;
    let held_out = eval_set(a.eval_data.as_deref())?;
    let rows = ablate_k(&data, held_out.as_ref().unwrap_or(&data), &cfg, &a.k)?;
    let csv = sweep_to_csv(&rows);
    write(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn compare(a: &CompareArgs) -> Result<(), CliError> {
    if a.modes.is_empty() {
        return Err(CliError::Usage("--modes is empty".into()));
    }
    let cfg = a.train.to_config(Mode::Hp, a.k);
    cfg.validate()?;
    let data = load_data(&a.data)?;
    let held_out = eval_set(a.eval_data.as_deref())?;
    let rows = compare_methods(&data, held_out.as_ref().unwrap_or(&data), &cfg, &a.modes)?;
    let csv = modes_to_csv(&rows);
    write(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn export_maps(a: &ExportArgs) -> Result<(), CliError> {
    let params = load_params(&a.params)?;
    let data = load_data(&a.data)?;
    let pairs: Vec<(usize, usize)> = if a.pairs.is_empty() {
        data.samples.iter().map(|s| (s.id, s.id)).collect()
    } else {
        a.pairs.clone()
    };
    let position = |id: usize| {
        data.samples
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| CliError::Usage(format!("no sample with id {id}")))
    };
    create_dir(&a.out)?;
    for (ai, vi) in pairs {
        let audio = encode_audio(&params, &data.samples[position(ai)?].audio)?;
        let vision = encode_vision(&params, &data.samples[position(vi)?].image)?;
        let alpha = response_map(&audio, &vision)?;
        write(&a.out.join(format!("resp_{ai}_{vi}.pgm")), &to_pgm(&alpha))?;
    }
    Ok(())
}

pub fn grad_check_cmd(a: &GradCheckArgs) -> Result<(), CliError> {
    let (lo, hi) = a.seed;
    let mut worst: f64 = 0.0;
    for seed in lo..=hi {
        let (data, cfg) = tiny_instance(seed)?;
        let cfg = TrainConfig {
            stop_grad_mask: a.stop_grad_mask,
            ..cfg
        };
        let err = grad_check(&data, &cfg)?;
        println!("seed={seed} max_rel_err={err:e}");
        worst = worst.max(err);
    }
    println!("max_rel_err={worst:e}");
    if worst < a.tolerance {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: {worst:e} >= tolerance {:e}",
            a.tolerance
        )))
    }
}
