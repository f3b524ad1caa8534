use std::fs;
use std::path::{Path, PathBuf};

use latentdyn::eval::{
    ablate, coverage, evaluate, future_mse, future_truth, EvalReport, Forecaster, OracleNoise, OracleWorld,
};
use latentdyn::model::SsmVae;
use latentdyn::rng::{derive_seed, tag};
use latentdyn::tensor::Tensor;
use latentdyn::train::{self, training_segment, EpochRecord, StopReason, TrainResult, TrainState};
use latentdyn::world::{
    check_sufficient_variability, load_dataset, save_dataset, SequenceBatch, Standardizer, World,
};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{fingerprint, RunConfig};
use crate::error::CliError;

/// Hex characters of the config hash kept in directory names.
const HASH_PREFIX: usize = 16;

/// A fresh output directory named after the command and a hash of
/// everything the run depends on.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, inputs: &[&Path], cfg: &RunConfig) -> Result<RunDir, CliError> {
        let config_toml = cfg.to_toml()?;
        let digests = inputs.iter().map(|p| file_digest(p)).collect::<Result<Vec<_>, _>>()?;
        let hash = fingerprint(command, &digests, &config_toml);
        let path = root.join(format!("{command}-{}", &hash[..HASH_PREFIX]));
        if path.exists() {
            return Err(CliError::Io(format!(
                "output directory {} already exists; refusing to overwrite",
                path.display()
            )));
        }
        fs::create_dir_all(&path).map_err(|e| io_err(&path, e))?;
        let dir = RunDir { path };
        dir.write("config.toml", config_toml.as_bytes())?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.file(name);
        fs::write(&p, bytes).map_err(|e| io_err(&p, e))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn csv(&self, name: &str) -> Result<csv::Writer<fs::File>, CliError> {
        let p = self.file(name);
        csv::Writer::from_path(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}

fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// A dataset file, or the given split inside a `gen-data` directory.
fn dataset_path(path: &Path, split: &str) -> PathBuf {
    if path.is_dir() {
        path.join(format!("{split}.bin"))
    } else {
        path.to_path_buf()
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{} does not exist", path.display())))
    }
}

fn load(path: &Path) -> Result<SequenceBatch, CliError> {
    require(path)?;
    Ok(load_dataset(path)?)
}

fn split_seed(seed: u64, split: &str) -> u64 {
    derive_seed(seed, &[tag("data"), tag(split)])
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<PathBuf, CliError> {
    let dir = RunDir::create(out, "gen-data", &[], cfg)?;
    let world = World::build(&cfg.world)?.with_noise_scale(cfg.data.noise_scale);
    world.save(&dir.file("world.ckpt"))?;
    let w = &cfg.world;
    let mut splits = Vec::new();
    for (name, per_env) in [("train", w.n_train), ("val", w.n_val), ("test", w.n_test)] {
        let seed = split_seed(cfg.seed(), name);
        let batch = world.simulate_split(per_env, seed)?;
        let file = format!("{name}.bin");
        save_dataset(&batch, &dir.file(&file))?;
        splits.push(json!({
            "split": name,
            "file": file,
            "sequences": batch.len(),
            "per_environment": per_env,
            "environments": world.envs(),
            "seed": seed,
            "sha256": file_digest(&dir.file(&file))?,
        }));
    }
    dir.write_json(
        "manifest.json",
        &json!({
            "seed": cfg.seed(),
            "world": "world.ckpt",
            "noise_scale": cfg.data.noise_scale,
            "sequence_length": w.seq_len(),
            "splits": splits,
        }),
    )?;
    Ok(dir.path)
}

fn progress(rec: &EpochRecord) {
    eprintln!(
        "epoch {:>4}  train elbo {:>12.5}  val elbo {:>12.5}  {:>8.1}s",
        rec.epoch, rec.train_elbo, rec.val_elbo, rec.wall_clock
    );
}

fn write_history(dir: &RunDir, history: &[EpochRecord]) -> Result<(), CliError> {
    let mut w = dir.csv("history.csv")?;
    for rec in history {
        w.serialize(rec).map_err(csv_err)?;
    }
    if history.is_empty() {
        w.write_record(["epoch", "train_elbo", "val_elbo", "wall_clock"]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}

/// Writes the result files and maps divergence to a numeric failure once
/// they are on disk.
fn finish_training(dir: &RunDir, result: &TrainResult, extra: serde_json::Value) -> Result<(), CliError> {
    result.model.save(&dir.file("model.ckpt"))?;
    result.state.save(&dir.file("state.ckpt"))?;
    write_history(dir, &result.history)?;
    let best = result.history.iter().map(|r| r.val_elbo).fold(f64::NEG_INFINITY, f64::max);
    let mut summary = json!({
        "stop": result.stop,
        "epochs": result.history.len(),
        "best_val_elbo": if best.is_finite() { Some(best) } else { None },
    });
    if let (Some(s), Some(e)) = (summary.as_object_mut(), extra.as_object()) {
        s.extend(e.clone());
    }
    dir.write_json("summary.json", &summary)?;
    match &result.stop {
        StopReason::Diverged { epoch, detail } => {
            Err(CliError::Numeric(format!("training diverged at epoch {epoch}: {detail}")))
        }
        _ => Ok(()),
    }
}

pub fn train_cmd(cfg: &RunConfig, data: &Path, resume: Option<&Path>, out: &Path) -> Result<PathBuf, CliError> {
    let (train_path, val_path) = (dataset_path(data, "train"), dataset_path(data, "val"));
    require(&train_path)?;
    require(&val_path)?;
    if let Some(r) = resume {
        require(r)?;
    }
    let mut inputs = vec![train_path.as_path(), val_path.as_path()];
    inputs.extend(resume);
    let dir = RunDir::create(out, "train", &inputs, cfg)?;
    let (train_set, val_set) = (load(&train_path)?, load(&val_path)?);
    let state = match resume {
        Some(r) => TrainState::load(r)?,
        None => {
            let mut model = SsmVae::new(cfg.model.clone())?;
            model.standardizer = Standardizer::fit(&train_set)?;
            TrainState::new(model, &cfg.train)
        }
    };
    let result = train::resume(state, &train_set, &val_set, &cfg.train, &mut progress)?;
    finish_training(&dir, &result, json!({ "resumed": resume.is_some() }))?;
    Ok(dir.path)
}

fn report_json(report: &EvalReport) -> serde_json::Value {
    let mse: serde_json::Map<String, serde_json::Value> = report
        .mse_future
        .iter()
        .map(|m| (format!("mse@{}", m.horizon), json!(m.mse)))
        .collect();
    json!({
        "mcc_z": report.mcc_z_spearman.score,
        "mcc_s": report.mcc_s_spearman.score,
        "mse": mse,
        "calibration": report.calibration,
        "detail": report,
    })
}

pub fn eval_cmd(
    cfg: &RunConfig,
    model_path: Option<&Path>,
    oracle: Option<&Path>,
    data: &Path,
    out: &Path,
) -> Result<PathBuf, CliError> {
    let data_path = dataset_path(data, "test");
    require(&data_path)?;
    let source = match (model_path, oracle) {
        (Some(m), None) => m,
        (None, Some(w)) => w,
        _ => return Err(CliError::Config("eval needs exactly one of --model or --oracle".into())),
    };
    require(source)?;
    let dir = RunDir::create(out, "eval", &[source, data_path.as_path()], cfg)?;
    let batch = load(&data_path)?;
    let seeds = json!({ "master": cfg.seed(), "eval": cfg.eval.seed });
    let body = if let Some(w) = oracle {
        let world = World::load(w)?;
        let standardizer = oracle_standardizer(data)?;
        let mut scores = serde_json::Map::new();
        for noise in [OracleNoise::Recorded, OracleNoise::Sampled] {
            let f = OracleWorld {
                world: &world,
                standardizer: standardizer.clone(),
                noise,
            };
            let mse = future_mse(&f, &batch, &cfg.eval.horizons, cfg.eval.n_samples, cfg.eval.seed)?;
            let h = batch.t_future;
            let samples = f.forecast(&batch, h, cfg.eval.n_samples, cfg.eval.seed)?;
            let truth = future_truth(f.standardizer(), &batch, h)?;
            let name = serde_json::to_value(noise).map_err(|e| CliError::Io(e.to_string()))?;
            scores.insert(
                name.as_str().unwrap_or("oracle").to_string(),
                json!({ "mse_future": mse, "calibration": coverage(&samples, &truth)? }),
            );
        }
        json!({ "oracle": scores })
    } else {
        let model = SsmVae::load(source)?;
        report_json(&evaluate(&model, &batch, &cfg.eval)?)
    };
    dir.write_json(
        "report.json",
        &json!({ "report": body, "seeds": seeds, "config": cfg, "sequences": batch.len() }),
    )?;
    Ok(dir.path)
}

/// The oracle standardizes with the training split next to the data when
/// there is one, so its numbers share units with trained models.
fn oracle_standardizer(data: &Path) -> Result<Standardizer, CliError> {
    let train_path = if data.is_dir() {
        data.join("train.bin")
    } else {
        data.with_file_name("train.bin")
    };
    if train_path.exists() {
        Ok(Standardizer::fit(&load(&train_path)?)?)
    } else {
        Ok(Standardizer::fit(&load(&dataset_path(data, "test"))?)?)
    }
}

pub fn adapt_cmd(cfg: &RunConfig, model_path: &Path, data: &Path, out: &Path) -> Result<PathBuf, CliError> {
    require(model_path)?;
    let (train_path, val_path) = (dataset_path(data, "train"), dataset_path(data, "val"));
    require(&train_path)?;
    require(&val_path)?;
    let dir = RunDir::create(out, "adapt", &[model_path, train_path.as_path(), val_path.as_path()], cfg)?;
    let model = SsmVae::load(model_path)?;
    let mut target_train = load(&train_path)?;
    if let Some(n) = cfg.adapt.n_target {
        if n == 0 || n > target_train.len() {
            return Err(CliError::Config(format!(
                "adapt.n_target {n} outside 1..={}",
                target_train.len()
            )));
        }
        target_train = target_train.select(&(0..n).collect::<Vec<_>>());
    }
    let target_val = load(&val_path)?;
    let before = evaluate(&model, &target_val, &cfg.eval)?;
    dir.write_json("before.json", &report_json(&before))?;
    let mut tcfg = cfg.train.clone();
    tcfg.mode = cfg.adapt.mode;
    let result = train::adapt(model, &target_train, &target_val, &tcfg, &mut progress)?;
    let after = evaluate(&result.model, &target_val, &cfg.eval)?;
    dir.write_json("after.json", &report_json(&after))?;
    finish_training(
        &dir,
        &result,
        json!({
            "mode": cfg.adapt.mode,
            "target_sequences": target_train.len(),
            "mcc_z_before": before.mcc_z_spearman.score,
            "mcc_z_after": after.mcc_z_spearman.score,
        }),
    )?;
    Ok(dir.path)
}

pub fn rollout_cmd(cfg: &RunConfig, model_path: &Path, data: &Path, out: &Path) -> Result<PathBuf, CliError> {
    require(model_path)?;
    let data_path = dataset_path(data, "test");
    require(&data_path)?;
    let dir = RunDir::create(out, "rollout", &[model_path, data_path.as_path()], cfg)?;
    let model = SsmVae::load(model_path)?;
    let batch = load(&data_path)?;
    let rc = &cfg.rollout;
    let n = rc.max_sequences.min(batch.len());
    if n == 0 {
        return Err(CliError::Config("rollout needs at least one sequence".into()));
    }
    let batch = batch.select(&(0..n).collect::<Vec<_>>());
    let horizon = rc.horizon.unwrap_or(batch.t_future);
    let t_train = batch.t_train();
    let x = training_segment(&model, &batch);
    let trace = model.posterior_means(&x, &batch.env)?;
    let (k, l) = (model.k(), model.markov_order());
    let mut hist = Vec::with_capacity(n * l * k);
    for i in 0..n {
        hist.extend_from_slice(&trace.z.data()[(i * t_train + t_train - l) * k..(i * t_train + t_train) * k]);
    }
    let hist = Tensor::new(vec![n, l * k], hist)?;
    let seed = derive_seed(cfg.seed(), &[tag("rollout")]);
    let roll = model.rollout(&hist, &batch.env, horizon, rc.n_samples, rc.temperature, seed)?;
    let d = batch.k;
    let mut w = dir.csv("rollout.csv")?;
    w.write_record(["sequence", "sample", "t", "dim", "value"]).map_err(csv_err)?;
    for (idx, v) in roll.x.data().iter().enumerate() {
        let dim = idx % d;
        let h = (idx / d) % horizon;
        let sample = (idx / (d * horizon)) % rc.n_samples;
        let seq = idx / (d * horizon * rc.n_samples);
        w.serialize((seq, sample, t_train + h, dim, v)).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    let observed = model.standardizer.apply(&batch).x;
    let frames = observed.shape()[1];
    let mut w = dir.csv("truth.csv")?;
    w.write_record(["sequence", "t", "dim", "value"]).map_err(csv_err)?;
    for (idx, v) in observed.data().iter().enumerate() {
        let (dim, t, seq) = (idx % d, (idx / d) % frames, idx / (d * frames));
        if t < t_train + horizon {
            w.serialize((seq, t, dim, v)).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(dir.path)
}

pub fn diagnose_cmd(cfg: &RunConfig, world_path: Option<&Path>, out: &Path) -> Result<(PathBuf, bool), CliError> {
    if let Some(p) = world_path {
        require(p)?;
    }
    let inputs: Vec<&Path> = world_path.into_iter().collect();
    let dir = RunDir::create(out, "diagnose", &inputs, cfg)?;
    let world = match world_path {
        Some(p) => World::load(p)?,
        None => World::build(&cfg.world)?,
    };
    let seed = derive_seed(cfg.seed(), &[tag("diagnose")]);
    let report = check_sufficient_variability(&world, cfg.diagnose.mode, cfg.diagnose.n_probe, seed)?;
    dir.write_json(
        "variability.json",
        &json!({
            "passed": report.passed,
            "min_singular_value": report.min_singular_value(),
            "report": report,
        }),
    )?;
    Ok((dir.path, report.passed))
}

pub fn ablate_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let paths = ["train", "val"].map(|s| dataset_path(data, s));
    for p in &paths {
        require(p)?;
    }
    let dir = RunDir::create(out, "ablate", &[paths[0].as_path(), paths[1].as_path()], cfg)?;
    let (train_set, val_set) = (load(&paths[0])?, load(&paths[1])?);
    if cfg.ablate.variants.is_empty() {
        return Err(CliError::Config("ablate.variants is empty".into()));
    }
    let runs = ablate(
        &cfg.ablate.variants,
        &cfg.model,
        &train_set,
        &val_set,
        &val_set,
        &cfg.train,
        &cfg.eval,
    )?;
    let mut w = dir.csv("ablation.csv")?;
    w.write_record(["variant", "mcc_z", "mcc_s", "horizon", "mse", "calibration", "epochs"])
        .map_err(csv_err)?;
    let mut rows = Vec::new();
    for run in &runs {
        for m in &run.report.mse_future {
            w.serialize((
                run.variant.name(),
                run.report.mcc_z_spearman.score,
                run.report.mcc_s_spearman.score,
                m.horizon,
                m.mse,
                run.report.calibration,
                run.history.len(),
            ))
            .map_err(csv_err)?;
        }
        rows.push(json!({
            "variant": run.variant,
            "stop": run.stop,
            "epochs": run.history.len(),
            "report": report_json(&run.report),
        }));
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    dir.write_json("ablation.json", &json!({ "runs": rows, "seed": cfg.seed() }))?;
    if let Some(run) = runs.iter().find(|r| matches!(r.stop, StopReason::Diverged { .. })) {
        return Err(CliError::Numeric(format!("variant {} diverged", run.variant.name())));
    }
    Ok(dir.path)
}
