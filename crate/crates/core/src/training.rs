//! Adam optimization over sampled mini-batches with periodic validation,
//! a JSON-lines log and best/final checkpoints.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, RunProfile};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_predictor, ModelPredictor};
use crate::location::{Normalization, PreparedLocation};
use crate::model::{save_checkpoint, Checkpoint, Gradients, Model, Scalar};
use crate::raster::write_json;
use crate::sampler::{Sample, TrainingSampler};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Vec<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut [Vec<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
) -> Result<()> {
    let shapes_match = params.len() == grads.len()
        && params.len() == state.m.len()
        && params
            .iter()
            .zip(grads)
            .zip(&state.m)
            .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !shapes_match {
        return Err(Error::DimensionMismatch(
            "parameters, gradients and optimizer state differ in shape".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = T::from_f64_lossy(1.0 - hyper.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - hyper.beta2.powi(t));
    let b1 = T::from_f64_lossy(hyper.beta1);
    let b2 = T::from_f64_lossy(hyper.beta2);
    let one = T::one();
    let lr = T::from_f64_lossy(hyper.lr);
    let eps = T::from_f64_lossy(hyper.eps);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One line of `log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Start {
        run_id: String,
        n_params: usize,
        n_train_locations: usize,
        n_val_locations: usize,
    },
    Step {
        step: usize,
        loss: f64,
        n_targets: usize,
    },
    Eval {
        step: usize,
        train_rmse: Option<f64>,
        val_rmse: Option<f64>,
    },
    End {
        steps: usize,
        best_step: usize,
        best_rmse: Option<f64>,
    },
}

/// Metadata stored next to the weights in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub run_id: String,
    pub step: usize,
    pub config: RunConfig,
    pub normalization: Normalization,
}

impl CheckpointMeta {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        serde_json::from_value(ckpt.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("checkpoint lacks run metadata: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_id: String,
    pub model: Model<f32>,
    pub best_model: Model<f32>,
    pub best_step: usize,
    /// Validation RMSE of the best model, or training RMSE without a validation set.
    pub best_rmse: Option<f64>,
    pub log: Vec<LogRecord>,
    pub wall_clock_s: f64,
}

impl TrainOutcome {
    pub fn last_eval(&self) -> Option<(Option<f64>, Option<f64>)> {
        self.log.iter().rev().find_map(|r| match r {
            LogRecord::Eval {
                train_rmse,
                val_rmse,
                ..
            } => Some((*train_rmse, *val_rmse)),
            _ => None,
        })
    }
}

pub fn run_id(config: &RunConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

struct RunFiles {
    dir: PathBuf,
    log: BufWriter<fs::File>,
}

impl RunFiles {
    fn create(dir: &Path, config: &RunConfig, norm: &Normalization) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("config.json"), config)?;
        let profile = match config.profile.as_str() {
            "paper" => Some(RunProfile::Paper.config()),
            "desk" => Some(RunProfile::Desk.config()),
            _ => None,
        };
        write_json(&dir.join("profile.json"), &profile)?;
        write_json(&dir.join("normalization.json"), norm)?;
        let path = dir.join("log.jsonl");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log: BufWriter::new(file),
        })
    }

    fn append(&mut self, record: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::json("log record", e))?;
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.dir.join("log.jsonl"), e))
    }

    fn flush(&mut self) -> Result<()> {
        self.log
            .flush()
            .map_err(|e| Error::io(self.dir.join("log.jsonl"), e))
    }
}

/// Pulls batches either from the trainer's own RNG stream or from worker
/// threads with streams seeded `seed + worker_index`.
enum BatchSource<'a> {
    Inline {
        sampler: &'a TrainingSampler<'a>,
        rng: ChaCha8Rng,
    },
    Workers(mpsc::Receiver<Result<Sample>>),
}

impl BatchSource<'_> {
    fn next_batch(&mut self, size: usize) -> Result<Vec<Sample>> {
        match self {
            BatchSource::Inline { sampler, rng } => (0..size).map(|_| sampler.draw(rng)).collect(),
            BatchSource::Workers(rx) => (0..size)
                .map(|_| {
                    rx.recv()
                        .map_err(|_| Error::NoData("sampler workers stopped".into()))?
                })
                .collect(),
        }
    }
}

/// Trains a fresh model. When `run_dir` is given the run directory is
/// populated with config, log and checkpoints.
pub fn train(
    train_locations: &[PreparedLocation],
    val_locations: &[PreparedLocation],
    norm: &Normalization,
    config: &RunConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Model::<f32>::init(config.model_config()?)?;
    train_model(model, train_locations, val_locations, norm, config, run_dir)
}

/// Trains starting from `model`.
pub fn train_model(
    mut model: Model<f32>,
    train_locations: &[PreparedLocation],
    val_locations: &[PreparedLocation],
    norm: &Normalization,
    config: &RunConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if model.config() != &config.model_config()? {
        return Err(Error::Config(
            "model does not match the run configuration".into(),
        ));
    }
    let started = Instant::now();
    let id = run_id(config);
    let sampler = TrainingSampler::new(train_locations, config.sampler.clone())?;
    let mut files = run_dir
        .map(|d| RunFiles::create(d, config, norm))
        .transpose()?;
    let mut log = Vec::new();
    let mut record = |r: LogRecord, files: &mut Option<RunFiles>| -> Result<()> {
        if let Some(f) = files.as_mut() {
            f.append(&r)?;
        }
        log.push(r);
        Ok(())
    };
    record(
        LogRecord::Start {
            run_id: id.clone(),
            n_params: model.count_parameters(),
            n_train_locations: train_locations.len(),
            n_val_locations: val_locations.len(),
        },
        &mut files,
    )?;

    let meta = |step: usize| CheckpointMeta {
        run_id: id.clone(),
        step,
        config: config.clone(),
        normalization: norm.clone(),
    };
    let save = |name: &str, model: &Model<f32>, step: usize| -> Result<()> {
        if let Some(dir) = run_dir {
            let extra =
                serde_json::to_value(meta(step)).map_err(|e| Error::json("checkpoint meta", e))?;
            save_checkpoint(&dir.join("checkpoints").join(name), model, &extra)?;
        }
        Ok(())
    };

    let tc = &config.train;
    let hyper = AdamHyper {
        lr: tc.lr,
        beta1: tc.beta1,
        beta2: tc.beta2,
        eps: tc.eps,
    };
    let mut state = AdamState::new(model.params());
    let min_day = config.eval_min_day();
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let scale = 1.0 / tc.batch_size as f32;

    let result = std::thread::scope(|scope| -> Result<()> {
        let mut source = if tc.workers <= 1 {
            BatchSource::Inline {
                sampler: &sampler,
                rng: ChaCha8Rng::seed_from_u64(tc.seed),
            }
        } else {
            let (tx, rx) = mpsc::sync_channel(2 * tc.batch_size);
            for i in 0..tc.workers {
                let tx = tx.clone();
                let sampler = &sampler;
                let seed = tc.seed.wrapping_add(i as u64);
                scope.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    while tx.send(sampler.draw(&mut rng)).is_ok() {}
                });
            }
            BatchSource::Workers(rx)
        };

        let mut grads: Gradients<f32> = model.zero_gradients();
        for step in 0..tc.total_batches {
            let batch = source.next_batch(tc.batch_size)?;
            grads.iter_mut().for_each(|g| g.fill(0.0));
            let mut loss_sum = 0.0;
            let mut n_targets = 0;
            for sample in &batch {
                let temporal = sample.temporal.as_ref().map(|t| t.view());
                loss_sum += model.loss_and_grad(
                    &sample.input.view(),
                    temporal.as_ref(),
                    &sample.targets,
                    &config.loss,
                    tc.loss_scale,
                    &mut grads,
                )?;
                n_targets += sample.targets.len();
            }
            let loss = loss_sum / batch.len() as f64;
            record(
                LogRecord::Step {
                    step,
                    loss,
                    n_targets,
                },
                &mut files,
            )?;
            if !loss.is_finite() {
                save("diverged.ckpt", &model, step)?;
                if let Some(f) = files.as_mut() {
                    f.flush()?;
                }
                return Err(Error::Diverged { step, loss });
            }
            grads
                .iter_mut()
                .for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
            adam_step(model.params_mut(), &grads, &mut state, &hyper)?;

            let last = step + 1 == tc.total_batches;
            if (step + 1) % tc.eval_every == 0 || last {
                let predictor = ModelPredictor::new(&model, &config.sampler);
                let score = |locs: &[PreparedLocation]| -> Result<Option<f64>> {
                    if locs.is_empty() {
                        return Ok(None);
                    }
                    evaluate_predictor(&predictor, locs, min_day, "training")
                        .map(|r| Some(r.aggregate_rmse))
                };
                let train_rmse = if tc.eval_train || val_locations.is_empty() {
                    score(train_locations)?
                } else {
                    None
                };
                let val_rmse = score(val_locations)?;
                record(
                    LogRecord::Eval {
                        step: step + 1,
                        train_rmse,
                        val_rmse,
                    },
                    &mut files,
                )?;
                if let Some(metric) = val_rmse.or(train_rmse) {
                    if best.as_ref().is_none_or(|(b, _, _)| metric < *b) {
                        save("best.ckpt", &model, step + 1)?;
                        best = Some((metric, step + 1, model.clone()));
                    }
                }
            }
        }
        Ok(())
    });
    result?;

    save("final.ckpt", &model, tc.total_batches)?;
    let (best_rmse, best_step, best_model) = match best {
        Some((m, s, b)) => (Some(m), s, b),
        None => (None, tc.total_batches, model.clone()),
    };
    record(
        LogRecord::End {
            steps: tc.total_batches,
            best_step,
            best_rmse,
        },
        &mut files,
    )?;
    let wall_clock_s = started.elapsed().as_secs_f64();
    if let Some(mut f) = files {
        f.flush()?;
        let summary = serde_json::json!({
            "run_id": id,
            "wall_clock_s": wall_clock_s,
            "best_step": best_step,
            "best_rmse": best_rmse,
            "n_params": model.count_parameters(),
        });
        write_json(&f.dir.join("summary.json"), &summary)?;
    }
    Ok(TrainOutcome {
        run_id: id,
        model,
        best_model,
        best_step,
        best_rmse,
        log,
        wall_clock_s,
    })
}
