//! The meta-training loop: sample a problem and schedule per worker,
//! unroll, and update the meta-parameters with RMSProp, synchronously
//! (barrier per iteration, bit-reproducible) or asynchronously (lock per
//! update, reproducible only for one worker).

use super::{
    meta_update, sample_schedule, unroll_and_grad, MetaGradient, MetaLossRecord, MetaOptState,
    ScheduleParams, UnrollOptions,
};
use crate::error::RunResult;
use crate::ndarray::NdArray;
use crate::optimizer::{MetaParams, RunSeeds};
use crate::problems::{instantiate, ProblemSpec};
use crate::rng;
use rand::Rng;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Instant;

const STREAM_PICK: u64 = 0x9c1c_0001;
const STREAM_PROBLEM: u64 = 0x9c1c_0002;
const STREAM_SCHEDULE: u64 = 0x9c1c_0003;
const STREAM_RUN: u64 = 0x9c1c_0004;

/// Moving-average coefficient for the logged meta-loss.
const LOG_EMA: f64 = 0.99;

#[derive(Debug, Clone)]
pub struct MetaTrainConfig {
    /// Problem templates; the seed field is overwritten per meta-iteration.
    pub corpus: Vec<ProblemSpec>,
    pub iterations: u64,
    pub workers: usize,
    pub sync: bool,
    pub seed: u64,
    pub schedule: ScheduleParams,
    pub unroll: UnrollOptions,
    pub meta_lr: f64,
    pub meta_decay: f64,
    /// Emit a checkpoint event every this many iterations (0 = only final).
    /// Checkpoint events fire in sync mode only.
    pub checkpoint_every: u64,
    /// Give every worker of an iteration the same seeds (averaging identity
    /// experiments).
    pub identical_worker_seeds: bool,
    pub timing: bool,
}

impl MetaTrainConfig {
    pub fn new(corpus: Vec<ProblemSpec>, iterations: u64, workers: usize, seed: u64) -> Self {
        MetaTrainConfig {
            corpus,
            iterations,
            workers,
            sync: true,
            seed,
            schedule: ScheduleParams::default(),
            unroll: UnrollOptions::default(),
            meta_lr: 1e-3,
            meta_decay: 0.9,
            checkpoint_every: 0,
            identical_worker_seeds: false,
            timing: false,
        }
    }
}

/// One row of the meta-training log.
#[derive(Debug, Clone)]
pub struct MetaLogRecord {
    pub iteration: u64,
    pub worker: usize,
    pub problem: String,
    pub meta_loss: f64,
    pub moving_avg_meta_loss: f64,
    pub total_steps: u64,
    pub diverged: bool,
    pub wall_ms: f64,
}

/// Streamed to the observer during training.
pub enum MetaEvent<'a> {
    Log(&'a MetaLogRecord),
    Checkpoint {
        iteration: u64,
        meta: &'a MetaParams,
        opt: &'a MetaOptState,
        moving_avg: Option<f64>,
    },
}

fn worker_unroll(
    meta: &MetaParams,
    config: &MetaTrainConfig,
    iteration: u64,
    worker: usize,
) -> RunResult<(MetaGradient, MetaLossRecord)> {
    let index = if config.identical_worker_seeds {
        iteration
    } else {
        iteration * config.workers as u64 + worker as u64
    };
    let mut pick = rng::rng_from(config.seed, STREAM_PICK, index);
    let template = &config.corpus[pick.random_range(0..config.corpus.len())];
    let mut spec = template.clone();
    spec.seed = rng::derive_seed(config.seed, STREAM_PROBLEM, index);
    let problem = instantiate(&spec)?;
    let mut srng = rng::rng_from(config.seed, STREAM_SCHEDULE, index);
    let schedule = sample_schedule(&mut srng, &config.schedule);
    let seeds = RunSeeds::from_master(rng::derive_seed(config.seed, STREAM_RUN, index));
    unroll_and_grad(meta, &problem, &schedule, &seeds, &config.unroll)
}

fn average_gradients(results: &[(MetaGradient, MetaLossRecord)]) -> MetaGradient {
    let w = results.len() as f64;
    let mut avg: MetaGradient = results[0]
        .0
        .iter()
        .map(|a| NdArray::zeros(a.shape()))
        .collect();
    for (g, _) in results {
        for (acc, arr) in avg.iter_mut().zip(g) {
            let ad = acc.data_mut();
            for (x, y) in ad.iter_mut().zip(arr.data()) {
                *x += y / w;
            }
        }
    }
    avg
}

/// Run meta-training from the given starting point. Returns the final
/// meta-parameters, the meta-optimizer state, and the full log.
pub fn meta_train(
    config: &MetaTrainConfig,
    init: MetaParams,
    opt: Option<MetaOptState>,
    start_iteration: u64,
    start_moving_avg: Option<f64>,
    observer: &mut dyn FnMut(MetaEvent<'_>),
) -> RunResult<(MetaParams, MetaOptState, Vec<MetaLogRecord>)> {
    assert!(config.workers >= 1, "at least one worker");
    assert!(!config.corpus.is_empty(), "corpus must not be empty");
    let mut meta = init;
    let mut opt = opt.unwrap_or_else(|| MetaOptState::new(&meta, config.meta_lr, config.meta_decay));
    let mut logs: Vec<MetaLogRecord> = Vec::new();
    let mut moving = start_moving_avg;
    let started = Instant::now();

    if config.sync {
        for iteration in start_iteration..config.iterations {
            let results: Vec<RunResult<(MetaGradient, MetaLossRecord)>> =
                std::thread::scope(|scope| {
                    let handles: Vec<_> = (0..config.workers)
                        .map(|w| {
                            let meta_ref = &meta;
                            scope.spawn(move || worker_unroll(meta_ref, config, iteration, w))
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("worker panicked"))
                        .collect()
                });
            let mut ok = Vec::with_capacity(results.len());
            for r in results {
                ok.push(r?);
            }
            let any_contribution = ok.iter().any(|(_, r)| r.contributing_steps > 0);
            if any_contribution {
                let avg = average_gradients(&ok);
                meta_update(&mut meta, &avg, &mut opt);
            }
            let wall = if config.timing {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            for (w, (_, record)) in ok.iter().enumerate() {
                moving = Some(match moving {
                    None => record.meta_loss,
                    Some(m) => LOG_EMA * m + (1.0 - LOG_EMA) * record.meta_loss,
                });
                let row = MetaLogRecord {
                    iteration,
                    worker: w,
                    problem: record.problem.clone(),
                    meta_loss: record.meta_loss,
                    moving_avg_meta_loss: moving.unwrap(),
                    total_steps: record.schedule.total_steps(),
                    diverged: record.diverged,
                    wall_ms: wall,
                };
                observer(MetaEvent::Log(&row));
                logs.push(row);
            }
            let done = iteration + 1;
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0
                && done != config.iterations
            {
                observer(MetaEvent::Checkpoint {
                    iteration: done,
                    meta: &meta,
                    opt: &opt,
                    moving_avg: moving,
                });
            }
        }
    } else {
        let meta_lock = RwLock::new(meta);
        let shared = Mutex::new((opt, moving, Vec::<MetaLogRecord>::new()));
        let counter = AtomicU64::new(start_iteration);
        let failure: Mutex<Option<crate::error::RunError>> = Mutex::new(None);
        std::thread::scope(|scope| {
            for w in 0..config.workers {
                let meta_lock = &meta_lock;
                let shared = &shared;
                let counter = &counter;
                let failure = &failure;
                scope.spawn(move || loop {
                    if failure.lock().unwrap().is_some() {
                        break;
                    }
                    let iteration = counter.fetch_add(1, Ordering::SeqCst);
                    if iteration >= config.iterations {
                        break;
                    }
                    let snapshot = meta_lock.read().unwrap().clone();
                    match worker_unroll(&snapshot, config, iteration, w) {
                        Ok((grad, record)) => {
                            let mut guard = shared.lock().unwrap();
                            let (opt, moving, logs) = &mut *guard;
                            if record.contributing_steps > 0 {
                                let mut m = meta_lock.write().unwrap();
                                meta_update(&mut m, &grad, opt);
                            }
                            *moving = Some(match *moving {
                                None => record.meta_loss,
                                Some(m) => LOG_EMA * m + (1.0 - LOG_EMA) * record.meta_loss,
                            });
                            logs.push(MetaLogRecord {
                                iteration,
                                worker: w,
                                problem: record.problem.clone(),
                                meta_loss: record.meta_loss,
                                moving_avg_meta_loss: moving.unwrap(),
                                total_steps: record.schedule.total_steps(),
                                diverged: record.diverged,
                                wall_ms: if config.timing {
                                    started.elapsed().as_secs_f64() * 1e3
                                } else {
                                    0.0
                                },
                            });
                        }
                        Err(e) => {
                            *failure.lock().unwrap() = Some(e);
                            break;
                        }
                    }
                });
            }
        });
        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
        meta = meta_lock.into_inner().unwrap();
        let (o, m, mut l) = shared.into_inner().unwrap();
        opt = o;
        moving = m;
        l.sort_by_key(|r| (r.iteration, r.worker));
        for row in &l {
            observer(MetaEvent::Log(row));
        }
        logs = l;
    }

    observer(MetaEvent::Checkpoint {
        iteration: config.iterations,
        meta: &meta,
        opt: &opt,
        moving_avg: moving,
    });
    Ok((meta, opt, logs))
}
