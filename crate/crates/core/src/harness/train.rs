//! Full-scene training loop, evaluation and checkpoint I/O.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{LabelMask, SplitMask};
use crate::error::{Error, Result};
use crate::harness::config::{OptimizerKind, TrainConfig};
use crate::losses::LossBreakdown;
use crate::metrics::{confusion, report, EvalReport};
use crate::model::{Cscn, PreparedInput};
use crate::params::{round_f32, write_atomic, ParamStore};
use crate::rng::seeded;
use crate::spectra::HsiCube;
use crate::tensor::Tensor;

/// RNG stream used for weight initialization.
pub const INIT_STREAM: u64 = 0x1417;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MOMENTUM: f64 = 0.9;

/// First-order optimizer state over every parameter of a store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u32,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        let second = match kind {
            OptimizerKind::AdaptiveMoment => zeros(),
            OptimizerKind::MomentumSgd => Vec::new(),
        };
        Self {
            kind,
            lr,
            step: 0,
            first: zeros(),
            second,
        }
    }

    /// Applies one update; parameters are kept at `f32` precision.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::AdaptiveMoment => {
                let c1 = 1.0 - BETA1.powi(self.step as i32);
                let c2 = 1.0 - BETA2.powi(self.step as i32);
                for (((p, g), m), v) in params.values_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
                    for (((p, &g), m), v) in iter {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *p = round_f32(*p - lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
                    }
                }
            }
            OptimizerKind::MomentumSgd => {
                for ((p, g), m) in params.values_mut().zip(grads).zip(&mut self.first) {
                    for ((p, &g), m) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()) {
                        *m = MOMENTUM * *m + g;
                        *p = round_f32(*p - lr * *m);
                    }
                }
            }
        }
    }
}

/// Everything recorded about one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    /// One entry per epoch.
    pub trace: Vec<LossBreakdown>,
    /// Metrics on the test split.
    pub report: EvalReport,
    pub wall_seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    /// Writes the loss trace as `step,ce,asl,ccl,total` rows.
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        write_trace(&self.trace, path)
    }
}

pub fn write_trace(trace: &[LossBreakdown], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LossBreakdown::CSV_HEADER)?;
    for (step, b) in trace.iter().enumerate() {
        w.write_record(b.csv_row(step))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// A trained model with its record.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub model: Cscn,
    pub record: RunRecord,
}

/// Trains from a fresh initialization seeded by `cfg.seed`. Only labels
/// inside `split.train` reach the losses.
pub fn train(cube: &HsiCube, mask: &LabelMask, split: &SplitMask, cfg: &TrainConfig) -> Result<TrainedRun> {
    cfg.validate()?;
    check_scene(cube, mask, split)?;
    let model_cfg = cfg.model_config(cube.band_count(), mask.class_count() as usize);
    let mut model = Cscn::new(model_cfg, &mut seeded(cfg.seed, INIT_STREAM))?;
    let input = model.cfg.prepare(cube)?;
    let train_mask = mask.restricted(&split.train);

    let start = Instant::now();
    let trace = fit(&mut model, &input, &train_mask, cfg)?;
    let report = evaluate_model(&model, &input, mask, &split.test)?;
    Ok(TrainedRun {
        model,
        record: RunRecord {
            config: cfg.clone(),
            trace,
            report,
            wall_seconds: start.elapsed().as_secs_f64(),
            checkpoint: None,
        },
    })
}

/// Stepwise training state for one model on one scene.
#[derive(Debug)]
pub struct Trainer<'a> {
    pub model: &'a mut Cscn,
    input: &'a PreparedInput,
    train_mask: &'a LabelMask,
    lambda: f64,
    opt: Optimizer,
    trace: Vec<LossBreakdown>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut Cscn, input: &'a PreparedInput, train_mask: &'a LabelMask, cfg: &TrainConfig) -> Self {
        let opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model.params);
        Self {
            model,
            input,
            train_mask,
            lambda: cfg.lambda,
            opt,
            trace: Vec::new(),
        }
    }

    /// One forward/backward/update on the full scene.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let step = self.trace.len();
        let mut g = Graph::new();
        let out = self.model.forward(&mut g, self.input)?;
        let (loss, breakdown) = self.model.loss(&mut g, &out, self.train_mask, self.lambda)?;
        let diverged = |trace: &[LossBreakdown]| Error::DivergenceDetected {
            step,
            trace: trace.to_vec(),
        };
        if !breakdown.is_finite() {
            return Err(diverged(&self.trace));
        }
        let grads = g.backward(loss);
        let param_grads = g.param_grads(&grads, &self.model.params);
        if !param_grads.iter().all(Tensor::is_finite) {
            return Err(diverged(&self.trace));
        }
        self.opt.update(&mut self.model.params, &param_grads);
        self.trace.push(breakdown);
        Ok(breakdown)
    }

    pub fn trace(&self) -> &[LossBreakdown] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<LossBreakdown> {
        self.trace
    }
}

/// Runs `cfg.epochs` optimizer steps on `train_mask` and returns the trace.
pub fn fit(model: &mut Cscn, input: &PreparedInput, train_mask: &LabelMask, cfg: &TrainConfig) -> Result<Vec<LossBreakdown>> {
    let mut trainer = Trainer::new(model, input, train_mask, cfg);
    for _ in 0..cfg.epochs {
        trainer.step()?;
    }
    Ok(trainer.into_trace())
}

fn check_scene(cube: &HsiCube, mask: &LabelMask, split: &SplitMask) -> Result<()> {
    let dims = (cube.height(), cube.width());
    if mask.dims() != dims {
        return Err(Error::SpatialMismatch(dims, mask.dims()));
    }
    if (split.height, split.width) != dims {
        return Err(Error::SpatialMismatch(dims, (split.height, split.width)));
    }
    Ok(())
}

/// Argmax predictions scored over `region`.
pub fn evaluate_model(model: &Cscn, input: &PreparedInput, mask: &LabelMask, region: &[bool]) -> Result<EvalReport> {
    let pred = model.predict(input)?;
    report(&confusion(&pred, mask, region)?)
}

/// Saves parameters with the training config and data dims as metadata.
pub fn save_model(model: &Cscn, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut meta = cfg.to_pairs();
    meta.push(("bands".into(), model.cfg.bands.to_string()));
    meta.push(("classes".into(), model.cfg.classes.to_string()));
    model.params.save_checkpoint(path, &meta)
}

/// Rebuilds a model and its training config from a checkpoint.
pub fn load_model(path: &Path) -> Result<(Cscn, TrainConfig)> {
    let (store, meta) = ParamStore::load_checkpoint(path)?;
    let cfg = TrainConfig::from_pairs(&meta)?;
    let dim = |key: &str| -> Result<usize> {
        meta.iter()
            .find(|(k, _)| k == key)
            .and_then(|(_, v)| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("missing `{key}` metadata")))
    };
    let model_cfg = cfg.model_config(dim("bands")?, dim("classes")?);
    let mut model = Cscn::new(model_cfg, &mut seeded(0, INIT_STREAM))?;
    model.params.assign_from(&store)?;
    Ok((model, cfg))
}

/// Loads a checkpoint and scores it on the test split.
pub fn evaluate(checkpoint: &Path, cube: &HsiCube, mask: &LabelMask, split: &SplitMask) -> Result<EvalReport> {
    let (model, _) = load_model(checkpoint)?;
    check_scene(cube, mask, split)?;
    if cube.band_count() != model.cfg.bands || mask.class_count() as usize != model.cfg.classes {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint expects {} bands and {} classes, data has {} and {}",
            model.cfg.bands,
            model.cfg.classes,
            cube.band_count(),
            mask.class_count()
        )));
    }
    let input = model.cfg.prepare(cube)?;
    evaluate_model(&model, &input, mask, &split.test)
}
