use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use semloc_autograd::{GradMap, Graph, OptimState, ParamKind, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointManifest, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
use super::config::{lambda3_schedule, Method, SplitPlan, TrainConfig};
use super::data::{input_shape, CoordNormalizer, SampleView};
use super::metrics::{argmax, compute_metrics, Metrics};
use crate::binio;
use crate::error::{invalid, Error, Result};
use crate::features::FeatureSet;
use crate::loss::{hda_total, loss_wr, mda_total, KtPair, LossReport, LossWeights, SourceBatch};
use crate::model::{bind, update_running_stats, ArchConfig, Mode, Model, ModelOutputs};
use crate::seed::{rng_for, STREAM_SOURCE_BATCHES, STREAM_TARGET_BATCHES};
use crate::sim::{SemanticLabel, TensorSpec};

pub const HDA_S1: &str = "hda.s1";
pub const HDA_S2: &str = "hda.s2";

pub const LOG_COLUMNS: [&str; 15] = [
    "kind", "epoch", "step", "L_CR", "L_PCP", "L_loc", "L_global", "L_WR", "w1", "w2", "lambda3", "lambda4", "total",
    "val_rmse", "val_acc",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogKind {
    Step,
    Epoch,
}

/// One line of the training log: a step with its loss report, or an epoch
/// with its validation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub kind: LogKind,
    /// 1-based epoch.
    pub epoch: usize,
    /// Steps completed including this one.
    pub step: usize,
    pub report: Option<LossReport>,
    pub val_rmse: Option<f64>,
    pub val_acc: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = LOG_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let kind = match r.kind {
            LogKind::Step => "step",
            LogKind::Epoch => "epoch",
        };
        let losses = match &r.report {
            Some(p) => [
                Some(p.l_cr),
                Some(p.l_pcp),
                p.l_loc,
                p.l_global,
                p.l_wr,
                Some(p.w1),
                Some(p.w2),
                Some(p.lambda3),
                Some(p.lambda4),
                Some(p.total),
            ]
            .map(opt)
            .join(","),
            None => ",".repeat(9),
        };
        let _ = writeln!(out, "{kind},{},{},{losses},{},{}", r.epoch, r.step, opt(r.val_rmse), opt(r.val_acc));
    }
    out
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    binio::write_bytes(path, log_csv(rows).as_bytes())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// 1-based epoch of the kept parameters.
    pub best_epoch: usize,
    pub best_val: Metrics,
    pub log: Vec<LogRow>,
    pub total_steps: usize,
}

/// Network shape for the fingerprints in `fs`.
pub fn build_arch(fs: &FeatureSet, cfg: &TrainConfig) -> Result<ArchConfig> {
    let n_classes = SemanticLabel::ALL.len();
    let with = |out: usize| cfg.mlp_hidden.iter().copied().chain([out]).collect();
    let arch = ArchConfig {
        conv_channels: cfg.conv_channels.clone(),
        kernel: cfg.kernel,
        mlp_widths_reg: with(3),
        mlp_widths_cls: with(n_classes),
        n_classes,
        input_kind: fs.manifest.kind,
        input_shape: input_shape(fs)?,
    };
    arch.validate()?;
    Ok(arch)
}

/// Model predictions in meters and argmax labels.
pub fn predict(
    model: &Model,
    store: &ParamStore,
    norm: &CoordNormalizer,
    inputs: &Tensor,
    chunk: usize,
) -> Result<(Vec<[f64; 3]>, Vec<usize>, Vec<Vec<f64>>)> {
    let (z, probs) = model.predict(store, inputs, chunk)?;
    let coords = z.into_iter().map(|c| norm.denormalize(c)).collect();
    let labels = probs.iter().map(|p| argmax(p)).collect();
    Ok((coords, labels, probs))
}

/// Metrics of a checkpoint on every sample of `view`.
pub fn evaluate(ckpt: &Checkpoint, view: &SampleView, chunk: usize) -> Result<Metrics> {
    let model = Model::new(ckpt.manifest.arch.clone())?;
    let (coords, labels, _) = predict(&model, &ckpt.store, &ckpt.manifest.normalizer, &view.all_inputs(), chunk)?;
    compute_metrics(&coords, &view.coords(), &labels, &view.labels())
}

/// Coordinate head mapped back to meters.
fn in_meters(g: &mut Graph, out: ModelOutputs, norm: &CoordNormalizer) -> Result<ModelOutputs> {
    let scaled = g.scale(out.coords, norm.scale)?;
    let center = g.constant(Tensor::from_vec(norm.center.to_vec()));
    let coords = g.add(scaled, center)?;
    Ok(ModelOutputs { coords, ..out })
}

/// Rejects supervised batches that reach outside the source scenes.
fn ensure_source_only(view: &SampleView, positions: &[usize], split: &SplitPlan) -> Result<()> {
    match view.scene_of(positions).into_iter().find(|s| !split.source.contains(s)) {
        Some(s) => Err(invalid(format!("supervised batch holds sample of non-source scene {s}"))),
        None => Ok(()),
    }
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    split: &'a SplitPlan,
    model: Model,
    norm: CoordNormalizer,
    source: SampleView<'a>,
    target: SampleView<'a>,
    src_coords: Vec<[f64; 3]>,
    src_labels: Vec<usize>,
}

impl Trainer<'_> {
    fn weights(&self, kappa: f64) -> LossWeights {
        let (lambda1, lambda2) = self.cfg.task_weights();
        let lambda3 = if self.cfg.kt_enabled() {
            self.cfg.lambda3.unwrap_or_else(|| lambda3_schedule(kappa))
        } else {
            0.0
        };
        LossWeights {
            lambda1,
            lambda2,
            lambda3,
            lambda4: self.cfg.lambda4,
            gamma: self.cfg.gamma,
        }
    }

    /// Forward, objective and backward for one source/target batch pair.
    fn step(
        &self,
        store: &ParamStore,
        src_pos: &[usize],
        tgt_pos: Option<&[usize]>,
        w: &LossWeights,
    ) -> Result<(GradMap, LossReport, Vec<(String, semloc_autograd::BatchStats)>)> {
        ensure_source_only(&self.source, src_pos, self.split)?;
        let mut g = Graph::new();
        let bound = bind(&mut g, store);
        let xs = g.constant(self.source.inputs(src_pos));
        let ys: Vec<f64> = src_pos.iter().flat_map(|&p| self.src_coords[p]).collect();
        let ys = g.constant(Tensor::new(vec![src_pos.len(), 3], ys)?);
        let labels: Vec<usize> = src_pos.iter().map(|&p| self.src_labels[p]).collect();
        let fwd = self.model.forward(&mut g, &bound, store, xs, Mode::Train)?;
        // L_CR works on standardized coordinates; the global map sees meters.
        let kt = match tgt_pos {
            Some(tp) => {
                let xt = g.constant(self.target.inputs(tp));
                let t = self.model.forward(&mut g, &bound, store, xt, Mode::Train)?.outputs;
                Some(KtPair {
                    source: in_meters(&mut g, fwd.outputs, &self.norm)?,
                    target: in_meters(&mut g, t, &self.norm)?,
                })
            }
            None => None,
        };
        let wr = if w.lambda4 > 0.0 {
            Some(loss_wr(&mut g, &bound, store, self.cfg.wr_scope)?)
        } else {
            None
        };
        let src = SourceBatch {
            out: fwd.outputs,
            coords: ys,
            labels: &labels,
        };
        let (total, report) = if self.cfg.method == Method::Hda {
            let (s1, s2) = (bound.var(HDA_S1)?, bound.var(HDA_S2)?);
            hda_total(&mut g, &src, kt.as_ref(), s1, s2, w, wr, self.cfg.hda_variant)?
        } else {
            mda_total(&mut g, &src, kt.as_ref(), w, wr)?
        };
        let grads = g.backward(total)?;
        let mut map = GradMap::new();
        for (name, var) in bound.iter() {
            if let Some(t) = grads.get(var) {
                if !t.is_finite() {
                    return Err(semloc_autograd::Error::NonFinite { op: "backward" }.into());
                }
                map.insert(name.to_string(), t.clone());
            }
        }
        Ok((map, report, fwd.bn_stats))
    }

    fn val_metrics(&self, store: &ParamStore, val: &SampleView, inputs: &Tensor) -> Result<Metrics> {
        let (coords, labels, _) = predict(&self.model, store, &self.norm, inputs, self.cfg.eval_chunk)?;
        compute_metrics(&coords, &val.coords(), &labels, &val.labels())
    }
}

fn better(method: Method, m: &Metrics, best: Option<&Metrics>) -> bool {
    match best {
        None => true,
        Some(b) if method == Method::PcpOnly => m.accuracy > b.accuracy,
        Some(b) => m.rmse < b.rmse,
    }
}

pub fn train(fs: &FeatureSet, split: &SplitPlan, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(fs, split, cfg, &mut |_| {})
}

/// Trains and keeps the parameters of the best validation epoch (lowest RMSE,
/// or highest accuracy for the classification-only method). `observer` sees
/// every log row as it is produced.
pub fn train_with_observer(
    fs: &FeatureSet,
    split: &SplitPlan,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    split.validate(fs.manifest.source.n_scenes)?;
    let arch = build_arch(fs, cfg)?;
    let model = Model::new(arch.clone())?;
    let source = SampleView::new(fs, split.source.clone())?;
    let val = SampleView::new(fs, split.val.clone())?;
    let target = SampleView::new(fs, split.target.clone())?;
    let steps_per_epoch = source.len() / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(invalid(format!(
            "{} source samples cannot fill one batch of {}",
            source.len(),
            cfg.batch_size
        )));
    }
    if val.is_empty() {
        return Err(invalid("validation scenes hold no samples"));
    }
    let kt = cfg.kt_enabled();
    let tgt_batch = cfg.batch_size.min(target.len());
    if kt && tgt_batch < 2 {
        return Err(invalid("target scenes hold fewer than two samples"));
    }
    let norm = CoordNormalizer::fit(&source.coords())?;
    let src_coords = source.coords().into_iter().map(|c| norm.normalize(c)).collect();
    let src_labels = source.labels();
    let trainer = Trainer {
        cfg,
        split,
        model,
        norm,
        source,
        target,
        src_coords,
        src_labels,
    };

    let mut store = trainer.model.build(cfg.seed);
    if cfg.method == Method::Hda {
        store.insert(HDA_S1, ParamKind::Uncertainty, Tensor::from_vec(vec![cfg.hda_init[0]]));
        store.insert(HDA_S2, ParamKind::Uncertainty, Tensor::from_vec(vec![cfg.hda_init[1]]));
    }
    let mut optim = OptimState::new(cfg.effective_sgd());
    let val_inputs = val.all_inputs();
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut tgt_rng = rng_for(cfg.seed, STREAM_TARGET_BATCHES, 0);
    let mut log = Vec::with_capacity(total_steps + cfg.epochs);
    let mut best: Option<(usize, usize, Metrics, ParamStore)> = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..trainer.source.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, STREAM_SOURCE_BATCHES, epoch as u64));
        for batch in order.chunks_exact(cfg.batch_size) {
            let w = trainer.weights(step as f64 / total_steps as f64);
            let tgt_pos = kt.then(|| sample(&mut tgt_rng, trainer.target.len(), tgt_batch).into_vec());
            let wrap = |e: Error| match e {
                Error::Autograd(source @ semloc_autograd::Error::NonFinite { .. }) => {
                    Error::NonFiniteStep { step: step + 1, source }
                }
                e => e,
            };
            let (grads, report, stats) = trainer.step(&store, batch, tgt_pos.as_deref(), &w).map_err(wrap)?;
            optim.step(&mut store, &grads).map_err(|e| wrap(e.into()))?;
            update_running_stats(&mut store, &stats)?;
            step += 1;
            let row = LogRow {
                kind: LogKind::Step,
                epoch,
                step,
                report: Some(report),
                val_rmse: None,
                val_acc: None,
            };
            observer(&row);
            log.push(row);
        }
        let m = trainer.val_metrics(&store, &val, &val_inputs)?;
        let row = LogRow {
            kind: LogKind::Epoch,
            epoch,
            step,
            report: None,
            val_rmse: Some(m.rmse),
            val_acc: Some(m.accuracy),
        };
        observer(&row);
        log.push(row);
        if better(cfg.method, &m, best.as_ref().map(|b| &b.2)) {
            best = Some((epoch, step, m, store.clone()));
        }
    }
    let (best_epoch, best_step, best_val, best_store) = best.expect("at least one epoch");
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        arch,
        method: cfg.method,
        seed: cfg.seed,
        epoch: best_epoch,
        step: best_step,
        optimizer_state: false,
        normalizer: trainer.norm,
        val_rmse: best_val.rmse,
        val_accuracy: best_val.accuracy,
        layout: best_store.layout(),
        params: TensorSpec::new("params.bin", vec![best_store.to_flat().len()], "f64"),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            manifest,
            store: best_store,
        },
        best_epoch,
        best_val,
        log,
        total_steps,
    })
}
