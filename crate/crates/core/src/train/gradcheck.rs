use rand::Rng;
use rand_distr::StandardNormal;
use semloc_autograd::{grad_check, GradCheckReport, GradMap, Graph, ParamKind, ParamStore, Tensor};

use super::config::Method;
use super::trainer::{HDA_S1, HDA_S2};
use crate::error::{invalid, Result};
use crate::features::FingerprintKind;
use crate::loss::{hda_total, loss_wr, mda_total, HdaVariant, KtPair, LossWeights, SourceBatch, WrScope};
use crate::model::{bind, ArchConfig, Mode, Model};
use crate::seed::{rng_for, STREAM_GRADCHECK};

pub const GRADCHECK_BATCH: usize = 4;
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Small network with every layer type of the full model.
pub fn gradcheck_arch() -> ArchConfig {
    ArchConfig {
        conv_channels: vec![2, 3],
        kernel: 3,
        mlp_widths_reg: vec![5, 3],
        mlp_widths_cls: vec![5, 3],
        n_classes: 3,
        input_kind: FingerprintKind::Adp,
        input_shape: [1, 8, 8],
    }
}

/// Central-difference check of the complete training objective (all four
/// terms; for HDA also the log-variances) on random source/target batches.
pub fn gradcheck_objective(method: Method, seed: u64) -> Result<GradCheckReport> {
    let model = Model::new(gradcheck_arch())?;
    let mut store = model.build(seed);
    let mut rng = rng_for(seed, STREAM_GRADCHECK, 0);
    let [c, h, w] = model.arch.input_shape;
    let n = GRADCHECK_BATCH * c * h * w;
    let input = |rng: &mut rand_chacha::ChaCha8Rng| {
        let data = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![GRADCHECK_BATCH, c, h, w], data)
    };
    let xs = input(&mut rng)?;
    let xt = input(&mut rng)?;
    let ys = Tensor::new(
        vec![GRADCHECK_BATCH, 3],
        (0..GRADCHECK_BATCH * 3).map(|_| rng.sample(StandardNormal)).collect(),
    )?;
    let labels: Vec<usize> = (0..GRADCHECK_BATCH).map(|i| i % 3).collect();
    let (lambda1, lambda2) = match method {
        Method::Hda => (0.0, 0.0),
        Method::Mda => (0.7, 0.3),
        _ => return Err(invalid(format!("gradcheck covers mda and hda, not {method}"))),
    };
    let weights = LossWeights {
        lambda1,
        lambda2,
        lambda3: 0.5,
        lambda4: 0.01,
        gamma: 2.0,
    };
    if method == Method::Hda {
        store.insert(HDA_S1, ParamKind::Uncertainty, Tensor::from_vec(vec![0.3]));
        store.insert(HDA_S2, ParamKind::Uncertainty, Tensor::from_vec(vec![0.2]));
    }
    let mut objective = |p: &ParamStore| -> semloc_autograd::Result<(f64, GradMap)> {
        let run = || -> Result<(f64, GradMap)> {
            let mut g = Graph::new();
            let bound = bind(&mut g, p);
            let xs = g.constant(xs.clone());
            let xt = g.constant(xt.clone());
            let y = g.constant(ys.clone());
            let s = model.forward(&mut g, &bound, p, xs, Mode::Train)?.outputs;
            let t = model.forward(&mut g, &bound, p, xt, Mode::Train)?.outputs;
            let wr = loss_wr(&mut g, &bound, p, WrScope::Weights)?;
            let src = SourceBatch { out: s, coords: y, labels: &labels };
            let kt = KtPair { source: s, target: t };
            let (total, _) = if method == Method::Hda {
                let (s1, s2) = (bound.var(HDA_S1)?, bound.var(HDA_S2)?);
                hda_total(&mut g, &src, Some(&kt), s1, s2, &weights, Some(wr), HdaVariant::Compact)?
            } else {
                mda_total(&mut g, &src, Some(&kt), &weights, Some(wr))?
            };
            let grads = g.backward(total)?;
            let map = bound
                .iter()
                .filter_map(|(name, v)| grads.get(v).map(|t| (name.to_string(), t.clone())))
                .collect();
            Ok((g.value(total).item(), map))
        };
        run().map_err(|e| match e {
            crate::Error::Autograd(e) => e,
            other => semloc_autograd::Error::ShapeMismatch {
                op: "gradcheck",
                detail: other.to_string(),
            },
        })
    };
    Ok(grad_check(&mut objective, &store, GRADCHECK_STEP)?)
}
