//! Feature extractor, location regressor and propagation-condition classifier.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use semloc_autograd::{BatchStats, BnMode, Graph, Padding, ParamKind, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::FingerprintKind;
use crate::seed::{rng_for, STREAM_INIT};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub conv_channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    pub mlp_widths_reg: Vec<usize>,
    pub mlp_widths_cls: Vec<usize>,
    pub n_classes: usize,
    pub input_kind: FingerprintKind,
    /// `[C, H, W]`.
    pub input_shape: [usize; 3],
}

fn default_kernel() -> usize {
    3
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![16, 32, 32, 64],
            kernel: 3,
            mlp_widths_reg: vec![256, 128, 3],
            mlp_widths_cls: vec![256, 128, 3],
            n_classes: 3,
            input_kind: FingerprintKind::Adp,
            input_shape: [1, 64, 64],
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(invalid("conv_channels must be non-empty and positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(invalid("kernel size must be odd for same padding"));
        }
        if self.input_shape.contains(&0) {
            return Err(invalid("input_shape must be positive"));
        }
        if self.n_classes < 2 {
            return Err(invalid("n_classes must be at least 2"));
        }
        if self.mlp_widths_reg.last() != Some(&3) {
            return Err(invalid("regressor output width must be 3"));
        }
        if self.mlp_widths_cls.last() != Some(&self.n_classes) {
            return Err(invalid("classifier output width must equal n_classes"));
        }
        if self.mlp_widths_reg.contains(&0) || self.mlp_widths_cls.contains(&0) {
            return Err(invalid("MLP widths must be positive"));
        }
        Ok(())
    }

    /// Spatial size after each 2×2 ceil-mode pooling.
    pub fn feature_map_sizes(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        self.conv_channels
            .iter()
            .map(|_| {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
                (h, w)
            })
            .collect()
    }

    /// Length of the flattened feature vector ω.
    pub fn feature_dim(&self) -> usize {
        let (h, w) = *self.feature_map_sizes().last().unwrap();
        self.conv_channels.last().unwrap() * h * w
    }
}

/// Graph handles for every parameter of a store.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| semloc_autograd::Error::UnknownParam(name.into()).into())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Adds every parameter as a differentiable leaf.
pub fn bind(g: &mut Graph, store: &ParamStore) -> Bound {
    Bound {
        vars: store
            .iter()
            .map(|(name, p)| (name.to_string(), g.param(p.value.clone())))
            .collect(),
    }
}

/// Adds every parameter as a constant (inference only).
pub fn bind_frozen(g: &mut Graph, store: &ParamStore) -> Bound {
    Bound {
        vars: store
            .iter()
            .map(|(name, p)| (name.to_string(), g.constant(p.value.clone())))
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutputs {
    /// ω, `[B, F]`, post-ReLU.
    pub features: Var,
    /// ζ, `[B, 3]`.
    pub coords: Var,
    /// u, `[B, n_classes]`.
    pub logits: Var,
    /// ξ = softmax(u).
    pub probs: Var,
}

pub struct Forward {
    pub outputs: ModelOutputs,
    /// Batch statistics of every batchnorm layer (train mode only), keyed by layer prefix.
    pub bn_stats: Vec<(String, BatchStats)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: ArchConfig,
}

fn xavier(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-a..a)).collect())
        .expect("shape and data agree")
}

fn insert_bn(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.gamma"), ParamKind::BnScale, Tensor::ones(&[c]));
    store.insert(format!("{prefix}.beta"), ParamKind::BnShift, Tensor::zeros(&[c]));
    store.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
    store.insert_buffer(format!("{prefix}.running_var"), Tensor::ones(&[c]));
}

impl Model {
    pub fn new(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch })
    }

    fn heads(&self) -> [(&'static str, &[usize]); 2] {
        [("reg", &self.arch.mlp_widths_reg), ("cls", &self.arch.mlp_widths_cls)]
    }

    /// Xavier-uniform weights, zero biases, unit/zero batchnorm affine.
    ///
    /// Layers feeding a batchnorm carry no bias (the shift subsumes it);
    /// only the final linear layer of each head has one.
    pub fn build(&self, seed: u64) -> ParamStore {
        let mut rng = rng_for(seed, STREAM_INIT, 0);
        let mut store = ParamStore::new();
        let k = self.arch.kernel;
        let mut cin = self.arch.input_shape[0];
        for (i, &cout) in self.arch.conv_channels.iter().enumerate() {
            let w = xavier(&mut rng, &[cout, cin, k, k], cin * k * k, cout * k * k);
            store.insert(format!("f.conv{i}.weight"), ParamKind::Weight, w);
            insert_bn(&mut store, &format!("f.bn{i}"), cout);
            cin = cout;
        }
        for (head, widths) in self.heads() {
            let mut din = self.arch.feature_dim();
            for (j, &dout) in widths.iter().enumerate() {
                let w = xavier(&mut rng, &[din, dout], din, dout);
                store.insert(format!("{head}.fc{j}.weight"), ParamKind::Weight, w);
                if j + 1 < widths.len() {
                    insert_bn(&mut store, &format!("{head}.bn{j}"), dout);
                } else {
                    store.insert(format!("{head}.fc{j}.bias"), ParamKind::Bias, Tensor::zeros(&[dout]));
                }
                din = dout;
            }
        }
        store
    }

    fn bn(
        &self,
        g: &mut Graph,
        bound: &Bound,
        store: &ParamStore,
        prefix: &str,
        x: Var,
        mode: Mode,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let gamma = bound.var(&format!("{prefix}.gamma"))?;
        let beta = bound.var(&format!("{prefix}.beta"))?;
        let (y, s) = match mode {
            Mode::Train => g.batch_norm(x, gamma, beta, BnMode::Train)?,
            Mode::Eval => {
                let mean = store.buffer(&format!("{prefix}.running_mean"))?.data();
                let var = store.buffer(&format!("{prefix}.running_var"))?.data();
                g.batch_norm(x, gamma, beta, BnMode::Eval { mean, var })?
            }
        };
        if let Some(s) = s {
            stats.push((prefix.to_string(), s));
        }
        Ok(y)
    }

    /// ω = f(X); ζ = g(ω); u = h(ω); ξ = softmax(u).
    ///
    /// For two classes the softmax equals a sigmoid of the logit difference,
    /// so one code path serves both cases.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, store: &ParamStore, x: Var, mode: Mode) -> Result<Forward> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != self.arch.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "model expects [B, {:?}], got {:?}",
                self.arch.input_shape, shape
            )));
        }
        let batch = shape[0];
        let mut stats = Vec::new();
        let mut h = x;
        for i in 0..self.arch.conv_channels.len() {
            let w = bound.var(&format!("f.conv{i}.weight"))?;
            h = g.conv2d(h, w, None, Padding::Same)?;
            h = self.bn(g, bound, store, &format!("f.bn{i}"), h, mode, &mut stats)?;
            h = g.max_pool2d(h)?;
            h = g.relu(h)?;
        }
        let features = g.reshape(h, &[batch, self.arch.feature_dim()])?;
        let mut heads = Vec::new();
        for (head, widths) in self.heads() {
            let mut z = features;
            for j in 0..widths.len() {
                let w = bound.var(&format!("{head}.fc{j}.weight"))?;
                z = g.matmul(z, w)?;
                if j + 1 < widths.len() {
                    z = self.bn(g, bound, store, &format!("{head}.bn{j}"), z, mode, &mut stats)?;
                    z = g.relu(z)?;
                } else {
                    let b = bound.var(&format!("{head}.fc{j}.bias"))?;
                    z = g.add(z, b)?;
                }
            }
            heads.push(z);
        }
        let probs = g.softmax(heads[1])?;
        Ok(Forward {
            outputs: ModelOutputs {
                features,
                coords: heads[0],
                logits: heads[1],
                probs,
            },
            bn_stats: stats,
        })
    }

    /// Eval-mode coords and class probabilities, evaluated in chunks of `chunk` samples.
    pub fn predict(&self, store: &ParamStore, inputs: &Tensor, chunk: usize) -> Result<(Vec<[f64; 3]>, Vec<Vec<f64>>)> {
        let n = inputs.shape()[0];
        let mut coords = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let mut g = Graph::new();
            let bound = bind_frozen(&mut g, store);
            let x = g.constant(inputs.slice_outer(start, end));
            let out = self.forward(&mut g, &bound, store, x, Mode::Eval)?.outputs;
            coords.extend(g.value(out.coords).data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]));
            let kc = self.arch.n_classes;
            probs.extend(g.value(out.probs).data().chunks_exact(kc).map(<[f64]>::to_vec));
            start = end;
        }
        Ok((coords, probs))
    }

    /// Layer table with output shapes and parameter counts.
    pub fn describe(&self) -> String {
        let a = &self.arch;
        let k = a.kernel;
        let mut out = String::new();
        let mut total = 0;
        let mut row = |out: &mut String, name: &str, shape: String, params: usize| {
            total += params;
            let _ = writeln!(out, "{name:<28} {shape:<20} {params:>10}");
        };
        let _ = writeln!(out, "{:<28} {:<20} {:>10}", "layer", "output", "params");
        row(&mut out, "input", format!("{:?}", a.input_shape), 0);
        let mut cin = a.input_shape[0];
        let sizes = a.feature_map_sizes();
        let (mut hh, mut ww) = (a.input_shape[1], a.input_shape[2]);
        for (i, &c) in a.conv_channels.iter().enumerate() {
            row(&mut out, &format!("f.conv{i} {k}x{k} same"), format!("[{c}, {hh}, {ww}]"), cin * c * k * k);
            row(&mut out, &format!("f.bn{i}"), format!("[{c}, {hh}, {ww}]"), 2 * c);
            (hh, ww) = sizes[i];
            row(&mut out, &format!("f.pool{i} 2x2 + relu"), format!("[{c}, {hh}, {ww}]"), 0);
            cin = c;
        }
        row(&mut out, "flatten (omega)", format!("[{}]", a.feature_dim()), 0);
        for (head, widths) in self.heads() {
            let mut din = a.feature_dim();
            for (j, &d) in widths.iter().enumerate() {
                if j + 1 < widths.len() {
                    row(&mut out, &format!("{head}.fc{j}"), format!("[{d}]"), din * d);
                    row(&mut out, &format!("{head}.bn{j} + relu"), format!("[{d}]"), 2 * d);
                } else {
                    let act = if head == "cls" { " + softmax" } else { "" };
                    row(&mut out, &format!("{head}.fc{j}{act}"), format!("[{d}]"), din * d + d);
                }
                din = d;
            }
        }
        let _ = writeln!(out, "total trainable parameters: {total}");
        out
    }
}

/// Exponential moving update of running statistics; variance is stored unbiased.
pub fn update_running_stats(store: &mut ParamStore, stats: &[(String, BatchStats)]) -> Result<()> {
    for (prefix, s) in stats {
        let n = s.count as f64;
        let unbias = if s.count > 1 { n / (n - 1.0) } else { 1.0 };
        let rm = store.buffer_mut(&format!("{prefix}.running_mean"))?;
        for (r, m) in rm.data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = store.buffer_mut(&format!("{prefix}.running_var"))?;
        for (r, v) in rv.data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
        }
    }
    Ok(())
}
