use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use semloc_autograd::SgdConfig;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::loss::{HdaVariant, WrScope};

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Coordinate regression only.
    Dcnn,
    /// Semantic classification only.
    PcpOnly,
    /// Equal CR/PCP weights.
    MdaUnweighted,
    /// Hand-set CR/PCP weights.
    Mda,
    /// Learned uncertainty weights.
    Hda,
}

impl Method {
    pub const ALL: [Method; 5] = [Self::Dcnn, Self::PcpOnly, Self::MdaUnweighted, Self::Mda, Self::Hda];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dcnn => "dcnn",
            Self::PcpOnly => "pcp_only",
            Self::MdaUnweighted => "mda_unweighted",
            Self::Mda => "mda",
            Self::Hda => "hda",
        }
    }

    /// Default (λ₁, λ₂). HDA learns its own weights; the pair is unused there.
    pub fn default_task_weights(self) -> (f64, f64) {
        match self {
            Self::Dcnn => (1.0, 0.0),
            Self::PcpOnly => (0.0, 1.0),
            Self::MdaUnweighted => (0.5, 0.5),
            Self::Mda => (0.7, 0.3),
            Self::Hda => (0.0, 0.0),
        }
    }

    pub fn default_kt(self) -> bool {
        matches!(self, Self::MdaUnweighted | Self::Mda | Self::Hda)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| format!("unknown method `{s}` (expected dcnn, pcp_only, mda_unweighted, mda or hda)"))
    }
}

/// Disjoint scene ranges for supervision, checkpoint selection and adaptation/testing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub source: Range<usize>,
    pub val: Range<usize>,
    pub target: Range<usize>,
}

impl SplitPlan {
    pub fn desk() -> Self {
        Self { source: 0..20, val: 20..28, target: 28..40 }
    }

    pub fn full() -> Self {
        Self { source: 0..50, val: 50..70, target: 70..120 }
    }

    /// Half source, a fifth validation, the rest target.
    pub fn for_scenes(n_scenes: usize) -> Self {
        match n_scenes {
            40 => Self::desk(),
            120 => Self::full(),
            n => {
                let s = n / 2;
                let v = s + n / 5;
                Self { source: 0..s, val: s..v, target: v..n }
            }
        }
    }

    pub fn validate(&self, n_scenes: usize) -> Result<()> {
        let ranges = [("source", &self.source), ("val", &self.val), ("target", &self.target)];
        for (name, r) in ranges {
            if r.is_empty() {
                return Err(invalid(format!("{name} scene range is empty")));
            }
            if r.end > n_scenes {
                return Err(invalid(format!("{name} scenes {r:?} exceed the {n_scenes} available")));
            }
        }
        for (i, (a, ra)) in ranges.iter().enumerate() {
            for (b, rb) in &ranges[i + 1..] {
                if ra.start < rb.end && rb.start < ra.end {
                    return Err(invalid(format!("{a} and {b} scene ranges overlap")));
                }
            }
        }
        Ok(())
    }

    pub fn range(&self, split: Split) -> &Range<usize> {
        match split {
            Split::Source => &self.source,
            Split::Val => &self.val,
            Split::Target => &self.target,
        }
    }
}

/// Named part of a [`SplitPlan`]. Target scenes double as the test set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Source,
    Val,
    Target,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "source" | "train" => Ok(Self::Source),
            "val" | "eval" => Ok(Self::Val),
            "target" | "test" => Ok(Self::Target),
            _ => Err(format!("unknown split `{s}` (expected source, val or test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Keep the optimizer weight decay even when L_WR is active.
    pub literal_weight_decay: bool,
    /// CR weight; method default when absent.
    pub lambda1: Option<f64>,
    /// PCP weight; method default when absent.
    pub lambda2: Option<f64>,
    /// Knowledge-transfer term on/off; method default when absent.
    pub kt: Option<bool>,
    /// Constant λ₃ replacing the progress schedule.
    pub lambda3: Option<f64>,
    pub lambda4: f64,
    pub gamma: f64,
    pub wr_scope: WrScope,
    pub hda_variant: HdaVariant,
    /// Initial (log σ₁², log σ₂²).
    pub hda_init: [f64; 2],
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    /// Hidden widths shared by both heads; output widths are appended.
    pub mlp_hidden: Vec<usize>,
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small network and short budget for single-core runs.
    pub fn desk() -> Self {
        Self {
            method: Method::Mda,
            seed: 0,
            epochs: 12,
            batch_size: 64,
            sgd: SgdConfig {
                lr: 1e-3,
                momentum: 0.99,
                weight_decay: 1e-4,
            },
            literal_weight_decay: false,
            lambda1: None,
            lambda2: None,
            kt: None,
            lambda3: None,
            lambda4: 1e-4,
            gamma: 2.0,
            wr_scope: WrScope::Weights,
            hda_variant: HdaVariant::Compact,
            hda_init: [0.0, 0.0],
            conv_channels: vec![4, 8, 8, 16],
            kernel: 3,
            mlp_hidden: vec![64, 32],
            eval_chunk: 256,
        }
    }

    /// Full-size network and budget.
    pub fn full() -> Self {
        Self {
            epochs: 2000,
            batch_size: 256,
            conv_channels: vec![16, 32, 32, 64],
            mlp_hidden: vec![256, 128],
            ..Self::desk()
        }
    }

    pub fn task_weights(&self) -> (f64, f64) {
        let (d1, d2) = self.method.default_task_weights();
        (self.lambda1.unwrap_or(d1), self.lambda2.unwrap_or(d2))
    }

    pub fn kt_enabled(&self) -> bool {
        self.kt.unwrap_or_else(|| self.method.default_kt())
    }

    /// Optimizer weight decay after resolving the overlap with L_WR.
    pub fn effective_sgd(&self) -> SgdConfig {
        let mut sgd = self.sgd;
        if self.lambda4 > 0.0 && !self.literal_weight_decay {
            sgd.weight_decay = 0.0;
        }
        sgd
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(invalid("batch_size must be at least 2 for batchnorm"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.eval_chunk == 0 {
            return Err(invalid("eval_chunk must be positive"));
        }
        let (l1, l2) = self.task_weights();
        let nonneg = [("lambda1", l1), ("lambda2", l2), ("lambda4", self.lambda4), ("gamma", self.gamma)];
        for (name, v) in nonneg.into_iter().chain(self.lambda3.map(|v| ("lambda3", v))) {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.method != Method::Hda && l1 == 0.0 && l2 == 0.0 {
            return Err(invalid("lambda1 and lambda2 are both zero"));
        }
        let SgdConfig { lr, momentum, weight_decay } = self.sgd;
        if !(lr > 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(invalid("sgd needs lr > 0, momentum in [0, 1) and weight_decay >= 0"));
        }
        if !self.hda_init.iter().all(|v| v.is_finite()) {
            return Err(invalid("hda_init must be finite"));
        }
        Ok(())
    }
}

/// λ₃(κ) = 2/(1 + e^{−10κ}) − 1, ramping from 0 towards 1 over training progress κ ∈ [0, 1].
pub fn lambda3_schedule(kappa: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * kappa).exp()) - 1.0
}
