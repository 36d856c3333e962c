//! Localization, classification, alignment and regularization losses.

use semloc_autograd::{Graph, ParamKind, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bound, ModelOutputs};

/// Probability floor inside logs and focal bases.
pub const PROB_EPS: f64 = 1e-12;
/// Smoothing added to distributions before SKL.
pub const SKL_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.gamma];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig("loss weights and gamma must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Which parameters the weight-regularization term covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrScope {
    /// Convolution and linear weights only.
    #[default]
    Weights,
    /// Every network parameter (biases and batchnorm affine included).
    AllNetwork,
}

/// Per-batch loss components. `w1`/`w2` hold λ₁/λ₂, or σ₁²/σ₂² for HDA.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cr: f64,
    pub l_pcp: f64,
    pub l_loc: Option<f64>,
    pub l_global: Option<f64>,
    pub l_wr: Option<f64>,
    pub w1: f64,
    pub w2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub total: f64,
}

/// Labeled source batch: network outputs with true coordinates `[B, 3]` and labels.
pub struct SourceBatch<'a> {
    pub out: ModelOutputs,
    pub coords: Var,
    pub labels: &'a [usize],
}

fn shape_mismatch(msg: String) -> Error {
    Error::ShapeMismatch(msg)
}

/// `(1/B)·Σ‖ζ − y‖²`.
pub fn loss_cr(g: &mut Graph, zeta: Var, y: Var) -> Result<Var> {
    let (sz, sy) = (g.shape(zeta).to_vec(), g.shape(y).to_vec());
    if sz != sy || sz.len() != 2 || sz[1] != 3 || sz[0] == 0 {
        return Err(shape_mismatch(format!("loss_cr: {sz:?} vs {sy:?}")));
    }
    let d = g.sub(zeta, y)?;
    let sq = g.square(d)?;
    let per = g.sum_axis(sq, 1)?;
    Ok(g.mean(per)?)
}

/// `max(log_softmax(u), ln ε)`.
pub fn clamped_log_probs(g: &mut Graph, logits: Var) -> Result<Var> {
    let lp = g.log_softmax(logits)?;
    Ok(g.clamp_min(lp, PROB_EPS.ln())?)
}

fn one_hot(g: &mut Graph, labels: &[usize], b: usize, kc: usize) -> Result<Var> {
    if labels.len() != b {
        return Err(shape_mismatch(format!("{} labels for batch of {b}", labels.len())));
    }
    let mut data = vec![0.0; b * kc];
    for (i, &d) in labels.iter().enumerate() {
        if d >= kc {
            return Err(shape_mismatch(format!("label {d} outside {kc} classes")));
        }
        data[i * kc + d] = 1.0;
    }
    Ok(g.constant(Tensor::new(vec![b, kc], data)?))
}

/// Picks `x[l, d_l]` → `[B]`.
fn gather(g: &mut Graph, x: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let oh = one_hot(g, labels, s[0], s[1])?;
    let m = g.mul(x, oh)?;
    Ok(g.sum_axis(m, 1)?)
}

/// `clamp(1 − ξ, ε, 1)^γ`.
fn focal_modulation(g: &mut Graph, probs: Var, gamma: f64) -> Result<Var> {
    let one_minus = g.neg(probs)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let base = g.clamp(one_minus, PROB_EPS, 1.0)?;
    Ok(g.pow(base, gamma)?)
}

/// `(1/B)·Σ −(1 − ξ_{l,d_l})^γ·log ξ_{l,d_l}` from logits.
pub fn loss_pcp(g: &mut Graph, logits: Var, labels: &[usize], gamma: f64) -> Result<Var> {
    if g.shape(logits).len() != 2 {
        return Err(shape_mismatch(format!("loss_pcp logits {:?}", g.shape(logits))));
    }
    let logp = clamped_log_probs(g, logits)?;
    let logp_c = gather(g, logp, labels)?;
    let nll = g.neg(logp_c)?;
    if gamma == 0.0 {
        return Ok(g.mean(nll)?);
    }
    let p_c = g.exp(logp_c)?;
    let m = focal_modulation(g, p_c, gamma)?;
    let t = g.mul(m, nll)?;
    Ok(g.mean(t)?)
}

/// Divides a nonnegative vector by its sum.
fn sum_normalize(g: &mut Graph, v: Var, what: &'static str) -> Result<Var> {
    let vals = g.value(v).data();
    if vals.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::DegenerateDistribution(what));
    }
    if vals.iter().sum::<f64>() <= 0.0 {
        return Err(Error::DegenerateDistribution(what));
    }
    let s = g.sum(v)?;
    Ok(g.div(v, s)?)
}

/// `(p + ε)/(1 + nε)`: keeps a distribution strictly positive.
fn smooth(g: &mut Graph, p: Var) -> Result<Var> {
    let n = g.value(p).len() as f64;
    let q = g.add_scalar(p, SKL_EPS)?;
    Ok(g.scale(q, 1.0 / (1.0 + n * SKL_EPS))?)
}

/// `D_KL(p‖q) + D_KL(q‖p) = Σ (p − q)(ln p − ln q)` on ε-smoothed inputs.
pub fn skl(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    if g.shape(p) != g.shape(q) || g.shape(p).len() != 1 {
        return Err(shape_mismatch(format!("skl: {:?} vs {:?}", g.shape(p), g.shape(q))));
    }
    let ps = smooth(g, p)?;
    let qs = smooth(g, q)?;
    let d = g.sub(ps, qs)?;
    let lp = g.log(ps)?;
    let lq = g.log(qs)?;
    let dl = g.sub(lp, lq)?;
    let t = g.mul(d, dl)?;
    Ok(g.sum(t)?)
}

/// SKL between batch-mean, sum-normalized feature vectors of two domains.
pub fn local_align(g: &mut Graph, omega_s: Var, omega_t: Var) -> Result<Var> {
    let (ss, st) = (g.shape(omega_s).to_vec(), g.shape(omega_t).to_vec());
    if ss.len() != 2 || st.len() != 2 || ss[1] != st[1] {
        return Err(shape_mismatch(format!("local_align: {ss:?} vs {st:?}")));
    }
    let ps = g.mean_axis(omega_s, 0)?;
    let pt = g.mean_axis(omega_t, 0)?;
    let ps = sum_normalize(g, ps, "source features pool to zero")?;
    let pt = sum_normalize(g, pt, "target features pool to zero")?;
    skl(g, ps, pt)
}

/// `(−(1 − ξ)^γ ⊙ log ξ) ⊗ ζ` per sample, `[B, 3·Kc]` with index `k·3 + j`.
pub fn multilinear_map(g: &mut Graph, logits: Var, zeta: Var, gamma: f64) -> Result<Var> {
    let (su, sz) = (g.shape(logits).to_vec(), g.shape(zeta).to_vec());
    if su.len() != 2 || sz.len() != 2 || su[0] != sz[0] {
        return Err(shape_mismatch(format!("multilinear_map: {su:?} vs {sz:?}")));
    }
    let logp = clamped_log_probs(g, logits)?;
    let neg = g.neg(logp)?;
    let weighted = if gamma == 0.0 {
        neg
    } else {
        let p = g.exp(logp)?;
        let m = focal_modulation(g, p, gamma)?;
        g.mul(m, neg)?
    };
    Ok(g.kron(weighted, zeta)?)
}

/// SKL between the abs-valued, normalized batch means of the multilinear maps.
pub fn global_align(g: &mut Graph, s: &ModelOutputs, t: &ModelOutputs, gamma: f64) -> Result<Var> {
    let ms = multilinear_map(g, s.logits, s.coords, gamma)?;
    let mt = multilinear_map(g, t.logits, t.coords, gamma)?;
    let mut dists = [ms, mt];
    for d in &mut dists {
        let mean = g.mean_axis(*d, 0)?;
        let a = g.abs(mean)?;
        *d = sum_normalize(g, a, "multilinear map pools to zero")?;
    }
    skl(g, dists[0], dists[1])
}

/// Local plus global alignment; returns `(L_KT, L_loc, L_global)`.
pub fn loss_kt(g: &mut Graph, s: &ModelOutputs, t: &ModelOutputs, gamma: f64) -> Result<(Var, Var, Var)> {
    let loc = local_align(g, s.features, t.features)?;
    let glob = global_align(g, s, t, gamma)?;
    Ok((g.add(loc, glob)?, loc, glob))
}

/// `½·Σ w²` over the parameters selected by `scope`.
pub fn loss_wr(g: &mut Graph, bound: &Bound, store: &ParamStore, scope: WrScope) -> Result<Var> {
    let mut total = g.scalar(0.0);
    for (name, p) in store.iter() {
        let include = match scope {
            WrScope::Weights => p.kind == ParamKind::Weight,
            WrScope::AllNetwork => p.kind != ParamKind::Uncertainty,
        };
        if include {
            let v = bound.var(name)?;
            let sq = g.square(v)?;
            let s = g.sum(sq)?;
            total = g.add(total, s)?;
        }
    }
    Ok(g.scale(total, 0.5)?)
}

fn accumulate(g: &mut Graph, total: Option<Var>, term: Var, weight: f64) -> Result<Option<Var>> {
    if weight == 0.0 {
        return Ok(total);
    }
    let t = g.scale(term, weight)?;
    Ok(Some(match total {
        Some(acc) => g.add(acc, t)?,
        None => t,
    }))
}

/// Source and target outputs entering L_KT. The coordinate predictions may
/// live in a different frame than the ones supervised by L_CR.
#[derive(Clone, Copy, Debug)]
pub struct KtPair {
    pub source: ModelOutputs,
    pub target: ModelOutputs,
}

/// `λ₁L_CR + λ₂L_PCP + λ₃L_KT + λ₄L_WR`. Without a KT pair L_KT is
/// omitted; without `wr` L_WR is omitted. Zero-weight terms are reported but
/// not added.
pub fn mda_total(
    g: &mut Graph,
    src: &SourceBatch,
    kt: Option<&KtPair>,
    w: &LossWeights,
    wr: Option<Var>,
) -> Result<(Var, LossReport)> {
    w.validate()?;
    let cr = loss_cr(g, src.out.coords, src.coords)?;
    let pcp = loss_pcp(g, src.out.logits, src.labels, w.gamma)?;
    let mut total = accumulate(g, None, cr, w.lambda1)?;
    total = accumulate(g, total, pcp, w.lambda2)?;
    let mut report = LossReport {
        l_cr: g.value(cr).item(),
        l_pcp: g.value(pcp).item(),
        w1: w.lambda1,
        w2: w.lambda2,
        lambda3: w.lambda3,
        lambda4: w.lambda4,
        ..LossReport::default()
    };
    if let Some(pair) = kt {
        let (kt, loc, glob) = loss_kt(g, &pair.source, &pair.target, w.gamma)?;
        report.l_loc = Some(g.value(loc).item());
        report.l_global = Some(g.value(glob).item());
        total = accumulate(g, total, kt, w.lambda3)?;
    }
    if let Some(wr) = wr {
        report.l_wr = Some(g.value(wr).item());
        total = accumulate(g, total, wr, w.lambda4)?;
    }
    let total = total.unwrap_or_else(|| g.scalar(0.0));
    report.total = g.value(total).item();
    Ok((total, report))
}

/// How the PCP likelihood uses the temperature σ₂².
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HdaVariant {
    /// Scaled-loss form: `(1/σ₂²)·L₂ + log σ₂²`, focal base `1 − (1/σ₂²)·ξ^{1/σ₂²}`.
    #[default]
    Compact,
    /// Focal loss on the tempered softmax `softmax(u/σ₂²)` without the log σ₂² term.
    ExactTempered,
}

/// Joint negative log-likelihood with learnable `s = log σ²` (scalars of shape `[1]`).
///
/// Compact form, batch-averaged:
/// `e^{−s₁}/2·L₁ + e^{−s₂}·mean(clamp(1 − e^{−s₂}·ξ_c^{e^{−s₂}}, ε, 1)^γ·(−log ξ_c)) + s₁/2 + s₂`.
/// At γ = 0 the modulating factor is 1 and the PCP term is `e^{−s₂}·CE`.
pub fn hda_nll(g: &mut Graph, src: &SourceBatch, s1: Var, s2: Var, gamma: f64, variant: HdaVariant) -> Result<Var> {
    let cr = loss_cr(g, src.out.coords, src.coords)?;
    let ns1 = g.neg(s1)?;
    let inv1 = g.exp(ns1)?;
    let half_inv1 = g.scale(inv1, 0.5)?;
    let reg_term = g.mul(half_inv1, cr)?;
    let half_s1 = g.scale(s1, 0.5)?;
    let mut nll = g.add(reg_term, half_s1)?;
    let ns2 = g.neg(s2)?;
    let inv2 = g.exp(ns2)?;
    let cls_term = match variant {
        HdaVariant::Compact => {
            let logp = clamped_log_probs(g, src.out.logits)?;
            let logp_c = gather(g, logp, src.labels)?;
            let ce = g.neg(logp_c)?;
            let per = if gamma == 0.0 {
                ce
            } else {
                // ξ_c^{1/σ²} = exp(log ξ_c / σ²)
                let scaled = g.mul(logp_c, inv2)?;
                let tempered = g.exp(scaled)?;
                let damped = g.mul(tempered, inv2)?;
                let base = g.neg(damped)?;
                let base = g.add_scalar(base, 1.0)?;
                let base = g.clamp(base, PROB_EPS, 1.0)?;
                let m = g.pow(base, gamma)?;
                g.mul(m, ce)?
            };
            let mean = g.mean(per)?;
            let weighted = g.mul(inv2, mean)?;
            g.add(weighted, s2)?
        }
        HdaVariant::ExactTempered => {
            let tempered = g.mul(src.out.logits, inv2)?;
            loss_pcp(g, tempered, src.labels, gamma)?
        }
    };
    nll = g.add(nll, cls_term)?;
    Ok(g.sum(nll)?)
}

/// `hda_nll + λ₃·L_KT + λ₄·L_WR`; the report carries σ₁², σ₂² in `w1`, `w2`.
#[allow(clippy::too_many_arguments)]
pub fn hda_total(
    g: &mut Graph,
    src: &SourceBatch,
    kt: Option<&KtPair>,
    s1: Var,
    s2: Var,
    w: &LossWeights,
    wr: Option<Var>,
    variant: HdaVariant,
) -> Result<(Var, LossReport)> {
    w.validate()?;
    let nll = hda_nll(g, src, s1, s2, w.gamma, variant)?;
    let cr = loss_cr(g, src.out.coords, src.coords)?;
    let pcp = loss_pcp(g, src.out.logits, src.labels, w.gamma)?;
    let mut report = LossReport {
        l_cr: g.value(cr).item(),
        l_pcp: g.value(pcp).item(),
        w1: g.value(s1).item().exp(),
        w2: g.value(s2).item().exp(),
        lambda3: w.lambda3,
        lambda4: w.lambda4,
        ..LossReport::default()
    };
    let mut total = Some(nll);
    if let Some(pair) = kt {
        let (kt, loc, glob) = loss_kt(g, &pair.source, &pair.target, w.gamma)?;
        report.l_loc = Some(g.value(loc).item());
        report.l_global = Some(g.value(glob).item());
        total = accumulate(g, total, kt, w.lambda3)?;
    }
    if let Some(wr) = wr {
        report.l_wr = Some(g.value(wr).item());
        total = accumulate(g, total, wr, w.lambda4)?;
    }
    let total = total.unwrap();
    report.total = g.value(total).item();
    Ok((total, report))
}
