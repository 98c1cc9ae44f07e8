//! Loop-level reference implementations and a finite-difference gradient
//! checker.
//!
//! Everything here works on `Vec<Vec<f64>>` with explicit scalar loops and
//! deliberately avoids the batched primitives of [`crate::tensor`]; model
//! parameters are only read through plain data accessors.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::HierarchyConfig;
use crate::config::InputDims;
use crate::datamodel::{FeatureBundle, QASample, RawFeatureBundle};
use crate::error::Result;
use crate::extended::Extended;
use crate::model::{forward, loss_and_grad, sample_loss, ModelParams};
use crate::hierarchy::HqgaParams;
use crate::nn::Linear;
use crate::params::{ParamVisit, TensorSlot};
use crate::qga::QgaParams;
use crate::tensor::{Matrix, Real};

type Rows = Vec<Vec<f64>>;

fn rows_of(m: &Matrix<f64>) -> Rows {
    let (r, c) = m.shape();
    (0..r).map(|i| (0..c).map(|j| m.get(i, j)).collect()).collect()
}

fn exp(x: f64) -> f64 {
    libm::exp(x)
}

fn naive_softmax(v: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &x in v {
        if x > max {
            max = x;
        }
    }
    let mut out = vec![0.0; v.len()];
    let mut total = 0.0;
    for i in 0..v.len() {
        out[i] = exp(v[i] - max);
        total += out[i];
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    out
}

fn naive_elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        exp(x) - 1.0
    }
}

/// `x · W` with `W` stored `in × out`.
fn naive_vec_mat(x: &[f64], w: &Rows) -> Vec<f64> {
    let cols = if w.is_empty() { 0 } else { w[0].len() };
    let mut out = vec![0.0; cols];
    for j in 0..cols {
        let mut s = 0.0;
        for i in 0..x.len() {
            s += x[i] * w[i][j];
        }
        out[j] = s;
    }
    out
}

/// QGA weights as nested vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct NaiveQga {
    pub w_av: Rows,
    pub w_ak: Rows,
    pub w_graph: Vec<Rows>,
    pub w_p: Vec<f64>,
}

impl From<&QgaParams<f64>> for NaiveQga {
    fn from(p: &QgaParams<f64>) -> Self {
        Self {
            w_av: rows_of(&p.w_av),
            w_ak: rows_of(&p.w_ak),
            w_graph: p.w_graph.iter().map(rows_of).collect(),
            w_p: (0..p.w_p.rows()).map(|i| p.w_p.get(i, 0)).collect(),
        }
    }
}

/// A linear map with bias as nested vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct NaiveLinear {
    pub weight: Rows,
    pub bias: Vec<f64>,
}

impl From<&Linear<f64>> for NaiveLinear {
    fn from(l: &Linear<f64>) -> Self {
        Self { weight: rows_of(&l.weight), bias: (0..l.bias.cols()).map(|j| l.bias.get(0, j)).collect() }
    }
}

impl NaiveLinear {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = naive_vec_mat(x, &self.weight);
        for j in 0..out.len() {
            out[j] += self.bias[j];
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub enum NaiveCond<'a> {
    Off,
    Tokens(&'a [Vec<f64>]),
    Global { query: &'a [f64], fuse: &'a NaiveLinear },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NaiveQgaOutput {
    pub x_out: Rows,
    pub pooled: Vec<f64>,
    pub alpha: Option<Rows>,
    pub adjacency: Option<Rows>,
    pub beta: Option<Vec<f64>>,
}

/// Direct transcription of a QGA unit.
pub fn naive_qga(x_in: &[Vec<f64>], cond: NaiveCond<'_>, p: &NaiveQga, sumpool: bool) -> NaiveQgaOutput {
    let n = x_in.len();
    let d = x_in[0].len();
    if sumpool {
        let mut pooled = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                pooled[j] += x_in[i][j];
            }
        }
        return NaiveQgaOutput { x_out: x_in.to_vec(), pooled, alpha: None, adjacency: None, beta: None };
    }

    // Conditioning.
    let mut x_hat = vec![vec![0.0; d]; n];
    let mut alpha = None;
    match cond {
        NaiveCond::Off => x_hat = x_in.to_vec(),
        NaiveCond::Tokens(q) => {
            let mut a = vec![vec![0.0; q.len()]; n];
            for i in 0..n {
                let mut logits = vec![0.0; q.len()];
                for m in 0..q.len() {
                    for j in 0..d {
                        logits[m] += x_in[i][j] * q[m][j];
                    }
                }
                a[i] = naive_softmax(&logits);
                for j in 0..d {
                    let mut s = x_in[i][j];
                    for m in 0..q.len() {
                        s += a[i][m] * q[m][j];
                    }
                    x_hat[i][j] = s;
                }
            }
            alpha = Some(a);
        }
        NaiveCond::Global { query, fuse } => {
            for i in 0..n {
                let mut cat = x_in[i].clone();
                cat.extend_from_slice(query);
                let z = fuse.apply(&cat);
                for j in 0..d {
                    x_hat[i][j] = naive_elu(z[j]);
                }
            }
        }
    }

    // Adjacency.
    let mut adj = vec![vec![0.0; n]; n];
    for i in 0..n {
        let v = naive_vec_mat(&x_hat[i], &p.w_av);
        let mut logits = vec![0.0; n];
        for k in 0..n {
            let kk = naive_vec_mat(&x_hat[k], &p.w_ak);
            for j in 0..v.len() {
                logits[k] += v[j] * kk[j];
            }
        }
        adj[i] = naive_softmax(&logits);
    }

    // Graph layers with (A + I).
    let mut z = x_hat.clone();
    for w in &p.w_graph {
        let mut next = vec![vec![0.0; d]; n];
        for i in 0..n {
            let mut mixed = vec![0.0; d];
            for k in 0..n {
                let coef = adj[i][k] + if i == k { 1.0 } else { 0.0 };
                for j in 0..d {
                    mixed[j] += coef * z[k][j];
                }
            }
            let u = naive_vec_mat(&mixed, w);
            for j in 0..d {
                next[i][j] = if u[j] > 0.0 { u[j] } else { 0.0 };
            }
        }
        z = next;
    }
    let mut x_out = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..d {
            x_out[i][j] = x_hat[i][j] + z[i][j];
        }
    }

    // Attention pooling.
    let mut logits = vec![0.0; n];
    for i in 0..n {
        for j in 0..d {
            logits[i] += x_out[i][j] * p.w_p[j];
        }
    }
    let beta = naive_softmax(&logits);
    let mut pooled = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            pooled[j] += beta[i] * x_out[i][j];
        }
    }
    NaiveQgaOutput { x_out, pooled, alpha, adjacency: Some(adj), beta: Some(beta) }
}

fn naive_merge(context: &[f64], level: &[f64], lin: &NaiveLinear) -> Vec<f64> {
    let mut cat = context.to_vec();
    cat.extend_from_slice(level);
    lin.apply(&cat).into_iter().map(naive_elu).collect()
}

/// End-to-end transcription of the hierarchy, honouring every switch.
pub fn naive_hqga(bundle: &FeatureBundle<f64>, params: &HqgaParams<f64>, config: &HierarchyConfig) -> Vec<f64> {
    let k_clips = config.clips;
    let per_clip = config.frames_per_clip();
    let frames = k_clips * per_clip;
    let motion = rows_of(&bundle.motion);
    let appearance = rows_of(&bundle.appearance);
    let query = rows_of(&bundle.query);
    let fq = bundle.global_query.clone();
    let units = [NaiveQga::from(&params.object), NaiveQga::from(&params.frame), NaiveQga::from(&params.clip)];
    let fuses: Vec<NaiveLinear> = params.global_cond.iter().map(NaiveLinear::from).collect();
    let merge_a = NaiveLinear::from(&params.merge_appearance);
    let merge_m = NaiveLinear::from(&params.merge_motion);
    let flags = [config.cond_o, config.cond_f, config.cond_c];
    let cond = |level: usize| -> NaiveCond<'_> {
        if !flags[level] {
            NaiveCond::Off
        } else if config.global_fq_condition {
            NaiveCond::Global { query: &fq, fuse: &fuses[level] }
        } else {
            NaiveCond::Tokens(&query)
        }
    };

    let mut frame_nodes: Rows = Vec::new();
    if config.use_go {
        for t in 0..frames {
            let objs = rows_of(&bundle.objects[t]);
            let f_go = naive_qga(&objs, cond(0), &units[0], config.sumpool_o).pooled;
            frame_nodes.push(if config.use_fa { naive_merge(&appearance[t], &f_go, &merge_a) } else { f_go });
        }
    } else {
        frame_nodes = appearance.clone();
    }

    let mut clip_nodes: Rows = Vec::new();
    if config.use_gf {
        for k in 0..k_clips {
            let group: Rows = frame_nodes[k * per_clip..(k + 1) * per_clip].to_vec();
            let f_gf = naive_qga(&group, cond(1), &units[1], config.sumpool_f).pooled;
            clip_nodes.push(if config.use_fm { naive_merge(&motion[k], &f_gf, &merge_m) } else { f_gf });
        }
    } else if config.use_go {
        for k in 0..k_clips {
            let mid = frame_nodes[k * per_clip + per_clip / 2].clone();
            clip_nodes.push(if config.use_fm { naive_merge(&motion[k], &mid, &merge_m) } else { mid });
        }
    } else {
        clip_nodes = motion.clone();
    }

    naive_qga(&clip_nodes, cond(2), &units[2], config.sumpool_c).pooled
}

/// Value of a scalar loss plus a fingerprint of its piecewise-linear
/// regime; two probes with different fingerprints straddle a kink.
/// `T` is the precision the loss was evaluated in; the two probes are
/// differenced in it before rounding to `f64`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossProbe<T = f64> {
    pub value: T,
    pub kink_signature: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub max_rel_err: f64,
    pub skipped_kinks: usize,
    #[serde(default)]
    pub checked: usize,
    #[serde(default)]
    pub non_finite: usize,
}

/// Per-group finite-difference results keyed by tensor name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GradReport {
    pub groups: BTreeMap<String, GroupReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.values().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
    pub fn skipped_kinks(&self) -> usize {
        self.groups.values().map(|g| g.skipped_kinks).sum()
    }
    pub fn non_finite(&self) -> usize {
        self.groups.values().map(|g| g.non_finite).sum()
    }
    pub fn total_params(&self) -> usize {
        self.groups.values().map(|g| g.checked + g.skipped_kinks + g.non_finite).sum()
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Central differences for every scalar of `params`, compared against
/// `analytic`. `slots` names the groups. Perturbations whose two probes
/// disagree on the kink signature are skipped and counted; non-finite
/// probes are counted, not fatal.
pub fn fd_gradient_check<T, F>(
    mut loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    slots: &[TensorSlot],
    step: f64,
) -> GradReport
where
    T: Real,
    F: FnMut(&[f64]) -> LossProbe<T>,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let mut report = GradReport::default();
    let mut theta = params.to_vec();
    for slot in slots {
        let group = report.groups.entry(slot.name.clone()).or_default();
        for i in slot.range() {
            let orig = theta[i];
            let (up, down) = (orig + step, orig - step);
            theta[i] = up;
            let plus = loss_fn(&theta);
            theta[i] = down;
            let minus = loss_fn(&theta);
            theta[i] = orig;
            if !plus.value.is_finite() || !minus.value.is_finite() {
                group.non_finite += 1;
                continue;
            }
            if plus.kink_signature != minus.kink_signature {
                group.skipped_kinks += 1;
                continue;
            }
            // The realised step `up - down` is exact and may differ from
            // `2 step` by an ulp of `orig`.
            let numeric = (plus.value - minus.value).as_f64() / (up - down);
            group.max_rel_err = group.max_rel_err.max(relative_error(analytic[i], numeric));
            group.checked += 1;
        }
    }
    report
}

/// Gradient check of the full model on one sample: analytic gradients
/// in `f64`, finite-difference probes in [`Extended`] precision.
pub fn model_gradient_check(
    params: &ModelParams<f64>,
    config: &HierarchyConfig,
    dims: &InputDims,
    raw: &RawFeatureBundle,
    sample: &QASample,
    step: f64,
) -> Result<GradReport> {
    let mut grads = ModelParams::zeros(config, dims);
    loss_and_grad(params, config, raw, sample, &mut grads)?;
    let mut probe: ModelParams<Extended> = params.cast(config, dims);
    let mut buf = Vec::new();
    Ok(fd_gradient_check(
        |theta| {
            buf.clear();
            buf.extend(theta.iter().map(|&v| Extended::lit(v)));
            probe.unflatten(&buf);
            match forward(&probe, config, raw, sample) {
                Ok(fwd) => LossProbe {
                    value: sample_loss(&fwd, sample, config).unwrap_or(Extended::lit(f64::NAN)),
                    kink_signature: fwd.kink_signature(),
                },
                Err(_) => LossProbe { value: Extended::lit(f64::NAN), kink_signature: 0 },
            }
        },
        &params.flatten(),
        &grads.flatten(),
        &params.layout(),
        step,
    ))
}
