//! Raw and projected feature bundles, QA samples, and the projections that
//! run before the hierarchy: temporal convolutions for motion and
//! appearance, the object encoder, and the bidirectional question encoder.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{HierarchyConfig, InputDims};
use crate::error::{data_err, Result};
use crate::nn::{elu, elu_grad, Gru, GruTape, Linear, TemporalConv};
use crate::params::{join, ParamVisit};
use crate::tensor::{Matrix, Real};

/// Width of the geometric box embedding.
pub const GEOMETRY_DIM: usize = 6;
/// Width of the temporal position embedding.
pub const TEMPORAL_DIM: usize = 2;

/// Pre-extracted activations for one video, stored as 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFeatureBundle {
    /// `K × d_m` clip motion features.
    pub motion: Matrix<f32>,
    /// `T × d_a` frame appearance features.
    pub appearance: Matrix<f32>,
    /// `T` matrices of `N × d_r` region appearance features.
    pub region_feats: Vec<Matrix<f32>>,
    /// `T × N` boxes `(x1, y1, x2, y2)` in pixels.
    pub region_boxes: Vec<Vec<[f32; 4]>>,
    /// Frame `(width, height)` in pixels.
    pub frame_size: (f32, f32),
    /// Normalised sparse-frame positions, strictly increasing in `[0, 1]`.
    pub frame_times: Vec<f32>,
}

impl RawFeatureBundle {
    pub fn clips(&self) -> usize {
        self.motion.rows()
    }
    pub fn frames(&self) -> usize {
        self.appearance.rows()
    }
    pub fn regions(&self) -> usize {
        self.region_feats.first().map_or(0, Matrix::rows)
    }

    /// Checks the internal invariants: consistent shapes, finite values,
    /// well-formed boxes inside the frame and increasing frame times.
    pub fn validate(&self) -> Result<()> {
        let t_len = self.frames();
        if self.clips() == 0 || t_len == 0 {
            return Err(data_err!("bundle has no clips or frames"));
        }
        if self.region_feats.len() != t_len || self.region_boxes.len() != t_len {
            return Err(data_err!(
                "region arrays cover {} / {} frames, appearance covers {t_len}",
                self.region_feats.len(),
                self.region_boxes.len()
            ));
        }
        if self.frame_times.len() != t_len {
            return Err(data_err!("frame_times has {} entries, expected {t_len}", self.frame_times.len()));
        }
        let n = self.regions();
        if n == 0 {
            return Err(data_err!("frames carry no regions"));
        }
        let d_r = self.region_feats[0].cols();
        for (t, (feats, boxes)) in self.region_feats.iter().zip(&self.region_boxes).enumerate() {
            if feats.shape() != (n, d_r) || boxes.len() != n {
                return Err(data_err!("frame {t} region shape differs from frame 0"));
            }
        }
        if !self.motion.is_finite()
            || !self.appearance.is_finite()
            || !self.region_feats.iter().all(Matrix::is_finite)
        {
            return Err(data_err!("non-finite feature value"));
        }
        let (w, h) = self.frame_size;
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(data_err!("invalid frame size {w}x{h}"));
        }
        for (t, boxes) in self.region_boxes.iter().enumerate() {
            for (i, &[x1, y1, x2, y2]) in boxes.iter().enumerate() {
                let ok = 0.0 <= x1 && x1 < x2 && x2 <= w && 0.0 <= y1 && y1 < y2 && y2 <= h;
                if !ok {
                    return Err(data_err!(
                        "box {i} of frame {t} is malformed: ({x1},{y1},{x2},{y2}) in {w}x{h}"
                    ));
                }
            }
        }
        let mut prev = f32::NEG_INFINITY;
        for &ft in &self.frame_times {
            if !(0.0..=1.0).contains(&ft) || ft <= prev {
                return Err(data_err!("frame_times must be strictly increasing in [0,1]"));
            }
            prev = ft;
        }
        Ok(())
    }

    /// Validates and checks the shapes against a model configuration.
    pub fn validate_for(&self, config: &HierarchyConfig, dims: &InputDims) -> Result<()> {
        self.validate()?;
        if self.clips() != config.clips || self.frames() != config.frames() {
            return Err(data_err!(
                "bundle has K={} T={}, config expects K={} T={}",
                self.clips(),
                self.frames(),
                config.clips,
                config.frames()
            ));
        }
        if self.regions() != config.regions {
            return Err(data_err!("bundle has N={}, config expects {}", self.regions(), config.regions));
        }
        if self.motion.cols() != dims.motion
            || self.appearance.cols() != dims.appearance
            || self.region_feats[0].cols() != dims.region
        {
            return Err(data_err!("raw feature widths do not match the model input dims"));
        }
        Ok(())
    }

    /// The descriptor of region `n` in sparse frame `t`.
    pub fn object_descriptor(&self, t: usize, n: usize, frames_per_clip: usize) -> ObjectDescriptor {
        let (w, h) = self.frame_size;
        let [x1, y1, x2, y2] = self.region_boxes[t][n];
        let t_len = self.frames() as f32;
        let k_len = self.clips() as f32;
        ObjectDescriptor {
            region: self.region_feats[t].row(n).to_vec(),
            geometry: [x1 / w, y1 / h, x2 / w, y2 / h, (x2 - x1) / w, (y2 - y1) / h],
            temporal: [t as f32 / t_len, (t / frames_per_clip.max(1)) as f32 / k_len],
        }
    }
}

/// Semantic, geometric and temporal description of one detected region.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectDescriptor {
    pub region: Vec<f32>,
    /// `(x1/W, y1/H, x2/W, y2/H, w/W, h/H)`.
    pub geometry: [f32; GEOMETRY_DIM],
    /// `(frame_index/T, clip_index/K)`.
    pub temporal: [f32; TEMPORAL_DIM],
}

impl ObjectDescriptor {
    pub fn concat<T: Real>(&self) -> Vec<T> {
        self.region
            .iter()
            .chain(&self.geometry)
            .chain(&self.temporal)
            .map(|&v| T::lit(v as f64))
            .collect()
    }
}

/// Inputs to the hierarchy, all projected to width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle<T> {
    /// `F_m`, `K × d`.
    pub motion: Matrix<T>,
    /// `F_a`, `T × d`.
    pub appearance: Matrix<T>,
    /// `F_o`, `T` matrices of `N × d`.
    pub objects: Vec<Matrix<T>>,
    /// `Q`, one row per query token.
    pub query: Matrix<T>,
    /// `f_Q`, the last row of `Q`.
    pub global_query: Vec<T>,
}

impl<T: Real> FeatureBundle<T> {
    pub fn validate_for(&self, config: &HierarchyConfig) -> Result<()> {
        let d = config.hidden;
        let ok = self.motion.shape() == (config.clips, d)
            && self.appearance.shape() == (config.frames(), d)
            && self.objects.len() == config.frames()
            && self.objects.iter().all(|o| o.shape() == (config.regions, d))
            && self.query.cols() == d
            && self.query.rows() >= 1
            && self.query.rows() <= config.max_tokens
            && self.global_query.len() == d;
        if !ok {
            return Err(data_err!("feature bundle shapes do not match the configuration"));
        }
        let finite = self.motion.is_finite()
            && self.appearance.is_finite()
            && self.objects.iter().all(Matrix::is_finite)
            && self.query.is_finite()
            && self.global_query.iter().all(|v| v.is_finite());
        if !finite {
            return Err(data_err!("non-finite entry in feature bundle"));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            motion: Matrix::zeros(self.motion.rows(), self.motion.cols()),
            appearance: Matrix::zeros(self.appearance.rows(), self.appearance.cols()),
            objects: self.objects.iter().map(|o| Matrix::zeros(o.rows(), o.cols())).collect(),
            query: Matrix::zeros(self.query.rows(), self.query.cols()),
            global_query: vec![T::zero(); self.global_query.len()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GranularityTag {
    Object,
    Relation,
    Action,
    Event,
}

impl GranularityTag {
    pub const ALL: [GranularityTag; 4] = [Self::Object, Self::Relation, Self::Action, Self::Event];

    pub fn name(self) -> &'static str {
        match self {
            Self::Object => "object",
            Self::Relation => "relation",
            Self::Action => "action",
            Self::Event => "event",
        }
    }
}

/// One question instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QASample {
    pub sample_id: String,
    pub question_tokens: Vec<u32>,
    /// Candidate answers as token sequences (multi-choice); empty for
    /// open-ended questions.
    #[serde(default)]
    pub candidates: Vec<Vec<u32>>,
    /// Index into `candidates` (multi-choice) or into the answer set.
    pub answer_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity_tag: Option<GranularityTag>,
    pub video_ref: String,
}

impl QASample {
    pub fn validate(&self, config: &HierarchyConfig, vocab: usize) -> Result<()> {
        if self.question_tokens.is_empty() {
            return Err(data_err!("sample {} has an empty question", self.sample_id));
        }
        let all_tokens = self.question_tokens.iter().chain(self.candidates.iter().flatten());
        if let Some(bad) = all_tokens.into_iter().find(|&&t| t as usize >= vocab) {
            return Err(data_err!("sample {} uses token {bad} outside the vocabulary", self.sample_id));
        }
        match config.decoder {
            crate::config::DecoderMode::MultiChoice { num_choices } => {
                if self.candidates.len() != num_choices {
                    return Err(data_err!(
                        "sample {} has {} candidates, config expects {num_choices}",
                        self.sample_id,
                        self.candidates.len()
                    ));
                }
                if self.answer_index >= self.candidates.len() {
                    return Err(data_err!("sample {} answer index out of range", self.sample_id));
                }
            }
            crate::config::DecoderMode::OpenEnded { answer_set_size } => {
                if self.answer_index >= answer_set_size {
                    return Err(data_err!("sample {} answer index out of range", self.sample_id));
                }
            }
        }
        Ok(())
    }
}

/// Concatenates a candidate answer after the question. When the result
/// would exceed `max_len`, the question tail is dropped; the candidate is
/// only clipped if it alone is longer than `max_len`.
pub fn build_mc_query(question: &[u32], candidate: &[u32], max_len: usize) -> Vec<u32> {
    if candidate.len() >= max_len {
        return candidate[..max_len].to_vec();
    }
    let keep = question.len().min(max_len - candidate.len());
    let mut out = Vec::with_capacity(keep + candidate.len());
    out.extend_from_slice(&question[..keep]);
    out.extend_from_slice(candidate);
    out
}

/// Learned projections applied to the raw video features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureProjection<T> {
    pub motion: TemporalConv<T>,
    pub appearance: TemporalConv<T>,
    /// `W_o` over `[f_r; f_s; f_t]`.
    pub object: Linear<T>,
}

impl<T: Real> FeatureProjection<T> {
    pub fn new<R: Rng + ?Sized>(dims: &InputDims, hidden: usize, rng: &mut R) -> Self {
        Self {
            motion: TemporalConv::new(dims.motion, hidden, rng),
            appearance: TemporalConv::new(dims.appearance, hidden, rng),
            object: Linear::new(dims.region + GEOMETRY_DIM + TEMPORAL_DIM, hidden, rng),
        }
    }

    pub fn zeros(dims: &InputDims, hidden: usize) -> Self {
        Self {
            motion: TemporalConv::zeros(dims.motion, hidden),
            appearance: TemporalConv::zeros(dims.appearance, hidden),
            object: Linear::zeros(dims.region + GEOMETRY_DIM + TEMPORAL_DIM, hidden),
        }
    }
}

impl<T: Real> ParamVisit<T> for FeatureProjection<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix<T>)) {
        self.motion.visit(&join(prefix, "motion_conv"), f);
        self.appearance.visit(&join(prefix, "appearance_conv"), f);
        self.object.visit(&join(prefix, "object_encoder"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        self.motion.visit_mut(&join(prefix, "motion_conv"), f);
        self.appearance.visit_mut(&join(prefix, "appearance_conv"), f);
        self.object.visit_mut(&join(prefix, "object_encoder"), f);
    }
}

/// Temporal projection of a `S × d_in` sequence.
pub fn project_temporal<T: Real>(raw: &Matrix<T>, conv: &TemporalConv<T>) -> Result<Matrix<T>> {
    if raw.cols() != conv.input_dim() {
        return Err(crate::error::config_err!(
            "temporal projection expects width {}, got {}",
            conv.input_dim(),
            raw.cols()
        ));
    }
    if raw.rows() == 0 {
        return Err(data_err!("temporal projection of an empty sequence"));
    }
    Ok(conv.forward(raw))
}

/// `ELU(W_o [f_r; f_s; f_t] + b)`.
pub fn encode_object<T: Real>(desc: &ObjectDescriptor, encoder: &Linear<T>) -> Result<Vec<T>> {
    let x: Vec<T> = desc.concat();
    if x.len() != encoder.input_dim() {
        return Err(crate::error::config_err!(
            "object encoder expects width {}, descriptor has {}",
            encoder.input_dim(),
            x.len()
        ));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(data_err!("non-finite object descriptor"));
    }
    Ok(encoder.forward_vec(&x).into_iter().map(elu).collect())
}

/// Projected video features plus what the backward pass needs.
#[derive(Clone, Debug)]
pub struct VideoTape<T> {
    motion_raw: Matrix<T>,
    appearance_raw: Matrix<T>,
    /// Per frame: object descriptors (`N × (d_r+8)`) and pre-activations.
    object_inputs: Vec<Matrix<T>>,
    object_preact: Vec<Matrix<T>>,
}

/// Projected video streams `F_m`, `F_a`, `F_o`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures<T> {
    pub motion: Matrix<T>,
    pub appearance: Matrix<T>,
    pub objects: Vec<Matrix<T>>,
}

pub fn project_video<T: Real>(
    raw: &RawFeatureBundle,
    proj: &FeatureProjection<T>,
    config: &HierarchyConfig,
) -> Result<(VideoFeatures<T>, VideoTape<T>)> {
    let motion_raw: Matrix<T> = raw.motion.cast();
    let appearance_raw: Matrix<T> = raw.appearance.cast();
    let motion = project_temporal(&motion_raw, &proj.motion)?;
    let appearance = project_temporal(&appearance_raw, &proj.appearance)?;
    let per_clip = config.frames_per_clip();
    let mut objects = Vec::with_capacity(raw.frames());
    let mut object_inputs = Vec::with_capacity(raw.frames());
    let mut object_preact = Vec::with_capacity(raw.frames());
    for t in 0..raw.frames() {
        let rows: Vec<Vec<T>> = (0..raw.regions())
            .map(|n| raw.object_descriptor(t, n, per_clip).concat())
            .collect();
        let x = Matrix::from_rows(&rows);
        if x.cols() != proj.object.input_dim() {
            return Err(crate::error::config_err!(
                "object encoder expects width {}, descriptors have {}",
                proj.object.input_dim(),
                x.cols()
            ));
        }
        let pre = proj.object.forward(&x);
        objects.push(pre.map(elu));
        object_inputs.push(x);
        object_preact.push(pre);
    }
    Ok((
        VideoFeatures { motion, appearance, objects },
        VideoTape { motion_raw, appearance_raw, object_inputs, object_preact },
    ))
}

/// Accumulates projection gradients given gradients on `F_m`, `F_a`, `F_o`.
pub fn project_video_backward<T: Real>(
    tape: &VideoTape<T>,
    grad: &VideoFeatures<T>,
    proj: &FeatureProjection<T>,
    grads: &mut FeatureProjection<T>,
) {
    proj.motion.backward(&tape.motion_raw, &grad.motion, &mut grads.motion);
    proj.appearance.backward(&tape.appearance_raw, &grad.appearance, &mut grads.appearance);
    for ((x, pre), g) in tape.object_inputs.iter().zip(&tape.object_preact).zip(&grad.objects) {
        let mut g_pre = g.clone();
        for (gv, &p) in g_pre.data_mut().iter_mut().zip(pre.data()) {
            *gv *= elu_grad(p);
        }
        proj.object.backward(x, &g_pre, &mut grads.object);
    }
}

/// Token embeddings followed by a bidirectional GRU with `d/2` units per
/// direction.
#[derive(Clone, Debug, PartialEq)]
pub struct QuestionEncoder<T> {
    pub embedding: Matrix<T>,
    pub forward: Gru<T>,
    pub backward: Gru<T>,
}

impl<T: Real> QuestionEncoder<T> {
    pub fn new<R: Rng + ?Sized>(dims: &InputDims, hidden: usize, rng: &mut R) -> Self {
        let data = (0..dims.vocab * dims.embed)
            .map(|_| T::lit(rng.random_range(-1.0..1.0)))
            .collect();
        Self {
            embedding: Matrix::from_vec(dims.vocab, dims.embed, data),
            forward: Gru::new(dims.embed, hidden / 2, rng),
            backward: Gru::new(dims.embed, hidden / 2, rng),
        }
    }

    pub fn zeros(dims: &InputDims, hidden: usize) -> Self {
        Self {
            embedding: Matrix::zeros(dims.vocab, dims.embed),
            forward: Gru::zeros(dims.embed, hidden / 2),
            backward: Gru::zeros(dims.embed, hidden / 2),
        }
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix<T>> {
        if tokens.is_empty() {
            return Err(data_err!("empty question"));
        }
        let d_e = self.embedding.cols();
        let mut out = Matrix::zeros(tokens.len(), d_e);
        for (i, &tok) in tokens.iter().enumerate() {
            let tok = tok as usize;
            if tok >= self.embedding.rows() {
                return Err(data_err!("token {tok} outside vocabulary of {}", self.embedding.rows()));
            }
            out.row_mut(i).copy_from_slice(self.embedding.row(tok));
        }
        Ok(out)
    }
}

impl<T: Real> ParamVisit<T> for QuestionEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix<T>)) {
        f(join(prefix, "embedding"), &self.embedding);
        self.forward.visit(&join(prefix, "gru_fwd"), f);
        self.backward.visit(&join(prefix, "gru_bwd"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        f(join(prefix, "embedding"), &mut self.embedding);
        self.forward.visit_mut(&join(prefix, "gru_fwd"), f);
        self.backward.visit_mut(&join(prefix, "gru_bwd"), f);
    }
}

#[derive(Clone, Debug)]
pub struct QuestionTape<T> {
    tokens: Vec<u32>,
    fwd: GruTape<T>,
    bwd: GruTape<T>,
}

fn reverse_rows<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let rows: Vec<Vec<T>> = (0..m.rows()).rev().map(|i| m.row(i).to_vec()).collect();
    Matrix::stack(&rows, m.cols())
}

/// Bidirectional encoding of `m × d_e` token embeddings.
///
/// Row `i` of `Q` is `[→h_i ; ←h_i]`, the forward state after tokens
/// `0..=i` and the backward state after tokens `m−1..=i`. `f_Q` is the
/// last row of `Q`.
pub fn encode_question<T: Real>(
    embeddings: &Matrix<T>,
    encoder: &QuestionEncoder<T>,
) -> Result<(Matrix<T>, Vec<T>, QuestionTape<T>)> {
    if embeddings.rows() == 0 {
        return Err(data_err!("empty question"));
    }
    let (fwd_states, fwd) = encoder.forward.forward(embeddings);
    let (bwd_rev, bwd) = encoder.backward.forward(&reverse_rows(embeddings));
    let bwd_states = reverse_rows(&bwd_rev);
    let half = fwd_states.cols();
    let m = embeddings.rows();
    let mut q = Matrix::zeros(m, 2 * half);
    for i in 0..m {
        let row = q.row_mut(i);
        row[..half].copy_from_slice(fwd_states.row(i));
        row[half..].copy_from_slice(bwd_states.row(i));
    }
    let f_q = q.row(m - 1).to_vec();
    Ok((q, f_q, QuestionTape { tokens: Vec::new(), fwd, bwd }))
}

/// Embeds and encodes a token sequence.
pub fn encode_tokens<T: Real>(
    tokens: &[u32],
    encoder: &QuestionEncoder<T>,
) -> Result<(Matrix<T>, Vec<T>, QuestionTape<T>)> {
    let emb = encoder.embed(tokens)?;
    let (q, f_q, mut tape) = encode_question(&emb, encoder)?;
    tape.tokens = tokens.to_vec();
    Ok((q, f_q, tape))
}

/// Backward through [`encode_tokens`]; `grad_q` already includes the
/// gradient reaching `f_Q` (added onto its last row).
pub fn encode_tokens_backward<T: Real>(
    tape: &QuestionTape<T>,
    grad_q: &Matrix<T>,
    encoder: &QuestionEncoder<T>,
    grads: &mut QuestionEncoder<T>,
) {
    let half = encoder.forward.hidden_dim();
    let m = grad_q.rows();
    let mut g_fwd = Matrix::zeros(m, half);
    let mut g_bwd_rev = Matrix::zeros(m, half);
    for i in 0..m {
        g_fwd.row_mut(i).copy_from_slice(&grad_q.row(i)[..half]);
        g_bwd_rev.row_mut(m - 1 - i).copy_from_slice(&grad_q.row(i)[half..]);
    }
    let g_emb_f = encoder.forward.backward(&tape.fwd, &g_fwd, &mut grads.forward);
    let g_emb_b_rev = encoder.backward.backward(&tape.bwd, &g_bwd_rev, &mut grads.backward);
    for (i, &tok) in tape.tokens.iter().enumerate() {
        let row = grads.embedding.row_mut(tok as usize);
        for (j, r) in row.iter_mut().enumerate() {
            *r += g_emb_f.get(i, j) + g_emb_b_rev.get(m - 1 - i, j);
        }
    }
}
