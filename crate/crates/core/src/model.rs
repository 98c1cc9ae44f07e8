//! The full model: projections, question encoder, hierarchy and decoder,
//! with a per-sample forward and backward pass.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DecoderMode, HierarchyConfig, InputDims};
use crate::datamodel::{
    build_mc_query, encode_tokens, encode_tokens_backward, project_video, project_video_backward,
    FeatureProjection, QASample, GEOMETRY_DIM, TEMPORAL_DIM, QuestionEncoder, QuestionTape, RawFeatureBundle, VideoFeatures, VideoTape,
};
use crate::decoder::{
    ce_grad, ce_loss, hinge_grad, hinge_loss, mc_scores, mc_scores_backward, oe_scores_backward,
    oe_scores_taped, predict, DecoderParams, OeTape,
};
use crate::error::{config_err, Result};
use crate::hierarchy::{hqga_backward, hqga_forward_taped, HierInput, HierTape, HierTrace, HqgaParams};
use crate::params::{join, ParamVisit};
use crate::tensor::{Matrix, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub projection: FeatureProjection<T>,
    pub question: QuestionEncoder<T>,
    pub hierarchy: HqgaParams<T>,
    pub decoder: DecoderParams<T>,
}

impl<T: Real> ModelParams<T> {
    /// Seeded initialisation.
    pub fn new(config: &HierarchyConfig, dims: &InputDims, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        Ok(Self {
            projection: FeatureProjection::new(dims, d, &mut rng),
            question: QuestionEncoder::new(dims, d, &mut rng),
            hierarchy: HqgaParams::new(d, config.graph_layers, &mut rng),
            decoder: DecoderParams::new(config.decoder, d, &mut rng),
        })
    }

    pub fn zeros(config: &HierarchyConfig, dims: &InputDims) -> Self {
        let d = config.hidden;
        Self {
            projection: FeatureProjection::zeros(dims, d),
            question: QuestionEncoder::zeros(dims, d),
            hierarchy: HqgaParams::zeros(d, config.graph_layers),
            decoder: DecoderParams::zeros(config.decoder, d),
        }
    }

    /// Input widths recovered from the parameter shapes.
    pub fn dims(&self) -> InputDims {
        InputDims {
            motion: self.projection.motion.input_dim(),
            appearance: self.projection.appearance.input_dim(),
            region: self.projection.object.input_dim() - GEOMETRY_DIM - TEMPORAL_DIM,
            embed: self.question.embedding.cols(),
            vocab: self.question.embedding.rows(),
        }
    }

    pub fn cast<U: Real>(&self, config: &HierarchyConfig, dims: &InputDims) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(config, dims);
        let flat: Vec<U> = self.flatten().into_iter().map(|v| U::lit(v.as_f64())).collect();
        out.unflatten(&flat);
        out
    }
}

impl<T: Real> ParamVisit<T> for ModelParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix<T>)) {
        self.projection.visit(&join(prefix, "projection"), f);
        self.question.visit(&join(prefix, "question"), f);
        self.hierarchy.visit(&join(prefix, "hierarchy"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        self.projection.visit_mut(&join(prefix, "projection"), f);
        self.question.visit_mut(&join(prefix, "question"), f);
        self.hierarchy.visit_mut(&join(prefix, "hierarchy"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

/// Token sequences fed to the question encoder: one holistic query per
/// candidate for multi-choice, the (truncated) question otherwise.
pub fn query_tokens(sample: &QASample, config: &HierarchyConfig) -> Vec<Vec<u32>> {
    if config.is_multi_choice() {
        sample
            .candidates
            .iter()
            .map(|c| build_mc_query(&sample.question_tokens, c, config.max_tokens))
            .collect()
    } else {
        let keep = sample.question_tokens.len().min(config.max_tokens);
        alloc::vec![sample.question_tokens[..keep].to_vec()]
    }
}

#[derive(Clone, Debug)]
struct QueryPass<T> {
    question: QuestionTape<T>,
    query_rows: usize,
    f_q: Vec<T>,
    f_v: Vec<T>,
    hier: HierTape<T>,
}

/// Result of one forward pass, holding what backward needs.
#[derive(Clone, Debug)]
pub struct ModelForward<T> {
    pub scores: Vec<T>,
    /// One per query (per candidate in multi-choice mode).
    pub traces: Vec<HierTrace<T>>,
    video: VideoTape<T>,
    passes: Vec<QueryPass<T>>,
    oe: Option<OeTape<T>>,
}

impl<T: Real> ModelForward<T> {
    pub fn prediction(&self) -> usize {
        predict(&self.scores)
    }

    /// FNV-1a hash of every ReLU sign bit in the hierarchy; changes iff
    /// some ReLU input crossed zero.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.passes {
            for bit in p.hier.relu_signs() {
                h ^= bit as u64 + 1;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

pub fn forward<T: Real>(
    params: &ModelParams<T>,
    config: &HierarchyConfig,
    raw: &RawFeatureBundle,
    sample: &QASample,
) -> Result<ModelForward<T>> {
    sample.validate(config, params.question.embedding.rows())?;
    let (video, video_tape) = project_video(raw, &params.projection, config)?;
    let mut passes = Vec::new();
    let mut traces = Vec::new();
    for tokens in query_tokens(sample, config) {
        let (q, f_q, question) = encode_tokens(&tokens, &params.question)?;
        let input = HierInput {
            motion: &video.motion,
            appearance: &video.appearance,
            objects: &video.objects,
            query: &q,
            global_query: &f_q,
        };
        let (f_v, trace, hier) = hqga_forward_taped(input, &params.hierarchy, config)?;
        traces.push(trace);
        passes.push(QueryPass { question, query_rows: q.rows(), f_q, f_v, hier });
    }
    let (scores, oe) = match (&params.decoder, config.decoder) {
        (DecoderParams::MultiChoice { w_c }, DecoderMode::MultiChoice { .. }) => {
            let pairs: Vec<_> = passes.iter().map(|p| (p.f_q.clone(), p.f_v.clone())).collect();
            (mc_scores(&pairs, w_c)?, None)
        }
        (DecoderParams::OpenEnded { w_qv, w_c }, DecoderMode::OpenEnded { .. }) => {
            let p = &passes[0];
            let (scores, tape) = oe_scores_taped(&p.f_q, &p.f_v, w_qv, w_c);
            (scores, Some(tape))
        }
        _ => return Err(config_err!("decoder parameters do not match the decoder mode")),
    };
    Ok(ModelForward { scores, traces, video: video_tape, passes, oe })
}

/// Hinge loss (multi-choice) or cross-entropy (open-ended).
pub fn sample_loss<T: Real>(fwd: &ModelForward<T>, sample: &QASample, config: &HierarchyConfig) -> Result<T> {
    if config.is_multi_choice() {
        hinge_loss(&fwd.scores, sample.answer_index)
    } else {
        ce_loss(&fwd.scores, sample.answer_index)
    }
}

/// Accumulates `dL/dθ` for [`sample_loss`] into `grads`.
pub fn backward<T: Real>(
    fwd: &ModelForward<T>,
    sample: &QASample,
    params: &ModelParams<T>,
    config: &HierarchyConfig,
    grads: &mut ModelParams<T>,
) {
    let d = config.hidden;
    let mut g_video = VideoFeatures {
        motion: Matrix::zeros(config.clips, d),
        appearance: Matrix::zeros(config.frames(), d),
        objects: (0..config.frames()).map(|_| Matrix::zeros(config.regions, d)).collect(),
    };
    let pass_grads: Vec<(Vec<T>, Vec<T>)> = match (&params.decoder, &mut grads.decoder) {
        (DecoderParams::MultiChoice { w_c }, DecoderParams::MultiChoice { w_c: g_wc }) => {
            let g_scores = hinge_grad(&fwd.scores, sample.answer_index);
            let pairs: Vec<_> = fwd.passes.iter().map(|p| (p.f_q.clone(), p.f_v.clone())).collect();
            mc_scores_backward(&pairs, &fwd.scores, &g_scores, w_c, g_wc)
        }
        (DecoderParams::OpenEnded { w_qv, w_c }, DecoderParams::OpenEnded { w_qv: g_qv, w_c: g_c }) => {
            let g_scores = ce_grad(&fwd.scores, sample.answer_index);
            let tape = fwd.oe.as_ref().expect("open-ended forward keeps its tape");
            alloc::vec![oe_scores_backward(tape, &fwd.scores, &g_scores, w_qv, w_c, g_qv, g_c)]
        }
        _ => panic!("decoder parameter and gradient modes differ"),
    };
    for (pass, (g_fq, g_fv)) in fwd.passes.iter().zip(pass_grads) {
        let hg = hqga_backward(&pass.hier, &g_fv, pass.query_rows, &params.hierarchy, &mut grads.hierarchy, config);
        g_video.motion.add_assign(&hg.motion);
        g_video.appearance.add_assign(&hg.appearance);
        for (a, b) in g_video.objects.iter_mut().zip(&hg.objects) {
            a.add_assign(b);
        }
        let mut g_q = hg.query;
        let last = g_q.rows() - 1;
        for (j, v) in g_q.row_mut(last).iter_mut().enumerate() {
            *v += g_fq[j] + hg.global_query[j];
        }
        encode_tokens_backward(&pass.question, &g_q, &params.question, &mut grads.question);
    }
    project_video_backward(&fwd.video, &g_video, &params.projection, &mut grads.projection);
}

/// Forward, loss and gradient accumulation for one sample.
pub fn loss_and_grad<T: Real>(
    params: &ModelParams<T>,
    config: &HierarchyConfig,
    raw: &RawFeatureBundle,
    sample: &QASample,
    grads: &mut ModelParams<T>,
) -> Result<(T, ModelForward<T>)> {
    let fwd = forward(params, config, raw, sample)?;
    let loss = sample_loss(&fwd, sample, config)?;
    backward(&fwd, sample, params, config, grads);
    Ok((loss, fwd))
}
