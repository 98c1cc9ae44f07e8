#![allow(dead_code)]

use hqga_core::datamodel::{FeatureBundle, QASample, RawFeatureBundle};
use hqga_core::{DecoderMode, HierarchyConfig, InputDims, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// d=8, K=2, γL=2, N=3, M=4, H=2.
pub fn tiny_config(decoder: DecoderMode) -> HierarchyConfig {
    HierarchyConfig {
        clips: 2,
        clip_len: 4,
        gamma: 0.5,
        regions: 3,
        max_tokens: 4,
        hidden: 8,
        graph_layers: 2,
        decoder,
        ..Default::default()
    }
}

pub fn tiny_dims() -> InputDims {
    InputDims { motion: 5, appearance: 4, region: 3, embed: 6, vocab: 10 }
}

pub fn random_raw(config: &HierarchyConfig, dims: &InputDims, rng: &mut ChaCha8Rng) -> RawFeatureBundle {
    let frames = config.frames();
    let to_f32 = |m: Matrix<f64>| m.cast::<f32>();
    let (w, h) = (64.0f32, 48.0f32);
    RawFeatureBundle {
        motion: to_f32(random_matrix(config.clips, dims.motion, 1.0, rng)),
        appearance: to_f32(random_matrix(frames, dims.appearance, 1.0, rng)),
        region_feats: (0..frames).map(|_| to_f32(random_matrix(config.regions, dims.region, 1.0, rng))).collect(),
        region_boxes: (0..frames)
            .map(|_| {
                (0..config.regions)
                    .map(|_| {
                        let x1 = rng.random_range(0.0..w / 2.0);
                        let y1 = rng.random_range(0.0..h / 2.0);
                        [x1, y1, x1 + rng.random_range(1.0..w / 2.0), y1 + rng.random_range(1.0..h / 2.0)]
                    })
                    .collect()
            })
            .collect(),
        frame_size: (w, h),
        frame_times: (0..frames).map(|t| (t as f32 + 0.5) / frames as f32).collect(),
    }
}

pub fn random_sample(config: &HierarchyConfig, dims: &InputDims, rng: &mut ChaCha8Rng) -> QASample {
    let tok = |rng: &mut ChaCha8Rng| rng.random_range(0..dims.vocab as u32);
    let question_tokens = (0..3).map(|_| tok(rng)).collect();
    let (candidates, answer_index) = match config.decoder {
        DecoderMode::MultiChoice { num_choices } => {
            ((0..num_choices).map(|_| vec![tok(rng)]).collect(), rng.random_range(0..num_choices))
        }
        DecoderMode::OpenEnded { answer_set_size } => (Vec::new(), rng.random_range(0..answer_set_size)),
    };
    QASample {
        sample_id: "sample".into(),
        question_tokens,
        candidates,
        answer_index,
        granularity_tag: None,
        video_ref: "video".into(),
    }
}

pub fn random_bundle(config: &HierarchyConfig, query_rows: usize, rng: &mut ChaCha8Rng) -> FeatureBundle<f64> {
    let d = config.hidden;
    let query = random_matrix(query_rows, d, 1.0, rng);
    let global_query = query.row(query_rows - 1).to_vec();
    FeatureBundle {
        motion: random_matrix(config.clips, d, 1.0, rng),
        appearance: random_matrix(config.frames(), d, 1.0, rng),
        objects: (0..config.frames()).map(|_| random_matrix(config.regions, d, 1.0, rng)).collect(),
        query,
        global_query,
    }
}
