mod common;

use common::*;
use hqga_core::hierarchy::{hqga_forward, middle_frame, HqgaParams};
use hqga_core::oracle::{naive_hqga, naive_qga, NaiveCond, NaiveLinear, NaiveQga};
use hqga_core::qga::{qga_forward, Conditioning, QgaOutput, QgaParams};
use hqga_core::tensor::softmax;
use hqga_core::{AblationVariant, DecoderMode, HierarchyConfig, Matrix};
use hqga_core::nn::Linear;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

const TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
enum CondKind {
    Off,
    Tokens,
    Global,
}

fn cond_kind() -> impl Strategy<Value = CondKind> {
    prop_oneof![Just(CondKind::Off), Just(CondKind::Tokens), Just(CondKind::Global)]
}

struct Unit {
    x: Matrix<f64>,
    q: Matrix<f64>,
    fq: Vec<f64>,
    fuse: Linear<f64>,
    params: QgaParams<f64>,
}

fn unit(n: usize, half_d: usize, m: usize, h: usize, seed: u64) -> Unit {
    let d = 2 * half_d;
    let mut r = rng(seed);
    let q = random_matrix(m, d, 1.0, &mut r);
    Unit {
        x: random_matrix(n, d, 2.0, &mut r),
        fq: q.row(m - 1).to_vec(),
        q,
        fuse: Linear::new(2 * d, d, &mut r),
        params: QgaParams::new(d, h, &mut r),
    }
}

fn run(u: &Unit, x: &Matrix<f64>, kind: CondKind, sumpool: bool) -> QgaOutput<f64> {
    let cond = match kind {
        CondKind::Off => Conditioning::Off,
        CondKind::Tokens => Conditioning::Tokens(&u.q),
        CondKind::Global => Conditioning::Global { query: &u.fq, fuse: &u.fuse },
    };
    qga_forward(x, cond, &u.params, sumpool).unwrap()
}

fn max_diff_rows(a: &Matrix<f64>, b: &[Vec<f64>]) -> f64 {
    let mut m = 0.0f64;
    for (i, row) in b.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m = m.max((a.get(i, j) - v).abs());
        }
    }
    m
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn row_sums_ok(m: &Matrix<f64>) -> bool {
    (0..m.rows()).all(|i| (m.row(i).iter().sum::<f64>() - 1.0).abs() <= TOL && m.row(i).iter().all(|&v| v >= 0.0))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 50, ..ProptestConfig::default() })]

    #[test]
    fn qga_matches_naive_oracle(
        n in 1usize..=6, half_d in 1usize..=8, m in 1usize..=5, h in 1usize..=3,
        kind in cond_kind(), sumpool in any::<bool>(), seed in any::<u64>(),
    ) {
        let u = unit(n, half_d, m, h, seed);
        let out = run(&u, &u.x, kind, sumpool);
        let naive_params = NaiveQga::from(&u.params);
        let q_rows = u.q.to_rows();
        let fuse = NaiveLinear::from(&u.fuse);
        let cond = match kind {
            CondKind::Off => NaiveCond::Off,
            CondKind::Tokens => NaiveCond::Tokens(&q_rows),
            CondKind::Global => NaiveCond::Global { query: &u.fq, fuse: &fuse },
        };
        let naive = naive_qga(&u.x.to_rows(), cond, &naive_params, sumpool);
        prop_assert!(max_diff(&out.pooled, &naive.pooled) <= TOL);
        prop_assert!(max_diff_rows(&out.x_out, &naive.x_out) <= TOL);
        prop_assert_eq!(out.alpha.is_some(), naive.alpha.is_some());
        prop_assert_eq!(out.adjacency.is_some(), naive.adjacency.is_some());
        if let (Some(a), Some(b)) = (&out.alpha, &naive.alpha) {
            prop_assert!(max_diff_rows(a, b) <= TOL);
        }
        if let (Some(a), Some(b)) = (&out.adjacency, &naive.adjacency) {
            prop_assert!(max_diff_rows(a, b) <= TOL);
        }
        if let (Some(a), Some(b)) = (&out.beta, &naive.beta) {
            prop_assert!(max_diff(a, b) <= TOL);
        }
    }

    #[test]
    fn qga_is_permutation_equivariant(
        n in 1usize..=6, half_d in 1usize..=8, m in 1usize..=5, h in 1usize..=3,
        kind in cond_kind(), seed in any::<u64>(),
    ) {
        let u = unit(n, half_d, m, h, seed);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng(seed ^ 0xabc));
        let permuted = Matrix::from_rows(&perm.iter().map(|&i| u.x.row(i).to_vec()).collect::<Vec<_>>());
        let a = run(&u, &u.x, kind, false);
        let b = run(&u, &permuted, kind, false);
        prop_assert!(max_diff(&a.pooled, &b.pooled) <= TOL);
        let (adj_a, adj_b) = (a.adjacency.unwrap(), b.adjacency.unwrap());
        let (beta_a, beta_b) = (a.beta.unwrap(), b.beta.unwrap());
        for (pi, &i) in perm.iter().enumerate() {
            prop_assert!(max_diff(b.x_out.row(pi), a.x_out.row(i)) <= TOL);
            prop_assert!((beta_b[pi] - beta_a[i]).abs() <= TOL);
            if let (Some(aa), Some(ab)) = (&a.alpha, &b.alpha) {
                prop_assert!(max_diff(ab.row(pi), aa.row(i)) <= TOL);
            }
            for (pj, &j) in perm.iter().enumerate() {
                prop_assert!((adj_b.get(pi, pj) - adj_a.get(i, j)).abs() <= TOL);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic(
        n in 1usize..=6, half_d in 1usize..=8, m in 1usize..=5, h in 1usize..=3,
        scale in 0.01f64..20.0, seed in any::<u64>(),
    ) {
        let mut u = unit(n, half_d, m, h, seed);
        u.x.scale(scale);
        u.q.scale(scale);
        let out = run(&u, &u.x, CondKind::Tokens, false);
        prop_assert!(row_sums_ok(out.alpha.as_ref().unwrap()));
        prop_assert!(row_sums_ok(out.adjacency.as_ref().unwrap()));
        prop_assert!(row_sums_ok(&Matrix::row_vector(out.beta.as_ref().unwrap())));
    }

    #[test]
    fn softmax_ignores_a_shift(logits in prop::collection::vec(-30.0f64..30.0, 1..8), c in -500.0f64..500.0) {
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        prop_assert!(max_diff(&softmax(&logits), &softmax(&shifted)) <= TOL);
    }

    #[test]
    fn hierarchy_matches_naive_oracle(
        clips in 1usize..=3, per_clip in 1usize..=3, regions in 1usize..=4, half_d in 1usize..=4,
        layers in 1usize..=2, row in 0usize..13, tokens in 1usize..=4, seed in any::<u64>(),
    ) {
        let base = HierarchyConfig {
            clips, clip_len: 2 * per_clip, gamma: 0.5, regions, max_tokens: 4, hidden: 2 * half_d,
            graph_layers: layers, ..Default::default()
        };
        let config = AblationVariant::table_rows()[row].apply(&base);
        let mut r = rng(seed);
        let bundle = random_bundle(&config, tokens, &mut r);
        let params = HqgaParams::<f64>::new(config.hidden, layers, &mut r);
        let (f_v, _) = hqga_forward(&bundle, &params, &config).unwrap();
        prop_assert!(max_diff(&f_v, &naive_hqga(&bundle, &params, &config)) <= TOL);
    }

    #[test]
    fn video_vector_ignores_object_order(seed in any::<u64>(), row in 0usize..13) {
        let config = AblationVariant::table_rows()[row].apply(&HierarchyConfig { hidden: 8, ..Default::default() });
        let mut r = rng(seed);
        let bundle = random_bundle(&config, 3, &mut r);
        let params = HqgaParams::<f64>::new(8, 2, &mut r);
        let mut shuffled = bundle.clone();
        for frame in &mut shuffled.objects {
            let mut rows = frame.to_rows();
            rows.shuffle(&mut r);
            *frame = Matrix::from_rows(&rows);
        }
        let a = hqga_forward(&bundle, &params, &config).unwrap().0;
        let b = hqga_forward(&shuffled, &params, &config).unwrap().0;
        prop_assert!(max_diff(&a, &b) <= TOL);
    }
}

fn poison(m: &mut Matrix<f64>) {
    m.fill(f64::NAN);
}

#[test]
fn ablated_streams_never_reach_the_video_vector() {
    let mut r = rng(11);
    for variant in AblationVariant::table_rows() {
        let config = variant.apply(&HierarchyConfig { hidden: 8, ..Default::default() });
        let bundle = random_bundle(&config, 4, &mut r);
        let params = HqgaParams::<f64>::new(8, 2, &mut r);
        let clean = hqga_forward(&bundle, &params, &config).unwrap().0;
        let frames_needed = config.use_gf || config.use_go;
        let mut poisoned = bundle.clone();
        let mut touched = Vec::new();
        if !config.use_go {
            poisoned.objects.iter_mut().for_each(poison);
            touched.push("objects");
        }
        if !frames_needed || (config.use_go && !config.use_fa) {
            poison(&mut poisoned.appearance);
            touched.push("appearance");
        }
        if !config.use_fm && frames_needed {
            poison(&mut poisoned.motion);
            touched.push("motion");
        }
        let got = hqga_forward(&poisoned, &params, &config)
            .unwrap_or_else(|e| panic!("{}: poisoned {touched:?} rejected: {e}", variant.label()))
            .0;
        assert_eq!(got, clean, "{}: poisoned {touched:?} leaked", variant.label());
    }
}

#[test]
fn clip_only_variant_ignores_regions_and_appearance() {
    let config = AblationVariant::table_rows()
        .into_iter()
        .find(|v| {
            let c = v.apply(&HierarchyConfig::default());
            !c.use_go && !c.use_gf
        })
        .expect("a clip-only row exists")
        .apply(&HierarchyConfig { hidden: 8, ..Default::default() });
    let mut r = rng(5);
    let bundle = random_bundle(&config, 2, &mut r);
    let params = HqgaParams::<f64>::new(8, 2, &mut r);
    let mut poisoned = bundle.clone();
    poisoned.objects.iter_mut().for_each(poison);
    poison(&mut poisoned.appearance);
    assert_eq!(hqga_forward(&poisoned, &params, &config).unwrap().0, hqga_forward(&bundle, &params, &config).unwrap().0);
}

#[test]
fn without_frame_level_only_middle_frames_matter() {
    for per_clip in [2usize, 3, 4] {
        let config = HierarchyConfig {
            clip_len: 2 * per_clip,
            gamma: 0.5,
            hidden: 8,
            use_gf: false,
            ..Default::default()
        };
        let mid = middle_frame(per_clip);
        assert_eq!(mid, per_clip / 2);
        let mut r = rng(per_clip as u64);
        let bundle = random_bundle(&config, 3, &mut r);
        let params = HqgaParams::<f64>::new(8, 2, &mut r);
        let clean = hqga_forward(&bundle, &params, &config).unwrap().0;
        for t in 0..config.frames() {
            let mut changed = bundle.clone();
            changed.objects[t] = random_matrix(config.regions, 8, 3.0, &mut r);
            for v in changed.appearance.row_mut(t) {
                *v += r.random_range(1.0..2.0);
            }
            let got = hqga_forward(&changed, &params, &config).unwrap().0;
            if t % per_clip == mid {
                assert_ne!(got, clean, "selected frame {t} must matter");
            } else {
                assert_eq!(got, clean, "frame {t} is not the middle frame of its clip");
            }
        }
    }
}

#[test]
fn parameter_count_is_independent_of_sizes() {
    use hqga_core::model::ModelParams;
    use hqga_core::params::ParamVisit;
    let dims = tiny_dims();
    let count = |clips, clip_len, regions| {
        let c = HierarchyConfig { clips, clip_len, regions, hidden: 8, ..Default::default() };
        ModelParams::<f64>::new(&c, &dims, 0).unwrap().num_params()
    };
    let base = count(4, 16, 5);
    assert_eq!(count(2, 8, 3), base);
    assert_eq!(count(7, 24, 9), base);
}

#[test]
fn mc_and_oe_scores_are_distributions() {
    use hqga_core::model::{forward, ModelParams};
    for mode in [DecoderMode::MultiChoice { num_choices: 4 }, DecoderMode::OpenEnded { answer_set_size: 6 }] {
        let config = tiny_config(mode);
        let dims = tiny_dims();
        let mut r = rng(9);
        for seed in 0..20 {
            let raw = random_raw(&config, &dims, &mut r);
            let sample = random_sample(&config, &dims, &mut r);
            let params = ModelParams::<f64>::new(&config, &dims, seed).unwrap();
            let s = forward(&params, &config, &raw, &sample).unwrap().scores;
            assert!(s.iter().all(|&v| v >= 0.0));
            assert!((s.iter().sum::<f64>() - 1.0).abs() <= TOL);
        }
    }
}

#[test]
fn path_lands_on_a_scaled_object_when_pooling_is_aligned() {
    use hqga_core::trace::{record_trace, top_down_path};
    let config = HierarchyConfig { hidden: 8, ..Default::default() };
    let mut r = rng(21);
    for trial in 0..20 {
        let mut bundle = random_bundle(&config, 3, &mut r);
        let mut params = HqgaParams::<f64>::new(8, 2, &mut r);
        let dir: Vec<f64> = random_matrix(1, 8, 1.0, &mut r).row(0).to_vec();
        let planted = trial % config.regions;
        for frame in &mut bundle.objects {
            for (v, &u) in frame.row_mut(planted).iter_mut().zip(&dir) {
                *v = 10.0 * u;
            }
        }
        params.object.w_p = Matrix::from_vec(8, 1, dir.clone());
        let (_, trace) = hqga_forward(&bundle, &params, &config).unwrap();
        let record = record_trace("s", &trace, 0, None, None);
        let (_, _, object) = top_down_path(&record, &config).unwrap();
        assert_eq!(object, planted, "trial {trial}");
    }
}
