//! Three-level conditional graph hierarchy: objects per frame, frames per
//! clip, clips per video. All units of a level share one parameter set.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::HierarchyConfig;
use crate::datamodel::FeatureBundle;
use crate::error::{config_err, data_err, Result};
use crate::nn::{elu, elu_grad, Linear};
use crate::params::{join, ParamVisit};
use crate::qga::{qga_backward, qga_forward_taped, Conditioning, QgaOutput, QgaParams, QgaTape};
use crate::tensor::{Matrix, Real};

/// Hierarchy levels, bottom-up.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Object,
    Frame,
    Clip,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Object, Level::Frame, Level::Clip];

    /// One-letter tag used in trace files.
    pub fn tag(self) -> &'static str {
        match self {
            Level::Object => "O",
            Level::Frame => "F",
            Level::Clip => "C",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HqgaParams<T> {
    pub object: QgaParams<T>,
    pub frame: QgaParams<T>,
    pub clip: QgaParams<T>,
    /// `W_ao`: `[f_a ; f_GO]` (2d) → d.
    pub merge_appearance: Linear<T>,
    /// `W_am`: `[f_m ; f_GF]` (2d) → d.
    pub merge_motion: Linear<T>,
    /// Per-level 2d → d maps used only with global query conditioning.
    pub global_cond: [Linear<T>; 3],
}

impl<T: Real> HqgaParams<T> {
    pub fn new<R: Rng + ?Sized>(hidden: usize, layers: usize, rng: &mut R) -> Self {
        Self {
            object: QgaParams::new(hidden, layers, rng),
            frame: QgaParams::new(hidden, layers, rng),
            clip: QgaParams::new(hidden, layers, rng),
            merge_appearance: Linear::new(2 * hidden, hidden, rng),
            merge_motion: Linear::new(2 * hidden, hidden, rng),
            global_cond: [
                Linear::new(2 * hidden, hidden, rng),
                Linear::new(2 * hidden, hidden, rng),
                Linear::new(2 * hidden, hidden, rng),
            ],
        }
    }

    pub fn zeros(hidden: usize, layers: usize) -> Self {
        Self {
            object: QgaParams::zeros(hidden, layers),
            frame: QgaParams::zeros(hidden, layers),
            clip: QgaParams::zeros(hidden, layers),
            merge_appearance: Linear::zeros(2 * hidden, hidden),
            merge_motion: Linear::zeros(2 * hidden, hidden),
            global_cond: [
                Linear::zeros(2 * hidden, hidden),
                Linear::zeros(2 * hidden, hidden),
                Linear::zeros(2 * hidden, hidden),
            ],
        }
    }

    pub fn unit(&self, level: Level) -> &QgaParams<T> {
        match level {
            Level::Object => &self.object,
            Level::Frame => &self.frame,
            Level::Clip => &self.clip,
        }
    }

    fn unit_and_fuse_mut(&mut self, level: Level) -> (&mut QgaParams<T>, &mut Linear<T>) {
        let fuse = &mut self.global_cond[level.index()];
        let unit = match level {
            Level::Object => &mut self.object,
            Level::Frame => &mut self.frame,
            Level::Clip => &mut self.clip,
        };
        (unit, fuse)
    }
}

impl<T: Real> ParamVisit<T> for HqgaParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix<T>)) {
        self.object.visit(&join(prefix, "qga_o"), f);
        self.frame.visit(&join(prefix, "qga_f"), f);
        self.clip.visit(&join(prefix, "qga_c"), f);
        self.merge_appearance.visit(&join(prefix, "merge_appearance"), f);
        self.merge_motion.visit(&join(prefix, "merge_motion"), f);
        for (level, lin) in Level::ALL.iter().zip(&self.global_cond) {
            lin.visit(&join(prefix, &alloc::format!("global_cond_{}", level.tag())), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        self.object.visit_mut(&join(prefix, "qga_o"), f);
        self.frame.visit_mut(&join(prefix, "qga_f"), f);
        self.clip.visit_mut(&join(prefix, "qga_c"), f);
        self.merge_appearance.visit_mut(&join(prefix, "merge_appearance"), f);
        self.merge_motion.visit_mut(&join(prefix, "merge_motion"), f);
        for (level, lin) in Level::ALL.iter().zip(self.global_cond.iter_mut()) {
            lin.visit_mut(&join(prefix, &alloc::format!("global_cond_{}", level.tag())), f);
        }
    }
}

/// Attention outputs of every unit, in evaluation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HierTrace<T> {
    /// One per frame, empty without the object level.
    pub level_o: Vec<QgaOutput<T>>,
    /// One per clip, empty without the frame level.
    pub level_f: Vec<QgaOutput<T>>,
    pub level_c: Vec<QgaOutput<T>>,
}

impl<T> HierTrace<T> {
    pub fn level(&self, level: Level) -> &[QgaOutput<T>] {
        match level {
            Level::Object => &self.level_o,
            Level::Frame => &self.level_f,
            Level::Clip => &self.level_c,
        }
    }
}

/// Borrowed hierarchy inputs; lets multi-choice decoding reuse one set of
/// projected video features across candidate queries.
#[derive(Clone, Copy, Debug)]
pub struct HierInput<'a, T> {
    pub motion: &'a Matrix<T>,
    pub appearance: &'a Matrix<T>,
    pub objects: &'a [Matrix<T>],
    pub query: &'a Matrix<T>,
    pub global_query: &'a [T],
}

impl<'a, T: Real> HierInput<'a, T> {
    pub fn from_bundle(bundle: &'a FeatureBundle<T>) -> Self {
        Self {
            motion: &bundle.motion,
            appearance: &bundle.appearance,
            objects: &bundle.objects,
            query: &bundle.query,
            global_query: &bundle.global_query,
        }
    }
}

fn conditioning<'a, T: Real>(
    level: Level,
    enabled: bool,
    input: &HierInput<'a, T>,
    params: &'a HqgaParams<T>,
    config: &HierarchyConfig,
) -> Conditioning<'a, T> {
    if !enabled {
        Conditioning::Off
    } else if config.global_fq_condition {
        Conditioning::Global { query: input.global_query, fuse: &params.global_cond[level.index()] }
    } else {
        Conditioning::Tokens(input.query)
    }
}

#[derive(Clone, Debug)]
struct MergeTape<T> {
    input: Matrix<T>,
    preact: Matrix<T>,
}

/// `ELU([context ; level] W + b)` row by row.
fn merge_taped<T: Real>(context: &Matrix<T>, level: &Matrix<T>, lin: &Linear<T>) -> (Matrix<T>, MergeTape<T>) {
    let d = context.cols();
    let mut input = Matrix::zeros(context.rows(), d + level.cols());
    for i in 0..context.rows() {
        let row = input.row_mut(i);
        row[..d].copy_from_slice(context.row(i));
        row[d..].copy_from_slice(level.row(i));
    }
    let preact = lin.forward(&input);
    (preact.map(elu), MergeTape { input, preact })
}

/// Returns `(g_context, g_level)`.
fn merge_backward<T: Real>(
    tape: &MergeTape<T>,
    grad: &Matrix<T>,
    lin: &Linear<T>,
    grads: &mut Linear<T>,
) -> (Matrix<T>, Matrix<T>) {
    let mut g_pre = grad.clone();
    for (g, &p) in g_pre.data_mut().iter_mut().zip(tape.preact.data()) {
        *g *= elu_grad(p);
    }
    let g_in = lin.backward(&tape.input, &g_pre, grads);
    let d = g_in.cols() / 2;
    let mut g_ctx = Matrix::zeros(g_in.rows(), d);
    let mut g_lvl = Matrix::zeros(g_in.rows(), g_in.cols() - d);
    for i in 0..g_in.rows() {
        g_ctx.row_mut(i).copy_from_slice(&g_in.row(i)[..d]);
        g_lvl.row_mut(i).copy_from_slice(&g_in.row(i)[d..]);
    }
    (g_ctx, g_lvl)
}

/// Context merge, `f̄ = ELU(W [context ; level] + b)` per row.
pub fn merge_context<T: Real>(level: &Matrix<T>, context: &Matrix<T>, lin: &Linear<T>) -> Matrix<T> {
    merge_taped(context, level, lin).0
}

/// Object level: one unit per frame over its `N` objects. Returns `T × d`.
pub fn level_object<T: Real>(
    objects: &[Matrix<T>],
    cond: Conditioning<'_, T>,
    params: &QgaParams<T>,
    config: &HierarchyConfig,
) -> Result<(Matrix<T>, Vec<QgaOutput<T>>)> {
    let (out, units) = run_units(objects.iter().cloned(), cond, params, config.sumpool_o, config.hidden)?;
    Ok((out, units.into_iter().map(|(o, _)| o).collect()))
}

/// Frame level: one unit per clip over its `γL` frame vectors. Returns `K × d`.
pub fn level_frame<T: Real>(
    frames: &Matrix<T>,
    cond: Conditioning<'_, T>,
    params: &QgaParams<T>,
    config: &HierarchyConfig,
) -> Result<(Matrix<T>, Vec<QgaOutput<T>>)> {
    let groups = clip_groups(frames, config)?;
    let (out, units) = run_units(groups.into_iter(), cond, params, config.sumpool_f, config.hidden)?;
    Ok((out, units.into_iter().map(|(o, _)| o).collect()))
}

/// Clip level: a single unit over the clip vectors, producing `f_V`.
pub fn level_clip<T: Real>(
    clips: &Matrix<T>,
    cond: Conditioning<'_, T>,
    params: &QgaParams<T>,
    config: &HierarchyConfig,
) -> Result<(Vec<T>, QgaOutput<T>)> {
    let (out, _) = qga_forward_taped(clips, cond, params, config.sumpool_c)?;
    Ok((out.pooled.clone(), out))
}

fn clip_groups<T: Real>(frames: &Matrix<T>, config: &HierarchyConfig) -> Result<Vec<Matrix<T>>> {
    let per_clip = config.frames_per_clip();
    if per_clip == 0 || !frames.rows().is_multiple_of(config.clips) || frames.rows() / config.clips != per_clip {
        return Err(config_err!(
            "{} frames do not split into {} clips of {} frames",
            frames.rows(),
            config.clips,
            per_clip
        ));
    }
    Ok((0..config.clips)
        .map(|k| frames.slice_rows(k * per_clip, (k + 1) * per_clip))
        .collect())
}

type UnitRun<T> = (QgaOutput<T>, QgaTape<T>);

fn run_units<T: Real>(
    groups: impl Iterator<Item = Matrix<T>>,
    cond: Conditioning<'_, T>,
    params: &QgaParams<T>,
    sumpool: bool,
    hidden: usize,
) -> Result<(Matrix<T>, Vec<UnitRun<T>>)> {
    let mut rows = Vec::new();
    let mut units = Vec::new();
    for g in groups {
        let (out, tape) = qga_forward_taped(&g, cond, params, sumpool)?;
        rows.push(out.pooled.clone());
        units.push((out, tape));
    }
    Ok((Matrix::stack(&rows, hidden), units))
}

/// Index of the middle frame within a clip of `per_clip` frames.
pub fn middle_frame(per_clip: usize) -> usize {
    per_clip / 2
}

/// Where the clip level's input nodes come from.
#[derive(Clone, Debug)]
enum ClipSource<T> {
    /// Frame-level outputs, optionally merged with `F_m`.
    FrameLevel { merge: Option<MergeTape<T>> },
    /// Middle frames of the object-level stream, optionally merged with `F_m`.
    MiddleFrames { merge: Option<MergeTape<T>> },
    /// `F_m` directly.
    Motion,
}

#[derive(Clone, Debug)]
pub struct HierTape<T> {
    object_units: Vec<QgaTape<T>>,
    appearance_merge: Option<MergeTape<T>>,
    frame_units: Vec<QgaTape<T>>,
    clip_source: ClipSource<T>,
    clip_unit: QgaTape<T>,
    frames: usize,
    clips: usize,
}

impl<T: Real> HierTape<T> {
    /// Every ReLU sign bit of every unit, in evaluation order.
    pub fn relu_signs(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for t in self.object_units.iter().chain(&self.frame_units).chain(core::iter::once(&self.clip_unit)) {
            t.relu_signs(&mut out);
        }
        out
    }
}

fn check_stream<T: Real>(m: &Matrix<T>, shape: (usize, usize), what: &str) -> Result<()> {
    if m.shape() != shape {
        return Err(data_err!("{what} has shape {:?}, expected {:?}", m.shape(), shape));
    }
    if !m.is_finite() {
        return Err(data_err!("non-finite entry in {what}"));
    }
    Ok(())
}

/// Checks only the streams the active configuration reads, so inputs of
/// ablated components may hold anything.
fn check_input<T: Real>(input: &HierInput<'_, T>, config: &HierarchyConfig) -> Result<()> {
    let d = config.hidden;
    let reads_motion = config.use_fm || (!config.use_go && !config.use_gf);
    // Frame nodes exist for G_F or the middle-frame route; appearance feeds
    // them directly without G_O, or through the merge with it.
    let reads_appearance = (config.use_gf || config.use_go) && (config.use_fa || !config.use_go);
    if reads_motion {
        check_stream(input.motion, (config.clips, d), "motion features")?;
    }
    if reads_appearance {
        check_stream(input.appearance, (config.frames(), d), "appearance features")?;
    }
    if config.use_go {
        if input.objects.len() != config.frames() {
            return Err(data_err!("{} object frames, expected {}", input.objects.len(), config.frames()));
        }
        for o in input.objects {
            check_stream(o, (config.regions, d), "object features")?;
        }
    }
    if input.query.rows() == 0 || input.query.rows() > config.max_tokens {
        return Err(data_err!(
            "query has {} tokens, expected 1..={}",
            input.query.rows(),
            config.max_tokens
        ));
    }
    check_stream(input.query, (input.query.rows(), d), "query")?;
    if input.global_query.len() != d || !input.global_query.iter().all(|v| v.is_finite()) {
        return Err(data_err!("global query must be a finite {d}-vector"));
    }
    Ok(())
}

/// Full hierarchy: `f_V = G_C(G_F(F_a, G_O(F_o)), F_m)` with ablations.
pub fn hqga_forward<T: Real>(
    bundle: &FeatureBundle<T>,
    params: &HqgaParams<T>,
    config: &HierarchyConfig,
) -> Result<(Vec<T>, HierTrace<T>)> {
    let (f_v, trace, _) = hqga_forward_taped(HierInput::from_bundle(bundle), params, config)?;
    Ok((f_v, trace))
}

pub fn hqga_forward_taped<T: Real>(
    input: HierInput<'_, T>,
    params: &HqgaParams<T>,
    config: &HierarchyConfig,
) -> Result<(Vec<T>, HierTrace<T>, HierTape<T>)> {
    config.validate()?;
    check_input(&input, config)?;
    let d = config.hidden;
    let per_clip = config.frames_per_clip();
    let mut trace = HierTrace { level_o: Vec::new(), level_f: Vec::new(), level_c: Vec::new() };

    // Object level and appearance merge produce the frame-level nodes.
    let mut object_units = Vec::new();
    let mut appearance_merge = None;
    let frame_nodes = if config.use_go {
        let cond = conditioning(Level::Object, config.cond_o, &input, params, config);
        let (f_go, units) = run_units(input.objects.iter().cloned(), cond, &params.object, config.sumpool_o, d)?;
        for (out, tape) in units {
            trace.level_o.push(out);
            object_units.push(tape);
        }
        if config.use_fa {
            let (merged, tape) = merge_taped(input.appearance, &f_go, &params.merge_appearance);
            appearance_merge = Some(tape);
            merged
        } else {
            f_go
        }
    } else if config.use_gf {
        input.appearance.clone()
    } else {
        Matrix::zeros(0, d)
    };

    // Frame level (or its substitutes) produce the clip-level nodes.
    let mut frame_units = Vec::new();
    let merge_motion = |level_out: Matrix<T>| -> (Matrix<T>, Option<MergeTape<T>>) {
        if config.use_fm {
            let (m, tape) = merge_taped(input.motion, &level_out, &params.merge_motion);
            (m, Some(tape))
        } else {
            (level_out, None)
        }
    };
    let (clip_nodes, clip_source) = if config.use_gf {
        let cond = conditioning(Level::Frame, config.cond_f, &input, params, config);
        let groups = clip_groups(&frame_nodes, config)?;
        let (f_gf, units) = run_units(groups.into_iter(), cond, &params.frame, config.sumpool_f, d)?;
        for (out, tape) in units {
            trace.level_f.push(out);
            frame_units.push(tape);
        }
        let (nodes, merge) = merge_motion(f_gf);
        (nodes, ClipSource::FrameLevel { merge })
    } else if config.use_go {
        let mid = middle_frame(per_clip);
        let rows: Vec<Vec<T>> = (0..config.clips)
            .map(|k| frame_nodes.row(k * per_clip + mid).to_vec())
            .collect();
        let (nodes, merge) = merge_motion(Matrix::stack(&rows, d));
        (nodes, ClipSource::MiddleFrames { merge })
    } else {
        (input.motion.clone(), ClipSource::Motion)
    };

    let cond = conditioning(Level::Clip, config.cond_c, &input, params, config);
    let (out, clip_unit) = qga_forward_taped(&clip_nodes, cond, &params.clip, config.sumpool_c)?;
    let f_v = out.pooled.clone();
    trace.level_c.push(out);

    let tape = HierTape {
        object_units,
        appearance_merge,
        frame_units,
        clip_source,
        clip_unit,
        frames: config.frames(),
        clips: config.clips,
    };
    Ok((f_v, trace, tape))
}

/// Gradients of the hierarchy inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct HierInputGrads<T> {
    pub motion: Matrix<T>,
    pub appearance: Matrix<T>,
    pub objects: Vec<Matrix<T>>,
    pub query: Matrix<T>,
    pub global_query: Vec<T>,
}

fn unit_backward<T: Real>(
    level: Level,
    tape: &QgaTape<T>,
    grad: &[T],
    params: &HqgaParams<T>,
    grads: &mut HqgaParams<T>,
    g_query: &mut Matrix<T>,
    g_global: &mut [T],
) -> Matrix<T> {
    let (unit_grads, fuse_grads) = grads.unit_and_fuse_mut(level);
    let fuse = &params.global_cond[level.index()];
    let g = qga_backward(tape, grad, params.unit(level), unit_grads, Some((fuse, fuse_grads)));
    if let Some(q) = g.query {
        g_query.add_assign(&q);
    }
    if let Some(gq) = g.global_query {
        for (a, b) in g_global.iter_mut().zip(gq) {
            *a += b;
        }
    }
    g.x_in
}

/// Backward pass from `dL/df_V`; parameter gradients accumulate into `grads`.
pub fn hqga_backward<T: Real>(
    tape: &HierTape<T>,
    grad_fv: &[T],
    query_rows: usize,
    params: &HqgaParams<T>,
    grads: &mut HqgaParams<T>,
    config: &HierarchyConfig,
) -> HierInputGrads<T> {
    let d = grad_fv.len();
    let per_clip = config.frames_per_clip();
    let mut g_motion = Matrix::zeros(tape.clips, d);
    let mut g_appearance = Matrix::zeros(tape.frames, d);
    let mut g_objects = Vec::new();
    let mut g_query = Matrix::zeros(query_rows, d);
    let mut g_global = vec![T::zero(); d];

    let g_clip_nodes =
        unit_backward(Level::Clip, &tape.clip_unit, grad_fv, params, grads, &mut g_query, &mut g_global);

    let unmerge_motion = |merge: &Option<MergeTape<T>>, g: Matrix<T>, grads: &mut HqgaParams<T>, g_motion: &mut Matrix<T>| {
        match merge {
            Some(m) => {
                let (g_ctx, g_lvl) = merge_backward(m, &g, &params.merge_motion, &mut grads.merge_motion);
                g_motion.add_assign(&g_ctx);
                g_lvl
            }
            None => g,
        }
    };

    // Gradient on the frame-level nodes (F̄_GO, or F_a without objects).
    let mut g_frame_nodes = Matrix::zeros(tape.frames, d);
    match &tape.clip_source {
        ClipSource::FrameLevel { merge } => {
            let g_fgf = unmerge_motion(merge, g_clip_nodes, grads, &mut g_motion);
            for (k, unit) in tape.frame_units.iter().enumerate() {
                let g_in = unit_backward(
                    Level::Frame,
                    unit,
                    g_fgf.row(k),
                    params,
                    grads,
                    &mut g_query,
                    &mut g_global,
                );
                for i in 0..per_clip {
                    let row = g_frame_nodes.row_mut(k * per_clip + i);
                    for (a, &b) in row.iter_mut().zip(g_in.row(i)) {
                        *a += b;
                    }
                }
            }
        }
        ClipSource::MiddleFrames { merge } => {
            let g_mid = unmerge_motion(merge, g_clip_nodes, grads, &mut g_motion);
            let mid = middle_frame(per_clip);
            for k in 0..tape.clips {
                g_frame_nodes.row_mut(k * per_clip + mid).copy_from_slice(g_mid.row(k));
            }
        }
        ClipSource::Motion => g_motion.add_assign(&g_clip_nodes),
    }

    if config.use_go {
        let g_fgo = match &tape.appearance_merge {
            Some(m) => {
                let (g_ctx, g_lvl) =
                    merge_backward(m, &g_frame_nodes, &params.merge_appearance, &mut grads.merge_appearance);
                g_appearance.add_assign(&g_ctx);
                g_lvl
            }
            None => g_frame_nodes,
        };
        for (t, unit) in tape.object_units.iter().enumerate() {
            g_objects.push(unit_backward(
                Level::Object,
                unit,
                g_fgo.row(t),
                params,
                grads,
                &mut g_query,
                &mut g_global,
            ));
        }
    } else if !matches!(tape.clip_source, ClipSource::Motion) {
        g_appearance.add_assign(&g_frame_nodes);
    }

    HierInputGrads {
        motion: g_motion,
        appearance: g_appearance,
        objects: g_objects,
        query: g_query,
        global_query: g_global,
    }
}
