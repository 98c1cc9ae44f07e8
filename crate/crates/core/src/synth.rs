//! Seeded compositional benchmark: objects with attributes, verbs grouped
//! into activities, activities grouped into events, rendered into raw
//! feature bundles with questions at four granularities.
//!
//! Every episode draws three independent random streams (script, features,
//! questions) derived from the dataset seed and the episode index, so
//! generation is reproducible per episode regardless of split sizes.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{DecoderMode, HierarchyConfig};
use crate::datamodel::{GranularityTag, QASample, RawFeatureBundle};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

macro_rules! gen_err {
    ($($arg:tt)*) => { Error::Generation(format!($($arg)*)) };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivitySpec {
    pub name: String,
    /// Verb indices performed in order.
    pub verbs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub name: String,
    pub activities: [usize; 2],
    pub scene: usize,
    /// Relative sampling weight.
    pub weight: f64,
}

/// Grammar and rendering parameters of the synthetic world. Region and
/// frame appearance features share `region_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub classes: Vec<String>,
    /// Shared attribute vocabulary.
    pub attributes: Vec<String>,
    /// Attribute indices each class may take.
    pub class_attributes: Vec<Vec<usize>>,
    pub verbs: Vec<String>,
    pub activities: Vec<ActivitySpec>,
    pub scenes: Vec<String>,
    pub events: Vec<EventSpec>,
    pub region_dim: usize,
    pub motion_dim: usize,
    pub noise_sigma: f64,
    pub prototype_seed: u64,
    /// `(width, height)` in pixels.
    pub frame_size: (f32, f32),
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Words used by the question templates; world names must avoid them.
pub const TEMPLATE_WORDS: [&str; 11] =
    ["what", "is", "the", "object", "next", "to", "does", "do", "in", "happening", "clip"];

impl Default for WorldSpec {
    fn default() -> Self {
        let activity = |name: &str, verbs: &[usize]| ActivitySpec { name: name.into(), verbs: verbs.to_vec() };
        let event = |name: &str, a: usize, b: usize, scene: usize, weight: f64| EventSpec {
            name: name.into(),
            activities: [a, b],
            scene,
            weight,
        };
        Self {
            classes: names(&["person", "dog", "cat", "ball", "car", "bike", "cup", "chair", "box", "bird"]),
            attributes: names(&[
                "red", "blue", "green", "yellow", "white", "black", "orange", "purple", "pink", "gray", "brown",
                "silver",
            ]),
            class_attributes: (0..10).map(|c| (0..6).map(|j| (c + 2 * j) % 12).collect()).collect(),
            verbs: names(&["walk", "run", "jump", "push", "pull", "throw", "catch", "carry"]),
            activities: vec![
                activity("play_fetch", &[5, 1, 6]),
                activity("exercise", &[0, 1, 2]),
                activity("move_things", &[3, 4]),
                activity("deliver", &[7, 0]),
                activity("toss", &[5, 6]),
                activity("haul", &[4, 7, 3]),
            ],
            scenes: names(&["park", "kitchen", "street", "garage"]),
            events: vec![
                event("picnic", 0, 4, 0, 2.0),
                event("backyard_game", 0, 4, 3, 1.0),
                event("workout", 1, 3, 0, 1.0),
                event("commute", 1, 3, 2, 1.0),
                event("moving_day", 2, 5, 2, 1.0),
                event("cleanup", 2, 5, 1, 1.0),
                event("delivery", 3, 5, 3, 1.0),
                event("party", 4, 1, 1, 2.0),
            ],
            region_dim: 32,
            motion_dim: 32,
            noise_sigma: 0.1,
            prototype_seed: 7,
            frame_size: (320.0, 240.0),
        }
    }
}

/// Layout grid used for object placement.
const GRID_COLS: usize = 4;
const GRID_ROWS: usize = 3;

impl WorldSpec {
    /// Checks the grammar for a cast of `regions` objects per frame.
    pub fn validate(&self, regions: usize) -> Result<()> {
        if self.classes.len() < 8 || self.verbs.len() < 6 {
            return Err(gen_err!("world needs at least 8 classes and 6 verbs"));
        }
        if regions < 2 || regions > self.classes.len() || regions > GRID_COLS * GRID_ROWS + 1 {
            return Err(gen_err!("cannot place {regions} distinct objects per frame"));
        }
        if self.class_attributes.len() != self.classes.len() {
            return Err(gen_err!("class_attributes must list one entry per class"));
        }
        for (c, attrs) in self.class_attributes.iter().enumerate() {
            if attrs.len() < 3.max(regions) || attrs.iter().any(|&a| a >= self.attributes.len()) {
                return Err(gen_err!(
                    "class {} needs at least max(3, N) valid attributes",
                    self.classes[c]
                ));
            }
        }
        for a in &self.activities {
            if !(2..=3).contains(&a.verbs.len()) || a.verbs.iter().any(|&v| v >= self.verbs.len()) {
                return Err(gen_err!("activity {} must be 2-3 valid verbs", a.name));
            }
        }
        if self.events.is_empty() || self.scenes.is_empty() {
            return Err(gen_err!("world needs events and scenes"));
        }
        for e in &self.events {
            if e.activities.iter().any(|&a| a >= self.activities.len()) || e.scene >= self.scenes.len() {
                return Err(gen_err!("event {} references unknown activities or scene", e.name));
            }
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(gen_err!("event {} needs a positive weight", e.name));
            }
        }
        if self.region_dim == 0 || self.motion_dim == 0 || !(self.noise_sigma >= 0.0) {
            return Err(gen_err!("feature widths must be positive and noise non-negative"));
        }
        if !(self.frame_size.0 > 0.0 && self.frame_size.1 > 0.0) {
            return Err(gen_err!("frame size must be positive"));
        }
        let mut seen = BTreeMap::new();
        let words = TEMPLATE_WORDS.iter().map(|w| w.to_string());
        let all = words
            .chain(self.classes.iter().cloned())
            .chain(self.attributes.iter().cloned())
            .chain(self.verbs.iter().cloned())
            .chain(self.events.iter().map(|e| e.name.clone()));
        for w in all {
            if w.is_empty() || w.contains(char::is_whitespace) || seen.insert(w.clone(), ()).is_some() {
                return Err(gen_err!("token {w:?} is empty, contains spaces or is duplicated"));
            }
        }
        Ok(())
    }

    /// Answer vocabulary for open-ended questions: classes, verbs, events.
    pub fn answer_set(&self) -> Vec<String> {
        self.classes.iter().chain(&self.verbs).chain(self.events.iter().map(|e| &e.name)).cloned().collect()
    }
}

/// Unit-norm prototype vectors, derived from `prototype_seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub classes: Vec<Vec<f32>>,
    pub attributes: Vec<Vec<f32>>,
    pub verbs: Vec<Vec<f32>>,
    pub activities: Vec<Vec<f32>>,
    pub scenes: Vec<Vec<f32>>,
}

fn unit_vectors(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
            v.into_iter().map(|x| (x / norm) as f32).collect()
        })
        .collect()
}

impl Prototypes {
    pub fn derive(spec: &WorldSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.prototype_seed);
        Self {
            classes: unit_vectors(spec.classes.len(), spec.region_dim, &mut rng),
            attributes: unit_vectors(spec.attributes.len(), spec.region_dim, &mut rng),
            verbs: unit_vectors(spec.verbs.len(), spec.motion_dim, &mut rng),
            activities: unit_vectors(spec.activities.len(), spec.motion_dim, &mut rng),
            scenes: unit_vectors(spec.scenes.len(), spec.region_dim, &mut rng),
        }
    }
}

/// A validated world with its prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub prototypes: Prototypes,
}

impl World {
    pub fn new(spec: WorldSpec, regions: usize) -> Result<Self> {
        spec.validate(regions)?;
        let prototypes = Prototypes::derive(&spec);
        Ok(Self { spec, prototypes })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CastMember {
    pub class: usize,
    pub attribute: usize,
}

/// An activity occupying clips `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivitySpan {
    pub activity: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScript {
    pub event: usize,
    pub spans: Vec<ActivitySpan>,
    /// Verb performed by the subject in each clip.
    pub clip_verbs: Vec<usize>,
    /// The `N` objects, in the order they appear in every frame.
    pub cast: Vec<CastMember>,
    /// `T × N` boxes `(x1, y1, x2, y2)` in pixels.
    pub boxes: Vec<Vec<[f32; 4]>>,
    /// Cast index of the agent performing the verbs.
    pub subject: usize,
    /// Cast index of the object acted on; always adjacent to the subject.
    pub object: usize,
}

/// Mixes a stream index into a seed (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Samples an event, its two activities over the clips, the cast and the
/// box trajectories.
pub fn sample_script(world: &World, config: &HierarchyConfig, seed: u64) -> Result<EpisodeScript> {
    let spec = &world.spec;
    let k = config.clips;
    if k < 2 {
        return Err(gen_err!("episodes need at least 2 clips to hold two activities"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = spec.events.iter().map(|e| e.weight).collect();
    let event = WeightedIndex::new(&weights).map_err(|e| gen_err!("event weights: {e}"))?.sample(&mut rng);

    let mut order = spec.events[event].activities;
    if rng.random_bool(0.5) {
        order.swap(0, 1);
    }
    let split = rng.random_range(1..k);
    let spans = vec![
        ActivitySpan { activity: order[0], start: 0, end: split },
        ActivitySpan { activity: order[1], start: split, end: k },
    ];
    let mut clip_verbs = Vec::with_capacity(k);
    for s in &spans {
        let verbs = &spec.activities[s.activity].verbs;
        let len = s.end - s.start;
        for j in 0..len {
            clip_verbs.push(verbs[j * verbs.len() / len]);
        }
    }

    let n = config.regions;
    let mut classes: Vec<usize> = (0..spec.classes.len()).collect();
    classes.shuffle(&mut rng);
    let mut used_attrs = Vec::new();
    let mut cast = Vec::with_capacity(n);
    for &class in &classes[..n] {
        let free: Vec<usize> =
            spec.class_attributes[class].iter().copied().filter(|a| !used_attrs.contains(a)).collect();
        let attribute = *free.choose(&mut rng).ok_or_else(|| gen_err!("ran out of distinct attributes"))?;
        used_attrs.push(attribute);
        cast.push(CastMember { class, attribute });
    }
    let subject = rng.random_range(0..n);
    let object = (subject + rng.random_range(1..n)) % n;

    // Place the subject/object pair side by side in one grid cell and the
    // rest of the cast in distinct other cells.
    let (w, h) = spec.frame_size;
    let cell_w = w / GRID_COLS as f32;
    let cell_h = h / GRID_ROWS as f32;
    let size = 0.3 * cell_w.min(cell_h);
    let mut cells: Vec<usize> = (0..GRID_COLS * GRID_ROWS).collect();
    cells.shuffle(&mut rng);
    let center = |cell: usize| {
        (((cell % GRID_COLS) as f32 + 0.5) * cell_w, ((cell / GRID_COLS) as f32 + 0.5) * cell_h)
    };
    let mut anchors = vec![(0.0f32, 0.0f32); n];
    let (px, py) = center(cells[0]);
    anchors[subject] = (px - 0.55 * size, py);
    anchors[object] = (px + 0.55 * size, py);
    let mut next_cell = 1;
    for (i, a) in anchors.iter_mut().enumerate() {
        if i != subject && i != object {
            *a = center(cells[next_cell]);
            next_cell += 1;
        }
    }
    let jitter = 0.03 * size;
    let boxes = (0..config.frames())
        .map(|_| {
            anchors
                .iter()
                .map(|&(cx, cy)| {
                    let cx = cx + rng.random_range(-jitter..=jitter);
                    let cy = cy + rng.random_range(-jitter..=jitter);
                    let half = 0.5 * size;
                    [cx - half, cy - half, cx + half, cy + half]
                })
                .collect()
        })
        .collect();

    Ok(EpisodeScript { event, spans, clip_verbs, cast, boxes, subject, object })
}

fn add_noise(v: &mut [f32], normal: &Normal<f64>, rng: &mut ChaCha8Rng) {
    for x in v {
        *x += normal.sample(rng) as f32;
    }
}

/// Region features are class + attribute prototypes plus noise, motion is
/// the clip verb prototype plus noise, and frame appearance is the scene
/// prototype plus the mean cast prototype plus noise.
pub fn render_features(
    script: &EpisodeScript,
    world: &World,
    config: &HierarchyConfig,
    seed: u64,
) -> Result<RawFeatureBundle> {
    let spec = &world.spec;
    let protos = &world.prototypes;
    let frames = config.frames();
    if script.clip_verbs.len() != config.clips || script.boxes.len() != frames || script.cast.len() != config.regions
    {
        return Err(gen_err!("script does not match the configured K, T and N"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| gen_err!("noise: {e}"))?;
    let dr = spec.region_dim;

    let object_protos: Vec<Vec<f32>> = script
        .cast
        .iter()
        .map(|m| {
            protos.classes[m.class].iter().zip(&protos.attributes[m.attribute]).map(|(a, b)| a + b).collect()
        })
        .collect();
    let mut cast_mean = vec![0.0f32; dr];
    for p in &object_protos {
        for (m, &v) in cast_mean.iter_mut().zip(p) {
            *m += v / object_protos.len() as f32;
        }
    }
    let scene = &protos.scenes[spec.events[script.event].scene];

    let mut region_feats = Vec::with_capacity(frames);
    let mut appearance = Matrix::zeros(frames, dr);
    for t in 0..frames {
        let mut m = Matrix::zeros(config.regions, dr);
        for (n, p) in object_protos.iter().enumerate() {
            let row = m.row_mut(n);
            row.copy_from_slice(p);
            add_noise(row, &normal, &mut rng);
        }
        region_feats.push(m);
        let row = appearance.row_mut(t);
        for j in 0..dr {
            row[j] = scene[j] + cast_mean[j];
        }
        add_noise(row, &normal, &mut rng);
    }
    let mut motion = Matrix::zeros(config.clips, spec.motion_dim);
    for (k, &verb) in script.clip_verbs.iter().enumerate() {
        let row = motion.row_mut(k);
        row.copy_from_slice(&protos.verbs[verb]);
        add_noise(row, &normal, &mut rng);
    }
    let frame_times = (0..frames).map(|t| (t as f32 + 0.5) / frames as f32).collect();
    Ok(RawFeatureBundle {
        motion,
        appearance,
        region_feats,
        region_boxes: script.boxes.clone(),
        frame_size: spec.frame_size,
        frame_times,
    })
}

/// Token list with lookup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    /// Template words, clip tokens, then world names.
    pub fn for_world(spec: &WorldSpec, clips: usize) -> Self {
        let mut tokens: Vec<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
        tokens.extend((1..=clips).map(|k| format!("clip{k}")));
        tokens.extend(spec.classes.iter().cloned());
        tokens.extend(spec.attributes.iter().cloned());
        tokens.extend(spec.verbs.iter().cloned());
        tokens.extend(spec.events.iter().map(|e| e.name.clone()));
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        if self.index.len() != self.tokens.len() {
            // Deserialised without the index.
            return self.tokens.iter().position(|t| t == token).map(|i| i as u32).ok_or_else(|| {
                gen_err!("token {token:?} not in vocabulary")
            });
        }
        self.index.get(token).copied().ok_or_else(|| gen_err!("token {token:?} not in vocabulary"))
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<u32>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.tokens.get(i as usize).map_or("<unk>", String::as_str)).collect()
    }
}

/// Category an answer name belongs to; distractors come from the same one.
fn answer_category(tag: GranularityTag) -> usize {
    match tag {
        GranularityTag::Object | GranularityTag::Relation => 0,
        GranularityTag::Action => 1,
        GranularityTag::Event => 2,
    }
}

fn category_names(spec: &WorldSpec, category: usize) -> Vec<&str> {
    match category {
        0 => spec.classes.iter().map(String::as_str).collect(),
        1 => spec.verbs.iter().map(String::as_str).collect(),
        _ => spec.events.iter().map(|e| e.name.as_str()).collect(),
    }
}

/// One question per granularity tag, answered from the script.
pub fn make_questions(
    script: &EpisodeScript,
    world: &World,
    vocab: &Vocabulary,
    mode: DecoderMode,
    video_ref: &str,
    seed: u64,
) -> Result<Vec<QASample>> {
    let spec = &world.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let answer_set = spec.answer_set();
    let mut out = Vec::with_capacity(4);
    for tag in GranularityTag::ALL {
        let (words, answer): (Vec<String>, &str) = match tag {
            GranularityTag::Object => {
                let m = script.cast[rng.random_range(0..script.cast.len())];
                (
                    ["what", "is", "the", spec.attributes[m.attribute].as_str(), "object"]
                        .map(String::from)
                        .to_vec(),
                    &spec.classes[m.class],
                )
            }
            GranularityTag::Relation => {
                let (asked, partner) =
                    if rng.random_bool(0.5) { (script.subject, script.object) } else { (script.object, script.subject) };
                (
                    ["what", "is", "next", "to", "the", spec.classes[script.cast[asked].class].as_str()]
                        .map(String::from)
                        .to_vec(),
                    &spec.classes[script.cast[partner].class],
                )
            }
            GranularityTag::Action => {
                let k = rng.random_range(0..script.clip_verbs.len());
                let subject = spec.classes[script.cast[script.subject].class].as_str();
                let mut words: Vec<String> =
                    ["what", "does", "the", subject, "do", "in"].map(String::from).to_vec();
                words.push(format!("clip{}", k + 1));
                (words, &spec.verbs[script.clip_verbs[k]])
            }
            GranularityTag::Event => (
                ["what", "is", "happening"].map(String::from).to_vec(),
                &spec.events[script.event].name,
            ),
        };
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let question_tokens = vocab.encode(&refs)?;
        let (candidates, answer_index) = match mode {
            DecoderMode::MultiChoice { num_choices } => {
                let pool: Vec<&str> =
                    category_names(spec, answer_category(tag)).into_iter().filter(|&n| n != answer).collect();
                if pool.len() + 1 < num_choices {
                    return Err(gen_err!(
                        "{} answers cannot supply {} distractors",
                        tag.name(),
                        num_choices - 1
                    ));
                }
                let mut choices: Vec<&str> = pool.choose_multiple(&mut rng, num_choices - 1).copied().collect();
                let pos = rng.random_range(0..num_choices);
                choices.insert(pos, answer);
                let candidates = choices.iter().map(|c| vocab.encode(&[c])).collect::<Result<Vec<_>>>()?;
                (candidates, pos)
            }
            DecoderMode::OpenEnded { .. } => {
                let idx = answer_set.iter().position(|a| a == answer).expect("answers come from the answer set");
                (Vec::new(), idx)
            }
        };
        out.push(QASample {
            sample_id: format!("{video_ref}_{}", tag.name()),
            question_tokens,
            candidates,
            answer_index,
            granularity_tag: Some(tag),
            video_ref: video_ref.to_string(),
        });
    }
    Ok(out)
}

fn mean_center_distance(script: &EpisodeScript, a: usize, b: usize) -> f32 {
    let mut total = 0.0;
    for frame in &script.boxes {
        let (p, q) = (frame[a], frame[b]);
        let dx = (p[0] + p[2] - q[0] - q[2]) * 0.5;
        let dy = (p[1] + p[3] - q[1] - q[3]) * 0.5;
        total += libm::sqrtf(dx * dx + dy * dy);
    }
    total / script.boxes.len() as f32
}

/// Answers a generated question from the script alone, re-reading the
/// question words. Relation answers use box distances, not the script's
/// role labels.
pub fn oracle_answer(script: &EpisodeScript, spec: &WorldSpec, vocab: &Vocabulary, question: &[u32]) -> Result<String> {
    let words = vocab.decode(question);
    let class_of = |name: &str| spec.classes.iter().position(|c| c == name);
    let member_of_class = |class: usize| script.cast.iter().position(|m| m.class == class);
    match words.as_slice() {
        ["what", "is", "the", attr, "object"] => {
            let a = spec.attributes.iter().position(|x| x == attr).ok_or_else(|| gen_err!("unknown attribute"))?;
            let m = script.cast.iter().find(|m| m.attribute == a).ok_or_else(|| gen_err!("attribute not in cast"))?;
            Ok(spec.classes[m.class].clone())
        }
        ["what", "is", "next", "to", "the", class] => {
            let c = class_of(class).ok_or_else(|| gen_err!("unknown class"))?;
            let me = member_of_class(c).ok_or_else(|| gen_err!("class not in cast"))?;
            let nearest = (0..script.cast.len())
                .filter(|&j| j != me)
                .min_by(|&i, &j| mean_center_distance(script, me, i).total_cmp(&mean_center_distance(script, me, j)))
                .ok_or_else(|| gen_err!("no neighbour"))?;
            Ok(spec.classes[script.cast[nearest].class].clone())
        }
        ["what", "does", "the", _class, "do", "in", clip] => {
            let k: usize = clip
                .strip_prefix("clip")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| gen_err!("bad clip token"))?;
            let span = script
                .spans
                .iter()
                .find(|s| s.start < k && k <= s.end)
                .ok_or_else(|| gen_err!("clip outside the episode"))?;
            let verbs = &spec.activities[span.activity].verbs;
            let len = span.end - span.start;
            Ok(spec.verbs[verbs[(k - 1 - span.start) * verbs.len() / len]].clone())
        }
        ["what", "is", "happening"] => Ok(spec.events[script.event].name.clone()),
        _ => Err(gen_err!("unrecognised question {:?}", words)),
    }
}

/// Number of episodes per split; each episode yields four questions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        Self { train: 64, val: 16, test: 16 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub video_ref: String,
    pub script: EpisodeScript,
    pub features: RawFeatureBundle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub world: World,
    pub vocab: Vocabulary,
    pub answer_set: Vec<String>,
    pub episodes: Vec<Episode>,
    pub train: Vec<QASample>,
    pub val: Vec<QASample>,
    pub test: Vec<QASample>,
}

impl SyntheticDataset {
    /// Feature bundles keyed by video reference plus the QA splits.
    pub fn to_dataset(&self) -> crate::training::Dataset {
        crate::training::Dataset {
            videos: self.episodes.iter().map(|e| (e.video_ref.clone(), e.features.clone())).collect(),
            train: self.train.clone(),
            val: self.val.clone(),
            test: self.test.clone(),
        }
    }

    /// Raw input widths; the token embedding width is a model choice.
    pub fn input_dims(&self, embed: usize) -> crate::config::InputDims {
        let spec = &self.world.spec;
        crate::config::InputDims {
            motion: spec.motion_dim,
            appearance: spec.region_dim,
            region: spec.region_dim,
            embed,
            vocab: self.vocab.len(),
        }
    }
}

const STREAM_SCRIPT: u64 = 1;
const STREAM_FEATURES: u64 = 2;
const STREAM_QUESTIONS: u64 = 3;

/// Generates one episode with its questions.
pub fn generate_episode(
    world: &World,
    vocab: &Vocabulary,
    config: &HierarchyConfig,
    seed: u64,
    index: usize,
) -> Result<(Episode, Vec<QASample>)> {
    let episode_seed = derive_seed(seed, index as u64);
    let video_ref = format!("ep{index:06}");
    let script = sample_script(world, config, derive_seed(episode_seed, STREAM_SCRIPT))?;
    let features = render_features(&script, world, config, derive_seed(episode_seed, STREAM_FEATURES))?;
    let qas = make_questions(
        &script,
        world,
        vocab,
        config.decoder,
        &video_ref,
        derive_seed(episode_seed, STREAM_QUESTIONS),
    )?;
    Ok((Episode { video_ref, script, features }, qas))
}

/// Episodes `0..train` form the train split, then validation, then test.
pub fn build_dataset(
    spec: &WorldSpec,
    config: &HierarchyConfig,
    sizes: DatasetSizes,
    seed: u64,
) -> Result<SyntheticDataset> {
    let world = World::new(spec.clone(), config.regions)?;
    let vocab = Vocabulary::for_world(spec, config.clips);
    let answer_set = spec.answer_set();
    let total = sizes.train + sizes.val + sizes.test;
    let mut episodes = Vec::with_capacity(total);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..total {
        let (ep, qas) = generate_episode(&world, &vocab, config, seed, i)?;
        episodes.push(ep);
        let split = if i < sizes.train {
            &mut train
        } else if i < sizes.train + sizes.val {
            &mut val
        } else {
            &mut test
        };
        split.extend(qas);
    }
    Ok(SyntheticDataset { world, vocab, answer_set, episodes, train, val, test })
}

/// Scales one cast member's region features by `factor` in every frame
/// and returns an object question about that member.
pub fn plant_saliency(
    episode: &mut Episode,
    member: usize,
    factor: f32,
    world: &World,
    vocab: &Vocabulary,
    mode: DecoderMode,
    seed: u64,
) -> Result<QASample> {
    for frame in &mut episode.features.region_feats {
        for v in frame.row_mut(member) {
            *v *= factor;
        }
    }
    let spec = &world.spec;
    let m = episode.script.cast[member];
    let attr = spec.attributes[m.attribute].as_str();
    let question_tokens = vocab.encode(&["what", "is", "the", attr, "object"])?;
    let answer = spec.classes[m.class].as_str();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (candidates, answer_index) = match mode {
        DecoderMode::MultiChoice { num_choices } => {
            let pool: Vec<&str> = spec.classes.iter().map(String::as_str).filter(|&c| c != answer).collect();
            let mut choices: Vec<&str> = pool.choose_multiple(&mut rng, num_choices - 1).copied().collect();
            let pos = rng.random_range(0..num_choices);
            choices.insert(pos, answer);
            (choices.iter().map(|c| vocab.encode(&[c])).collect::<Result<Vec<_>>>()?, pos)
        }
        DecoderMode::OpenEnded { .. } => (Vec::new(), spec.answer_set().iter().position(|a| a == answer).unwrap_or(0)),
    };
    Ok(QASample {
        sample_id: format!("{}_salient{member}", episode.video_ref),
        question_tokens,
        candidates,
        answer_index,
        granularity_tag: Some(GranularityTag::Object),
        video_ref: episode.video_ref.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> HierarchyConfig {
        HierarchyConfig::default()
    }

    #[test]
    fn scripts_are_deterministic_and_consistent() {
        let world = World::new(WorldSpec::default(), 5).unwrap();
        let a = sample_script(&world, &small(), 11).unwrap();
        let b = sample_script(&world, &small(), 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.clip_verbs.len(), 4);
        assert_eq!(a.boxes.len(), 16);
        let acts: Vec<usize> = a.spans.iter().map(|s| s.activity).collect();
        let mut expect = world.spec.events[a.event].activities.to_vec();
        let mut got = acts.clone();
        expect.sort();
        got.sort();
        assert_eq!(got, expect);
        assert_eq!(a.spans[0].start, 0);
        assert_eq!(a.spans[1].end, 4);
        assert_eq!(a.spans[0].end, a.spans[1].start);
    }

    #[test]
    fn prototypes_are_unit_norm() {
        let p = Prototypes::derive(&WorldSpec::default());
        for v in p.classes.iter().chain(&p.attributes).chain(&p.verbs).chain(&p.activities).chain(&p.scenes) {
            let n: f32 = v.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn noiseless_render_matches_prototypes() {
        let spec = WorldSpec { noise_sigma: 0.0, ..Default::default() };
        let world = World::new(spec, 5).unwrap();
        let s = sample_script(&world, &small(), 3).unwrap();
        let f = render_features(&s, &world, &small(), 4).unwrap();
        let m = s.cast[2];
        for j in 0..world.spec.region_dim {
            let want = world.prototypes.classes[m.class][j] + world.prototypes.attributes[m.attribute][j];
            assert_eq!(f.region_feats[5].get(2, j), want);
        }
        for k in 1..4 {
            if s.clip_verbs[k] == s.clip_verbs[k - 1] {
                assert_eq!(f.motion.row(k), f.motion.row(k - 1));
            }
        }
        f.validate().unwrap();
    }

    #[test]
    fn single_clip_is_a_generation_error() {
        let world = World::new(WorldSpec::default(), 5).unwrap();
        let c = HierarchyConfig { clips: 1, ..small() };
        assert!(matches!(sample_script(&world, &c, 1), Err(Error::Generation(_))));
    }

    #[test]
    fn small_event_grammar_cannot_fill_distractors() {
        let mut spec = WorldSpec::default();
        spec.events.truncate(3);
        let world = World::new(spec, 5).unwrap();
        let vocab = Vocabulary::for_world(&world.spec, 4);
        let s = sample_script(&world, &small(), 1).unwrap();
        let r = make_questions(&s, &world, &vocab, DecoderMode::MultiChoice { num_choices: 5 }, "v", 1);
        assert!(matches!(r, Err(Error::Generation(_))));
    }

    #[test]
    fn questions_cover_every_tag_and_oracle_agrees() {
        let world = World::new(WorldSpec::default(), 5).unwrap();
        let vocab = Vocabulary::for_world(&world.spec, 4);
        let answers = world.spec.answer_set();
        for seed in 0..20 {
            let s = sample_script(&world, &small(), seed).unwrap();
            let qs = make_questions(&s, &world, &vocab, DecoderMode::OpenEnded { answer_set_size: answers.len() }, "v", seed)
                .unwrap();
            assert_eq!(qs.len(), 4);
            for q in &qs {
                let oracle = oracle_answer(&s, &world.spec, &vocab, &q.question_tokens).unwrap();
                assert_eq!(answers[q.answer_index], oracle);
            }
        }
    }
}
