//! Synthetic desk scenes: axis-aligned boxes on a flat background, rendered
//! to RGB plus metric depth, with one question/answer conversation each.
//!
//! Depth is tied to surface brightness: an object with intensity `i` sits at
//! `5.0 - 4.0 * i` meters, so brighter objects are nearer. Distances are 2-D
//! centroid distances on the image plane divided by `pixels_per_meter`.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use super::types::{
    ConversationSample, DataError, QuestionType, RegionMask, Role, Turn, IMAGE_PLACEHOLDER,
    MASK_PLACEHOLDER,
};

const BACKGROUND_INTENSITY: f64 = 0.05;
const BACKGROUND_DEPTH_M: f64 = 5.0;
const DEPTH_GAIN_M: f64 = 4.0;
const INTENSITY_PALETTE: [f64; 4] = [0.25, 0.45, 0.65, 0.85];
const NOUNS: [&str; 3] = ["box", "crate", "pallet"];

/// Axis-aligned rectangle with a uniform surface intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub intensity: f64,
}

impl SceneObject {
    pub fn center(&self) -> (f64, f64) {
        (
            self.top as f64 + self.height as f64 / 2.0,
            self.left as f64 + self.width as f64 / 2.0,
        )
    }

    pub fn depth_m(&self) -> f64 {
        BACKGROUND_DEPTH_M - DEPTH_GAIN_M * self.intensity
    }
}

/// Full description of one renderable scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub canvas: (usize, usize),
    pub objects: Vec<SceneObject>,
    pub seed: u64,
    pub pixels_per_meter: f64,
}

/// Generator knobs. Defaults produce 32x32 scenes with 2-3 boxes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub canvas: (usize, usize),
    pub pixels_per_meter: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Minimum horizontal centroid separation, in pixels, for a pair used in
    /// a left/right question.
    pub min_lr_separation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            canvas: (32, 32),
            pixels_per_meter: 8.0,
            min_objects: 2,
            max_objects: 3,
            min_size: 6,
            max_size: 10,
            min_lr_separation: 6.0,
        }
    }
}

fn overlaps(a: &SceneObject, b: &SceneObject) -> bool {
    // one-pixel margin keeps rectangles visually separate
    let a_top = a.top.saturating_sub(1);
    let a_left = a.left.saturating_sub(1);
    !(a_top + a.height + 2 <= b.top
        || b.top + b.height <= a_top
        || a_left + a.width + 2 <= b.left
        || b.left + b.width <= a_left)
}

/// Draws a scene with non-overlapping objects and pairwise distinct depths.
pub fn sample_scene(rng: &mut ChaCha20Rng, cfg: &SynthConfig, seed: u64) -> SceneSpec {
    let (h, w) = cfg.canvas;
    loop {
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let mut palette: Vec<f64> = INTENSITY_PALETTE.to_vec();
        palette.shuffle(rng);
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        let mut ok = true;
        for i in 0..n {
            let mut placed = false;
            for _ in 0..200 {
                let oh = rng.random_range(cfg.min_size..=cfg.max_size);
                let ow = rng.random_range(cfg.min_size..=cfg.max_size);
                if oh >= h || ow >= w {
                    continue;
                }
                let top = rng.random_range(0..=h - oh);
                let left = rng.random_range(0..=w - ow);
                let jitter = rng.random_range(-0.04..0.04);
                let intensity = ((palette[i] + jitter) * 1000.0).round() / 1000.0;
                let cand = SceneObject { top, left, height: oh, width: ow, intensity };
                if objects.iter().all(|o| !overlaps(o, &cand)) {
                    objects.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                ok = false;
                break;
            }
        }
        if ok {
            return SceneSpec {
                canvas: cfg.canvas,
                objects,
                seed,
                pixels_per_meter: cfg.pixels_per_meter,
            };
        }
    }
}

/// Rasterizes a scene to an RGB image in `[0, 1]` and a metric depth map.
pub fn render_scene(spec: &SceneSpec) -> (Array3<f64>, Array2<f64>) {
    let (h, w) = spec.canvas;
    let mut rgb = Array3::from_elem((h, w, 3), BACKGROUND_INTENSITY);
    let mut depth = Array2::from_elem((h, w), BACKGROUND_DEPTH_M);
    for obj in &spec.objects {
        let d = obj.depth_m();
        for y in obj.top..obj.top + obj.height {
            for x in obj.left..obj.left + obj.width {
                for c in 0..3 {
                    rgb[(y, x, c)] = obj.intensity;
                }
                depth[(y, x)] = d;
            }
        }
    }
    (rgb, depth)
}

fn object_mask(obj: &SceneObject, canvas: (usize, usize)) -> RegionMask {
    let mut grid = Array2::<u8>::zeros(canvas);
    for y in obj.top..obj.top + obj.height {
        for x in obj.left..obj.left + obj.width {
            grid[(y, x)] = 1;
        }
    }
    RegionMask::from_dense(&grid)
}

fn rect_mask(top: usize, left: usize, height: usize, width: usize, canvas: (usize, usize)) -> RegionMask {
    let mut grid = Array2::<u8>::zeros(canvas);
    for y in top..top + height {
        for x in left..left + width {
            grid[(y, x)] = 1;
        }
    }
    RegionMask::from_dense(&grid)
}

struct Question {
    masks: Vec<RegionMask>,
    question: String,
    answer: String,
}

fn left_right_question(rng: &mut ChaCha20Rng, spec: &SceneSpec, cfg: &SynthConfig) -> Option<Question> {
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for a in 0..spec.objects.len() {
        for b in 0..spec.objects.len() {
            if a != b {
                let dx = spec.objects[a].center().1 - spec.objects[b].center().1;
                if dx.abs() >= cfg.min_lr_separation {
                    pairs.push((a, b));
                }
            }
        }
    }
    let &(a, b) = pairs.choose(rng)?;
    let side = if spec.objects[a].center().1 < spec.objects[b].center().1 {
        "left"
    } else {
        "right"
    };
    let probe = *["left", "right"].choose(rng).expect("non-empty");
    let noun_a = NOUNS[a % NOUNS.len()];
    let noun_b = NOUNS[b % NOUNS.len()];
    Some(Question {
        masks: vec![
            object_mask(&spec.objects[a], spec.canvas),
            object_mask(&spec.objects[b], spec.canvas),
        ],
        question: format!(
            "From this viewpoint, does the {noun_a} {MASK_PLACEHOLDER} appear on the {probe}-hand side of the {noun_b} {MASK_PLACEHOLDER}?"
        ),
        answer: format!("{side}."),
    })
}

fn count_question(rng: &mut ChaCha20Rng, spec: &SceneSpec) -> Question {
    let (h, w) = spec.canvas;
    let qh = rng.random_range(h / 2..=h);
    let qw = rng.random_range(w / 2..=w);
    let top = rng.random_range(0..=h - qh);
    let left = rng.random_range(0..=w - qw);
    let count = spec
        .objects
        .iter()
        .filter(|o| {
            let (cy, cx) = o.center();
            cy >= top as f64 && cy < (top + qh) as f64 && cx >= left as f64 && cx < (left + qw) as f64
        })
        .count();
    Question {
        masks: vec![rect_mask(top, left, qh, qw, spec.canvas)],
        question: format!("How many objects are in the region {MASK_PLACEHOLDER}?"),
        answer: format!("{count}."),
    }
}

fn distance_question(rng: &mut ChaCha20Rng, spec: &SceneSpec) -> Question {
    let mut idx: Vec<usize> = (0..spec.objects.len()).collect();
    idx.shuffle(rng);
    let (a, b) = (idx[0], idx[1]);
    let (ay, ax) = spec.objects[a].center();
    let (by, bx) = spec.objects[b].center();
    let meters = ((ay - by).powi(2) + (ax - bx).powi(2)).sqrt() / spec.pixels_per_meter;
    let noun_a = NOUNS[a % NOUNS.len()];
    let noun_b = NOUNS[b % NOUNS.len()];
    Question {
        masks: vec![
            object_mask(&spec.objects[a], spec.canvas),
            object_mask(&spec.objects[b], spec.canvas),
        ],
        question: format!(
            "What is the distance between the {noun_a} {MASK_PLACEHOLDER} and the {noun_b} {MASK_PLACEHOLDER}?"
        ),
        answer: format!("{meters:.2} meters."),
    }
}

fn multi_choice_question(rng: &mut ChaCha20Rng, spec: &SceneSpec) -> Question {
    let mut idx: Vec<usize> = (0..spec.objects.len()).collect();
    idx.shuffle(rng);
    let picks = &idx[..2];
    let nearest = if spec.objects[picks[0]].depth_m() < spec.objects[picks[1]].depth_m() {
        0
    } else {
        1
    };
    Question {
        masks: picks
            .iter()
            .map(|&i| object_mask(&spec.objects[i], spec.canvas))
            .collect(),
        question: format!(
            "Which region is closest to the camera: region {MASK_PLACEHOLDER} or region {MASK_PLACEHOLDER}?"
        ),
        answer: format!("[Region {nearest}]."),
    }
}

/// Generates `n` validated single-question samples cycling through the
/// requested categories. The same `(seed, n, categories)` triple always
/// produces identical samples.
pub fn generate_toy_dataset(
    seed: u64,
    n: usize,
    categories: &BTreeSet<QuestionType>,
    cfg: &SynthConfig,
) -> Result<Vec<ConversationSample>, DataError> {
    if n == 0 {
        return Err(DataError::InvalidArgument("sample count must be positive".into()));
    }
    if categories.is_empty() {
        return Err(DataError::InvalidArgument("no categories selected".into()));
    }
    if cfg.min_objects < 2 || cfg.max_objects < cfg.min_objects || cfg.max_objects > INTENSITY_PALETTE.len() {
        return Err(DataError::InvalidArgument(format!(
            "object count range ({}, {}) outside supported [2, {}]",
            cfg.min_objects,
            cfg.max_objects,
            INTENSITY_PALETTE.len()
        )));
    }
    if cfg.min_size < 2 || cfg.max_size < cfg.min_size || cfg.max_size >= cfg.canvas.0 || cfg.max_size >= cfg.canvas.1 {
        return Err(DataError::InvalidArgument(format!(
            "object size range ({}, {}) does not fit canvas {:?}",
            cfg.min_size, cfg.max_size, cfg.canvas
        )));
    }
    let cats: Vec<QuestionType> = categories.iter().copied().collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let category = cats[i % cats.len()];
        let q = loop {
            let spec = sample_scene(&mut rng, cfg, seed);
            match category {
                QuestionType::LeftRight => {
                    if let Some(q) = left_right_question(&mut rng, &spec, cfg) {
                        break (spec, q);
                    }
                }
                QuestionType::Count => break (spec.clone(), count_question(&mut rng, &spec)),
                QuestionType::Distance => break (spec.clone(), distance_question(&mut rng, &spec)),
                QuestionType::MultiChoice => {
                    break (spec.clone(), multi_choice_question(&mut rng, &spec))
                }
            }
        };
        let (spec, question) = q;
        let (image, depth) = render_scene(&spec);
        let sample = ConversationSample {
            sample_id: format!("synth-{seed}-{i:05}"),
            image,
            depth: Some(depth),
            masks: question.masks,
            turns: vec![
                Turn {
                    role: Role::User,
                    text: format!("{IMAGE_PLACEHOLDER}\n{}", question.question),
                },
                Turn {
                    role: Role::Assistant,
                    text: question.answer,
                },
            ],
            category: Some(category),
        };
        sample.validate()?;
        out.push(sample);
    }
    Ok(out)
}
