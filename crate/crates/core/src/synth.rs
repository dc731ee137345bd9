//! Deterministic generator of desk-scale grounding scenes: moving rectangles
//! emit events along their sweeping edges, a grayscale frame is rendered at
//! the window midpoint, and a closed template grammar produces a referring
//! expression whose four attribute cues uniquely identify the referred object.

use crate::boxes::{iou, BoxXYWH};
use crate::error::{Error, Result};
use crate::event::{Event, EventWindow};
use crate::frame::GrayImage;
use crate::labels::ClassLabel;
use crate::text::AttributeSpans;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sensor geometry and observation window of a generated scene.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneGeometry {
    pub width: u16,
    pub height: u16,
    pub bins: usize,
    pub t_a: i64,
    pub t_b: i64,
}

impl Default for SceneGeometry {
    fn default() -> Self {
        // 200 ms window at 128x64, five temporal bins
        SceneGeometry { width: 128, height: 64, bins: 5, t_a: 0, t_b: 200_000 }
    }
}

impl SceneGeometry {
    pub fn t_0(&self) -> i64 {
        self.t_a + (self.t_b - self.t_a) / 2
    }
}

/// Background intensity of rendered frames.
pub const BACKGROUND: u8 = 128;

/// Below this speed (normalized units per window) an object is stationary.
pub const STATIONARY_SPEED: f64 = 0.01;

/// Neighbors closer than this center distance are "next to" each other.
pub const NEIGHBOR_DISTANCE: f64 = 0.3;

/// Boxes at least this large count as "nearby" to the viewer.
pub const NEARBY_AREA: f64 = 0.03;

const MAX_SCENE_RETRIES: usize = 64;
const SWEEP_STEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeTag {
    Large,
    Small,
}

impl SizeTag {
    pub fn word(self) -> &'static str {
        match self {
            SizeTag::Large => "large",
            SizeTag::Small => "small",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShadeTag {
    Dark,
    Light,
}

impl ShadeTag {
    pub fn word(self) -> &'static str {
        match self {
            ShadeTag::Dark => "dark",
            ShadeTag::Light => "light",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatusTag {
    MovingLeft,
    MovingRight,
    MovingUp,
    MovingDown,
    Stationary,
}

impl StatusTag {
    pub fn phrase(self) -> &'static str {
        match self {
            StatusTag::MovingLeft => "moving left",
            StatusTag::MovingRight => "moving right",
            StatusTag::MovingUp => "moving up",
            StatusTag::MovingDown => "moving down",
            StatusTag::Stationary => "standing still",
        }
    }
}

/// One rectangle moving linearly through the window.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingObject {
    pub class_label: ClassLabel,
    /// Box at `t_a`.
    pub box0: BoxXYWH,
    /// Normalized displacement per window.
    pub velocity: (f64, f64),
    pub size_tag: SizeTag,
    pub shade_tag: ShadeTag,
    pub status_tag: StatusTag,
    /// Fill intensity in the rendered frame.
    pub shade: u8,
}

impl MovingObject {
    /// Box center advanced to the given fraction of the window.
    pub fn box_at(&self, frac: f64) -> BoxXYWH {
        BoxXYWH {
            cx: self.box0.cx + self.velocity.0 * frac,
            cy: self.box0.cy + self.velocity.1 * frac,
            w: self.box0.w,
            h: self.box0.h,
        }
    }

    pub fn is_stationary(&self) -> bool {
        let (vx, vy) = self.velocity;
        (vx * vx + vy * vy).sqrt() < STATIONARY_SPEED
    }
}

/// One scene + expression + ground-truth box unit.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub window: EventWindow,
    pub frame: GrayImage,
    pub geometry: SceneGeometry,
    pub objects: Vec<MovingObject>,
    pub referred_index: usize,
    pub expression: String,
    pub spans: AttributeSpans,
    /// Referred object's box at `t_0`.
    pub gt_box: BoxXYWH,
}

impl GeneratedSample {
    /// All object boxes advanced to `t_0`.
    pub fn boxes_at_t0(&self) -> Vec<BoxXYWH> {
        self.objects.iter().map(|o| o.box_at(0.5)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ViewerThird {
    Left,
    Center,
    Right,
}

impl ViewerThird {
    fn of(cx: f64) -> Self {
        if cx < 1.0 / 3.0 {
            ViewerThird::Left
        } else if cx < 2.0 / 3.0 {
            ViewerThird::Center
        } else {
            ViewerThird::Right
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            ViewerThird::Left => "on the left",
            ViewerThird::Center => "in the center",
            ViewerThird::Right => "on the right",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum OthersTag {
    NextTo(ClassLabel),
    Away,
}

impl OthersTag {
    fn phrase(&self) -> String {
        match self {
            OthersTag::NextTo(class) => format!("next to a {}", class.name()),
            OthersTag::Away => "away from other objects".to_string(),
        }
    }
}

fn class_base_dims(class: ClassLabel) -> (f64, f64) {
    match class {
        ClassLabel::Car => (0.24, 0.14),
        ClassLabel::Pedestrian => (0.12, 0.26),
        ClassLabel::Bike => (0.16, 0.12),
        ClassLabel::Motorcycle => (0.17, 0.10),
        ClassLabel::Bus => (0.32, 0.17),
        ClassLabel::Truck => (0.28, 0.20),
        ClassLabel::Rider => (0.13, 0.24),
    }
}

fn sample_object(rng: &mut ChaCha8Rng) -> Option<MovingObject> {
    let class_label = ClassLabel::ALL[rng.random_range(0..ClassLabel::ALL.len())];
    let size_tag = if rng.random_bool(0.5) { SizeTag::Large } else { SizeTag::Small };
    let shade_tag = if rng.random_bool(0.5) { ShadeTag::Dark } else { ShadeTag::Light };
    let shade = match shade_tag {
        ShadeTag::Dark => rng.random_range(30..=80),
        ShadeTag::Light => rng.random_range(176..=226),
    };

    let (bw, bh) = class_base_dims(class_label);
    let scale = match size_tag {
        SizeTag::Large => 1.3,
        SizeTag::Small => 0.85,
    };
    let w = bw * scale * rng.random_range(0.9..1.1);
    let h = bh * scale * rng.random_range(0.9..1.1);

    let status_tag = match rng.random_range(0..9) {
        0 => StatusTag::Stationary,
        1 | 2 => StatusTag::MovingLeft,
        3 | 4 => StatusTag::MovingRight,
        5 | 6 => StatusTag::MovingUp,
        _ => StatusTag::MovingDown,
    };
    let speed = rng.random_range(0.12..0.26);
    let cross = rng.random_range(-0.025..0.025);
    let velocity = match status_tag {
        StatusTag::Stationary => (0.0, 0.0),
        StatusTag::MovingLeft => (-speed, cross),
        StatusTag::MovingRight => (speed, cross),
        StatusTag::MovingUp => (cross, -speed),
        StatusTag::MovingDown => (cross, speed),
    };

    // box center at t_a such that the box stays inside the unit square over
    // the whole window
    let margin = 0.01;
    let (vx, vy): (f64, f64) = velocity;
    let lo_x = w / 2.0 + margin + (-vx).max(0.0);
    let hi_x = 1.0 - w / 2.0 - margin - vx.max(0.0);
    let lo_y = h / 2.0 + margin + (-vy).max(0.0);
    let hi_y = 1.0 - h / 2.0 - margin - vy.max(0.0);
    if lo_x >= hi_x || lo_y >= hi_y {
        return None;
    }
    let box0 = BoxXYWH {
        cx: rng.random_range(lo_x..hi_x),
        cy: rng.random_range(lo_y..hi_y),
        w,
        h,
    };
    Some(MovingObject { class_label, box0, velocity, size_tag, shade_tag, status_tag, shade })
}

fn viewer_distance_tag(b: &BoxXYWH) -> &'static str {
    if b.area() >= NEARBY_AREA {
        "nearby"
    } else {
        "far away"
    }
}

fn others_tag(objects: &[MovingObject], index: usize) -> OthersTag {
    let own = objects[index].box_at(0.5);
    let mut nearest: Option<(f64, ClassLabel)> = None;
    for (j, other) in objects.iter().enumerate() {
        if j == index {
            continue;
        }
        let b = other.box_at(0.5);
        let d = ((b.cx - own.cx).powi(2) + (b.cy - own.cy).powi(2)).sqrt();
        if nearest.is_none() || d < nearest.unwrap().0 {
            nearest = Some((d, other.class_label));
        }
    }
    match nearest {
        Some((d, class)) if d < NEIGHBOR_DISTANCE => OthersTag::NextTo(class),
        _ => OthersTag::Away,
    }
}

/// Semantic tags of one object in scene context; two objects are
/// indistinguishable under the template grammar iff all four match.
#[derive(PartialEq)]
struct TagTuple {
    appearance: (ClassLabel, SizeTag, ShadeTag),
    status: StatusTag,
    viewer: (ViewerThird, &'static str),
    satisfies_others: bool,
}

fn tags_against(
    objects: &[MovingObject],
    index: usize,
    expression_others: &OthersTag,
) -> TagTuple {
    let o = &objects[index];
    let at_t0 = o.box_at(0.5);
    let own_others = others_tag(objects, index);
    let satisfies_others = match expression_others {
        OthersTag::Away => own_others == OthersTag::Away,
        OthersTag::NextTo(class) => match own_others {
            // "next to a <class>" is satisfied by any object with such a
            // neighbor, not only the one whose nearest neighbor it is
            _ => objects.iter().enumerate().any(|(j, other)| {
                j != index && other.class_label == *class && {
                    let b = other.box_at(0.5);
                    ((b.cx - at_t0.cx).powi(2) + (b.cy - at_t0.cy).powi(2)).sqrt()
                        < NEIGHBOR_DISTANCE
                }
            }),
        },
    };
    TagTuple {
        appearance: (o.class_label, o.size_tag, o.shade_tag),
        status: o.status_tag,
        viewer: (ViewerThird::of(at_t0.cx), viewer_distance_tag(&at_t0)),
        satisfies_others,
    }
}

fn pixel_range(lo: f64, hi: f64, extent: u16) -> (usize, usize) {
    // pixels whose centers fall inside [lo, hi]
    let n = extent as f64;
    let first = (lo * n - 0.5).ceil().max(0.0) as usize;
    let last = ((hi * n - 0.5).floor() as isize).min(extent as isize - 1);
    if last < first as isize {
        (0, 0)
    } else {
        (first, last as usize + 1)
    }
}

#[derive(Clone, Copy, PartialEq)]
struct PixelRect {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

fn pixel_rect(b: &BoxXYWH, geometry: &SceneGeometry) -> PixelRect {
    let (x1, y1, x2, y2) = b.corners();
    let (px0, px1) = pixel_range(x1, x2, geometry.width);
    let (py0, py1) = pixel_range(y1, y2, geometry.height);
    PixelRect { x0: px0, x1: px1, y0: py0, y1: py1 }
}

impl PixelRect {
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Events fired where the moving box boundary sweeps pixels: a newly covered
/// pixel fires with the sign of the brightness change toward the object
/// shade, a vacated pixel with the opposite sign.
fn emit_events(object: &MovingObject, geometry: &SceneGeometry, out: &mut Vec<Event>) {
    if object.is_stationary() {
        return;
    }
    let enter_polarity: i8 = if object.shade < BACKGROUND { -1 } else { 1 };
    let span = (geometry.t_b - geometry.t_a) as f64;
    let mut prev = pixel_rect(&object.box_at(0.0), geometry);
    for step in 1..=SWEEP_STEPS {
        let frac = step as f64 / SWEEP_STEPS as f64;
        let cur = pixel_rect(&object.box_at(frac), geometry);
        if cur == prev {
            continue;
        }
        let t = geometry.t_a + (span * frac) as i64;
        for y in cur.y0..cur.y1 {
            for x in cur.x0..cur.x1 {
                if !prev.contains(x, y) {
                    out.push(Event { x: x as u16, y: y as u16, t, p: enter_polarity });
                }
            }
        }
        for y in prev.y0..prev.y1 {
            for x in prev.x0..prev.x1 {
                if !cur.contains(x, y) {
                    out.push(Event { x: x as u16, y: y as u16, t, p: -enter_polarity });
                }
            }
        }
        prev = cur;
    }
}

/// Render the scene frame at `t_0`: mid-gray background, objects filled in
/// index order (later objects on top).
fn render_frame(objects: &[MovingObject], geometry: &SceneGeometry) -> GrayImage {
    let mut frame = GrayImage::filled(geometry.width, geometry.height, BACKGROUND);
    for object in objects {
        let rect = pixel_rect(&object.box_at(0.5), geometry);
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                frame.set(x, y, object.shade);
            }
        }
    }
    frame
}

fn build_expression(
    objects: &[MovingObject],
    referred: usize,
    rng: &mut ChaCha8Rng,
) -> (String, AttributeSpans, OthersTag) {
    let o = &objects[referred];
    let class_word = if rng.random_bool(0.25) {
        o.class_label.synonym()
    } else {
        o.class_label.name()
    };
    let at_t0 = o.box_at(0.5);
    let appearance = format!("{} {} {}", o.size_tag.word(), o.shade_tag.word(), class_word);
    let status = o.status_tag.phrase().to_string();
    let position = ViewerThird::of(at_t0.cx).phrase().to_string();
    let distance = viewer_distance_tag(&at_t0).to_string();
    let others = others_tag(objects, referred);
    let others_phrase = others.phrase();
    let expression =
        format!("the {appearance} {status}, {position}, {distance}, {others_phrase}.");
    let spans = AttributeSpans {
        appearance: vec![appearance],
        status: vec![status],
        relation_to_viewer: vec![position, distance],
        relation_to_others: vec![others_phrase],
    };
    (expression, spans, others)
}

/// Generate one scene with `num_objects` objects. The referred object is
/// verified unique under the template semantics by an exhaustive check over
/// the other objects; ambiguous scenes are resampled up to a bounded number
/// of retries.
pub fn gen_scene(
    rng_seed: u64,
    num_objects: usize,
    geometry: &SceneGeometry,
) -> Result<GeneratedSample> {
    if !(1..=6).contains(&num_objects) {
        return Err(Error::InvalidArgument(format!(
            "num_objects {num_objects} outside 1..=6"
        )));
    }
    if geometry.t_a >= geometry.t_b {
        return Err(Error::InvalidWindow("scene window is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    'scenes: for _ in 0..MAX_SCENE_RETRIES {
        // sample non-overlapping objects
        let mut objects: Vec<MovingObject> = Vec::with_capacity(num_objects);
        let mut object_tries = 0;
        while objects.len() < num_objects {
            object_tries += 1;
            if object_tries > 200 {
                continue 'scenes;
            }
            let Some(candidate) = sample_object(&mut rng) else { continue };
            let candidate_t0 = candidate.box_at(0.5);
            let overlapping = objects
                .iter()
                .any(|o| iou(&o.box_at(0.5), &candidate_t0) > 0.3);
            if !overlapping {
                objects.push(candidate);
            }
        }

        let referred_index = rng.random_range(0..num_objects);
        let (expression, spans, others) = build_expression(&objects, referred_index, &mut rng);

        // uniqueness: no other object satisfies all four attribute cues
        let referred_tags = tags_against(&objects, referred_index, &others);
        let ambiguous = (0..num_objects).any(|j| {
            j != referred_index && tags_against(&objects, j, &others) == referred_tags
        });
        if ambiguous {
            continue 'scenes;
        }

        let mut events = Vec::new();
        for object in &objects {
            emit_events(object, geometry, &mut events);
        }
        let window =
            EventWindow::new(events, geometry.t_a, geometry.t_b, geometry.width, geometry.height)?;
        let frame = render_frame(&objects, geometry);
        let gt_box = objects[referred_index].box_at(0.5);
        return Ok(GeneratedSample {
            window,
            frame,
            geometry: *geometry,
            objects,
            referred_index,
            expression,
            spans,
            gt_box,
        });
    }
    Err(Error::GenerationFailure(format!(
        "no unambiguous scene found in {MAX_SCENE_RETRIES} retries (seed {rng_seed})"
    )))
}

/// FNV-1a, used for the deterministic train/val split.
fn fnv1a(parts: &[u64]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for part in parts {
        for byte in part.to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    hash
}

/// Deterministic 80/20 split by index hash: indices are ranked by
/// `fnv1a(seed, index)` and the first 80% (floor) become training samples.
pub fn split_indices(data_seed: u64, num_scenes: usize) -> (Vec<usize>, Vec<usize>) {
    let mut ranked: Vec<(u64, usize)> =
        (0..num_scenes).map(|i| (fnv1a(&[data_seed, i as u64]), i)).collect();
    ranked.sort_unstable();
    let train_count = num_scenes * 4 / 5;
    let mut train: Vec<usize> = ranked[..train_count].iter().map(|&(_, i)| i).collect();
    let mut val: Vec<usize> = ranked[train_count..].iter().map(|&(_, i)| i).collect();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Generate `num_scenes` scenes with per-scene derived seeds. Scene `i` uses
/// seed `data_seed XOR fnv1a(i)` so generation order is irrelevant.
pub fn gen_scenes(
    data_seed: u64,
    num_scenes: usize,
    objects_range: (usize, usize),
    geometry: &SceneGeometry,
) -> Result<Vec<GeneratedSample>> {
    if num_scenes == 0 {
        return Err(Error::InvalidArgument("need at least one scene".into()));
    }
    let (lo, hi) = objects_range;
    if lo < 1 || hi > 6 || lo > hi {
        return Err(Error::InvalidArgument(format!(
            "objects range {lo}..={hi} outside 1..=6"
        )));
    }
    let mut samples = Vec::with_capacity(num_scenes);
    for index in 0..num_scenes {
        let scene_seed = data_seed ^ fnv1a(&[index as u64]);
        let num_objects = if lo == hi {
            lo
        } else {
            // derived deterministically from the scene seed, not a shared rng
            lo + (fnv1a(&[scene_seed, 7]) as usize) % (hi - lo + 1)
        };
        samples.push(gen_scene(scene_seed, num_objects, geometry)?);
    }
    Ok(samples)
}

/// Generate a corpus and persist it in the dataset container format under
/// `out_path`, split 80/20 into train/val by index hash. Returns the written
/// manifest.
pub fn gen_corpus(
    data_seed: u64,
    num_scenes: usize,
    objects_range: (usize, usize),
    geometry: &SceneGeometry,
    out_path: &std::path::Path,
) -> Result<crate::dataset::CorpusManifest> {
    let samples = gen_scenes(data_seed, num_scenes, objects_range, geometry)?;
    let (train, _val) = split_indices(data_seed, num_scenes);
    let train_set: std::collections::HashSet<usize> = train.iter().copied().collect();
    let splits: Vec<crate::dataset::Split> = (0..num_scenes)
        .map(|i| {
            if train_set.contains(&i) {
                crate::dataset::Split::Train
            } else {
                crate::dataset::Split::Val
            }
        })
        .collect();
    let manifest = crate::dataset::CorpusManifest {
        version: crate::dataset::MANIFEST_VERSION,
        data_seed,
        num_scenes,
        objects_min: objects_range.0,
        objects_max: objects_range.1,
        width: geometry.width,
        height: geometry.height,
        bins: geometry.bins,
        t_a: geometry.t_a,
        t_b: geometry.t_b,
        train_count: train.len(),
        val_count: num_scenes - train.len(),
    };
    crate::dataset::write_corpus(out_path, geometry, &samples, &splits, &manifest)?;
    Ok(manifest)
}
