//! Person datasets and Siamese pair batches.
//!
//! Images are stored `(H, W, 3)` in `[-1, 1]`; batches are assembled as
//! `(N, 3, H, W)` tensors. Two sources feed the same [`Dataset`] type: a
//! procedural stick-figure renderer and a reID image directory
//! (`<id>_c<cam>...` file names plus a landmark CSV). The synthetic writer
//! emits exactly that directory format, so both paths share one loader.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{read_landmarks, render_pose_map, sample_bandwidth, write_landmarks, BandwidthRange, Keypoint, LandmarkRecord, PoseLandmarks, NUM_JOINTS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    /// Subdirectory name in the standard layout.
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "bounding_box_train",
            Split::Query => "query",
            Split::Gallery => "bounding_box_test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonSample {
    /// File stem; also the landmark-file key.
    pub name: String,
    /// `(H, W, 3)` in `[-1, 1]`.
    pub image: Tensor<f32>,
    pub identity: usize,
    pub camera: usize,
    pub landmarks: Option<PoseLandmarks>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<PersonSample>,
    /// Files skipped because their names did not parse.
    pub skipped: usize,
}

impl Dataset {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, samples: Vec::new(), skipped: 0 }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sorted distinct identity labels.
    pub fn identities(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.samples.iter().map(|s| s.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn split(&self, split: Split) -> Dataset {
        Dataset { samples: self.samples.iter().filter(|s| s.split == split).cloned().collect(), ..self.clone_empty() }
    }

    /// Same samples with every landmark removed.
    pub fn without_landmarks(&self) -> Dataset {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.landmarks = None;
        }
        out
    }

    pub fn merge(mut self, other: Dataset) -> Result<Dataset> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::InvalidArgument("cannot merge datasets of different image sizes".into()));
        }
        self.samples.extend(other.samples);
        self.skipped += other.skipped;
        Ok(self)
    }

    fn clone_empty(&self) -> Dataset {
        Dataset { height: self.height, width: self.width, samples: Vec::new(), skipped: self.skipped }
    }

    /// `(N, 3, H, W)` batch of the given samples.
    pub fn images<S: Scalar>(&self, index: &[usize]) -> Tensor<S> {
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(index.len() * 3 * h * w);
        for &i in index {
            let img = self.samples[i].image.data();
            for c in 0..3 {
                data.extend((0..h * w).map(|p| S::from_f64_lossy(img[p * 3 + c] as f64)));
            }
        }
        Tensor::from_vec(&[index.len(), 3, h, w], data).expect("image batch shape")
    }
}

fn u8_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

fn unit_to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

// ---------------------------------------------------------------------------
// Synthetic stick figures

/// Which pose distribution images are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseFamily {
    /// Full range of facings and limb angles.
    Any,
    /// Facing front or back, limbs close to the body.
    Neutral,
    /// Profile or front, arms raised, wide stance.
    Active,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub n_cameras: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Label of the first identity; held-out sets use fresh labels.
    pub first_identity: usize,
    /// Body height as a fraction of the image height.
    pub body_scale: [f64; 2],
    /// Background channel values, light so figures stand out.
    pub background: [u8; 2],
    /// Per-image additive jitter on clothing colors.
    pub color_jitter: u8,
    /// Query/gallery split instead of a training set: the first
    /// `queries_per_identity` images of each identity become neutral-pose
    /// queries, the rest active-pose gallery entries.
    pub query_gallery: bool,
    pub queries_per_identity: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_identities: 8,
            images_per_identity: 10,
            n_cameras: 4,
            height: 64,
            width: 32,
            seed: 7,
            first_identity: 0,
            body_scale: [0.8, 0.95],
            background: [205, 245],
            color_jitter: 12,
            query_gallery: false,
            queries_per_identity: 2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.n_identities == 0 || self.images_per_identity == 0 || self.n_cameras == 0 {
            return bad("identity, image and camera counts must be >= 1");
        }
        if self.height < 16 || self.width < 8 {
            return bad("image must be at least 16x8");
        }
        if !(self.body_scale[0] > 0.0 && self.body_scale[0] <= self.body_scale[1] && self.body_scale[1] <= 1.0) {
            return bad("body_scale must satisfy 0 < lo <= hi <= 1");
        }
        if self.background[0] > self.background[1] {
            return bad("background range is empty");
        }
        if self.query_gallery && (self.queries_per_identity == 0 || self.queries_per_identity >= self.images_per_identity) {
            return bad("query/gallery split needs 1 <= queries_per_identity < images_per_identity");
        }
        Ok(())
    }
}

type Rgb = [u8; 3];

const TORSO_COLORS: [Rgb; 8] = [
    [200, 30, 30],
    [30, 60, 190],
    [30, 150, 50],
    [230, 180, 20],
    [130, 40, 160],
    [240, 120, 20],
    [20, 160, 170],
    [60, 60, 60],
];
const LEG_COLORS: [Rgb; 5] = [[35, 35, 80], [90, 60, 30], [50, 50, 50], [120, 120, 130], [20, 90, 60]];
const SKIN_COLORS: [Rgb; 3] = [[235, 190, 160], [190, 140, 100], [120, 80, 55]];
const HAIR_COLORS: [Rgb; 4] = [[20, 15, 10], [110, 70, 30], [220, 190, 110], [140, 140, 140]];

/// Identity-determined appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct Appearance {
    pub torso: Rgb,
    pub legs: Rgb,
    pub skin: Rgb,
    pub hair: Rgb,
    /// Horizontal band across the chest.
    pub stripe: Option<Rgb>,
    pub scale: f64,
    /// Shoulder and hip width multiplier.
    pub build: f64,
}

impl Appearance {
    pub fn for_identity(spec: &SynthSpec, identity: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(identity as u64 + 1);
        let torso = TORSO_COLORS[rng.gen_range(0..TORSO_COLORS.len())];
        let legs = LEG_COLORS[rng.gen_range(0..LEG_COLORS.len())];
        let skin = SKIN_COLORS[rng.gen_range(0..SKIN_COLORS.len())];
        let hair = HAIR_COLORS[rng.gen_range(0..HAIR_COLORS.len())];
        let stripe = rng.gen_bool(0.5).then(|| {
            let mut c = TORSO_COLORS[rng.gen_range(0..TORSO_COLORS.len())];
            if c == torso {
                c = [255 - torso[0], 255 - torso[1], 255 - torso[2]];
            }
            c
        });
        let [lo, hi] = spec.body_scale;
        let scale = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        let build = rng.gen_range(0.8..1.2);
        Self { torso, legs, skin, hair, stripe, scale, build }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Facing {
    Front,
    Back,
    /// Facing image left.
    Left,
    /// Facing image right.
    Right,
}

/// Per-image articulation; angles in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Articulation {
    pub facing: Facing,
    /// Upper-arm angle away from hanging straight down, image-left then image-right.
    pub arm: [f64; 2],
    /// Additional forearm rotation relative to the upper arm.
    pub elbow: [f64; 2],
    /// Thigh angle away from vertical.
    pub hip: [f64; 2],
    /// Knee bend pulling the shin back toward the midline.
    pub knee: [f64; 2],
    /// Horizontal offset of the figure in pixels.
    pub shift: f64,
    /// Vertical offset of the figure in pixels.
    pub lift: f64,
}

impl Articulation {
    pub fn sample<R: Rng + ?Sized>(family: PoseFamily, width: usize, rng: &mut R) -> Self {
        let deg = PI / 180.0;
        let mut range = |lo: f64, hi: f64| rng.gen_range(lo..=hi) * deg;
        let (arm, elbow, hip, knee) = match family {
            PoseFamily::Any => ((0.0, 130.0), (0.0, 100.0), (-5.0, 30.0), (0.0, 40.0)),
            PoseFamily::Neutral => ((0.0, 20.0), (0.0, 20.0), (0.0, 8.0), (0.0, 8.0)),
            PoseFamily::Active => ((60.0, 130.0), (30.0, 100.0), (15.0, 30.0), (15.0, 40.0)),
        };
        let a = [range(arm.0, arm.1), range(arm.0, arm.1)];
        let e = [range(elbow.0, elbow.1), range(elbow.0, elbow.1)];
        let h = [range(hip.0, hip.1), range(hip.0, hip.1)];
        let k = [range(knee.0, knee.1), range(knee.0, knee.1)];
        let facing = match family {
            PoseFamily::Any => [Facing::Front, Facing::Front, Facing::Back, Facing::Left, Facing::Right][rng.gen_range(0..5)],
            PoseFamily::Neutral => [Facing::Front, Facing::Back][rng.gen_range(0..2)],
            PoseFamily::Active => [Facing::Front, Facing::Left, Facing::Right][rng.gen_range(0..3)],
        };
        let span = width as f64 / 16.0;
        Self { facing, arm: a, elbow: e, hip: h, knee: k, shift: rng.gen_range(-span..=span), lift: rng.gen_range(-span..=span) }
    }
}

/// Joint coordinates `(x, y)` and visibility for a figure in an `h x w` frame.
pub fn skeleton(app: &Appearance, pose: &Articulation, h: usize, w: usize) -> [(f64, f64, bool); NUM_JOINTS] {
    let u = app.scale * h as f64 * 0.94;
    let top = (h as f64 - u) / 2.0 + pose.lift;
    let cx = w as f64 / 2.0 + pose.shift;
    let y0 = top + 0.18 * u;
    let profile = matches!(pose.facing, Facing::Left | Facing::Right);
    let (sw, hw) = if profile { (0.03 * u, 0.025 * u) } else { (0.10 * u * app.build, 0.06 * u * app.build) };
    let mut j = [(0.0, 0.0, true); NUM_JOINTS];
    j[1] = (cx, y0, true);
    // side = -1 is image left; the person's right side is image left when facing front
    let right_side = if pose.facing == Facing::Back { 1.0 } else { -1.0 };
    let sides = [(right_side, 2usize, 3usize, 4usize, 8usize, 9usize, 10usize), (-right_side, 5, 6, 7, 11, 12, 13)];
    for (sign, sh, el, wr, hp, kn, an) in sides {
        let k = if sign < 0.0 { 0 } else { 1 };
        let s = (cx + sign * sw, y0 + 0.01 * u);
        let a = pose.arm[k];
        let e = (s.0 + sign * 0.16 * u * a.sin(), s.1 + 0.16 * u * a.cos());
        let a2 = a + pose.elbow[k];
        let wrst = (e.0 + sign * 0.15 * u * a2.sin(), e.1 + 0.15 * u * a2.cos());
        let hpt = (cx + sign * hw, y0 + 0.30 * u);
        let t = pose.hip[k];
        let knee = (hpt.0 + sign * 0.25 * u * t.sin(), hpt.1 + 0.25 * u * t.cos());
        let t2 = t - pose.knee[k];
        let ank = (knee.0 + sign * 0.24 * u * t2.sin(), knee.1 + 0.24 * u * t2.cos());
        j[sh] = (s.0, s.1, true);
        j[el] = (e.0, e.1, true);
        j[wr] = (wrst.0, wrst.1, true);
        j[hp] = (hpt.0, hpt.1, true);
        j[kn] = (knee.0, knee.1, true);
        j[an] = (ank.0, ank.1, true);
    }
    let head_y = y0 - 0.09 * u;
    let face = match pose.facing {
        Facing::Left => -1.0,
        Facing::Right => 1.0,
        _ => 0.0,
    };
    j[0] = (cx + face * 0.05 * u, head_y + 0.01 * u, pose.facing != Facing::Back);
    // eyes and ears: 14 right eye, 15 left eye, 16 right ear, 17 left ear
    for (eye, ear, sign) in [(14, 16, right_side), (15, 17, -right_side)] {
        if profile {
            // turning to face image right shows the person's right side
            let near = (eye == 14) == (pose.facing == Facing::Right);
            j[eye] = (cx + face * 0.035 * u, head_y - 0.015 * u, near);
            j[ear] = (cx - face * 0.01 * u, head_y, near);
        } else {
            j[eye] = (cx + sign * 0.025 * u, head_y - 0.015 * u, pose.facing == Facing::Front);
            j[ear] = (cx + sign * 0.055 * u, head_y, true);
        }
    }
    j
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            self.px[y as usize * self.w + x as usize] = c;
        }
    }

    fn fill<F: Fn(f64, f64) -> bool>(&mut self, bbox: (f64, f64, f64, f64), c: Rgb, inside: F) {
        let (x0, y0, x1, y1) = bbox;
        for y in y0.floor().max(0.0) as i64..=y1.ceil().min(self.h as f64 - 1.0) as i64 {
            for x in x0.floor().max(0.0) as i64..=x1.ceil().min(self.w as f64 - 1.0) as i64 {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.set(x, y, c);
                }
            }
        }
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), r: f64, c: Rgb) {
        let bbox = (a.0.min(b.0) - r, a.1.min(b.1) - r, a.0.max(b.0) + r, a.1.max(b.1) + r);
        self.fill(bbox, c, |x, y| point_segment_dist(x, y, a, b) <= r);
        // joint centers are always painted so landmarks land on the figure
        for p in [a, b] {
            self.set(p.0.floor() as i64, p.1.floor() as i64, c);
        }
    }

    fn disc(&mut self, center: (f64, f64), r: f64, c: Rgb, upper_only: bool) {
        let bbox = (center.0 - r, center.1 - r, center.0 + r, center.1 + r);
        self.fill(bbox, c, |x, y| (x - center.0).powi(2) + (y - center.1).powi(2) <= r * r && (!upper_only || y <= center.1));
    }

    fn quad(&mut self, pts: [(f64, f64); 4], c: Rgb) {
        let xs = pts.map(|p| p.0);
        let ys = pts.map(|p| p.1);
        let bbox = (
            xs.iter().copied().fold(f64::INFINITY, f64::min),
            ys.iter().copied().fold(f64::INFINITY, f64::min),
            xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        );
        self.fill(bbox, c, |x, y| inside_convex(&pts, x, y));
    }
}

fn point_segment_dist(x: f64, y: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0) };
    ((x - a.0 - t * dx).powi(2) + (y - a.1 - t * dy).powi(2)).sqrt()
}

fn inside_convex(pts: &[(f64, f64); 4], x: f64, y: f64) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let (a, b) = (pts[i], pts[(i + 1) % 4]);
        let cross = (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

fn jitter<R: Rng + ?Sized>(c: Rgb, amount: u8, rng: &mut R) -> Rgb {
    if amount == 0 {
        return c;
    }
    let a = amount as i32;
    c.map(|v| (v as i32 + rng.gen_range(-a..=a)).clamp(0, 255) as u8)
}

/// Renders one figure; returns RGB pixels (row-major) and its joints.
pub fn render_figure<R: Rng + ?Sized>(
    spec: &SynthSpec,
    app: &Appearance,
    pose: &Articulation,
    camera: usize,
    rng: &mut R,
) -> (Vec<Rgb>, [(f64, f64, bool); NUM_JOINTS]) {
    let (h, w) = (spec.height, spec.width);
    let j = skeleton(app, pose, h, w);
    let [blo, bhi] = spec.background;
    let top: Rgb = [0; 3].map(|_| rng.gen_range(blo..=bhi));
    let bottom: Rgb = top.map(|v| v.saturating_sub(rng.gen_range(0..=30)));
    let mut canvas = Canvas { h, w, px: vec![[0; 3]; h * w] };
    for y in 0..h {
        let t = y as f64 / (h - 1).max(1) as f64;
        let row: Rgb = [0, 1, 2].map(|c| (top[c] as f64 * (1.0 - t) + bottom[c] as f64 * t).round() as u8);
        canvas.px[y * w..(y + 1) * w].fill(row);
    }
    let u = app.scale * h as f64 * 0.94;
    let r = (0.035 * u * app.build).max(1.0);
    let torso = jitter(app.torso, spec.color_jitter, rng);
    let legs = jitter(app.legs, spec.color_jitter, rng);
    let pt = |k: usize| (j[k].0, j[k].1);

    for (hp, kn, an) in [(8, 9, 10), (11, 12, 13)] {
        canvas.segment(pt(hp), pt(kn), r * 1.2, legs);
        canvas.segment(pt(kn), pt(an), r * 1.1, legs);
        canvas.disc(pt(an), r * 1.1, [30, 25, 20], false);
        canvas.set(j[an].0.floor() as i64, j[an].1.floor() as i64, legs);
    }
    canvas.quad([pt(2), pt(5), pt(11), pt(8)], torso);
    canvas.segment(pt(2), pt(8), r, torso);
    canvas.segment(pt(5), pt(11), r, torso);
    canvas.segment(pt(2), pt(5), r, torso);
    canvas.segment(pt(1), ((j[8].0 + j[11].0) / 2.0, j[8].1), r, torso);
    if let Some(stripe) = app.stripe {
        let y = j[1].1 + 0.12 * u;
        let half = (j[2].0 - j[5].0).abs() / 2.0 + r;
        canvas.segment((j[1].0 - half + r, y), (j[1].0 + half - r, y), (0.025 * u).max(0.8), stripe);
    }
    for (sh, el, wr) in [(2, 3, 4), (5, 6, 7)] {
        canvas.segment(pt(sh), pt(el), r, torso);
        canvas.segment(pt(el), pt(wr), r * 0.9, app.skin);
    }
    let head = (j[1].0 + (j[0].0 - j[1].0) * 0.4, j[1].1 - 0.09 * u);
    let hr = 0.075 * u;
    canvas.segment(pt(1), head, r * 0.8, app.skin);
    canvas.disc(head, hr, app.skin, false);
    canvas.disc(head, hr, app.hair, pose.facing != Facing::Back);
    for k in [0, 14, 15, 16, 17] {
        if j[k].2 && (j[k].0 - head.0).hypot(j[k].1 - head.1) > hr {
            canvas.segment(head, pt(k), r * 0.6, app.skin);
        }
    }
    // cameras differ in exposure
    let gain = 1.0 + 0.06 * ((camera % 3) as f64 - 1.0);
    let px = canvas
        .px
        .into_iter()
        .map(|p| p.map(|v| (v as f64 * gain + rng.gen_range(-3.0..=3.0)).round().clamp(0.0, 255.0) as u8))
        .collect();
    (px, j)
}

/// Renders a synthetic dataset; deterministic in `spec.seed`.
pub fn generate_synthetic_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut ds = Dataset::empty(h, w);
    for i in 0..spec.n_identities {
        let identity = spec.first_identity + i;
        let app = Appearance::for_identity(spec, identity);
        for k in 0..spec.images_per_identity {
            let global = i * spec.images_per_identity + k;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream((1u64 << 32) + (identity * spec.images_per_identity + k) as u64);
            let (split, family) = match (spec.query_gallery, k < spec.queries_per_identity) {
                (false, _) => (Split::Train, PoseFamily::Any),
                (true, true) => (Split::Query, PoseFamily::Neutral),
                (true, false) => (Split::Gallery, PoseFamily::Active),
            };
            let camera = global % spec.n_cameras + 1;
            let pose = Articulation::sample(family, w, &mut rng);
            let (px, joints) = render_figure(spec, &app, &pose, camera, &mut rng);
            let points = joints.map(|(x, y, v)| if v { Keypoint::new(x, y) } else { Keypoint::HIDDEN });
            let image = Tensor::from_vec(&[h, w, 3], px.iter().flatten().map(|&v| u8_to_unit(v)).collect())?;
            ds.samples.push(PersonSample {
                name: format!("{identity:04}_c{camera}s1_{global:06}_01"),
                image,
                identity,
                camera,
                landmarks: Some(PoseLandmarks::new(points, h, w)?),
                split,
            });
        }
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Directory format

pub const LANDMARK_FILE: &str = "landmarks.csv";

/// Identity from the leading 4-digit field and camera from the `c<digits>` field.
pub fn parse_reid_name(name: &str) -> Option<(usize, usize)> {
    let stem = Path::new(name).file_stem()?.to_str()?;
    let bytes = stem.as_bytes();
    if bytes.len() < 5 || !bytes[..4].iter().all(u8::is_ascii_digit) || bytes[4] != b'_' {
        return None;
    }
    let identity = stem[..4].parse().ok()?;
    let cam = stem[5..].strip_prefix('c')?;
    let digits: String = cam.chars().take_while(char::is_ascii_digit).collect();
    Some((identity, digits.parse().ok()?))
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("jpg" | "jpeg" | "png")
    )
}

/// Loads every image under `dir` (non-recursive), resized to `height x width`.
///
/// Landmark records are matched by file stem or file name and rescaled with
/// the image. Images without a record keep `landmarks: None`.
pub fn load_reid_directory(dir: &Path, landmark_file: Option<&Path>, height: usize, width: usize, split: Split) -> Result<Dataset> {
    let records: HashMap<String, LandmarkRecord> = match landmark_file {
        Some(p) => read_landmarks(BufReader::new(fs::File::open(p)?))?.into_iter().map(|r| (r.image_id.clone(), r)).collect(),
        None => HashMap::new(),
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.is_file() && is_image(p));
    paths.sort();
    let mut ds = Dataset::empty(height, width);
    for path in paths {
        let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let Some((identity, camera)) = parse_reid_name(&file_name) else {
            log::warn!("skipping {}: name does not match <id>_c<cam>", path.display());
            ds.skipped += 1;
            continue;
        };
        let img = image::open(&path).map_err(|source| Error::Image { path: path.clone(), source })?.to_rgb8();
        let (ow, oh) = img.dimensions();
        let img = if (ow as usize, oh as usize) == (width, height) {
            img
        } else {
            image::imageops::resize(&img, width as u32, height as u32, image::imageops::FilterType::Triangle)
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let landmarks = match records.get(&stem).or_else(|| records.get(&file_name)) {
            Some(r) => Some(PoseLandmarks::new(r.points, oh as usize, ow as usize)?.rescaled(height, width)?),
            None => None,
        };
        ds.samples.push(PersonSample {
            name: stem,
            image: Tensor::from_vec(&[height, width, 3], img.into_raw().into_iter().map(u8_to_unit).collect())?,
            identity,
            camera,
            landmarks,
            split,
        });
    }
    Ok(ds)
}

/// Loads the standard layout under `root`: `bounding_box_train/`, `query/`
/// and `bounding_box_test/` (each optional) plus `landmarks.csv` if present.
pub fn load_reid_root(root: &Path, height: usize, width: usize) -> Result<Dataset> {
    let lm = root.join(LANDMARK_FILE);
    let lm = lm.is_file().then_some(lm);
    let mut ds = Dataset::empty(height, width);
    for split in [Split::Train, Split::Query, Split::Gallery] {
        let dir = root.join(split.dir_name());
        if dir.is_dir() {
            ds = ds.merge(load_reid_directory(&dir, lm.as_deref(), height, width, split)?)?;
        }
    }
    Ok(ds)
}

/// Writes PNGs into split subdirectories and all landmarks into one CSV.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    let mut records = Vec::new();
    for s in &ds.samples {
        let dir = root.join(s.split.dir_name());
        fs::create_dir_all(&dir)?;
        let raw: Vec<u8> = s.image.data().iter().map(|&v| unit_to_u8(v)).collect();
        let img = image::RgbImage::from_raw(ds.width as u32, ds.height as u32, raw)
            .ok_or_else(|| Error::InvalidArgument(format!("{}: image buffer does not match {}x{}", s.name, ds.height, ds.width)))?;
        let path = dir.join(format!("{}.png", s.name));
        img.save(&path).map_err(|source| Error::Image { path, source })?;
        if let Some(lm) = &s.landmarks {
            records.push(LandmarkRecord { image_id: s.name.clone(), points: *lm.points() });
        }
    }
    fs::create_dir_all(root)?;
    write_landmarks(BufWriter::new(fs::File::create(root.join(LANDMARK_FILE))?), &records)
}

// ---------------------------------------------------------------------------
// Pair batches

/// Sample indices of one Siamese batch; positive pairs come first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairIndices {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
    pub same: Vec<bool>,
    /// Target-pose image per pair; `None` when targets were not requested.
    pub target: Option<Vec<usize>>,
}

/// Tensors of one batch.
#[derive(Clone, Debug)]
pub struct PairBatch<S> {
    pub indices: PairIndices,
    pub x1: Tensor<S>,
    pub x2: Tensor<S>,
    /// `(N, 18, H, W)` target pose maps, shared by both branches.
    pub target_pose: Tensor<S>,
    pub bandwidths: Vec<f64>,
    /// Ground truth y'_1 `(N, 3, H, W)`: the target-pose image.
    pub truth: Tensor<S>,
    /// Whether y'_2 exists; when it does it equals `truth`.
    pub has_truth_2: Vec<bool>,
    /// `(N, d_z)` standard-normal noise, shared by both branches of a pair.
    pub noise: Tensor<S>,
}

impl<S: Scalar> PairBatch<S> {
    pub fn len(&self) -> usize {
        self.indices.same.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positives(&self) -> usize {
        self.indices.same.iter().filter(|&&s| s).count()
    }
}

/// Draws pairs from the training split.
#[derive(Clone, Debug)]
pub struct PairSampler {
    by_identity: BTreeMap<usize, Vec<usize>>,
    with_targets: bool,
}

impl PairSampler {
    /// With `with_targets`, only samples carrying landmarks are eligible and
    /// every pair gets a target-pose image.
    pub fn new(ds: &Dataset, with_targets: bool) -> Self {
        let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in ds.samples.iter().enumerate() {
            if s.split == Split::Train && (!with_targets || s.landmarks.is_some()) {
                by_identity.entry(s.identity).or_default().push(i);
            }
        }
        Self { by_identity, with_targets }
    }

    fn ids_with(&self, min: usize) -> Vec<usize> {
        self.by_identity.iter().filter(|(_, v)| v.len() >= min).map(|(&k, _)| k).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_pairs: usize, positive_pairs: usize, rng: &mut R) -> Result<PairIndices> {
        if positive_pairs > batch_pairs {
            return Err(Error::Config(format!("{positive_pairs} positive pairs exceed batch size {batch_pairs}")));
        }
        let extra = usize::from(self.with_targets);
        let pos_ids = self.ids_with(2 + extra);
        let neg_ids = self.ids_with(1 + extra);
        let all_ids: Vec<usize> = self.by_identity.keys().copied().collect();
        if positive_pairs > 0 && pos_ids.is_empty() {
            return Err(Error::Config(format!("positive pairs need an identity with at least {} images", 2 + extra)));
        }
        if positive_pairs < batch_pairs && (all_ids.len() < 2 || neg_ids.is_empty()) {
            return Err(Error::Config("negative pairs need at least two identities".into()));
        }
        let mut out = PairIndices { first: vec![], second: vec![], same: vec![], target: self.with_targets.then(Vec::new) };
        for k in 0..batch_pairs {
            let positive = k < positive_pairs;
            let (a, b, t) = if positive {
                let imgs = &self.by_identity[&pos_ids[rng.gen_range(0..pos_ids.len())]];
                let pick = sample_index(rng, imgs.len(), 2 + extra);
                (imgs[pick.index(0)], imgs[pick.index(1)], self.with_targets.then(|| imgs[pick.index(2)]))
            } else {
                let id1 = neg_ids[rng.gen_range(0..neg_ids.len())];
                let mut id2 = all_ids[rng.gen_range(0..all_ids.len() - 1)];
                if id2 >= id1 {
                    id2 = all_ids[all_ids.iter().position(|&x| x == id2).unwrap() + 1];
                }
                let imgs1 = &self.by_identity[&id1];
                let pick = sample_index(rng, imgs1.len(), 1 + extra);
                let imgs2 = &self.by_identity[&id2];
                (imgs1[pick.index(0)], imgs2[rng.gen_range(0..imgs2.len())], self.with_targets.then(|| imgs1[pick.index(1)]))
            };
            out.first.push(a);
            out.second.push(b);
            out.same.push(positive);
            if let (Some(ts), Some(t)) = (out.target.as_mut(), t) {
                ts.push(t);
            }
        }
        Ok(out)
    }
}

/// Renders target poses (fresh bandwidth per pair) and draws shared noise.
pub fn assemble_batch<S: Scalar, R: Rng + ?Sized>(
    ds: &Dataset,
    indices: PairIndices,
    bandwidth: BandwidthRange,
    noise_dim: usize,
    rng: &mut R,
) -> Result<PairBatch<S>> {
    let target = indices.target.as_ref().ok_or_else(|| Error::InvalidArgument("pair indices carry no targets".into()))?;
    let (h, w) = (ds.height, ds.width);
    let n = target.len();
    let mut pose = Vec::with_capacity(n * NUM_JOINTS * h * w);
    let mut bandwidths = Vec::with_capacity(n);
    for &t in target {
        let lm = ds.samples[t].landmarks.as_ref().ok_or_else(|| Error::InvalidArgument(format!("sample {} has no landmarks", ds.samples[t].name)))?;
        let sigma = sample_bandwidth(rng, bandwidth)?;
        let map = render_pose_map::<S>(&lm.rescaled(h, w)?, sigma, h, w)?;
        pose.extend_from_slice(map.channels.data());
        bandwidths.push(sigma);
    }
    let noise = Tensor::randn(&[n, noise_dim], 1.0, rng);
    Ok(PairBatch {
        x1: ds.images(&indices.first),
        x2: ds.images(&indices.second),
        target_pose: Tensor::from_vec(&[n, NUM_JOINTS, h, w], pose)?,
        bandwidths,
        truth: ds.images(target),
        has_truth_2: indices.same.clone(),
        noise,
        indices,
    })
}

/// Samples a full GAN batch: pairs, target poses, ground truths and noise.
pub fn sample_pair_batch<S: Scalar, R: Rng + ?Sized>(
    ds: &Dataset,
    batch_pairs: usize,
    positive_pairs: usize,
    bandwidth: BandwidthRange,
    noise_dim: usize,
    rng: &mut R,
) -> Result<PairBatch<S>> {
    let idx = PairSampler::new(ds, true).sample(batch_pairs, positive_pairs, rng)?;
    assemble_batch(ds, idx, bandwidth, noise_dim, rng)
}
