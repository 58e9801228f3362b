//! Body landmarks and their Gaussian heatmap encoding.
//!
//! Joint order (18 entries):
//!
//! | idx | joint          | idx | joint       |
//! |-----|----------------|-----|-------------|
//! | 0   | nose           | 9   | right knee  |
//! | 1   | neck           | 10  | right ankle |
//! | 2   | right shoulder | 11  | left hip    |
//! | 3   | right elbow    | 12  | left knee   |
//! | 4   | right wrist    | 13  | left ankle  |
//! | 5   | left shoulder  | 14  | right eye   |
//! | 6   | left elbow     | 15  | left eye    |
//! | 7   | left wrist     | 16  | right ear   |
//! | 8   | right hip      | 17  | left ear    |

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_JOINTS: usize = 18;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_eye",
    "left_eye",
    "right_ear",
    "left_ear",
];

/// Joint pairs connected when drawing a skeleton.
pub const LIMBS: [(usize, usize); 17] = [
    (1, 2),
    (2, 3),
    (3, 4),
    (1, 5),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (1, 0),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint {
    pub const HIDDEN: Keypoint = Keypoint { x: -1.0, y: -1.0, visible: false };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y, visible: true }
    }
}

/// 18 keypoints in pixel coordinates of a `height x width` frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseLandmarks {
    points: [Keypoint; NUM_JOINTS],
    height: usize,
    width: usize,
}

impl PoseLandmarks {
    /// Builds landmarks; visible points outside the frame are marked hidden.
    pub fn new(mut points: [Keypoint; NUM_JOINTS], height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("landmark frame must be non-empty".into()));
        }
        for p in points.iter_mut() {
            if p.visible && !in_frame(p.x, p.y, height, width) {
                *p = Keypoint::HIDDEN;
            }
        }
        Ok(Self { points, height, width })
    }

    pub fn points(&self) -> &[Keypoint; NUM_JOINTS] {
        &self.points
    }

    pub fn frame(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn visible_count(&self) -> usize {
        self.points.iter().filter(|p| p.visible).count()
    }

    /// Maps coordinates into a `height x width` frame.
    pub fn rescaled(&self, height: usize, width: usize) -> Result<Self> {
        let sy = height as f64 / self.height as f64;
        let sx = width as f64 / self.width as f64;
        let mut pts = self.points;
        for p in pts.iter_mut().filter(|p| p.visible) {
            p.x *= sx;
            p.y *= sy;
        }
        Self::new(pts, height, width)
    }
}

fn in_frame(x: f64, y: f64, height: usize, width: usize) -> bool {
    x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64
}

/// 18-channel heatmap stack `(18, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseMap<S> {
    pub channels: Tensor<S>,
    pub bandwidth: f64,
}

impl<S: Scalar> PoseMap<S> {
    pub fn height(&self) -> usize {
        self.channels.dim(1)
    }

    pub fn width(&self) -> usize {
        self.channels.dim(2)
    }

    /// Value of `channel` at column `u`, row `v`.
    pub fn at(&self, channel: usize, u: usize, v: usize) -> S {
        let (h, w) = (self.height(), self.width());
        self.channels.data()[(channel * h + v) * w + u]
    }
}

/// Renders one amplitude-1 Gaussian per visible landmark.
///
/// Channel `k` at column `u`, row `v` is
/// `exp(-((u - x_k)^2 + (v - y_k)^2) / (2 sigma^2))`; hidden landmarks and
/// landmarks outside `out_h x out_w` give an all-zero channel. Coordinates are
/// used as given, so callers rescale landmarks to the output size first.
pub fn render_pose_map<S: Scalar>(landmarks: &PoseLandmarks, bandwidth: f64, out_h: usize, out_w: usize) -> Result<PoseMap<S>> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidArgument(format!("heatmap bandwidth must be positive, got {bandwidth}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("heatmap size must be positive".into()));
    }
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut data = vec![S::zero(); NUM_JOINTS * out_h * out_w];
    for (k, p) in landmarks.points.iter().enumerate() {
        if !p.visible || !in_frame(p.x, p.y, out_h, out_w) {
            continue;
        }
        // Separable: exp(-(dx^2+dy^2)/2s^2) = exp(-dx^2/2s^2) * exp(-dy^2/2s^2).
        let gx: Vec<f64> = (0..out_w).map(|u| (-(u as f64 - p.x).powi(2) * inv).exp()).collect();
        let gy: Vec<f64> = (0..out_h).map(|v| (-(v as f64 - p.y).powi(2) * inv).exp()).collect();
        let chan = &mut data[k * out_h * out_w..(k + 1) * out_h * out_w];
        for (v, row) in chan.chunks_mut(out_w).enumerate() {
            for (u, cell) in row.iter_mut().enumerate() {
                *cell = S::from_f64_lossy(gy[v] * gx[u]);
            }
        }
    }
    Ok(PoseMap { channels: Tensor::from_vec(&[NUM_JOINTS, out_h, out_w], data)?, bandwidth })
}

/// Closed interval the online augmentation draws heatmap bandwidths from.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BandwidthRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for BandwidthRange {
    fn default() -> Self {
        Self { lo: 4.0, hi: 6.0 }
    }
}

impl BandwidthRange {
    /// Range appropriate for images scaled by `factor` relative to 256x128.
    pub fn scaled(self, factor: f64) -> Self {
        Self { lo: self.lo * factor, hi: self.hi * factor }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo > 0.0) || !self.hi.is_finite() {
            return Err(Error::InvalidArgument(format!("bandwidth range must be positive, got [{}, {}]", self.lo, self.hi)));
        }
        if self.lo > self.hi {
            return Err(Error::InvalidArgument(format!("bandwidth range is empty: [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }
}

/// Draws a bandwidth uniformly from `range`.
pub fn sample_bandwidth<R: Rng + ?Sized>(rng: &mut R, range: BandwidthRange) -> Result<f64> {
    range.validate()?;
    if range.lo == range.hi {
        return Ok(range.lo);
    }
    Ok(rng.gen_range(range.lo..=range.hi))
}

/// One row of a landmark file.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkRecord {
    pub image_id: String,
    pub points: [Keypoint; NUM_JOINTS],
}

/// Reads landmark records: an image id followed by 18 `x, y, v` triples per
/// line, separated by commas and/or whitespace. `v > 0` means visible. Blank
/// lines, `#` comments and a header line starting with `image` are skipped.
pub fn read_landmarks<R: BufRead>(reader: R) -> Result<Vec<LandmarkRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || (lineno == 0 && trimmed.starts_with("image")) {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()).collect();
        let bad = |msg: String| Error::Parse {
            what: format!("landmark line {}", lineno + 1),
            msg: format!("{msg}; expected `<image id> x0 y0 v0 ... x17 y17 v17` (55 fields)"),
        };
        if fields.len() != 1 + 3 * NUM_JOINTS {
            return Err(bad(format!("found {} fields", fields.len())));
        }
        let mut points = [Keypoint::HIDDEN; NUM_JOINTS];
        for (k, p) in points.iter_mut().enumerate() {
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
            let (x, y, v) = (num(fields[1 + 3 * k])?, num(fields[2 + 3 * k])?, num(fields[3 + 3 * k])?);
            *p = if v > 0.0 { Keypoint::new(x, y) } else { Keypoint::HIDDEN };
        }
        out.push(LandmarkRecord { image_id: fields[0].to_string(), points });
    }
    Ok(out)
}

/// Writes landmark records in CSV form with a header line.
pub fn write_landmarks<W: Write>(mut writer: W, records: &[LandmarkRecord]) -> Result<()> {
    let mut header = String::from("image");
    for name in JOINT_NAMES {
        write!(header, ",{name}_x,{name}_y,{name}_v").unwrap();
    }
    writeln!(writer, "{header}")?;
    for r in records {
        let mut line = r.image_id.clone();
        for p in &r.points {
            if p.visible {
                write!(line, ",{},{},1", p.x, p.y).unwrap();
            } else {
                line.push_str(",-1,-1,0");
            }
        }
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn single(x: f64, y: f64, joint: usize) -> PoseLandmarks {
        let mut pts = [Keypoint::HIDDEN; NUM_JOINTS];
        pts[joint] = Keypoint::new(x, y);
        PoseLandmarks::new(pts, 32, 24).unwrap()
    }

    #[test]
    fn hidden_landmark_gives_zero_channel() {
        let lm = single(10.0, 10.0, 3);
        let map = render_pose_map::<f64>(&lm, 5.0, 32, 24).unwrap();
        for k in (0..NUM_JOINTS).filter(|&k| k != 3) {
            assert!(map.channels.data()[k * 32 * 24..(k + 1) * 32 * 24].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn peak_and_one_sigma_values() {
        let lm = single(10.0, 10.0, 0);
        let map = render_pose_map::<f64>(&lm, 5.0, 32, 24).unwrap();
        assert_eq!(map.at(0, 10, 10), 1.0);
        // distance 5 = sigma
        let expected = (-0.5f64).exp();
        assert!((map.at(0, 10, 15) - expected).abs() < 1e-12);
        assert!((map.at(0, 10, 15) - 0.60653).abs() < 1e-5);
        assert!((map.at(0, 15, 10) - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_arguments() {
        let lm = single(1.0, 1.0, 0);
        assert!(render_pose_map::<f32>(&lm, 0.0, 8, 8).is_err());
        assert!(render_pose_map::<f32>(&lm, -1.0, 8, 8).is_err());
        assert!(render_pose_map::<f32>(&lm, 1.0, 0, 8).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_bandwidth(&mut rng, BandwidthRange { lo: 6.0, hi: 4.0 }).is_err());
        assert!(sample_bandwidth(&mut rng, BandwidthRange { lo: 0.0, hi: 4.0 }).is_err());
    }

    #[test]
    fn bandwidth_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let s = sample_bandwidth(&mut rng, BandwidthRange::default()).unwrap();
            assert!((4.0..=6.0).contains(&s));
        }
        for _ in 0..10 {
            assert_eq!(sample_bandwidth(&mut rng, BandwidthRange { lo: 5.0, hi: 5.0 }).unwrap(), 5.0);
        }
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_bandwidth(&mut r, BandwidthRange::default()).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn out_of_frame_landmarks_become_hidden() {
        let mut pts = [Keypoint::HIDDEN; NUM_JOINTS];
        pts[0] = Keypoint::new(40.0, 3.0);
        pts[1] = Keypoint::new(3.0, 3.0);
        let lm = PoseLandmarks::new(pts, 32, 24).unwrap();
        assert!(!lm.points()[0].visible);
        assert!(lm.points()[1].visible);
        let half = lm.rescaled(16, 12).unwrap();
        assert_eq!(half.points()[1], Keypoint::new(1.5, 1.5));
    }

    #[test]
    fn landmark_file_round_trip() {
        let mut pts = [Keypoint::HIDDEN; NUM_JOINTS];
        pts[4] = Keypoint::new(12.5, 7.25);
        let recs = vec![LandmarkRecord { image_id: "0001_c1s1_000000_01.png".into(), points: pts }];
        let mut buf = Vec::new();
        write_landmarks(&mut buf, &recs).unwrap();
        assert_eq!(read_landmarks(&buf[..]).unwrap(), recs);
        // whitespace-delimited variant, no header
        let text = buf.split(|&b| b == b'\n').nth(1).unwrap();
        let ws = String::from_utf8(text.to_vec()).unwrap().replace(',', " ");
        assert_eq!(read_landmarks(ws.as_bytes()).unwrap(), recs);
        assert!(read_landmarks("img 1 2 3".as_bytes()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn heatmaps_bounded_and_monotone(x in 0.0f64..24.0, y in 0.0f64..32.0, sigma in 4.0f64..6.0) {
            let lm = single(x, y, 7);
            let map = render_pose_map::<f64>(&lm, sigma, 32, 24).unwrap();
            proptest::prop_assert!(map.channels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            // non-increasing in distance
            let mut cells: Vec<(f64, f64)> = (0..32).flat_map(|v| (0..24).map(move |u| (u, v)))
                .map(|(u, v)| (((u as f64 - x).powi(2) + (v as f64 - y).powi(2)), map.at(7, u, v)))
                .collect();
            cells.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for w in cells.windows(2) {
                proptest::prop_assert!(w[1].1 <= w[0].1 || w[1].0 == w[0].0);
            }
            // the peak sits at the nearest pixel
            let (ru, rv) = (x.round().min(23.0) as usize, y.round().min(31.0) as usize);
            let max = map.channels.data()[7 * 32 * 24..8 * 32 * 24].iter().copied().fold(0.0, f64::max);
            proptest::prop_assert_eq!(map.at(7, ru, rv), max);
            let again = render_pose_map::<f64>(&lm, sigma, 32, 24).unwrap();
            proptest::prop_assert_eq!(map, again);
        }

        #[test]
        fn bandwidths_agree_only_at_landmark(sigma_a in 4.0f64..5.0, sigma_b in 5.01f64..6.0) {
            let lm = single(10.0, 12.0, 2);
            let a = render_pose_map::<f64>(&lm, sigma_a, 32, 24).unwrap();
            let b = render_pose_map::<f64>(&lm, sigma_b, 32, 24).unwrap();
            proptest::prop_assert_eq!(a.at(2, 10, 12), 1.0);
            proptest::prop_assert_eq!(b.at(2, 10, 12), 1.0);
            proptest::prop_assert!(a.at(2, 11, 12) < b.at(2, 11, 12));
        }
    }
}
