//! Oriented FAST corners, rotated binary descriptors and Hamming matching.
//!
//! Detection follows the usual ORB recipe: FAST-9 segment test on the radius-3
//! Bresenham circle, Harris response for ranking and 3x3 non-maximum
//! suppression, and intensity-centroid orientation over a radius-15 disk.
//! Descriptors compare 5x5 box sums at 256 rotated point pairs taken from
//! [`TEST_PAIRS`].

use serde::Serialize;
use thiserror::Error;

use crate::image_io::{Frame, GrayImage};

/// Keypoints keep at least this many pixels to the image border.
pub const PATCH_RADIUS: usize = 15;
pub const DESCRIPTOR_BITS: usize = 256;

const HARRIS_K: f64 = 0.04;
const HARRIS_HALF_WINDOW: isize = 3;
const FAST_ARC: usize = 9;
const BLUR_HALF: isize = 2;

/// Bresenham circle of radius 3, clockwise from 12 o'clock.
const CIRCLE: [(isize, isize); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// Seed used to draw [`TEST_PAIRS`] with splitmix64.
pub const TEST_PAIR_SEED: u64 = 0x5EED_0B21;

/// BRIEF test pairs `[px, py, qx, qy]`, all inside the radius-12 disk.
///
/// Drawn with splitmix64 from [`TEST_PAIR_SEED`]: each coordinate is
/// `next() % 25 - 12`, points outside the disk are redrawn, and pairs with
/// `p == q` are discarded.
#[rustfmt::skip]
pub const TEST_PAIRS: [[i8; 4]; DESCRIPTOR_BITS] = [
    [5, -10, 3, 3], [3, -11, 10, -3], [4, -1, -4, -3], [8, 2, 10, 3],
    [0, -1, -7, 4], [-2, -7, 2, 0], [1, -2, -10, 2], [-7, 8, -2, 9],
    [11, 4, 7, -1], [2, -1, -7, 3], [-1, 1, 3, 1], [3, 8, 4, 9],
    [11, 2, 4, 5], [-7, -6, -11, 1], [2, -9, 1, 5], [-5, 9, -7, 2],
    [-8, 4, -5, -1], [-1, -5, 5, -5], [11, -4, 2, -2], [0, 10, 6, -7],
    [-8, -1, -7, -8], [9, -4, 0, -8], [-3, -7, 1, 6], [-4, 8, -8, 2],
    [3, -8, 10, 1], [-5, 2, -5, -10], [-7, 1, -10, 3], [8, -8, -1, 8],
    [-7, 3, -7, 6], [0, -9, 1, -1], [3, -2, 0, -8], [-1, 4, -9, 7],
    [3, -4, 2, -4], [-6, 6, 5, -8], [11, -4, -3, -11], [-6, 4, -6, -5],
    [-4, 11, -7, 9], [-10, 2, -2, 7], [8, -3, -7, 7], [8, -7, -3, -11],
    [-3, 2, 8, -5], [11, -1, 2, -11], [8, 8, 9, 3], [-1, -2, -7, 1],
    [4, -10, 6, 2], [8, -3, -5, 1], [-3, 1, 8, 1], [-9, -5, -5, 8],
    [8, 5, 0, -4], [6, -8, 9, 4], [-8, 6, 0, 0], [-10, 5, 6, 4],
    [-6, 4, 9, 4], [7, 7, 4, 1], [-5, -6, 3, 2], [-6, -7, -3, -4],
    [-2, -6, -11, 2], [-1, 9, -4, 9], [-3, 0, 0, -11], [-5, 2, 1, 10],
    [3, -5, 5, -10], [-6, 9, 7, -4], [-9, -1, -5, -5], [-1, 10, -8, -8],
    [7, -4, 7, 2], [-7, 5, 9, 6], [-1, 5, 5, -2], [8, 3, 1, 5],
    [-1, 6, -9, -7], [1, 2, 2, -10], [-11, -4, -1, -11], [8, -8, -7, 4],
    [9, 7, 6, -8], [1, 6, 4, -1], [0, 4, 4, 5], [8, -1, -3, -3],
    [-7, 0, 10, 3], [9, -6, -6, -3], [6, -3, 0, 7], [4, 2, 1, -9],
    [-4, -1, -4, -4], [1, -11, 3, 9], [-1, 0, -7, -4], [-4, 3, 0, 4],
    [8, 1, -11, 4], [8, 4, 7, 6], [-6, -8, 4, -2], [9, 5, -7, 9],
    [8, -7, -1, 1], [-10, -4, -9, -4], [-11, 3, 2, 2], [3, -3, -2, 9],
    [-4, -9, -1, 4], [5, -10, 1, 2], [11, 0, -7, -3], [5, -9, -2, -2],
    [4, -3, -1, 9], [6, -6, -7, -2], [-2, -8, 9, 5], [-5, 5, 7, -9],
    [-10, 1, 6, 10], [0, 2, -2, -1], [7, -6, 4, 7], [3, -7, -1, 11],
    [5, 4, -11, 0], [-2, 8, 0, 7], [2, -6, 8, -4], [1, 2, 11, -2],
    [6, 9, -7, 0], [-10, 2, 8, -8], [0, 12, -1, 9], [-2, -9, 6, -3],
    [4, 1, 7, -9], [-2, -1, 7, -5], [4, 3, -7, 7], [4, -3, -10, -5],
    [1, 8, 4, -5], [5, -10, 9, -6], [4, 1, 9, 7], [-7, 3, 3, -10],
    [5, 4, -3, -10], [-1, -8, -3, 3], [4, -8, 5, -5], [2, 10, -9, -5],
    [-6, -1, -3, 5], [10, -2, -1, -4], [-1, -7, -10, 2], [-5, 8, -7, 7],
    [-6, -7, -2, 11], [-8, 7, 10, 0], [1, 5, 8, -7], [2, 2, 3, -5],
    [-7, -9, 5, -5], [-3, 11, -8, 8], [-4, 2, 5, -3], [-4, 2, 0, -10],
    [-7, -2, 8, 1], [2, -1, 1, 4], [-5, -4, 0, 4], [-6, 8, -7, 7],
    [5, 10, 1, 2], [-2, 8, 1, 4], [-1, 1, 9, 4], [2, -8, -6, -8],
    [-1, -10, -1, -5], [-6, 1, 5, -3], [6, 0, 11, -1], [9, 6, 1, -5],
    [-4, 6, 11, 1], [-9, -7, 10, -2], [8, -5, -2, -8], [-11, 0, 2, 0],
    [0, 3, -2, -10], [3, -9, 5, -8], [-6, 6, 6, -4], [-7, 0, 4, 11],
    [7, 0, 4, -6], [0, 3, 3, -9], [-8, -3, -7, -9], [3, 1, -8, 2],
    [-3, 10, 0, 0], [-1, 5, 11, -4], [1, -8, 6, 10], [5, 0, -4, 1],
    [5, 9, 11, 4], [6, 7, -9, -3], [0, -4, -8, 1], [-2, 4, 2, 1],
    [4, 11, -6, -1], [4, -11, 12, 0], [1, -3, 8, 3], [-9, 3, 2, -2],
    [-9, 0, 0, -1], [-1, 11, 6, 7], [-4, -7, 1, 4], [-2, 11, -4, 2],
    [-7, 4, 1, 9], [-2, -7, 0, 2], [2, 10, -5, -9], [6, 0, -10, 5],
    [-8, -8, -2, -1], [1, -2, -2, 5], [-3, -8, 1, 10], [-3, -7, -1, 7],
    [4, -10, 0, -5], [-7, -8, -5, 5], [6, 4, 5, -2], [6, 0, -5, -3],
    [4, -7, -4, 9], [-11, -2, 8, -6], [4, -6, 7, 9], [6, 9, 5, 6],
    [-9, -4, -3, 6], [-5, 9, -4, 5], [-4, -7, -8, -4], [1, -1, 9, 2],
    [5, -2, -6, -3], [5, -1, 8, 8], [-3, -4, 7, 3], [-1, 2, -3, -1],
    [-3, -6, -6, -2], [-9, 6, 11, -4], [-5, -4, -2, -10], [-1, 4, 0, 6],
    [2, -4, 3, -8], [-2, 10, 4, -7], [1, 5, -10, -3], [10, -4, 10, -6],
    [6, 10, -10, 3], [-1, 4, 11, -4], [-5, -7, 8, -5], [-5, -6, -2, -7],
    [10, -6, 7, 8], [6, 2, 1, 4], [-2, -5, -1, 11], [-4, -3, -11, -4],
    [-7, -7, 8, -2], [-11, -3, 7, 0], [-3, 0, -2, 9], [8, -7, 0, 11],
    [-9, -4, 5, -9], [-4, -3, 3, -5], [-2, -5, 0, 4], [0, 3, 6, 2],
    [1, 5, -2, -7], [7, -9, 7, 2], [11, -2, 3, 11], [5, 6, -6, 9],
    [-8, 1, 5, -2], [-5, 0, 7, 6], [7, 7, -6, 8], [-11, -3, -3, 1],
    [5, -1, 8, -5], [1, -8, -9, -5], [1, -1, 2, 9], [1, -9, -7, -2],
    [-9, 1, -11, -3], [-6, 6, -5, 7], [4, -3, -5, -9], [0, -12, -8, 5],
    [-7, -5, 0, 0], [4, -11, -5, 10], [-9, 5, -10, -4], [-5, 7, 3, 3],
    [-11, 3, -4, 4], [8, -5, -10, 6], [7, -5, -5, 0], [-4, 5, 6, -4],
    [-5, -8, -9, 0], [-11, -1, 3, -2], [9, 6, 4, 6], [6, 8, -6, 10],
    [-2, -8, 2, -3], [-2, 11, -4, -11], [-9, -7, 6, -8], [4, 8, -4, -8],
];

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("keypoint at ({x:.1}, {y:.1}) is closer than {PATCH_RADIUS} px to the border of a {width}x{height} image")]
    BorderViolation {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("match ({index_a}, {index_b}) reuses a keypoint")]
    DuplicateIndex { index_a: usize, index_b: usize },
    #[error("match set frames must satisfy i < j, got ({0}, {1})")]
    FrameOrder(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub response: f64,
    /// Radians in `[-pi, pi)`.
    pub orientation: f64,
}

/// 256-bit binary descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct BinaryDescriptor(pub [u64; 4]);

impl BinaryDescriptor {
    pub fn bit(&self, k: usize) -> bool {
        (self.0[k / 64] >> (k % 64)) & 1 == 1
    }

    pub fn set_bit(&mut self, k: usize) {
        self.0[k / 64] |= 1 << (k % 64);
    }

    pub fn hamming(&self, other: &Self) -> u32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

/// A descriptor type usable by the nearest-neighbour matcher.
pub trait Descriptor {
    type Distance: Copy + PartialOrd;
    fn distance(&self, other: &Self) -> Self::Distance;
}

impl Descriptor for BinaryDescriptor {
    type Distance = u32;

    fn distance(&self, other: &Self) -> u32 {
        self.hamming(other)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Match {
    #[serde(rename = "ia")]
    pub index_a: usize,
    #[serde(rename = "ib")]
    pub index_b: usize,
    #[serde(rename = "dist")]
    pub distance: u32,
}

/// Matches between frames `frame_i < frame_j`, injective on both sides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchSet {
    frame_i: usize,
    frame_j: usize,
    matches: Vec<Match>,
}

impl MatchSet {
    pub fn new(frame_i: usize, frame_j: usize, matches: Vec<Match>) -> Result<Self, FeatureError> {
        if frame_i >= frame_j {
            return Err(FeatureError::FrameOrder(frame_i, frame_j));
        }
        let mut seen_a = std::collections::HashSet::new();
        let mut seen_b = std::collections::HashSet::new();
        for m in &matches {
            if !seen_a.insert(m.index_a) || !seen_b.insert(m.index_b) {
                return Err(FeatureError::DuplicateIndex {
                    index_a: m.index_a,
                    index_b: m.index_b,
                });
            }
        }
        Ok(Self {
            frame_i,
            frame_j,
            matches,
        })
    }

    pub fn frame_i(&self) -> usize {
        self.frame_i
    }

    pub fn frame_j(&self) -> usize {
        self.frame_j
    }

    pub fn matches(&self) -> &[Match] {
        &self.matches
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct FeatureParams {
    pub max_keypoints: usize,
    pub fast_threshold: u8,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            max_keypoints: 500,
            fast_threshold: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct MatchParams {
    pub max_distance: u32,
    pub cross_check: bool,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            max_distance: 64,
            cross_check: true,
        }
    }
}

/// Keypoints and their descriptors for one frame.
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<BinaryDescriptor>,
}

pub fn extract(frame: &Frame, params: &FeatureParams) -> FrameFeatures {
    let keypoints = detect_keypoints(frame, params.max_keypoints, params.fast_threshold);
    let descriptors = compute_descriptors(frame, &keypoints)
        .expect("detector only emits keypoints inside the descriptor border");
    FrameFeatures {
        keypoints,
        descriptors,
    }
}

/// FAST-9 segment test at an interior pixel.
pub fn is_fast_corner(img: &GrayImage, x: usize, y: usize, threshold: u8) -> bool {
    let c = img.get(x, y) as i16;
    let t = threshold as i16;
    let mut states = [0i8; 16];
    for (k, (dx, dy)) in CIRCLE.iter().enumerate() {
        let v = img.get((x as isize + dx) as usize, (y as isize + dy) as usize) as i16;
        states[k] = if v > c + t {
            1
        } else if v < c - t {
            -1
        } else {
            0
        };
    }
    for sign in [1i8, -1] {
        let mut run = 0;
        // walk the ring twice so arcs wrapping past index 15 are seen
        for k in 0..32 {
            if states[k % 16] == sign {
                run += 1;
                if run >= FAST_ARC {
                    return true;
                }
            } else {
                run = 0;
            }
        }
    }
    false
}

/// Harris corner measure over a 7x7 window of Sobel gradients.
pub fn harris_response(img: &GrayImage, x: usize, y: usize) -> f64 {
    let px = |xx: isize, yy: isize| img.get(xx as usize, yy as usize) as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    let norm = 1.0 / (8.0 * 255.0);
    for dy in -HARRIS_HALF_WINDOW..=HARRIS_HALF_WINDOW {
        for dx in -HARRIS_HALF_WINDOW..=HARRIS_HALF_WINDOW {
            let (u, v) = (x as isize + dx, y as isize + dy);
            let gx = (px(u + 1, v - 1) + 2.0 * px(u + 1, v) + px(u + 1, v + 1)
                - px(u - 1, v - 1)
                - 2.0 * px(u - 1, v)
                - px(u - 1, v + 1))
                * norm;
            let gy = (px(u - 1, v + 1) + 2.0 * px(u, v + 1) + px(u + 1, v + 1)
                - px(u - 1, v - 1)
                - 2.0 * px(u, v - 1)
                - px(u + 1, v - 1))
                * norm;
            sxx += gx * gx;
            syy += gy * gy;
            sxy += gx * gy;
        }
    }
    let det = sxx * syy - sxy * sxy;
    let trace = sxx + syy;
    det - HARRIS_K * trace * trace
}

/// Intensity-centroid angle of the radius-15 disk around `(x, y)`.
pub fn orientation(img: &GrayImage, x: usize, y: usize) -> f64 {
    let r = PATCH_RADIUS as isize;
    let (mut m10, mut m01) = (0i64, 0i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let v = img.get((x as isize + dx) as usize, (y as isize + dy) as usize) as i64;
            m10 += dx as i64 * v;
            m01 += dy as i64 * v;
        }
    }
    let angle = (m01 as f64).atan2(m10 as f64);
    if angle >= std::f64::consts::PI {
        -std::f64::consts::PI
    } else {
        angle
    }
}

pub fn detect_keypoints(frame: &Frame, max_count: usize, fast_threshold: u8) -> Vec<Keypoint> {
    let img = frame.image();
    let (w, h) = (img.width(), img.height());
    if max_count == 0 || w <= 2 * PATCH_RADIUS || h <= 2 * PATCH_RADIUS {
        return Vec::new();
    }
    let lo = PATCH_RADIUS;
    let (hi_x, hi_y) = (w - 1 - PATCH_RADIUS, h - 1 - PATCH_RADIUS);

    // Harris scores of segment-test corners; NaN marks "not a candidate".
    let mut score = vec![f64::NAN; w * h];
    for y in lo..=hi_y {
        for x in lo..=hi_x {
            if is_fast_corner(img, x, y, fast_threshold) {
                score[y * w + x] = harris_response(img, x, y);
            }
        }
    }

    let mut keypoints = Vec::new();
    for y in lo..=hi_y {
        for x in lo..=hi_x {
            let s = score[y * w + x];
            if s.is_nan() || s <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'nms: for ny in y - 1..=y + 1 {
                for nx in x - 1..=x + 1 {
                    if (nx, ny) == (x, y) {
                        continue;
                    }
                    let n = score[ny * w + nx];
                    if n.is_nan() {
                        continue;
                    }
                    // equal scores: the earlier pixel in raster order survives
                    if n > s || (n == s && (ny, nx) < (y, x)) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                keypoints.push(Keypoint {
                    x: x as f64,
                    y: y as f64,
                    response: s,
                    orientation: orientation(img, x, y),
                });
            }
        }
    }
    keypoints.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    keypoints.truncate(max_count);
    keypoints
}

/// Summed-area table with a zero first row and column.
struct Integral {
    stride: usize,
    sums: Vec<u32>,
}

impl Integral {
    fn new(img: &GrayImage) -> Self {
        let (w, h) = (img.width(), img.height());
        let stride = w + 1;
        let mut sums = vec![0u32; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += img.get(x, y) as u32;
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { stride, sums }
    }

    /// Sum of the 5x5 box centred at `(x, y)`.
    fn box5(&self, x: isize, y: isize) -> u32 {
        let (x0, y0) = ((x - BLUR_HALF) as usize, (y - BLUR_HALF) as usize);
        let (x1, y1) = ((x + BLUR_HALF + 1) as usize, (y + BLUR_HALF + 1) as usize);
        let s = |xx: usize, yy: usize| self.sums[yy * self.stride + xx];
        s(x1, y1) + s(x0, y0) - s(x0, y1) - s(x1, y0)
    }
}

fn keypoint_pixel(kp: &Keypoint, width: usize, height: usize) -> Result<(isize, isize), FeatureError> {
    let (x, y) = (kp.x.round(), kp.y.round());
    let r = PATCH_RADIUS as f64;
    if !(x >= r && y >= r && x <= (width - 1) as f64 - r && y <= (height - 1) as f64 - r) {
        return Err(FeatureError::BorderViolation {
            x: kp.x,
            y: kp.y,
            width,
            height,
        });
    }
    Ok((x as isize, y as isize))
}

pub fn compute_descriptors(
    frame: &Frame,
    keypoints: &[Keypoint],
) -> Result<Vec<BinaryDescriptor>, FeatureError> {
    let img = frame.image();
    let integral = Integral::new(img);
    keypoints
        .iter()
        .map(|kp| {
            let (cx, cy) = keypoint_pixel(kp, img.width(), img.height())?;
            let (s, c) = kp.orientation.sin_cos();
            let rotate = |px: i8, py: i8| {
                let (px, py) = (px as f64, py as f64);
                (
                    cx + (c * px - s * py).round() as isize,
                    cy + (s * px + c * py).round() as isize,
                )
            };
            let mut desc = BinaryDescriptor::default();
            for (k, pair) in TEST_PAIRS.iter().enumerate() {
                let p = rotate(pair[0], pair[1]);
                let q = rotate(pair[2], pair[3]);
                if integral.box5(p.0, p.1) > integral.box5(q.0, q.1) {
                    desc.set_bit(k);
                }
            }
            Ok(desc)
        })
        .collect()
}

/// Index of the nearest descriptor; lowest index wins ties.
fn nearest<D: Descriptor>(query: &D, candidates: &[D]) -> Option<(usize, D::Distance)> {
    let mut best: Option<(usize, D::Distance)> = None;
    for (idx, cand) in candidates.iter().enumerate() {
        let d = query.distance(cand);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((idx, d));
        }
    }
    best
}

/// Brute-force nearest-neighbour matching with optional mutual check.
pub fn match_nearest<D: Descriptor>(
    desc_a: &[D],
    desc_b: &[D],
    max_distance: D::Distance,
    cross_check: bool,
) -> Vec<(usize, usize, D::Distance)> {
    if desc_a.is_empty() || desc_b.is_empty() {
        return Vec::new();
    }
    let backward: Vec<Option<usize>> = if cross_check {
        desc_b.iter().map(|d| nearest(d, desc_a).map(|(i, _)| i)).collect()
    } else {
        Vec::new()
    };
    let mut out = Vec::new();
    for (ia, da) in desc_a.iter().enumerate() {
        let Some((ib, dist)) = nearest(da, desc_b) else {
            continue;
        };
        if dist > max_distance {
            continue;
        }
        if cross_check && backward[ib] != Some(ia) {
            continue;
        }
        out.push((ia, ib, dist));
    }
    out
}

pub fn match_descriptors(
    desc_a: &[BinaryDescriptor],
    desc_b: &[BinaryDescriptor],
    params: &MatchParams,
) -> Vec<Match> {
    match_nearest(desc_a, desc_b, params.max_distance, params.cross_check)
        .into_iter()
        .map(|(index_a, index_b, distance)| Match {
            index_a,
            index_b,
            distance,
        })
        .collect()
}

#[derive(Serialize)]
struct KeypointRecord {
    frame: usize,
    x: f64,
    y: f64,
    response: f64,
    orientation: f64,
}

/// Debug dump: `[{frame, x, y, response, orientation}, ...]`.
pub fn keypoints_json(frame: usize, keypoints: &[Keypoint]) -> serde_json::Value {
    let records: Vec<_> = keypoints
        .iter()
        .map(|k| KeypointRecord {
            frame,
            x: k.x,
            y: k.y,
            response: k.response,
            orientation: k.orientation,
        })
        .collect();
    serde_json::to_value(records).expect("keypoint records serialize")
}

/// Debug dump: `[{ia, ib, dist}, ...]`.
pub fn matches_json(matches: &[Match]) -> serde_json::Value {
    serde_json::to_value(matches).expect("match records serialize")
}
