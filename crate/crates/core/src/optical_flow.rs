//! Sparse pyramidal Lucas-Kanade tracking and the mean motion magnitude.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image_io::{build_pyramid, max_levels, Frame, ImageIoError};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("frame sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("window size must be odd and at least 3, got {0}")]
    InvalidWindow(usize),
    #[error(transparent)]
    Pyramid(#[from] ImageIoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    /// Odd window edge in pixels.
    pub window: usize,
    pub levels: usize,
    pub max_iterations: usize,
    /// Convergence threshold on the per-iteration update, in level pixels.
    pub epsilon: f64,
    /// Floor on the smallest eigenvalue of the window-averaged structure
    /// tensor (intensities in `[0, 1]`).
    pub min_eigenvalue: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            window: 21,
            levels: 3,
            max_iterations: 30,
            epsilon: 0.01,
            min_eigenvalue: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowVector {
    pub origin: [f64; 2],
    pub displacement: [f64; 2],
    pub tracked: bool,
    /// Window SSD at the final estimate, intensities in `[0, 1]`.
    pub residual: f64,
}

impl FlowVector {
    pub fn magnitude(&self) -> f64 {
        self.displacement[0].hypot(self.displacement[1])
    }

    fn lost(origin: [f64; 2]) -> Self {
        Self {
            origin,
            displacement: [0.0, 0.0],
            tracked: false,
            residual: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowStats {
    /// Mean displacement magnitude over tracked vectors, in pixels.
    #[serde(rename = "F")]
    pub mean_magnitude: f64,
    pub tracked_count: usize,
    pub total_count: usize,
    pub reliable: bool,
}

/// One pyramid level as floating-point intensities.
#[derive(Debug, Clone)]
struct Plane {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Plane {
    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample with border clamping.
    #[inline]
    fn sample(&self, x: f64, y: f64) -> f64 {
        let xm = (self.width - 1) as f64;
        let ym = (self.height - 1) as f64;
        let x = x.clamp(0.0, xm);
        let y = y.clamp(0.0, ym);
        let x0 = (x.floor() as usize).min(self.width - 2);
        let y0 = (y.floor() as usize).min(self.height - 2);
        let ax = x - x0 as f64;
        let ay = y - y0 as f64;
        let i00 = self.at(x0, y0) as f64;
        let i10 = self.at(x0 + 1, y0) as f64;
        let i01 = self.at(x0, y0 + 1) as f64;
        let i11 = self.at(x0 + 1, y0 + 1) as f64;
        (1.0 - ay) * ((1.0 - ax) * i00 + ax * i10) + ay * ((1.0 - ax) * i01 + ax * i11)
    }
}

/// Floating-point pyramid of one frame, reusable across many pairs.
#[derive(Debug, Clone)]
pub struct FlowPyramid {
    levels: Vec<Plane>,
}

impl FlowPyramid {
    /// Uses `min(levels, max_levels)` so tiny frames still get a pyramid.
    pub fn new(frame: &Frame, levels: usize) -> Result<Self, FlowError> {
        let count = levels.clamp(1, max_levels(frame.width(), frame.height()).max(1));
        let pyr = build_pyramid(frame.image(), count)?;
        let levels = pyr
            .levels()
            .iter()
            .map(|l| Plane {
                width: l.width(),
                height: l.height(),
                data: l.to_unit_f32(),
            })
            .collect();
        Ok(Self { levels })
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn width(&self) -> usize {
        self.levels[0].width
    }

    pub fn height(&self) -> usize {
        self.levels[0].height
    }
}

pub fn track_points(
    frame_i: &Frame,
    frame_j: &Frame,
    points: &[[f64; 2]],
    params: &FlowParams,
) -> Result<Vec<FlowVector>, FlowError> {
    let pi = FlowPyramid::new(frame_i, params.levels)?;
    let pj = FlowPyramid::new(frame_j, params.levels)?;
    track_points_pyramids(&pi, &pj, points, params)
}

pub fn track_points_pyramids(
    from: &FlowPyramid,
    to: &FlowPyramid,
    points: &[[f64; 2]],
    params: &FlowParams,
) -> Result<Vec<FlowVector>, FlowError> {
    if from.width() != to.width() || from.height() != to.height() {
        return Err(FlowError::SizeMismatch(from.width(), from.height(), to.width(), to.height()));
    }
    if params.window < 3 || params.window % 2 == 0 {
        return Err(FlowError::InvalidWindow(params.window));
    }
    Ok(points
        .iter()
        .map(|&p| track_one(from, to, p, params, None))
        .collect())
}

/// Number of pyramid levels at which the window around `p` (plus one pixel
/// for the gradient stencil) fits inside the image.
fn usable_levels(pyr: &FlowPyramid, p: [f64; 2], half: usize, max: usize) -> usize {
    let margin = (half + 1) as f64;
    let mut n = 0;
    for (l, plane) in pyr.levels.iter().enumerate().take(max) {
        let s = 0.5f64.powi(l as i32);
        let (x, y) = (p[0] * s, p[1] * s);
        let inside = x >= margin
            && y >= margin
            && x <= (plane.width - 1) as f64 - margin
            && y <= (plane.height - 1) as f64 - margin;
        if !inside {
            break;
        }
        n += 1;
    }
    n
}

pub(crate) fn track_one(
    from: &FlowPyramid,
    to: &FlowPyramid,
    origin: [f64; 2],
    params: &FlowParams,
    mut trace: Option<&mut Vec<f64>>,
) -> FlowVector {
    let half = params.window / 2;
    let levels = usable_levels(from, origin, half, params.levels.min(from.level_count()));
    if levels == 0 {
        return FlowVector::lost(origin);
    }
    let n_win = (params.window * params.window) as f64;
    let h = half as isize;

    let mut template = Vec::with_capacity(params.window * params.window);
    let mut guess = [0.0f64; 2];
    let mut residual = f64::INFINITY;

    for level in (0..levels).rev() {
        let src = &from.levels[level];
        let dst = &to.levels[level];
        let scale = 0.5f64.powi(level as i32);
        let (px, py) = (origin[0] * scale, origin[1] * scale);

        template.clear();
        let (mut gxx, mut gxy, mut gyy) = (0.0, 0.0, 0.0);
        for dy in -h..=h {
            for dx in -h..=h {
                let (x, y) = (px + dx as f64, py + dy as f64);
                let ix = 0.5 * (src.sample(x + 1.0, y) - src.sample(x - 1.0, y));
                let iy = 0.5 * (src.sample(x, y + 1.0) - src.sample(x, y - 1.0));
                template.push((src.sample(x, y), ix, iy));
                gxx += ix * ix;
                gxy += ix * iy;
                gyy += iy * iy;
            }
        }
        let (a, b, c) = (gxx / n_win, gxy / n_win, gyy / n_win);
        let min_eig = 0.5 * (a + c - ((a - c) * (a - c) + 4.0 * b * b).sqrt());
        let det = gxx * gyy - gxy * gxy;
        if min_eig < params.min_eigenvalue || det <= 0.0 {
            if level == 0 {
                return FlowVector::lost(origin);
            }
            guess = [2.0 * guess[0], 2.0 * guess[1]];
            continue;
        }

        let ssd = |nu: [f64; 2], out: Option<&mut [f64; 2]>| {
            let (mut bx, mut by, mut e2) = (0.0, 0.0, 0.0);
            let mut k = 0;
            for dy in -h..=h {
                for dx in -h..=h {
                    let (t, ix, iy) = template[k];
                    k += 1;
                    let j = dst.sample(
                        px + guess[0] + nu[0] + dx as f64,
                        py + guess[1] + nu[1] + dy as f64,
                    );
                    let e = t - j;
                    bx += e * ix;
                    by += e * iy;
                    e2 += e * e;
                }
            }
            if let Some(out) = out {
                *out = [bx, by];
            }
            e2
        };

        let mut nu = [0.0f64; 2];
        let mut mismatch = [0.0f64; 2];
        for _ in 0..params.max_iterations {
            let e2 = ssd(nu, Some(&mut mismatch));
            if level == 0 {
                if let Some(t) = trace.as_deref_mut() {
                    t.push(e2);
                }
            }
            let eta = [
                (gyy * mismatch[0] - gxy * mismatch[1]) / det,
                (gxx * mismatch[1] - gxy * mismatch[0]) / det,
            ];
            nu[0] += eta[0];
            nu[1] += eta[1];
            let (cx, cy) = (px + guess[0] + nu[0], py + guess[1] + nu[1]);
            if !(cx.is_finite() && cy.is_finite())
                || cx < -(half as f64)
                || cy < -(half as f64)
                || cx > (dst.width + half) as f64
                || cy > (dst.height + half) as f64
            {
                return FlowVector::lost(origin);
            }
            if eta[0].hypot(eta[1]) < params.epsilon {
                break;
            }
        }
        if level == 0 {
            residual = ssd(nu, None);
            if let Some(t) = trace.as_deref_mut() {
                t.push(residual);
            }
            guess = [guess[0] + nu[0], guess[1] + nu[1]];
        } else {
            guess = [2.0 * (guess[0] + nu[0]), 2.0 * (guess[1] + nu[1])];
        }
    }

    let (ex, ey) = (origin[0] + guess[0], origin[1] + guess[1]);
    let hf = half as f64;
    let inside = ex >= hf
        && ey >= hf
        && ex <= (to.width() - 1) as f64 - hf
        && ey <= (to.height() - 1) as f64 - hf;
    FlowVector {
        origin,
        displacement: guess,
        tracked: inside,
        residual,
    }
}

/// Mean magnitude over tracked vectors; `reliable` needs `min_tracked` of them.
pub fn average_motion(flows: &[FlowVector], min_tracked: usize) -> FlowStats {
    let tracked: Vec<f64> = flows.iter().filter(|f| f.tracked).map(|f| f.magnitude()).collect();
    let mean = if tracked.is_empty() {
        0.0
    } else {
        tracked.iter().sum::<f64>() / tracked.len() as f64
    };
    FlowStats {
        mean_magnitude: mean,
        tracked_count: tracked.len(),
        total_count: flows.len(),
        reliable: !tracked.is_empty() && tracked.len() >= min_tracked,
    }
}
