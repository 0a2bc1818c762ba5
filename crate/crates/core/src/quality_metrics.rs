//! Full-reference image quality: PSNR and Gaussian-window SSIM.

use std::path::Path;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::image_io::GrayImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("image sizes differ: {a_width}x{a_height}x{a_channels} vs {b_width}x{b_height}x{b_channels}")]
    DimensionMismatch {
        a_width: usize,
        a_height: usize,
        a_channels: usize,
        b_width: usize,
        b_height: usize,
        b_channels: usize,
    },
    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    TooSmall { width: usize, height: usize, window: usize },
    #[error("cannot decode {path}: {message}")]
    Decode { path: String, message: String },
    #[error("buffer of {len} values does not match {width}x{height}x{channels}")]
    BufferSize { len: usize, width: usize, height: usize, channels: usize },
}

/// Interleaved 8-bit image with 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl MetricImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, MetricError> {
        if data.len() != width * height * channels || !(channels == 1 || channels == 3) {
            return Err(MetricError::BufferSize { len: data.len(), width, height, channels });
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            channels: 1,
            data: img.pixels().to_vec(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).map(|&v| f64::from(v)).collect()
    }
}

/// Gray files stay single-channel; everything else is read as RGB.
pub fn load_metric_image(path: &Path) -> Result<MetricImage, MetricError> {
    let decoded = image::open(path).map_err(|e| MetricError::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let img = match decoded {
        image::DynamicImage::ImageLuma8(g) => MetricImage::new(w, h, 1, g.into_raw()),
        image::DynamicImage::ImageLumaA8(_) => MetricImage::new(w, h, 1, decoded.to_luma8().into_raw()),
        other => MetricImage::new(w, h, 3, other.to_rgb8().into_raw()),
    };
    Ok(img.expect("decoder buffer matches its own dimensions"))
}

fn check_same(a: &MetricImage, b: &MetricImage) -> Result<(), MetricError> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(MetricError::DimensionMismatch {
            a_width: a.width,
            a_height: a.height,
            a_channels: a.channels,
            b_width: b.width,
            b_height: b.height,
            b_channels: b.channels,
        });
    }
    Ok(())
}

/// PSNR from raw samples; `+inf` when the inputs are identical.
pub fn psnr_values(a: &[f64], b: &[f64], max_value: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "sample counts differ");
    let sse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    if sse == 0.0 {
        return f64::INFINITY;
    }
    let mse = sse / a.len() as f64;
    10.0 * (max_value * max_value / mse).log10()
}

/// 8-bit PSNR with peak 255, over all pixels and channels.
pub fn psnr(a: &MetricImage, b: &MetricImage) -> Result<f64, MetricError> {
    check_same(a, b)?;
    let fa: Vec<f64> = a.data.iter().map(|&v| f64::from(v)).collect();
    let fb: Vec<f64> = b.data.iter().map(|&v| f64::from(v)).collect();
    Ok(psnr_values(&fa, &fb, 255.0))
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (k, v) in w.iter_mut().enumerate() {
        let d = k as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Separable "valid" filtering; output is (w-10) x (h-10).
fn filter_valid(src: &[f64], width: usize, height: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        let line = &src[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = kernel.iter().zip(&line[x..x + SSIM_WINDOW]).map(|(k, v)| k * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = kernel.iter().enumerate().map(|(k, w)| w * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one channel given as f64 samples.
pub fn ssim_plane(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64, MetricError> {
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(MetricError::TooSmall { width, height, window: SSIM_WINDOW });
    }
    let kernel = gaussian_window();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, width, height, &kernel);
    let mu_b = filter_valid(b, width, height, &kernel);
    let e_aa = filter_valid(&aa, width, height, &kernel);
    let e_bb = filter_valid(&bb, width, height, &kernel);
    let e_ab = filter_valid(&ab, width, height, &kernel);
    let mut total = 0.0;
    for k in 0..mu_a.len() {
        let (ma, mb) = (mu_a[k], mu_b[k]);
        let var_a = e_aa[k] - ma * ma;
        let var_b = e_bb[k] - mb * mb;
        let cov = e_ab[k] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean SSIM; for RGB the mean of the per-channel values.
pub fn ssim(a: &MetricImage, b: &MetricImage) -> Result<f64, MetricError> {
    check_same(a, b)?;
    let mut sum = 0.0;
    for c in 0..a.channels {
        sum += ssim_plane(&a.channel(c), &b.channel(c), a.width, a.height)?;
    }
    Ok(sum / a.channels as f64)
}

pub fn ssim_gray(a: &GrayImage, b: &GrayImage) -> Result<f64, MetricError> {
    ssim(&MetricImage::from_gray(a), &MetricImage::from_gray(b))
}

/// Infinite values become the string `"inf"`; JSON has no infinity.
pub fn serialize_db<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
    if value.is_infinite() && *value > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub image_ids: [String; 2],
    /// Filled by external tools only.
    pub lpips: Option<f64>,
}

pub fn compare(a: &MetricImage, b: &MetricImage, ids: [String; 2]) -> Result<MetricReport, MetricError> {
    Ok(MetricReport {
        psnr: psnr(a, b)?,
        ssim: ssim(a, b)?,
        image_ids: ids,
        lpips: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> MetricImage {
        MetricImage::from_gray(&GrayImage::from_fn(w, h, f))
    }

    fn texture(w: usize, h: usize, seed: u64) -> MetricImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<u8> = (0..w * h).map(|_| rng.random_range(0..40u8)).collect();
        gray(w, h, |x, y| {
            let base = 128.0 + 50.0 * ((x as f64 * 0.3).sin() * (y as f64 * 0.2).cos());
            (base as u8).saturating_add(noise[y * w + x]).saturating_sub(20)
        })
    }

    /// Direct per-window evaluation without separability.
    fn ssim_reference(a: &MetricImage, b: &MetricImage) -> f64 {
        let k = gaussian_window();
        let (w, h) = (a.width(), a.height());
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wt = k[dy] * k[dx];
                        let va = f64::from(a.data()[(y0 + dy) * w + x0 + dx]);
                        let vb = f64::from(b.data()[(y0 + dy) * w + x0 + dx]);
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_fixtures() {
        let a = gray(16, 16, |_, _| 0);
        let b = gray(16, 16, |_, _| 255);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let t = texture(32, 32, 1);
        let base = gray(32, 32, |x, y| t.data()[y * 32 + x] / 2 + 40);
        let shifted = gray(32, 32, |x, y| t.data()[y * 32 + x] / 2 + 56);
        let expected = 10.0 * (65025.0f64 / 256.0).log10();
        assert!((psnr(&base, &shifted).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 24.05).abs() < 0.01);
    }

    #[test]
    fn psnr_float_peak() {
        let a = [0.0, 0.5, 1.0];
        let b = [0.1, 0.5, 1.0];
        let expected = 10.0 * (1.0 / (0.01 / 3.0f64)).log10();
        assert!((psnr_values(&a, &b, 1.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let base = texture(48, 48, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pattern: Vec<f64> = (0..48 * 48).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mid = gray(48, 48, |x, y| 64 + base.data()[y * 48 + x] / 2);
        let mut last = f64::INFINITY;
        for amp in [4.0, 12.0, 30.0] {
            let noisy = gray(48, 48, |x, y| {
                (f64::from(mid.data()[y * 48 + x]) + amp * pattern[y * 48 + x]).round() as u8
            });
            let p = psnr(&mid, &noisy).unwrap();
            assert!(p < last, "{p} !< {last}");
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_constants() {
        let t = texture(40, 30, 4);
        assert!((ssim(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        let zero = gray(20, 20, |_, _| 0);
        let ten = gray(20, 20, |_, _| 10);
        let expected = SSIM_C1 * SSIM_C2 / ((100.0 + SSIM_C1) * SSIM_C2);
        assert!((ssim(&zero, &ten).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 0.06105).abs() < 1e-5);
    }

    #[test]
    fn ssim_matches_direct_windows() {
        let a = texture(24, 20, 5);
        let b = texture(24, 20, 6);
        let fast = ssim(&a, &b).unwrap();
        let slow = ssim_reference(&a, &b);
        assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
    }

    #[test]
    fn ssim_inverted_is_low() {
        let a = texture(48, 48, 7);
        let inv = gray(48, 48, |x, y| 255 - a.data()[y * 48 + x]);
        assert!(ssim(&a, &inv).unwrap() < 0.3);
    }

    #[test]
    fn rgb_is_channel_mean() {
        let r = texture(20, 20, 8);
        let g = texture(20, 20, 9);
        let bch = texture(20, 20, 10);
        let interleave = |imgs: [&MetricImage; 3]| {
            let data = (0..400).flat_map(|i| imgs.map(|m| m.data()[i])).collect();
            MetricImage::new(20, 20, 3, data).unwrap()
        };
        let a = interleave([&r, &g, &bch]);
        let b = interleave([&g, &bch, &r]);
        let expected = (ssim(&r, &g).unwrap() + ssim(&g, &bch).unwrap() + ssim(&bch, &r).unwrap()) / 3.0;
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let a = gray(20, 20, |_, _| 0);
        let b = gray(20, 21, |_, _| 0);
        assert!(matches!(psnr(&a, &b), Err(MetricError::DimensionMismatch { .. })));
        let small = gray(10, 30, |_, _| 0);
        assert!(matches!(ssim(&small, &small), Err(MetricError::TooSmall { .. })));
    }

    #[test]
    fn report_serializes_infinity() {
        let a = texture(16, 16, 11);
        let report = compare(&a, &a, ["render_0".into(), "reference_0".into()]).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["psnr"], "inf");
        assert_eq!(json["ssim"], 1.0);
        assert!(json["lpips"].is_null());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn metrics_are_symmetric(sa in any::<u64>(), sb in any::<u64>()) {
            let a = texture(16, 14, sa);
            let b = texture(16, 14, sb);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            let d = (ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs();
            prop_assert!(d <= 1e-12);
        }
    }
}
