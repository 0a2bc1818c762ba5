//! Frame loading, grayscale reduction and box-filter pyramids.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Smallest frame edge accepted by [`Frame::new`].
pub const MIN_FRAME_DIM: usize = 32;
/// Smallest pyramid level edge.
pub const MIN_LEVEL_DIM: usize = 8;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("need at least 2 frames matching `{pattern}` in {dir}, found {found}")]
    EmptySequence {
        dir: PathBuf,
        pattern: String,
        found: usize,
    },
    #[error("frame {index} is {width}x{height}, expected {expected_width}x{expected_height}")]
    DimensionMismatch {
        index: usize,
        width: usize,
        height: usize,
        expected_width: usize,
        expected_height: usize,
    },
    #[error("failed to decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("image of {width}x{height} is below the {min}x{min} minimum")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("pixel buffer holds {actual} samples, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("{levels} pyramid levels requested for a {width}x{height} frame")]
    TooManyLevels { levels: usize, width: usize, height: usize },
    #[error("invalid filename pattern `{0}`")]
    Pattern(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major 8-bit single-channel raster without a size floor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageIoError> {
        if data.len() != width * height {
            return Err(ImageIoError::BufferSize {
                expected: width * height,
                actual: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn pixels(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Intensities scaled to `[0, 1]`.
    pub fn to_unit_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 255.0).collect()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// 2x2 box-filter downsample with floor-halved dimensions.
    pub fn downsample(&self) -> GrayImage {
        let w = self.width / 2;
        let h = self.height / 2;
        GrayImage::from_fn(w, h, |x, y| {
            let (sx, sy) = (2 * x, 2 * y);
            let sum = self.get(sx, sy) as u32
                + self.get(sx + 1, sy) as u32
                + self.get(sx, sy + 1) as u32
                + self.get(sx + 1, sy + 1) as u32;
            ((sum + 2) / 4) as u8
        })
    }
}

/// One grayscale video frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    index: usize,
    image: GrayImage,
}

impl Frame {
    pub fn new(index: usize, image: GrayImage) -> Result<Self, ImageIoError> {
        if image.width < MIN_FRAME_DIM || image.height < MIN_FRAME_DIM {
            return Err(ImageIoError::TooSmall {
                width: image.width,
                height: image.height,
                min: MIN_FRAME_DIM,
            });
        }
        Ok(Self { index, image })
    }

    #[inline]
    pub fn index(&self) -> usize {
        self.index
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.image.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.image.height
    }

    #[inline]
    pub fn image(&self) -> &GrayImage {
        &self.image
    }

    #[inline]
    pub fn pixels(&self) -> &[u8] {
        &self.image.data
    }

    pub fn into_image(self) -> GrayImage {
        self.image
    }
}

/// Temporally ordered frames sharing one size.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    frames: Vec<Frame>,
    source: String,
}

impl FrameSequence {
    /// Re-indexes `images` as frames `0..n`.
    pub fn from_images(images: Vec<GrayImage>, source: impl Into<String>) -> Result<Self, ImageIoError> {
        let source = source.into();
        if images.len() < 2 {
            return Err(ImageIoError::EmptySequence {
                dir: PathBuf::from(&source),
                pattern: String::new(),
                found: images.len(),
            });
        }
        let (w, h) = (images[0].width, images[0].height);
        let mut frames = Vec::with_capacity(images.len());
        for (index, image) in images.into_iter().enumerate() {
            if image.width != w || image.height != h {
                return Err(ImageIoError::DimensionMismatch {
                    index,
                    width: image.width,
                    height: image.height,
                    expected_width: w,
                    expected_height: h,
                });
            }
            frames.push(Frame::new(index, image)?);
        }
        Ok(Self { frames, source })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, index: usize) -> Option<&Frame> {
        self.frames.get(index)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

/// BT.601 luma, rounded to nearest.
#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round() as u8
}

/// Decodes a PNG or binary PGM file to grayscale.
pub fn load_gray(path: &Path) -> Result<GrayImage, ImageIoError> {
    let decoded = image::open(path).map_err(|e| ImageIoError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data = match decoded {
        image::DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        image::DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0]).collect(),
        other => {
            let rgb = other.to_rgb8();
            rgb.pixels().map(|p| luma(p.0[0], p.0[1], p.0[2])).collect()
        }
    };
    GrayImage::new(w, h, data)
}

/// Writes an 8-bit grayscale PNG.
pub fn save_png(image: &GrayImage, path: &Path) -> Result<(), ImageIoError> {
    image::save_buffer(
        path,
        &image.data,
        image.width as u32,
        image.height as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| ImageIoError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Lists files in `dir` whose name matches `pattern`, in natural order.
pub fn list_matching(dir: &Path, pattern: &str) -> Result<Vec<PathBuf>, ImageIoError> {
    let glob = glob::Pattern::new(pattern).map_err(|_| ImageIoError::Pattern(pattern.to_string()))?;
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if !entry.file_type()?.is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if glob.matches(&name) {
            names.push(name);
        }
    }
    names.sort_by(|a, b| natural_cmp(a, b));
    Ok(names.into_iter().map(|n| dir.join(n)).collect())
}

/// Natural ordering: embedded digit runs compare numerically.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (mut ra, mut rb) = (a.as_bytes(), b.as_bytes());
    loop {
        match (ra.first(), rb.first()) {
            (None, None) => return a.cmp(b),
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(ca), Some(cb)) if ca.is_ascii_digit() && cb.is_ascii_digit() => {
                let (da, rest_a) = split_digits(ra);
                let (db, rest_b) = split_digits(rb);
                let ta = trim_zeros(da);
                let tb = trim_zeros(db);
                let ord = ta.len().cmp(&tb.len()).then_with(|| ta.cmp(tb));
                if ord != Ordering::Equal {
                    return ord;
                }
                ra = rest_a;
                rb = rest_b;
            }
            (Some(ca), Some(cb)) => {
                if ca != cb {
                    return ca.cmp(cb);
                }
                ra = &ra[1..];
                rb = &rb[1..];
            }
        }
    }
}

fn split_digits(s: &[u8]) -> (&[u8], &[u8]) {
    let n = s.iter().take_while(|c| c.is_ascii_digit()).count();
    s.split_at(n)
}

fn trim_zeros(s: &[u8]) -> &[u8] {
    let n = s.iter().take_while(|&&c| c == b'0').count();
    &s[n.min(s.len().saturating_sub(1))..]
}

/// Loads every frame in `dir` matching `pattern`.
pub fn load_sequence(dir: &Path, pattern: &str) -> Result<FrameSequence, ImageIoError> {
    let paths = list_matching(dir, pattern)?;
    if paths.len() < 2 {
        return Err(ImageIoError::EmptySequence {
            dir: dir.to_path_buf(),
            pattern: pattern.to_string(),
            found: paths.len(),
        });
    }
    let images = paths
        .iter()
        .map(|p| load_gray(p))
        .collect::<Result<Vec<_>, _>>()?;
    FrameSequence::from_images(images, dir.display().to_string())
}

/// Box-filter image pyramid, level 0 at full resolution.
#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<GrayImage>,
}

impl Pyramid {
    pub fn levels(&self) -> &[GrayImage] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> &GrayImage {
        &self.levels[k]
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }
}

/// Largest level count whose coarsest level stays at least 8x8.
pub fn max_levels(width: usize, height: usize) -> usize {
    let mut n = 0;
    let (mut w, mut h) = (width, height);
    while w >= MIN_LEVEL_DIM && h >= MIN_LEVEL_DIM {
        n += 1;
        w /= 2;
        h /= 2;
    }
    n
}

pub fn build_pyramid(image: &GrayImage, level_count: usize) -> Result<Pyramid, ImageIoError> {
    if level_count == 0 || level_count > max_levels(image.width, image.height) {
        return Err(ImageIoError::TooManyLevels {
            levels: level_count,
            width: image.width,
            height: image.height,
        });
    }
    let mut levels = Vec::with_capacity(level_count);
    levels.push(image.clone());
    for k in 1..level_count {
        let next = levels[k - 1].downsample();
        levels.push(next);
    }
    Ok(Pyramid { levels })
}
