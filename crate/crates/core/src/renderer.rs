//! Hard-edged grayscale rasterization of scenes, and the image dataset file.
//!
//! The scene square `[-1, 1]^2` maps onto the pixel grid with `+y` pointing
//! up (row 0 is the top edge). Pixel `(row, col)` is lit when its centre lies
//! inside a disk or within half a pixel of an arm segment.
//!
//! Dataset file layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "IMGS"
//! 4       4     u32 image count
//! 8       4     u32 height
//! 12      4     u32 width
//! 16      ...   count * height * width u8 intensities, row-major per image
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env_sim::{chain_positions, Point, SceneState};
use crate::error::{argument, Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"IMGS";

/// Square grayscale image; intensities are stored as bytes (`0..=255`
/// maps onto `[0, 1]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    size: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn blank(size: usize) -> Self {
        Self {
            size,
            pixels: vec![0; size * size],
        }
    }

    pub fn from_bytes(size: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(argument(format!(
                "{} pixels for a {size}x{size} image",
                pixels.len()
            )));
        }
        Ok(Self { size, pixels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bytes(&self) -> &[u8] {
        &self.pixels
    }

    pub fn intensity(&self, row: usize, col: usize) -> f64 {
        f64::from(self.pixels[row * self.size + col]) / 255.0
    }

    /// Intensities in `[0, 1]`, row-major.
    pub fn intensities(&self) -> impl Iterator<Item = f64> + '_ {
        self.pixels.iter().map(|&p| f64::from(p) / 255.0)
    }

    pub fn lit_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p > 0).count()
    }

    fn set(&mut self, row: usize, col: usize, value: u8) {
        self.pixels[row * self.size + col] = value;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub resolution: usize,
    pub ball_radius_px: f64,
    pub distractor_radius_px: f64,
    pub arm_rendered: bool,
    pub background: f64,
    pub foreground: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            ball_radius_px: 4.0,
            distractor_radius_px: 2.5,
            arm_rendered: false,
            background: 0.0,
            foreground: 1.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(argument("resolution must be at least 8"));
        }
        if self.ball_radius_px < 1.0 || self.distractor_radius_px < 1.0 {
            return Err(argument("disk radii must be at least one pixel"));
        }
        for v in [self.background, self.foreground] {
            if !(0.0..=1.0).contains(&v) {
                return Err(argument("intensities must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Continuous pixel coordinates `(col, row)` of a scene point.
    pub fn to_pixel(&self, p: Point) -> [f64; 2] {
        let res = self.resolution as f64;
        [(p[0] + 1.0) * 0.5 * res, (1.0 - p[1]) * 0.5 * res]
    }

    fn level(v: f64) -> u8 {
        (v * 255.0).round() as u8
    }
}

pub fn render(scene: &SceneState, link_lengths: &[f64], cfg: &RenderConfig) -> Image {
    let res = cfg.resolution;
    let fg = RenderConfig::level(cfg.foreground);
    let mut img = Image {
        size: res,
        pixels: vec![RenderConfig::level(cfg.background); res * res],
    };

    if cfg.arm_rendered {
        let mut joints = vec![[0.0, 0.0]];
        joints.extend(chain_positions(&scene.joint_angles, link_lengths));
        for seg in joints.windows(2) {
            let a = cfg.to_pixel(seg[0]);
            let b = cfg.to_pixel(seg[1]);
            draw_segment(&mut img, a, b, 0.5, fg);
        }
    }
    draw_disk(
        &mut img,
        cfg.to_pixel(scene.ball_pos),
        cfg.ball_radius_px,
        fg,
    );
    if let Some(d) = scene.distractor_pos {
        draw_disk(&mut img, cfg.to_pixel(d), cfg.distractor_radius_px, fg);
    }
    img
}

fn pixel_span(lo: f64, hi: f64, res: usize) -> std::ops::Range<usize> {
    let start = (lo - 0.5).ceil().max(0.0);
    let end = (hi - 0.5).floor() + 1.0;
    if !(end > start) {
        return 0..0;
    }
    (start as usize).min(res)..(end.min(res as f64) as usize)
}

fn draw_disk(img: &mut Image, centre: [f64; 2], radius: f64, value: u8) {
    let res = img.size;
    let r2 = radius * radius;
    for row in pixel_span(centre[1] - radius, centre[1] + radius, res) {
        let dy = row as f64 + 0.5 - centre[1];
        for col in pixel_span(centre[0] - radius, centre[0] + radius, res) {
            let dx = col as f64 + 0.5 - centre[0];
            if dx * dx + dy * dy <= r2 {
                img.set(row, col, value);
            }
        }
    }
}

fn draw_segment(img: &mut Image, a: [f64; 2], b: [f64; 2], half_width: f64, value: u8) {
    let res = img.size;
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let rows = pixel_span(
        a[1].min(b[1]) - half_width,
        a[1].max(b[1]) + half_width,
        res,
    );
    let cols = pixel_span(
        a[0].min(b[0]) - half_width,
        a[0].max(b[0]) + half_width,
        res,
    );
    for row in rows {
        let py = row as f64 + 0.5;
        for col in cols.clone() {
            let px = col as f64 + 0.5;
            let t = if len2 > 0.0 {
                (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (ex, ey) = (a[0] + t * dx - px, a[1] + t * dy - py);
            if ex * ex + ey * ey <= half_width * half_width {
                img.set(row, col, value);
            }
        }
    }
}

/// In-memory collection of equally sized square images.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ImageDataset {
    pub size: usize,
    pub images: Vec<Image>,
}

impl ImageDataset {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            images: Vec::new(),
        }
    }

    pub fn push(&mut self, image: Image) -> Result<()> {
        if image.size != self.size {
            return Err(argument("image size does not match the dataset"));
        }
        self.images.push(image);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let count = u32::try_from(self.images.len()).map_err(|_| argument("too many images"))?;
        let side = u32::try_from(self.size).map_err(|_| argument("image too large"))?;
        w.write_all(&DATASET_MAGIC)?;
        w.write_all(&count.to_le_bytes())?;
        w.write_all(&side.to_le_bytes())?;
        w.write_all(&side.to_le_bytes())?;
        for img in &self.images {
            w.write_all(&img.pixels)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if header[..4] != DATASET_MAGIC {
            return Err(Error::Format("not an image dataset file".into()));
        }
        let field = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        let (count, height, width) = (field(4), field(8), field(12));
        if height != width {
            return Err(Error::Format(format!(
                "non-square images ({height}x{width})"
            )));
        }
        let mut images = Vec::with_capacity(count);
        for _ in 0..count {
            let mut pixels = vec![0u8; height * width];
            r.read_exact(&mut pixels)?;
            images.push(Image {
                size: height,
                pixels,
            });
        }
        Ok(Self {
            size: height,
            images,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.len() * self.size * self.size);
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}
