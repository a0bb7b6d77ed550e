use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{ImageTensor, PixelMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disc,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Flat,
    Stripes,
    Grain,
    Gradient,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Disc, Shape::Square, Shape::Triangle];

    pub fn token(self) -> &'static str {
        match self {
            Shape::Disc => "disc",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Style {
    pub const ALL: [Style; 4] = [Style::Flat, Style::Stripes, Style::Grain, Style::Gradient];

    pub fn token(self) -> &'static str {
        match self {
            Style::Flat => "flat",
            Style::Stripes => "stripes",
            Style::Grain => "grain",
            Style::Gradient => "gradient",
        }
    }
}

/// Everything needed to regenerate a dataset bit-exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    /// Square image side in pixels.
    pub size: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            size: 32,
            count: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub mask: PixelMask,
    pub shape: Shape,
    pub style: Style,
}

impl Sample {
    /// `"<shape> <style>"`, the prompt the toy denoiser is trained with.
    pub fn prompt(&self) -> String {
        format!("{} {}", self.shape.token(), self.style.token())
    }
}

pub struct TextureDataset {
    spec: DatasetSpec,
    samples: Vec<Sample>,
}

impl TextureDataset {
    pub fn generate(spec: DatasetSpec) -> Self {
        let samples = (0..spec.count)
            .map(|i| {
                let mut rng = sample_rng(spec.seed, i as u64);
                let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
                let style = Style::ALL[rng.random_range(0..Style::ALL.len())];
                render_sample(spec.size, shape, style, &mut rng)
            })
            .collect();
        Self { spec, samples }
    }

    pub fn spec(&self) -> DatasetSpec {
        self.spec
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

/// Procedural texture of one style; evaluated per pixel.
#[derive(Clone, Debug)]
struct Texture {
    style: Style,
    a: [f64; 3],
    b: [f64; 3],
    angle: f64,
    period: f64,
    phase: f64,
    grain: Vec<f64>,
    size: usize,
}

impl Texture {
    fn new<R: Rng>(style: Style, size: usize, rng: &mut R) -> Self {
        let a = random_color(rng);
        let mut b = random_color(rng);
        // keep the two palette entries visibly apart
        for (bi, ai) in b.iter_mut().zip(&a) {
            if (*bi - ai).abs() < 0.3 {
                *bi = if *ai < 0.5 { ai + 0.4 } else { ai - 0.4 };
            }
        }
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let period = rng.random_range(5.0..8.0);
        let phase = rng.random_range(0.0..period);
        let grain = (0..size * size).map(|_| rng.random_range(-0.2..0.2)).collect();
        Self {
            style,
            a,
            b,
            angle,
            period,
            phase,
            grain,
            size,
        }
    }

    fn at(&self, y: usize, x: usize) -> [f64; 3] {
        let (s, c) = self.angle.sin_cos();
        let u = x as f64 * c + y as f64 * s;
        match self.style {
            Style::Flat => self.a,
            Style::Stripes => {
                if ((u + self.phase) / self.period).floor() as i64 % 2 == 0 {
                    self.a
                } else {
                    self.b
                }
            }
            Style::Grain => {
                let g = self.grain[y * self.size + x];
                self.a.map(|v| v + g)
            }
            Style::Gradient => {
                let span = self.size as f64 * std::f64::consts::SQRT_2;
                let w = ((u + span / 2.0) / (1.5 * span)).clamp(0.0, 1.0);
                std::array::from_fn(|k| self.a[k] * (1.0 - w) + self.b[k] * w)
            }
        }
    }
}

fn shape_mask<R: Rng>(shape: Shape, size: usize, rng: &mut R) -> PixelMask {
    let n = size as f64;
    let r = rng.random_range(0.2 * n..0.35 * n);
    let cy = rng.random_range(r..n - r);
    let cx = rng.random_range(r..n - r);
    PixelMask::from_fn(size, size, |y, x| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match shape {
            Shape::Disc => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
            Shape::Square => (py - cy).abs() <= r * 0.85 && (px - cx).abs() <= r * 0.85,
            Shape::Triangle => {
                // apex up, base at cy + r
                let top = cy - r;
                let depth = (py - top) / (2.0 * r);
                (0.0..=1.0).contains(&depth) && (px - cx).abs() <= depth * r
            }
        }
    })
}

fn render_sample<R: Rng>(size: usize, shape: Shape, style: Style, rng: &mut R) -> Sample {
    let background = Texture::new(style, size, rng);
    let object = Texture::new(style, size, rng);
    let mask = shape_mask(shape, size, rng);
    let image = ImageTensor::from_fn(size, size, |y, x| {
        if mask.get(y, x) {
            object.at(y, x)
        } else {
            background.at(y, x)
        }
    });
    Sample {
        image,
        mask,
        shape,
        style,
    }
}

/// Pinned harmonization fixture: a flat-shaded disc pasted onto a striped background.
#[derive(Clone, Debug)]
pub struct TextureFixture {
    pub background: ImageTensor,
    pub foreground: ImageTensor,
    pub mask: PixelMask,
    pub shape: Shape,
    pub object_style: Style,
    pub background_style: Style,
}

impl TextureFixture {
    /// Describes the pasted object in the training prompt format, e.g. `"disc flat"`.
    pub fn object_prompt(&self) -> String {
        format!("{} {}", self.shape.token(), self.object_style.token())
    }
}

pub fn texture_fixture(size: usize, seed: u64) -> TextureFixture {
    let mut rng = sample_rng(seed ^ 0x5eed_f1c5, 0);
    let background = Texture::new(Style::Stripes, size, &mut rng);
    let fg_bg = Texture::new(Style::Flat, size, &mut rng);
    let object = Texture::new(Style::Flat, size, &mut rng);
    let n = size as f64;
    let r = 0.3 * n;
    let (cy, cx) = (n / 2.0, n / 2.0);
    let mask = PixelMask::from_fn(size, size, |y, x| {
        (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2) <= r * r
    });
    let foreground = ImageTensor::from_fn(size, size, |y, x| {
        if mask.get(y, x) {
            object.at(y, x)
        } else {
            fg_bg.at(y, x)
        }
    });
    TextureFixture {
        background: ImageTensor::from_fn(size, size, |y, x| background.at(y, x)),
        foreground,
        mask,
        shape: Shape::Disc,
        object_style: Style::Flat,
        background_style: Style::Stripes,
    }
}
