//! Pixel/latent boundary: images, masks, invertible codecs and PNG I/O.
//!
//! Latents live in `[-1, 1]` for in-range images; pixels live in `[0, 1]`.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::diffusion::LatentTensor;
use crate::error::{contract_err, shape_err, Result};
use crate::tensor::Tensor;

/// `H × W × 3` image with channels interleaved, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub const CHANNELS: usize = 3;

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * CHANNELS {
            return Err(shape_err(format!(
                "image {height}×{width}×3 needs {} values, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(contract_err("image values must lie in [0, 1]"));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Pixel-wise selection: `inside` where the mask is set, `self` elsewhere.
    pub fn paste(&self, inside: &ImageTensor, mask: &PixelMask) -> Result<ImageTensor> {
        self.check_mask(mask)?;
        if inside.height != self.height || inside.width != self.width {
            return Err(shape_err("paste: image sizes differ"));
        }
        let mut out = self.clone();
        for (p, &m) in mask.data().iter().enumerate() {
            if m == 1 {
                let i = p * CHANNELS;
                out.data[i..i + CHANNELS].copy_from_slice(&inside.data[i..i + CHANNELS]);
            }
        }
        Ok(out)
    }

    pub fn check_mask(&self, mask: &PixelMask) -> Result<()> {
        if mask.height() != self.height || mask.width() != self.width {
            return Err(shape_err(format!(
                "mask {}×{} does not match image {}×{}",
                mask.height(),
                mask.width(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::<Rgb<u8>, _>::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Binary `H × W` mask; 1 marks the foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(shape_err(format!("mask {height}×{width} with {} values", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(contract_err("mask values must be 0 or 1"));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Inclusive `(y0, x0, y1, x1)` bounds of the foreground, if any.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bounds = Some(match bounds {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        bounds
    }

    /// Reads a single-channel PNG, thresholding at 128.
    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| u8::from(v >= 128)).collect();
        Self::new(h as usize, w as usize, data)
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let raw = self.data.iter().map(|&v| v * 255).collect();
        let img: GrayImage =
            ImageBuffer::<Luma<u8>, _>::from_raw(self.width as u32, self.height as u32, raw)
                .expect("buffer length matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Binary mask at latent resolution, broadcast over channels.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1.0
    }

    pub fn filled(height: usize, width: usize, on: bool) -> Self {
        Self {
            height,
            width,
            data: vec![if on { 1.0 } else { 0.0 }; height * width],
        }
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        match *t.shape() {
            [_, h, w] if h == self.height && w == self.width => Ok(()),
            _ => Err(shape_err(format!(
                "latent mask {}×{} vs latent {:?}",
                self.height,
                self.width,
                t.shape()
            ))),
        }
    }

    /// `outside ∘ (1 − m) + inside ∘ m`.
    pub fn blend(&self, outside: &Tensor, inside: &Tensor) -> Result<Tensor> {
        self.check(outside)?;
        outside.ensure_same_shape(inside, "mask blend")?;
        let hw = self.height * self.width;
        let mut out = outside.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if self.data[i % hw] == 1.0 {
                *v = inside.data()[i];
            }
        }
        Ok(out)
    }
}

/// Area-average each `f × f` block and threshold at 0.5, ties going to foreground.
pub fn resample_mask(mask: &PixelMask, factor: usize) -> Result<LatentMask> {
    if factor == 0 || !mask.height.is_multiple_of(factor) || !mask.width.is_multiple_of(factor) {
        return Err(shape_err(format!(
            "mask {}×{} is not divisible by factor {factor}",
            mask.height, mask.width
        )));
    }
    let (h, w) = (mask.height / factor, mask.width / factor);
    let area = (factor * factor) as f64;
    let mut data = Vec::with_capacity(h * w);
    for by in 0..h {
        for bx in 0..w {
            let mut on = 0usize;
            for dy in 0..factor {
                for dx in 0..factor {
                    on += mask.data[(by * factor + dy) * mask.width + bx * factor + dx] as usize;
                }
            }
            data.push(if on as f64 / area >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    Ok(LatentMask {
        height: h,
        width: w,
        data,
    })
}

/// Decoded image plus the fraction of values that had to be clamped into `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub image: ImageTensor,
    pub clamp_fraction: f64,
}

/// Encoder/decoder pair between pixel space and latent space.
pub trait Codec: Send + Sync {
    /// Spatial downsampling factor.
    fn factor(&self) -> usize;

    fn latent_channels(&self) -> usize;

    fn name(&self) -> String;

    fn encode(&self, img: &ImageTensor) -> Result<LatentTensor>;

    fn decode(&self, lat: &LatentTensor) -> Result<Decoded>;
}

/// Invertible space-to-depth codec: each `f × f × 3` block becomes `3f²` latent
/// channels, remapped from `[0, 1]` to `[-1, 1]`. `f = 1` is the identity codec.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpaceToDepth {
    factor: usize,
}

impl SpaceToDepth {
    pub fn new(factor: usize) -> Result<Self> {
        if ![1, 2, 4, 8].contains(&factor) {
            return Err(crate::error::param_err(format!(
                "space-to-depth factor must be 1, 2, 4 or 8, got {factor}"
            )));
        }
        Ok(Self { factor })
    }

    pub fn identity() -> Self {
        Self { factor: 1 }
    }
}

impl Codec for SpaceToDepth {
    fn factor(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self) -> usize {
        CHANNELS * self.factor * self.factor
    }

    fn name(&self) -> String {
        if self.factor == 1 {
            "identity".into()
        } else {
            format!("space_to_depth_{}", self.factor)
        }
    }

    fn encode(&self, img: &ImageTensor) -> Result<LatentTensor> {
        let f = self.factor;
        if !img.height.is_multiple_of(f) || !img.width.is_multiple_of(f) {
            let pad_h = (f - img.height % f) % f;
            let pad_w = (f - img.width % f) % f;
            return Err(shape_err(format!(
                "image {}×{} not divisible by {f}; pad by {pad_h} rows and {pad_w} columns",
                img.height, img.width
            )));
        }
        let (h, w) = (img.height / f, img.width / f);
        let c = self.latent_channels();
        let data = Tensor::from_fn(&[c, h, w], |i| {
            let ch = i / (h * w);
            let y = (i / w) % h;
            let x = i % w;
            let (src_c, rem) = (ch / (f * f), ch % (f * f));
            let (dy, dx) = (rem / f, rem % f);
            let p = img.pixel(y * f + dy, x * f + dx)[src_c];
            2.0 * p - 1.0
        });
        LatentTensor::clean(data)
    }

    fn decode(&self, lat: &LatentTensor) -> Result<Decoded> {
        lat.expect_level(0, "decode")?;
        let f = self.factor;
        let (c, h, w) = match *lat.shape() {
            [c, h, w] => (c, h, w),
            _ => unreachable!("latents are rank 3"),
        };
        if c != self.latent_channels() {
            return Err(shape_err(format!(
                "{} codec expects {} channels, got {c}",
                self.name(),
                self.latent_channels()
            )));
        }
        let (hp, wp) = (h * f, w * f);
        let mut clamped = 0usize;
        let mut data = vec![0.0; hp * wp * CHANNELS];
        for (i, &v) in lat.data.data().iter().enumerate() {
            let ch = i / (h * w);
            let y = (i / w) % h;
            let x = i % w;
            let (dst_c, rem) = (ch / (f * f), ch % (f * f));
            let (dy, dx) = (rem / f, rem % f);
            let p = (v + 1.0) / 2.0;
            if !(0.0..=1.0).contains(&p) {
                clamped += 1;
            }
            data[((y * f + dy) * wp + x * f + dx) * CHANNELS + dst_c] = p.clamp(0.0, 1.0);
        }
        Ok(Decoded {
            image: ImageTensor::new(hp, wp, data)?,
            clamp_fraction: clamped as f64 / lat.data.len() as f64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        // dyadic values so the affine remap is exact in binary floating point
        ImageTensor::from_fn(h, w, |y, x| {
            let k = ((y * w + x) * 37) % 256;
            [k as f64 / 256.0, (255 - k) as f64 / 256.0, ((k * 7) % 256) as f64 / 256.0]
        })
    }

    #[test]
    fn identity_codec_is_affine_remap() {
        let img = ramp(2, 3);
        let lat = SpaceToDepth::identity().encode(&img).unwrap();
        assert_eq!(lat.shape(), &[3, 2, 3]);
        for y in 0..2 {
            for x in 0..3 {
                for c in 0..3 {
                    let v = lat.data.data()[(c * 2 + y) * 3 + x];
                    assert_eq!(v, 2.0 * img.pixel(y, x)[c] - 1.0);
                }
            }
        }
    }

    #[test]
    fn midgrey_maps_to_zero() {
        let lat = SpaceToDepth::identity()
            .encode(&ImageTensor::filled(4, 4, [0.5; 3]))
            .unwrap();
        assert!(lat.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn space_to_depth_roundtrip_is_exact() {
        let img = ramp(4, 4);
        let codec = SpaceToDepth::new(2).unwrap();
        let lat = codec.encode(&img).unwrap();
        assert_eq!(lat.shape(), &[12, 2, 2]);
        let back = codec.decode(&lat).unwrap();
        assert_eq!(back.image, img);
        assert_eq!(back.clamp_fraction, 0.0);
    }

    #[test]
    fn decode_edge_cases() {
        let codec = SpaceToDepth::identity();
        let black = codec
            .decode(&LatentTensor::clean(Tensor::full(&[3, 2, 2], -1.0)).unwrap())
            .unwrap();
        assert!(black.image.data().iter().all(|&v| v == 0.0));

        let hot = codec
            .decode(&LatentTensor::clean(Tensor::full(&[3, 2, 2], 3.0)).unwrap())
            .unwrap();
        assert!(hot.image.data().iter().all(|&v| v == 1.0));
        assert!(hot.clamp_fraction > 0.0);

        let noised = LatentTensor::at_level(Tensor::zeros(&[3, 2, 2]), 4).unwrap();
        assert!(matches!(codec.decode(&noised), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn indivisible_image_reports_padding() {
        let codec = SpaceToDepth::new(4).unwrap();
        match codec.encode(&ramp(6, 8)) {
            Err(crate::Error::Shape(msg)) => assert!(msg.contains("pad by 2 rows")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn resample_mask_trivial_cases() {
        let ones = PixelMask::from_fn(4, 4, |_, _| true);
        assert!(resample_mask(&ones, 2).unwrap().data().iter().all(|&v| v == 1.0));
        let zeros = PixelMask::from_fn(4, 4, |_, _| false);
        assert!(resample_mask(&zeros, 2).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(resample_mask(&zeros, 3), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn resample_mask_all_two_by_two_blocks() {
        for bits in 0u8..16 {
            let data: Vec<u8> = (0..4).map(|i| (bits >> i) & 1).collect();
            let ones = data.iter().filter(|&&v| v == 1).count();
            let mask = PixelMask::new(2, 2, data).unwrap();
            let got = resample_mask(&mask, 2).unwrap().data()[0];
            let want = if ones * 2 >= 4 { 1.0 } else { 0.0 };
            assert_eq!(got, want, "block bits {bits:04b}");
        }
    }

    #[test]
    fn mask_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = PixelMask::from_fn(5, 7, |y, x| (y + x) % 3 == 0);
        let path = dir.path().join("m.png");
        mask.write_png(&path).unwrap();
        assert_eq!(PixelMask::read_png(&path).unwrap(), mask);
    }

    #[test]
    fn image_png_quantizes_to_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let img = ramp(3, 5);
        let path = dir.path().join("i.png");
        img.write_png(&path).unwrap();
        let back = ImageTensor::read_png(&path).unwrap();
        assert!(back
            .data()
            .iter()
            .zip(img.data())
            .all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }

    fn mask_strategy() -> impl Strategy<Value = (usize, Vec<u8>)> {
        prop::sample::select(vec![1usize, 2, 4]).prop_flat_map(|f| {
            (Just(f), prop::collection::vec(0u8..=1, 64))
        })
    }

    proptest! {
        #[test]
        fn resample_is_monotone_and_covers((f, bits) in mask_strategy(), extra in 0usize..64) {
            let mask = PixelMask::new(8, 8, bits.clone()).unwrap();
            let mut grown = bits;
            grown[extra] = 1;
            let grown = PixelMask::new(8, 8, grown).unwrap();
            let a = resample_mask(&mask, f).unwrap();
            let b = resample_mask(&grown, f).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(y >= x);
            }
            let (lh, lw) = (8 / f, 8 / f);
            for by in 0..lh {
                for bx in 0..lw {
                    let cells: Vec<bool> = (0..f * f)
                        .map(|k| mask.get(by * f + k / f, bx * f + k % f))
                        .collect();
                    if cells.iter().all(|&c| c) {
                        prop_assert!(a.get(by, bx));
                    }
                    if cells.iter().all(|&c| !c) {
                        prop_assert!(!a.get(by, bx));
                    }
                }
            }
            if f == 1 {
                let back: Vec<u8> = a.data().iter().map(|&v| v as u8).collect();
                prop_assert_eq!(back, mask.data().to_vec());
            }
        }

        #[test]
        fn codec_roundtrip_exact(seed in 0u64..1000, f in prop::sample::select(vec![1usize, 2, 4, 8])) {
            let img = ImageTensor::from_fn(8, 16, |y, x| {
                let h = (seed.wrapping_mul(31) as usize + y * 17 + x * 13) % 256;
                [h as f64 / 256.0, (255 - h) as f64 / 256.0, ((h * 7) % 256) as f64 / 256.0]
            });
            let codec = SpaceToDepth::new(f).unwrap();
            let back = codec.decode(&codec.encode(&img).unwrap()).unwrap().image;
            prop_assert_eq!(back, img);
        }

        #[test]
        fn codec_roundtrip_within_one_ulp_for_8_bit_values(k in 0u32..256) {
            // 2p - 1 rounds for p < 1/4, so arbitrary 8-bit levels come back within 2^-53
            let p = f64::from(k) / 255.0;
            let img = ImageTensor::filled(2, 2, [p; 3]);
            let codec = SpaceToDepth::identity();
            let back = codec.decode(&codec.encode(&img).unwrap()).unwrap().image;
            prop_assert!(back.data().iter().all(|v| (v - p).abs() <= f64::EPSILON / 2.0));
        }
    }
}
