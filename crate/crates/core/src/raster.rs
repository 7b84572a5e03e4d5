//! Planar image, mask and heatmap containers plus PNG I/O.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::masks::Mask;

/// A `C×H×W` image with values nominally in `[0, 1]`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                format!("{} values for {channels}x{height}x{width}", height * width * channels),
                data.len(),
            ));
        }
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image dimensions must be non-zero".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for r in 0..height {
                for x in 0..width {
                    data.push(f(c, r, x));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, x: usize) -> f64 {
        self.data[(c * self.height + r) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, r: usize, x: usize, v: f64) {
        self.data[(c * self.height + r) * self.width + x] = v;
    }

    /// Plane of channel `c`.
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn clamped(&self) -> Image {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    /// Mean over channels, one value per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        let k = self.channels as f64;
        out.iter_mut().for_each(|v| *v /= k);
        out
    }

    /// Replicates a 1-channel image to 3 channels; 3-channel images are returned as is.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image::from_fn(self.height, self.width, 3, |_, r, x| self.get(0, r, x))
    }

    pub(crate) fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.height != other.height || self.width != other.width || self.channels != other.channels {
            return Err(Error::shape(self.shape_string(), other.shape_string()));
        }
        Ok(())
    }

    pub(crate) fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let img = image::open(path.as_ref())?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Image {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Image::from_fn(h as usize, w as usize, 3, |c, r, x| {
            rgb.get_pixel(x as u32, r as u32)[c] as f64 / 255.0
        })
    }

    /// 8-bit RGB conversion with rounding; 1-channel images are replicated.
    pub fn to_rgb8(&self) -> RgbImage {
        let rgb = self.to_rgb();
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, r| {
            let px = |c| quantize(rgb.get(c, r as usize, x as usize));
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path.as_ref())?;
        Ok(())
    }
}

#[inline]
pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Stacks same-shaped images into an `[n, c, h, w]` tensor.
pub fn stack_images(images: &[&Image]) -> Tensor {
    let first = images.first().expect("at least one image");
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for im in images {
        assert_eq!(im.shape_string(), first.shape_string(), "stacked image shapes");
        data.extend_from_slice(&im.data);
    }
    Tensor::new(vec![images.len(), first.channels, first.height, first.width], data)
}

/// Stacks masks into an `[n, 1, h, w]` tensor of 0/1 values.
pub fn stack_masks(masks: &[&Mask]) -> Tensor {
    let (h, w) = masks.first().expect("at least one mask").dims();
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        assert_eq!(m.dims(), (h, w), "stacked mask shapes");
        data.extend(m.to_f64());
    }
    Tensor::new(vec![masks.len(), 1, h, w], data)
}

/// Sample `index` of an `[n, c, h, w]` tensor as an image.
pub fn unstack_image(t: &Tensor, index: usize) -> Image {
    let (_, c, h, w) = t.dims4();
    let len = c * h * w;
    Image {
        height: h,
        width: w,
        channels: c,
        data: t.data[index * len..(index + 1) * len].to_vec(),
    }
}

/// Per-pixel tamper evidence in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(height * width, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("heat value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    /// Min-max normalizes raw scores; constant input maps to all zeros.
    pub fn normalized(height: usize, width: usize, raw: &[f64]) -> Self {
        let (lo, hi) = raw
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        let data = if span > 0.0 && span.is_finite() {
            raw.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.0; raw.len()]
        };
        Self {
            height,
            width,
            data,
        }
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

    #[inline]
    pub fn get(&self, r: usize, x: usize) -> f64 {
        self.data[r * self.width + x]
    }

    pub fn to_gray8(&self) -> GrayImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, r| {
            Luma([quantize(self.get(r as usize, x as usize))])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray8().save(path.as_ref())?;
        Ok(())
    }
}
