//! RGB raster type and 8-bit file I/O.

use std::path::Path;

use crate::backend::Tensor;
use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// `H x W x 3` image stored channel-major, nominal range `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!("empty image {height}x{width}")));
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::InvalidArgument(format!("{} values for a {height}x{width} RGB image", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pixel value".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; CHANNELS * height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
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

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        self
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::constant(&[CHANNELS, self.height, self.width], self.data.clone())
    }

    /// Accepts a `[3, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [3, h, w] => Image::new(*h, *w, t.values().to_vec()),
            s => Err(Error::InvalidArgument(format!("expected a [3, H, W] tensor, got {s:?}"))),
        }
    }

    /// Root-mean-square difference over all pixels and channels.
    pub fn rmse(&self, other: &Image) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch { expected: self.dims(), got: other.dims() });
        }
        let sq: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok((sq / self.data.len() as f64).sqrt())
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            image::Rgb(p.map(to_byte))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Image::from_fn(h, w, |c, y, x| from_byte(img.get_pixel(x as u32, y as u32)[c]))
    }

    /// Decodes any supported file; grayscale and alpha inputs become RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Ok(Image::from_rgb8(&img))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path.as_ref())?;
        Ok(())
    }
}

/// `p in [0, 255]` to `2p/255 - 1`.
pub fn from_byte(p: u8) -> f64 {
    2.0 * p as f64 / 255.0 - 1.0
}

/// Inverse of [`from_byte`], clamping to the valid range.
pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Tiles rows of images into one canvas with a `gap` pixel border of mid grey.
pub fn grid(rows: &[Vec<Image>], gap: usize) -> Result<Image> {
    let cells: Vec<&Image> = rows.iter().flatten().collect();
    if cells.is_empty() {
        return Err(Error::InvalidArgument("empty grid".into()));
    }
    let cell_h = cells.iter().map(|i| i.height).max().unwrap();
    let cell_w = cells.iter().map(|i| i.width).max().unwrap();
    let cols = rows.iter().map(Vec::len).max().unwrap();
    let height = rows.len() * (cell_h + gap) + gap;
    let width = cols * (cell_w + gap) + gap;
    let mut out = Image::filled(height, width, 0.0);
    for (r, row) in rows.iter().enumerate() {
        for (k, img) in row.iter().enumerate() {
            let oy = gap + r * (cell_h + gap);
            let ox = gap + k * (cell_w + gap);
            for c in 0..CHANNELS {
                for y in 0..img.height {
                    for x in 0..img.width {
                        out.set(c, oy + y, ox + x, img.get(c, y, x));
                    }
                }
            }
        }
    }
    Ok(out)
}
