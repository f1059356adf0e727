//! H×W×C float images in `[0, 1]`, binary masks and PNG conversion.

use std::path::Path;

use crate::numerics::{NumericsError, Tensor};

/// Row-major H×W×C image.
pub type Image = Tensor<f32>;

pub fn new_image(h: usize, w: usize, c: usize) -> Image {
    Tensor::zeros(&[h, w, c])
}

/// `(height, width, channels)` of an image tensor.
pub fn dims(img: &Image) -> (usize, usize, usize) {
    let s = img.shape();
    (s[0], s[1], s[2])
}

#[inline]
pub fn px(img: &Image, y: usize, x: usize, c: usize) -> f32 {
    let (_, w, ch) = dims(img);
    img.data()[(y * w + x) * ch + c]
}

pub fn clamp01(img: &mut Image) {
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Bilinear sample at continuous pixel-centre coordinates, clamped at borders.
pub fn sample_bilinear(img: &Image, y: f32, x: f32, c: usize) -> f32 {
    let (h, w, _) = dims(img);
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f32;
    let fx = x - x0 as f32;
    let a = px(img, y0, x0, c) * (1.0 - fx) + px(img, y0, x1, c) * fx;
    let b = px(img, y1, x0, c) * (1.0 - fx) + px(img, y1, x1, c) * fx;
    a * (1.0 - fy) + b * fy
}

/// Crops `[y0, y0+h) × [x0, x0+w)`.
pub fn crop(img: &Image, y0: usize, x0: usize, h: usize, w: usize) -> Image {
    let (_, iw, c) = dims(img);
    let mut out = Vec::with_capacity(h * w * c);
    for y in y0..y0 + h {
        let start = (y * iw + x0) * c;
        out.extend_from_slice(&img.data()[start..start + w * c]);
    }
    Tensor::new(vec![h, w, c], out).expect("crop extents")
}

/// Bilinear resize of a continuous source window onto an `oh × ow` grid.
pub fn resize_window(img: &Image, y0: f32, x0: f32, h: f32, w: f32, oh: usize, ow: usize) -> Image {
    let (_, _, c) = dims(img);
    let mut out = new_image(oh, ow, c);
    let sy = h / oh as f32;
    let sx = w / ow as f32;
    let data = out.data_mut();
    for oy in 0..oh {
        let y = y0 + (oy as f32 + 0.5) * sy - 0.5;
        for ox in 0..ow {
            let x = x0 + (ox as f32 + 0.5) * sx - 0.5;
            for ch in 0..c {
                data[(oy * ow + ox) * c + ch] = sample_bilinear(img, y, x, ch);
            }
        }
    }
    out
}

pub fn resize(img: &Image, oh: usize, ow: usize) -> Image {
    let (h, w, _) = dims(img);
    resize_window(img, 0.0, 0.0, h as f32, w as f32, oh, ow)
}

/// Separable Gaussian blur with reflect-free edge clamping.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let (h, w, c) = dims(img);
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= s);
    let src = img.data();
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    Tensor::new(vec![h, w, c], out).expect("blur extents")
}

/// Binary H×W mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), h * w);
        Self { h, w, bits }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.w + x] = v;
    }

    pub fn fill_rect(&mut self, y0: usize, x0: usize, h: usize, w: usize) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.set(y, x, true);
            }
        }
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// 8-connected component labels (0 = background, 1.. = components) and the count.
    pub fn components(&self) -> (Vec<u32>, usize) {
        let mut labels = vec![0u32; self.bits.len()];
        let mut next = 0u32;
        let mut stack = Vec::new();
        for start in 0..self.bits.len() {
            if !self.bits[start] || labels[start] != 0 {
                continue;
            }
            next += 1;
            labels[start] = next;
            stack.push(start);
            while let Some(p) = stack.pop() {
                let (py, px) = ((p / self.w) as isize, (p % self.w) as isize);
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (y, x) = (py + dy, px + dx);
                        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
                            continue;
                        }
                        let q = y as usize * self.w + x as usize;
                        if self.bits[q] && labels[q] == 0 {
                            labels[q] = next;
                            stack.push(q);
                        }
                    }
                }
            }
        }
        (labels, next as usize)
    }

    pub fn component_count(&self) -> usize {
        self.components().1
    }
}

pub fn load_png(path: &Path) -> Result<Image, NumericsError> {
    let img = image::open(path)
        .map_err(|e| NumericsError::Shape(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(path: &Path, img: &Image) -> Result<(), NumericsError> {
    let (h, w, c) = dims(img);
    let err = |e: image::ImageError| NumericsError::Shape(format!("{}: {e}", path.display()));
    match c {
        1 => image::GrayImage::from_raw(w as u32, h as u32, img.data().iter().map(|&v| to_u8(v)).collect())
            .expect("gray buffer")
            .save(path)
            .map_err(err),
        3 => image::RgbImage::from_raw(w as u32, h as u32, img.data().iter().map(|&v| to_u8(v)).collect())
            .expect("rgb buffer")
            .save(path)
            .map_err(err),
        _ => Err(NumericsError::Shape(format!("cannot save {c}-channel image"))),
    }
}

pub fn save_mask_png(path: &Path, mask: &Mask) -> Result<(), NumericsError> {
    let buf = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    image::GrayImage::from_raw(mask.w as u32, mask.h as u32, buf)
        .expect("mask buffer")
        .save(path)
        .map_err(|e| NumericsError::Shape(format!("{}: {e}", path.display())))
}

pub fn load_mask_png(path: &Path) -> Result<Mask, NumericsError> {
    let img = image::open(path)
        .map_err(|e| NumericsError::Shape(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask::from_bits(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(|v| v >= 128).collect(),
    ))
}
