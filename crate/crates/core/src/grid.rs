//! Plain 2-D grids: grayscale/RGB images in `[0,1]` and depth masks in
//! class units `[0,4]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// H×W×C image, stored as channel planes (all of channel 0, then 1, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != h * w * channels {
            return Err(Error::InvalidArgument(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                h,
                w,
                channels
            )));
        }
        Ok(Image { h, w, channels, data })
    }

    pub fn zeros(h: usize, w: usize, channels: usize) -> Self {
        Image {
            h,
            w,
            channels,
            data: vec![0.0; h * w * channels],
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    /// Channel-averaged single-plane view.
    pub fn luma(&self) -> Mask {
        if self.channels == 1 {
            return Mask {
                h: self.h,
                w: self.w,
                data: self.data.clone(),
            };
        }
        let plane = self.h * self.w;
        let inv = 1.0 / self.channels as f32;
        let data = (0..plane)
            .map(|i| {
                let mut acc = 0.0f32;
                for c in 0..self.channels {
                    acc += self.data[c * plane + i];
                }
                acc * inv
            })
            .collect();
        Mask {
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Crop the window with top-left `(y0, x0)`; caller guarantees bounds.
    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> Image {
        let mut out = Image::zeros(size, size, self.channels);
        for c in 0..self.channels {
            for y in 0..size {
                let src = (c * self.h + y0 + y) * self.w + x0;
                let dst = (c * size + y) * size;
                out.data[dst..dst + size].copy_from_slice(&self.data[src..src + size]);
            }
        }
        out
    }
}

/// H×W grid of real class values.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    data: Vec<f32>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::InvalidArgument(format!(
                "mask data length {} does not match {}x{}",
                data.len(),
                h,
                w
            )));
        }
        Ok(Mask { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: f32) -> Self {
        Mask {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.w + x] = v;
    }

    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> Mask {
        let mut data = Vec::with_capacity(size * size);
        for y in 0..size {
            let src = (y0 + y) * self.w + x0;
            data.extend_from_slice(&self.data[src..src + size]);
        }
        Mask {
            h: size,
            w: size,
            data,
        }
    }

    /// View as a 1×1×H×W activation.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, 1, self.h, self.w], self.data.clone()).expect("mask tensor")
    }

    /// Rebuild from a 1×1×H×W (or H×W) tensor.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Mask> {
        let (h, w) = match t.shape() {
            [1, 1, h, w] => (*h, *w),
            [h, w] => (*h, *w),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "cannot view shape {:?} as a mask",
                    other
                )))
            }
        };
        Mask::new(h, w, t.data().to_vec())
    }
}
