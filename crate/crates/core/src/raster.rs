//! Row-major 2D rasters shared by the depth and rendering code.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster<T> {
    width: u32,
    height: u32,
    data: Vec<T>,
}

pub type Mask = Raster<bool>;

impl<T: Clone> Raster<T> {
    pub fn filled(width: u32, height: u32, value: T) -> Self {
        Self { width, height, data: vec![value; width as usize * height as usize] }
    }
}

impl<T> Raster<T> {
    /// Wraps `data` (row-major); `None` if the length does not match.
    pub fn from_vec(width: u32, height: u32, data: Vec<T>) -> Option<Self> {
        (data.len() == width as usize * height as usize).then_some(Self { width, height, data })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> T) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> &T {
        &self.data[self.index(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: T) {
        let i = self.index(x, y);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Raster<U> {
        Raster { width: self.width, height: self.height, data: self.data.iter().map(f).collect() }
    }

    pub fn same_dims<U>(&self, other: &Raster<U>) -> bool {
        self.dims() == other.dims()
    }

    /// Pixel containing the sub-pixel location `(u, v)` (nearest integer), if inside.
    pub fn pixel_at(&self, u: f64, v: f64) -> Option<(u32, u32)> {
        let (x, y) = (u.round(), v.round());
        (x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64).then_some((x as u32, y as u32))
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|b| *b)
    }

    /// Coordinates of set pixels in row-major order.
    pub fn set_pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.data.iter().enumerate().filter(|(_, b)| **b).map(move |(i, _)| ((i % w as usize) as u32, (i / w as usize) as u32))
    }

    /// Mean `(x, y)` of set pixels.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut sx, mut sy) = (0.0, 0.0);
        for (x, y) in self.set_pixels() {
            n += 1;
            sx += x as f64;
            sy += y as f64;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }
}
