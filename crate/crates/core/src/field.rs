//! Single-plane `H x W` rasters (labels, masks, attention weights).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Field<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Field<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::shape("field", format!("{height}x{width} needs {} values, got {}", height * width, data.len())));
        }
        Ok(Field { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Field { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Field { height, width, data }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    /// Value with coordinates clamped into the raster (edge replication).
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize) -> T {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Field<U> {
        Field { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn transpose(&self) -> Self {
        Field::from_fn(self.width, self.height, |y, x| self.get(x, y))
    }

    pub fn flip_horizontal(&self) -> Self {
        Field::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        Field::from_fn(self.height, self.width, |y, x| self.get(self.height - 1 - y, x))
    }

    /// Top-left `height x width` window.
    pub fn crop(&self, height: usize, width: usize) -> Self {
        assert!(height <= self.height && width <= self.width, "crop larger than field");
        Field::from_fn(height, width, |y, x| self.get(y, x))
    }
}

impl Field<u8> {
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}
