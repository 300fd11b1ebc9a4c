//! Square RGB images with values in [0, 1].

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    size: usize,
    /// Row-major, interleaved RGB.
    data: Vec<f32>,
}

impl Image {
    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend_from_slice(&rgb);
        }
        Self { size, data }
    }

    pub fn from_raw(size: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), size * size * 3, "image buffer size mismatch");
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.size + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.size + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.size {
            for x in 0..self.size {
                out.set_pixel(y, x, self.pixel(y, self.size - 1 - x));
            }
        }
        out
    }

    /// Nearest-neighbour resample of the normalized window
    /// `[x0, x0 + side] × [y0, y0 + side]` to `out_size` pixels square.
    pub fn resample(&self, x0: f64, y0: f64, side: f64, out_size: usize) -> Self {
        let mut out = Image::filled(out_size, [0.0; 3]);
        let s = self.size as f64;
        for oy in 0..out_size {
            let v = y0 + side * (oy as f64 + 0.5) / out_size as f64;
            let sy = ((v * s).floor() as isize).clamp(0, self.size as isize - 1) as usize;
            for ox in 0..out_size {
                let u = x0 + side * (ox as f64 + 0.5) / out_size as f64;
                let sx = ((u * s).floor() as isize).clamp(0, self.size as isize - 1) as usize;
                out.set_pixel(oy, ox, self.pixel(sy, sx));
            }
        }
        out
    }

    /// Copies `tile` into the pixel block starting at (`y0`, `x0`),
    /// resampling it to `w × h`.
    pub fn paste_resized(&mut self, tile: &Image, y0: usize, x0: usize, h: usize, w: usize) {
        let ts = tile.size as f64;
        for dy in 0..h {
            let sy = (((dy as f64 + 0.5) / h as f64 * ts).floor() as usize).min(tile.size - 1);
            for dx in 0..w {
                let sx = (((dx as f64 + 0.5) / w as f64 * ts).floor() as usize).min(tile.size - 1);
                self.set_pixel(y0 + dy, x0 + dx, tile.pixel(sy, sx));
            }
        }
    }

    /// Raw pixel file: `u32` LE height, `u32` LE width, then `h·w·3` `f32` LE values.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.data.len() * 4);
        out.extend_from_slice(&(self.size as u32).to_le_bytes());
        out.extend_from_slice(&(self.size as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 8 {
            return Err("pixel file shorter than its header".into());
        }
        let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if h != w {
            return Err(format!("pixel file is {h}x{w}; only square images are supported"));
        }
        let n = h * w * 3;
        if bytes.len() != 8 + n * 4 {
            return Err(format!("pixel file has {} bytes, expected {}", bytes.len(), 8 + n * 4));
        }
        let data: Vec<f32> = bytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("pixel values must lie in [0, 1]".into());
        }
        Ok(Self { size: h, data })
    }
}
