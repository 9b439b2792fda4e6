use std::path::Path;

use crate::error::{Error, Result};

/// Floating-point image, samples interleaved per pixel, rows top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        ImageBuffer {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidParameter(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::dims(
                format!("{} samples", width * height * channels),
                format!("{} samples", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite sample".into()));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.set(x, y, c, f(x, y, c));
                }
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Sample with coordinates clamped to the image (edge replication).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y, c)
    }

    /// Bilinear sample at a real-valued position, edge-replicated outside.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let a = self.get_clamped(x0, y0, c);
        let b = self.get_clamped(x0 + 1, y0, c);
        let d = self.get_clamped(x0, y0 + 1, c);
        let e = self.get_clamped(x0 + 1, y0 + 1, c);
        (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (d * (1.0 - fx) + e * fx) * fy
    }

    /// Copies one channel out as a single-channel image.
    pub fn channel(&self, c: usize) -> ImageBuffer {
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px[c])
            .collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Interleaves single-channel planes back into one image.
    pub fn from_channels(planes: &[ImageBuffer]) -> Result<ImageBuffer> {
        let first = planes
            .first()
            .ok_or_else(|| Error::InvalidParameter("no channels".into()))?;
        let (w, h) = first.dims();
        if planes.iter().any(|p| p.dims() != (w, h) || p.channels != 1) {
            return Err(Error::dims(
                format!("{w}x{h}x1 planes"),
                "planes of differing shape",
            ));
        }
        let n = planes.len();
        let mut data = vec![0.0; w * h * n];
        for (c, plane) in planes.iter().enumerate() {
            for (i, v) in plane.data.iter().enumerate() {
                data[i * n + c] = *v;
            }
        }
        ImageBuffer::from_vec(w, h, n, data)
    }

    /// Rec. 601 luma for RGB; copies single-channel input.
    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Copies the `w`x`h` window with top-left corner (`x0`, `y0`).
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImageBuffer> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::dims(
                format!("window inside {}x{}", self.width, self.height),
                format!("{w}x{h} at ({x0}, {y0})"),
            ));
        }
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Ok(ImageBuffer {
            width: w,
            height: h,
            channels: self.channels,
            data,
        })
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// 8-bit samples, round-half-up after clamping to [0, 1].
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, samples: &[u8]) -> Result<Self> {
        let data = samples.iter().map(|&b| b as f64 / 255.0).collect();
        Self::from_vec(width, height, channels, data)
    }

    /// Loads any PNG; gray and gray+alpha become one channel, everything else RGB.
    pub fn load_png(path: &Path) -> Result<ImageBuffer> {
        let bytes = crate::codec::read_file(path)?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(
            |e| Error::Image {
                path: path.to_path_buf(),
                reason: e.to_string(),
            },
        )?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img.color() {
            image::ColorType::L8 | image::ColorType::La8 | image::ColorType::L16 | image::ColorType::La16 => {
                let luma = img.to_luma8();
                Self::from_u8(w, h, 1, luma.as_raw())
            }
            _ => {
                let rgb = img.to_rgb8();
                Self::from_u8(w, h, 3, rgb.as_raw())
            }
        }
    }

    /// Writes an 8-bit PNG (gray or RGB according to the channel count).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(
            path,
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            color,
        )
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize_u8(0.5 / 255.0), 1);
        assert_eq!(quantize_u8(0.49 / 255.0), 0);
        assert_eq!(quantize_u8(1.7), 255);
        assert_eq!(quantize_u8(-0.2), 0);
    }

    #[test]
    fn channel_split_and_merge() {
        let img = ImageBuffer::from_fn(4, 3, 3, |x, y, c| (x + 10 * y + 100 * c) as f64 / 400.0);
        let planes: Vec<_> = (0..3).map(|c| img.channel(c)).collect();
        assert_eq!(ImageBuffer::from_channels(&planes).unwrap(), img);
    }

    #[test]
    fn bilinear_matches_grid_and_midpoints() {
        let img = ImageBuffer::from_fn(3, 3, 1, |x, y, _| (x + 3 * y) as f64);
        assert_eq!(img.sample_bilinear(1.0, 2.0, 0), 7.0);
        assert!((img.sample_bilinear(0.5, 0.5, 0) - 2.0).abs() < 1e-12);
        // Outside the image the edge is replicated.
        assert_eq!(img.sample_bilinear(-4.0, 0.0, 0), 0.0);
        assert_eq!(img.sample_bilinear(9.0, 9.0, 0), 8.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ImageBuffer::from_vec(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageBuffer::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageBuffer::from_vec(1, 1, 1, vec![f64::NAN]).is_err());
        let img = ImageBuffer::new(5, 5, 1);
        assert!(img.crop(3, 3, 3, 1).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = std::env::temp_dir().join(format!("blurfield-png-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.png");
        let img = ImageBuffer::from_fn(7, 5, 3, |x, y, c| ((x * 31 + y * 7 + c * 50) % 256) as f64 / 255.0);
        img.save_png(&path).unwrap();
        let back = ImageBuffer::load_png(&path).unwrap();
        assert_eq!(back.to_u8(), img.to_u8());
        std::fs::remove_dir_all(&dir).ok();
    }
}
