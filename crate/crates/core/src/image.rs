use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use wssis_nn::Tensor;

use crate::error::{Result, WssisError};

/// 8-bit interleaved RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(WssisError::InvalidShape(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[3, H, W]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = f64::from(px[c]) / 255.0;
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], data).expect("image tensor shape")
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.put_pixel(y, self.width - 1 - x, self.pixel(y, x));
            }
        }
        out
    }

    /// Moves content by `(dx, dy)`, replicating edge pixels into the gap.
    pub fn shift(&self, dx: i64, dy: i64) -> RgbImage {
        let mut out = RgbImage::new(self.width, self.height);
        let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
        for y in 0..self.height {
            for x in 0..self.width {
                let sy = clamp(y as i64 - dy, self.height);
                let sx = clamp(x as i64 - dx, self.width);
                out.put_pixel(y, x, self.pixel(sy, sx));
            }
        }
        out
    }

    /// Applies `f` to every pixel.
    pub fn map_pixels(&self, f: impl Fn([u8; 3]) -> [u8; 3]) -> RgbImage {
        let mut out = self.clone();
        for px in out.data.chunks_exact_mut(3) {
            let v = f([px[0], px[1], px[2]]);
            px.copy_from_slice(&v);
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| WssisError::io(path.display().to_string(), e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| WssisError::Input(format!("{}: {e}", path.display())))?;
        writer
            .write_image_data(&self.data)
            .map_err(|e| WssisError::Input(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| WssisError::io(path.display().to_string(), e))?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let bad = |e: png::DecodingError| WssisError::Input(format!("{}: {e}", path.display()));
        let mut reader = decoder.read_info().map_err(bad)?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| WssisError::Input(format!("{}: image too large", path.display())))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(bad)?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(WssisError::Input(format!(
                "{}: expected 8-bit RGB, got {:?}/{:?}",
                path.display(),
                info.color_type,
                info.bit_depth
            )));
        }
        buf.truncate(info.buffer_size());
        Self::from_raw(info.width as usize, info.height as usize, buf)
    }
}
