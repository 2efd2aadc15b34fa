//! 8-bit RGB images: PPM and PNG codecs, bilinear resizing, cropping, and
//! conversion to normalized network input.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::Path;

use crate::detect::BoundingBox;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Interleaved RGB8 pixels in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

fn image_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Data(format!(
                "image {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel value with coordinates clamped to the border.
    fn at_clamped(&self, x: isize, y: isize, c: usize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[(y * self.width + x) * 3 + c] as f64
    }

    /// Bilinear sample at continuous pixel-center coordinates (pixel `i`
    /// covers `[i, i+1)` and has its center at `i + 0.5`), replicating edges.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let fx = x - 0.5;
        let fy = y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let ax = fx - x0;
        let ay = fy - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = self.at_clamped(x0, y0, c) * (1.0 - ax) + self.at_clamped(x0 + 1, y0, c) * ax;
            let bottom = self.at_clamped(x0, y0 + 1, c) * (1.0 - ax) + self.at_clamped(x0 + 1, y0 + 1, c) * ax;
            *o = top * (1.0 - ay) + bottom * ay;
        }
        out
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let v = self.sample_bilinear((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy);
                data.extend(v.iter().map(|&c| to_u8(c)));
            }
        }
        Image { width, height, data }
    }

    /// Pixels covered by `bbox`, expanded outward to whole pixels and
    /// clamped to the image. Always at least 1x1.
    pub fn crop(&self, bbox: &BoundingBox) -> Image {
        let x0 = (bbox.x_min.floor().max(0.0) as usize).min(self.width - 1);
        let y0 = (bbox.y_min.floor().max(0.0) as usize).min(self.height - 1);
        let x1 = (bbox.x_max.ceil().min(self.width as f64) as usize).max(x0 + 1);
        let y1 = (bbox.y_max.ceil().min(self.height as f64) as usize).max(y0 + 1);
        let mut data = Vec::with_capacity((x1 - x0) * (y1 - y0) * 3);
        for y in y0..y1 {
            data.extend_from_slice(&self.data[(y * self.width + x0) * 3..(y * self.width + x1) * 3]);
        }
        Image {
            width: x1 - x0,
            height: y1 - y0,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(x, y, self.pixel(self.width - 1 - x, y));
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Image {
        let row = self.width * 3;
        let data = self.data.chunks(row).rev().flatten().copied().collect();
        Image {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Planar CHW values scaled to [0, 1].
    pub fn to_chw<T: Element>(&self) -> Vec<T> {
        let plane = self.width * self.height;
        let mut out = vec![T::zero(); plane * 3];
        let inv = 1.0 / 255.0;
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = T::of(px[c] as f64 * inv);
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| image_err(path, e.to_string()))?;
        if bytes.starts_with(b"\x89PNG") {
            decode_png(&bytes).map_err(|d| image_err(path, d))
        } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P3") {
            decode_ppm(&bytes).map_err(|d| image_err(path, d))
        } else {
            Err(image_err(path, "unsupported format (expected PNG or PPM)"))
        }
    }

    /// Writes PNG or PPM depending on the extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        let bytes = match ext.as_str() {
            "png" => self.encode_png().map_err(|d| image_err(path, d))?,
            "ppm" => self.encode_ppm(),
            _ => return Err(image_err(path, "unknown image extension")),
        };
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn encode_png(&self) -> std::result::Result<Vec<u8>, String> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(BufWriter::new(&mut buf), self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| e.to_string())?;
            w.write_image_data(&self.data).map_err(|e| e.to_string())?;
        }
        Ok(buf)
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Stacks equally sized images into an NCHW batch.
pub fn images_to_batch<T: Element>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Data("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(Error::ShapeMismatch {
                op: "images_to_batch",
                left: vec![h, w],
                right: vec![img.height, img.width],
            });
        }
        data.extend(img.to_chw::<T>());
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Splits PPM header tokens, skipping `#` comments. Returns the tokens and
/// the offset just past the single whitespace that ends the header.
fn ppm_header(bytes: &[u8], count: usize) -> std::result::Result<(Vec<String>, usize), String> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err("truncated PPM header".into());
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    Ok((tokens, i + 1))
}

fn decode_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let (tok, body) = ppm_header(bytes, 4)?;
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PPM header value {s:?}"));
    let (w, h, max) = (num(&tok[1])?, num(&tok[2])?, num(&tok[3])?);
    if w == 0 || h == 0 || max == 0 || max > 255 {
        return Err(format!("unsupported PPM geometry {w}x{h} max {max}"));
    }
    let rescale = |v: usize| ((v * 255 + max / 2) / max) as u8;
    let n = w * h * 3;
    let data: Vec<u8> = if tok[0] == "P6" {
        let raw = bytes.get(body..body + n).ok_or("truncated PPM pixel data")?;
        raw.iter().map(|&v| rescale(v as usize)).collect()
    } else {
        let text = String::from_utf8_lossy(bytes.get(body.min(bytes.len())..).unwrap_or(&[]));
        let vals: std::result::Result<Vec<u8>, String> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace)
            .take(n)
            .map(|s| num(s).map(rescale))
            .collect();
        let vals = vals?;
        if vals.len() != n {
            return Err("truncated PPM pixel data".into());
        }
        vals
    };
    Ok(Image { width: w, height: h, data })
}

fn decode_png(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or("PNG too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let data: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err("indexed PNG not expanded".into()),
    };
    Image::new(w, h, data).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(w: usize, h: usize) -> Image {
        let data = (0..w * h * 3).map(|i| (i * 37 % 251) as u8).collect();
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn ppm_and_png_round_trip() {
        let img = pattern(7, 5);
        assert_eq!(decode_ppm(&img.encode_ppm()).unwrap(), img);
        assert_eq!(decode_png(&img.encode_png().unwrap()).unwrap(), img);
    }

    #[test]
    fn ascii_ppm_with_comments() {
        let text = b"P3\n# comment\n2 1\n255\n255 0 0  0 0 255\n";
        let img = decode_ppm(text).unwrap();
        assert_eq!(img.data, vec![255, 0, 0, 0, 0, 255]);
    }

    #[test]
    fn truncated_ppm_is_an_error() {
        let mut bytes = pattern(4, 4).encode_ppm();
        bytes.truncate(bytes.len() - 3);
        assert!(decode_ppm(&bytes).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = pattern(6, 4);
        assert_eq!(img.resize(6, 4), img);
        let flat = Image::filled(5, 3, [10, 20, 30]);
        assert_eq!(flat.resize(11, 8), Image::filled(11, 8, [10, 20, 30]));
    }

    #[test]
    fn downscale_by_two_averages_blocks() {
        // Half-pixel centers land exactly between 2x2 blocks.
        let img = Image::new(2, 2, vec![0, 0, 0, 100, 100, 100, 50, 50, 50, 150, 150, 150]).unwrap();
        assert_eq!(img.resize(1, 1).data, vec![75, 75, 75]);
    }

    #[test]
    fn crop_expands_to_whole_pixels() {
        let img = pattern(10, 8);
        let c = img.crop(&BoundingBox::new(1.5, 2.0, 4.2, 5.0).unwrap());
        assert_eq!((c.width, c.height), (4, 3));
        assert_eq!(c.pixel(0, 0), img.pixel(1, 2));
        let edge = img.crop(&BoundingBox::new(9.5, 7.5, 12.0, 9.0).unwrap());
        assert_eq!((edge.width, edge.height), (1, 1));
    }

    #[test]
    fn chw_layout_and_scaling() {
        let img = Image::new(2, 1, vec![255, 0, 51, 0, 255, 0]).unwrap();
        let v: Vec<f64> = img.to_chw();
        assert_eq!(v, vec![1.0, 0.0, 0.0, 1.0, 0.2, 0.0]);
    }
}
