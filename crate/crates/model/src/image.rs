//! RGB images and the netpbm formats used on disk.

use std::io::Write;
use std::path::Path;

use spgnn_core::Tensor;

use crate::error::{ModelError, Result};

/// Smallest accepted height or width.
pub const MIN_SIDE: usize = 32;

/// RGB image with values in `[0, 1]`, stored as a `3 x H x W` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor,
}

impl Image {
    /// Wrap a `3 x H x W` tensor, clamping values into `[0, 1]`.
    pub fn new(pixels: Tensor) -> Result<Self> {
        let (c, h, w) = pixels.dims3("image").map_err(ModelError::from)?;
        if c != 3 {
            return Err(ModelError::Image(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(ModelError::Image(format!(
                "{w}x{h} is smaller than the {MIN_SIDE}px minimum"
            )));
        }
        let mut pixels = pixels;
        for v in pixels.data_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Image { pixels })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut t = Tensor::zeros(&[3, height, width]);
        let d = t.data_mut();
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for c in 0..3 {
                    d[(c * height + y) * width + x] = px[c];
                }
            }
        }
        Image::new(t)
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let (h, w) = (self.height(), self.width());
        let d = self.pixels.data();
        [d[y * w + x], d[(h + y) * w + x], d[(2 * h + y) * w + x]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let (h, w) = (self.height(), self.width());
        let d = self.pixels.data_mut();
        for (c, v) in rgb.iter().enumerate() {
            d[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
        }
    }

    /// Pad bottom and right by reflection so both sides are multiples of
    /// `multiple`. Returns the padded image and the `(bottom, right)` padding.
    pub fn pad_to_multiple(&self, multiple: usize) -> Result<(Image, (usize, usize))> {
        let (h, w) = (self.height(), self.width());
        let nh = h.div_ceil(multiple) * multiple;
        let nw = w.div_ceil(multiple) * multiple;
        if nh == h && nw == w {
            return Ok((self.clone(), (0, 0)));
        }
        if nh - h >= h || nw - w >= w {
            return Err(ModelError::Image("padding larger than the image".into()));
        }
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        let img = Image::from_fn(nh, nw, |y, x| self.get(reflect(y, h), reflect(x, w)))?;
        Ok((img, (nh - h, nw - w)))
    }

    /// Parse a binary PPM (`P6`, maxval <= 255).
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (header, body) = parse_netpbm_header(bytes, b"P6")?;
        let [w, h, maxval] = header;
        if maxval == 0 || maxval > 255 {
            return Err(ModelError::Image(format!("unsupported maxval {maxval}")));
        }
        if body.len() < w * h * 3 {
            return Err(ModelError::Image("truncated pixel data".into()));
        }
        let scale = maxval as f64;
        Image::from_fn(h, w, |y, x| {
            let i = (y * w + x) * 3;
            [
                body[i] as f64 / scale,
                body[i + 1] as f64 / scale,
                body[i + 2] as f64 / scale,
            ]
        })
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_ppm(&std::fs::read(path)?)
    }

    /// Encode as binary PPM with 8-bit channels.
    pub fn to_ppm(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        out.reserve(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                for v in self.get(y, x) {
                    out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_ppm())?;
        Ok(())
    }

    /// Mean of all values of channel `c`.
    pub fn channel_mean(&self, c: usize) -> f64 {
        let n = self.height() * self.width();
        self.pixels.data()[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64
    }
}

fn parse_netpbm_header<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<([usize; 3], &'a [u8])> {
    if !bytes.starts_with(magic) {
        return Err(ModelError::Image(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(ModelError::Image("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ModelError::Image("malformed header".into()))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ModelError::Image("malformed header".into()));
    }
    Ok((fields, &bytes[pos + 1..]))
}

/// Encode a label map as a 16-bit binary PGM (`P5`, big-endian samples).
pub fn encode_pgm16(labels: &[usize], width: usize, height: usize) -> Result<Vec<u8>> {
    if let Some(l) = labels.iter().find(|&&l| l > u16::MAX as usize) {
        return Err(ModelError::Image(format!("label {l} exceeds 16 bits")));
    }
    // maxval above 255 is what marks the samples as two bytes wide
    let mut out = format!("P5\n{width} {height}\n{}\n", u16::MAX).into_bytes();
    for &l in labels {
        out.extend_from_slice(&(l as u16).to_be_bytes());
    }
    Ok(out)
}

/// Decode a binary PGM with 8- or 16-bit samples.
pub fn decode_pgm(bytes: &[u8]) -> Result<(Vec<usize>, usize, usize)> {
    let ([w, h, maxval], body) = parse_netpbm_header(bytes, b"P5")?;
    let wide = maxval > 255;
    let need = w * h * if wide { 2 } else { 1 };
    if body.len() < need {
        return Err(ModelError::Image("truncated pixel data".into()));
    }
    let labels = if wide {
        body[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as usize)
            .collect()
    } else {
        body[..need].iter().map(|&b| b as usize).collect()
    };
    Ok((labels, w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x| [x as f64 / w as f64, y as f64 / h as f64, 0.5]).unwrap()
    }

    #[test]
    fn ppm_round_trip_is_exact_on_8bit_values() {
        let img = Image::from_fn(40, 33, |y, x| {
            [((x * 7 + y) % 256) as f64 / 255.0, (y % 256) as f64 / 255.0, 1.0]
        })
        .unwrap();
        let back = Image::from_ppm(&img.to_ppm()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_header_with_comment() {
        let mut bytes = b"P6\n# made by hand\n32 32\n255\n".to_vec();
        bytes.extend(std::iter::repeat_n(255u8, 32 * 32 * 3));
        let img = Image::from_ppm(&bytes).unwrap();
        assert_eq!(img.get(5, 5), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_small_and_bad_images() {
        assert!(Image::new(Tensor::zeros(&[3, 31, 64])).is_err());
        assert!(Image::new(Tensor::zeros(&[1, 64, 64])).is_err());
        assert!(Image::from_ppm(b"P3\n1 1\n255\n").is_err());
    }

    #[test]
    fn values_are_clamped() {
        let img = Image::new(Tensor::full(&[3, 32, 32], 3.0)).unwrap();
        assert!(img.pixels().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn reflection_padding() {
        let img = gradient(40, 50);
        let (p, pad) = img.pad_to_multiple(32).unwrap();
        assert_eq!((p.height(), p.width()), (64, 64));
        assert_eq!(pad, (24, 14));
        assert_eq!(p.get(40, 10), img.get(38, 10));
        assert_eq!(p.get(3, 52), img.get(3, 46));
        let (same, none) = gradient(64, 32).pad_to_multiple(32).unwrap();
        assert_eq!(none, (0, 0));
        assert_eq!(same.height(), 64);
    }

    #[test]
    fn pgm16_round_trip() {
        let labels: Vec<usize> = (0..12).map(|i| i * 300).collect();
        let bytes = encode_pgm16(&labels, 4, 3).unwrap();
        assert_eq!(decode_pgm(&bytes).unwrap(), (labels, 4, 3));
        let small = vec![0, 1, 2, 1, 0, 3];
        let bytes = encode_pgm16(&small, 3, 2).unwrap();
        assert_eq!(decode_pgm(&bytes).unwrap(), (small, 3, 2));
    }
}
