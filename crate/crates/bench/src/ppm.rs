//! Binary PPM (P6, maxval 255). Pixel `p` maps to `2p/255 − 1`; writing
//! inverts that with round-half-up after clamping to `[−1, 1]`.

use std::io::Write;
use std::path::Path;

use lore_tensor::Tensor;

use crate::error::{BenchError, Result};

/// Largest accepted width or height.
pub const MAX_SIDE: usize = 4096;

fn bad(msg: impl Into<String>) -> BenchError {
    BenchError::Image(msg.into())
}

struct Header<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&c) = self.bytes.get(self.at) {
            if c == b'#' {
                while self.bytes.get(self.at).is_some_and(|&c| c != b'\n') {
                    self.at += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.at += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.at;
        while self.bytes.get(self.at).is_some_and(u8::is_ascii_digit) {
            self.at += 1;
            if self.at - start > 6 {
                return Err(bad(format!("{what} has too many digits")));
            }
        }
        if start == self.at {
            return Err(bad(format!("missing {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.at]).expect("ascii digits");
        Ok(text.parse().expect("bounded digit run"))
    }
}

/// Decodes a P6 image into `[H, W, 3]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let mut h = Header { bytes, at: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(bad(format!("maxval {maxval} unsupported, expected 255")));
    }
    if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE {
        return Err(bad(format!("size {width}x{height} out of range")));
    }
    match bytes.get(h.at) {
        Some(c) if c.is_ascii_whitespace() => h.at += 1,
        _ => return Err(bad("missing whitespace before pixel data")),
    }
    let need = width * height * 3;
    let data = &bytes[h.at..];
    if data.len() != need {
        return Err(bad(format!("expected {need} pixel bytes, found {}", data.len())));
    }
    let px = data.iter().map(|&p| 2.0 * p as f32 / 255.0 - 1.0).collect();
    Ok(Tensor::new(vec![height, width, 3], px)?)
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 || s[0] == 0 || s[1] == 0 {
        return Err(bad(format!("image shape {s:?} is not [H, W, 3]")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// `[-1, 1]` → byte, round-half-up. NaN maps to 0.
pub fn quantize(v: f32) -> u8 {
    let x = (v.clamp(-1.0, 1.0) as f64 + 1.0) * 127.5;
    if x.is_nan() {
        0
    } else {
        (x + 0.5).floor().min(255.0) as u8
    }
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_ppm(image)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Mask image → row-major flags; a pixel is set when any channel is nonzero.
pub fn mask_from_image(image: &Tensor) -> Vec<bool> {
    image.data().chunks(3).map(|px| px.iter().any(|&v| quantize(v) != 0)).collect()
}

/// Flags → white-on-black mask image.
pub fn mask_to_image(mask: &[bool], height: usize, width: usize) -> Result<Tensor> {
    if mask.len() != height * width {
        return Err(bad(format!("mask has {} pixels, expected {}", mask.len(), height * width)));
    }
    let data = mask.iter().flat_map(|&m| [if m { 1.0 } else { -1.0 }; 3]).collect();
    Ok(Tensor::new(vec![height, width, 3], data)?)
}

/// Blends a token-grid heatmap, scaled by its own maximum, over an image:
/// half image, half a black→red→yellow ramp, each cell spread over its patch.
pub fn heatmap_overlay(image: &Tensor, grid: usize, values: &[f32]) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        &[h, w, 3] => (h, w),
        s => return Err(bad(format!("expected an [H, W, 3] image, got {s:?}"))),
    };
    if grid == 0 || values.len() != grid * grid || h % grid != 0 || w % grid != 0 {
        return Err(bad(format!("{} heat values do not tile a {h}x{w} image", values.len())));
    }
    let peak = values.iter().fold(0.0f32, |a, &b| a.max(b));
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let (ph, pw) = (h / grid, w / grid);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let v = (values[(y / ph) * grid + x / pw] * scale).clamp(0.0, 1.0);
            let heat = [(2.0 * v).min(1.0), (2.0 * v - 1.0).max(0.0), 0.0];
            for c in 0..3 {
                let px = image.data()[(y * w + x) * 3 + c];
                data.push(0.5 * px + 0.5 * (2.0 * heat[c] - 1.0));
            }
        }
    }
    Ok(Tensor::new(vec![h, w, 3], data)?)
}

#[cfg(test)]
mod tests {

    #[test]
    fn heatmap_peak_is_yellow_and_zero_is_dark() {
        let img = Tensor::new(vec![4, 4, 3], vec![1.0; 48]).unwrap();
        let out = heatmap_overlay(&img, 2, &[0.0, 0.5, 0.25, 0.0]).unwrap();
        assert_eq!(&out.data()[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&out.data()[6..9], &[1.0, 1.0, 0.0]);
        assert!(heatmap_overlay(&img, 3, &[0.0; 9]).is_err());
    }
    use super::*;

    #[test]
    fn decode_encode_is_byte_exact() {
        let mut bytes = b"P6\n# comment\n3 2\n255\n".to_vec();
        bytes.extend((0..18).map(|i| (i * 14) as u8));
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.shape(), [2, 3, 3]);
        let again = encode_ppm(&img).unwrap();
        assert_eq!(&again[again.len() - 18..], &bytes[bytes.len() - 18..]);
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 128); // 127.5 rounds up
        assert_eq!(quantize(5.0), 255);
        assert_eq!(quantize(f32::NAN), 0);
    }

    #[test]
    fn rejects_malformed_headers() {
        for bytes in [
            &b"P3\n1 1\n255\n\0\0\0"[..],
            b"P6\n1 1\n65535\n\0\0\0",
            b"P6\n0 1\n255\n",
            b"P6\n1 1\n255\n\0\0",
            b"P6\n1 1\n255\n\0\0\0\0",
            b"P6 1",
            b"P6\n99999999 1\n255\n",
        ] {
            assert!(decode_ppm(bytes).is_err(), "{bytes:?}");
        }
    }

    #[test]
    fn mask_round_trip() {
        let mask = vec![true, false, false, true, true, false];
        let img = mask_to_image(&mask, 2, 3).unwrap();
        assert_eq!(mask_from_image(&img), mask);
    }
}
