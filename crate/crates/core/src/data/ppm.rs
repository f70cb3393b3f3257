//! Binary PPM (P6, maxval 255) images as `[3, h, w]` tensors in [0, 1].

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Serialize an image. Values are mapped with `round(v * 255)` and clamped.
pub fn encode(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *img.shape() {
        [3, h, w] => (h, w),
        _ => {
            return Err(Error::invalid(format!(
                "PPM images are [3, h, w], got {:?}",
                img.shape()
            )))
        }
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = img.data();
    out.reserve(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            out.push(to_byte(d[c * plane + p]));
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(Error::format(format!(
            "bad PPM magic {:?}, expected P6",
            String::from_utf8_lossy(magic)
        )));
    }
    let w = number(bytes, &mut pos)?;
    let h = number(bytes, &mut pos)?;
    let maxval = number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::format(format!(
            "unsupported PPM maxval {maxval}, expected 255"
        )));
    }
    if w == 0 || h == 0 {
        return Err(Error::format("PPM dimensions must be positive"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if bytes.get(pos).is_none_or(|b| !b.is_ascii_whitespace()) {
        return Err(Error::format("truncated PPM header"));
    }
    pos += 1;
    let plane = w
        .checked_mul(h)
        .ok_or_else(|| Error::format("PPM dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < 3 * plane {
        return Err(Error::format(format!(
            "truncated PPM payload: {} of {} bytes",
            payload.len(),
            3 * plane
        )));
    }
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in payload[..3 * plane].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while let Some(&b) = bytes.get(*pos) {
        if b == b'#' {
            while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                *pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    skip_space_and_comments(bytes, pos);
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("truncated PPM header"));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            Error::format(format!(
                "bad PPM header field {:?}",
                String::from_utf8_lossy(t)
            ))
        })
}

pub fn ppm_write(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let bytes = encode(img)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn ppm_read(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel_file_bytes() {
        let b = encode(&Tensor::ones([3, 1, 1])).unwrap();
        assert_eq!(b, b"P6\n1 1\n255\n\xff\xff\xff");
        // 3 + 4 + 4 header bytes and one RGB triple.
        assert_eq!(b.len(), 14);
    }

    #[test]
    fn byte_images_roundtrip() {
        let img = Tensor::from_fn([3, 5, 7], |i| {
            ((i[0] * 89 + i[1] * 31 + i[2] * 7) % 256) as f64 / 255.0
        });
        let back = decode(&encode(&img).unwrap()).unwrap();
        assert_eq!(back, img);
        // Channel-interleaved layout: first pixel is (R, G, B) of (0, 0).
        let b = encode(&img).unwrap();
        assert_eq!(&b[11..14], &[0, 89, 178]);
    }

    #[test]
    fn clamps_and_rounds() {
        assert_eq!(to_byte(-0.3), 0);
        assert_eq!(to_byte(1.7), 255);
        assert_eq!(to_byte(0.5), 128);
        assert_eq!(to_byte(1.0 / 255.0 * 3.49), 3);
    }

    #[test]
    fn rejects_malformed_files() {
        let good = encode(&Tensor::zeros([3, 2, 2])).unwrap();
        let mut p5 = good.clone();
        p5[1] = b'5';
        assert!(matches!(decode(&p5), Err(Error::Format(_))));
        assert!(decode(&good[..good.len() - 1]).is_err());
        assert!(decode(b"P6\n2 2\n65535\n").is_err());
        assert!(decode(b"P6\n2").is_err());
        assert!(decode(b"").is_err());
        assert!(encode(&Tensor::zeros([1, 2, 2])).is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode(b"P6 # made by hand\n1 1\n255\n\x00\x80\xff").unwrap();
        assert_eq!(img.data(), &[0.0, 128.0 / 255.0, 1.0]);
    }
}
