//! Binary PPM (P6, maxval 255) images as `[3, H, W]` arrays in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Array, Scalar};

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode<T: Scalar>(img: &Array<T>) -> Result<Vec<u8>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::Invalid(format!("ppm expects [3, H, W], got {:?}", img.shape())));
    };
    if c != 3 {
        return Err(Error::Invalid(format!("ppm expects 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let d = img.data();
    for i in 0..h * w {
        for ch in 0..3 {
            out.push(quantize(d[ch * h * w + i].as_f64()));
        }
    }
    Ok(out)
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("ppm: truncated header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("ppm: bad {what}")))
}

pub fn decode(bytes: &[u8]) -> Result<Array<f32>> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != b"P6" {
        return Err(Error::Format("ppm: bad magic, expected P6".into()));
    }
    let w = header_number(bytes, &mut pos, "width")?;
    let h = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("ppm: unsupported maxval {maxval}")));
    }
    let body = &bytes[(pos + 1).min(bytes.len())..];
    if body.len() != 3 * h * w {
        return Err(Error::Format(format!("ppm: expected {} pixel bytes, found {}", 3 * h * w, body.len())));
    }
    let mut data = vec![0f32; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + i] = body[3 * i + ch] as f32 / 255.0;
        }
    }
    Array::new(&[3, h, w], data)
}

pub fn write<T: Scalar>(path: &Path, img: &Array<T>) -> Result<()> {
    fs::write(path, encode(img)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Array<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_quantization() {
        let img = Array::from_fn(&[3, 5, 7], |i| ((i * 37) % 101) as f32 / 100.0);
        let back = decode(&encode(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), &[3, 5, 7]);
        assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&Array::<f64>::zeros(&[3, 2, 4])).unwrap();
        assert!(bytes.starts_with(b"P6\n4 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 24);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let mut bytes = encode(&Array::<f32>::zeros(&[3, 2, 2])).unwrap();
        bytes[1] = b'5';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        let good = encode(&Array::<f32>::zeros(&[3, 2, 2])).unwrap();
        assert!(matches!(decode(&good[..good.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(decode(b""), Err(Error::Format(_))));
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        assert_eq!(decode(&bytes).unwrap().data(), &[1.0, 0.0, 0.2]);
    }
}
