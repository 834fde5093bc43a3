//! Binary PGM output and PPM/PGM image input.

use std::path::Path;

use uovn_core::Tensor;

use crate::error::{read, write, Error, Result};

/// `P5` with maxval 255 when every value fits a byte, 65535 otherwise.
pub fn encode_pgm(width: usize, height: usize, values: &[u16]) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "pgm size");
    let wide = values.iter().any(|&v| v > 255);
    let mut out = format!("P5\n{width} {height}\n{}\n", if wide { 65535 } else { 255 }).into_bytes();
    for &v in values {
        if wide {
            out.extend_from_slice(&v.to_be_bytes());
        } else {
            out.push(v as u8);
        }
    }
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<()> {
    write(path, &encode_pgm(width, height, values))
}

/// Binary mask as 0/255.
pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let v: Vec<u16> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_pgm(path, width, height, &v)
}

fn header(bytes: &[u8]) -> std::result::Result<(String, [usize; 3], usize), String> {
    // magic, width, height, maxval separated by whitespace, with # comments
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    Ok((fields[0].clone(), [num(&fields[1])?, num(&fields[2])?, num(&fields[3])?], pos + 1))
}

/// Decode `P6` (RGB) or `P5` (gray, replicated) with maxval ≤ 255 into an
/// `[H, W, 3]` tensor in `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let (magic, [w, h, max], start) = header(bytes)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(format!("unsupported netpbm type {m}")),
    };
    if max == 0 || max > 255 {
        return Err(format!("maxval {max} unsupported"));
    }
    let n = w * h * channels;
    let body = bytes.get(start..start + n).ok_or("truncated pixel data")?;
    let mut data = Vec::with_capacity(w * h * 3);
    for px in body.chunks_exact(channels) {
        for c in 0..3 {
            data.push(px[c.min(channels - 1)] as f32 / max as f32);
        }
    }
    Tensor::new(&[h, w, 3], data).map_err(|e| e.to_string())
}

pub fn encode_ppm(image: &Tensor<f32>) -> Vec<u8> {
    let s = image.shape();
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    decode_image(&read(path)?).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_at_byte_precision() {
        let img = Tensor::new(&[1, 2, 3], vec![0.0, 1.0, 0.2, 0.4, 0.6, 0.8]).unwrap();
        let back = decode_image(&encode_ppm(&img)).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn pgm_header_and_gray_input() {
        let bytes = encode_pgm(2, 1, &[0, 255]);
        assert!(bytes.starts_with(b"P5\n2 1\n255\n"));
        let img = decode_image(&bytes).unwrap();
        assert_eq!(img.shape(), &[1, 2, 3]);
        assert_eq!(img.data()[3..], [1.0, 1.0, 1.0]);
        let wide = encode_pgm(1, 1, &[300]);
        assert!(wide.starts_with(b"P5\n1 1\n65535\n"));
        assert_eq!(&wide[wide.len() - 2..], &300u16.to_be_bytes());
    }

    #[test]
    fn comments_and_errors() {
        let img = decode_image(b"P6 # c\n1 1\n# x\n255\n\x00\x80\xff").unwrap();
        assert_eq!(img.data()[2], 1.0);
        assert!(decode_image(b"P6\n2 2\n255\n\x00").unwrap_err().contains("truncated"));
        assert!(decode_image(b"P3\n1 1\n255\n0 0 0").is_err());
    }
}
