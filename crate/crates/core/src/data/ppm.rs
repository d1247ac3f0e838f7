//! Binary PPM (P6, maxval 255) codec for `[3,H,W]` tensors in `[0,1]`.

use std::fs;
use std::path::Path;

use crate::error::{format_err, shape_err, Error, Result};
use crate::tensor::Tensor;

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(format_err("PPM header ends early")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            format_err(format!(
                "PPM {what} is not a number: {:?}",
                String::from_utf8_lossy(tok)
            ))
        })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(format_err(format!(
            "not a binary PPM: magic {:?}, expected \"P6\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(format_err(format!("PPM maxval {maxval} is unsupported (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(format!("PPM has empty dimensions {width}x{height}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(format_err("PPM header ends early"));
    }
    pos += 1;
    let body = &bytes[pos..];
    let plane = width * height;
    if body.len() < 3 * plane {
        return Err(format_err(format!(
            "PPM raster truncated: {} of {} bytes for {}x{}",
            body.len(),
            3 * plane,
            width,
            height
        )));
    }
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in body[..3 * plane].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, height, width], data)
}

/// Rounds half away from zero after scaling by 255, clamping to `[0,255]`.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match img.shape() {
        &[3, h, w] | &[1, 3, h, w] => (h, w),
        s => return Err(shape_err("encode_ppm", format!("expected [3,H,W], got {:?}", s))),
    };
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            let v = img.data()[c * plane + p];
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Format(d) => format_err(format!("{}: {d}", path.display())),
        other => other,
    })
}

pub fn save_ppm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn red_pixel() {
        let t = decode_ppm(b"P6\n1 1\n255\n\xff\x00\x00").unwrap();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0]);
        assert_eq!(encode_ppm(&t).unwrap(), b"P6\n1 1\n255\n\xff\x00\x00");
    }

    #[test]
    fn header_comments_and_layout() {
        let t = decode_ppm(b"P6 # comment\n2 1 # w h\n255\n\x00\x00\x00\x00\xff\x33").unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        // Channel planes: R = [0,0], G = [0,1], B = [0,0.2].
        assert_eq!(t.data(), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.2]);
    }

    #[test]
    fn errors() {
        let err = |b: &[u8]| decode_ppm(b).unwrap_err().to_string();
        assert!(err(b"P3\n1 1\n255\n000").contains("magic"));
        assert!(err(b"P6\n2 2\n255\n\x00\x00\x00").contains("truncated"));
        assert!(err(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").contains("maxval"));
        assert!(err(b"P6\n1").contains("early"));
        assert!(err(b"P6\nx 1\n255\n").contains("width"));
    }

    #[test]
    fn rounding_is_half_away_and_clamped() {
        let t = Tensor::new(vec![3, 1, 1], vec![0.5 / 255.0, -0.3, 1.7]).unwrap();
        let bytes = encode_ppm(&t).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[1, 0, 255]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let t = Tensor::from_fn(vec![3, 4, 5], |i| (i as f64 * 0.037) % 1.0);
        save_ppm(&p, &t).unwrap();
        let back = load_ppm(&p).unwrap();
        assert!(back.max_abs_diff(&t) <= 0.5 / 255.0 + 1e-12);
        assert!(load_ppm(dir.path().join("missing.ppm")).is_err());
    }

    proptest! {
        #[test]
        fn decode_encode_error_bounded(values in proptest::collection::vec(0.0f64..=1.0, 12)) {
            let t = Tensor::new(vec![3, 2, 2], values).unwrap();
            let back = decode_ppm(&encode_ppm(&t).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&t) <= 0.5 / 255.0 + 1e-12);
        }

        #[test]
        fn bytes_round_trip_exactly(bytes in proptest::collection::vec(any::<u8>(), 18)) {
            let mut file = b"P6\n3 2\n255\n".to_vec();
            file.extend_from_slice(&bytes);
            let t = decode_ppm(&file).unwrap();
            prop_assert_eq!(encode_ppm(&t).unwrap(), file);
        }
    }
}
