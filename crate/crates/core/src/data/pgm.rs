//! Binary PGM (`P5`) reading and writing, plus a colour `P6` overlay.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, LabelMap};
use crate::NUM_CLASSES;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn header_token(bytes: &[u8], pos: &mut usize) -> std::result::Result<usize, String> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err("truncated header".into()),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("malformed header field at byte {start}"))
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Pgm, String> {
    if !bytes.starts_with(b"P5") {
        let found: Vec<u8> = bytes.iter().take(2).copied().collect();
        return Err(format!("unknown magic bytes {found:?}, expected P5"));
    }
    let mut pos = 2;
    let width = header_token(bytes, &mut pos)?;
    let height = header_token(bytes, &mut pos)?;
    let maxval = header_token(bytes, &mut pos)?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if !(1..=65535).contains(&maxval) {
        return Err(format!("maxval {maxval} outside 1..=65535"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    pos += 1;
    let n = width * height;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(format!("truncated payload: {} of {need} bytes", payload.len()));
    }
    let samples: Vec<u16> = if wide {
        payload[..need].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        payload[..need].iter().map(|&b| b as u16).collect()
    };
    if let Some(v) = samples.iter().find(|&&v| v as usize > maxval) {
        return Err(format!("sample {v} exceeds maxval {maxval}"));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub fn encode_pgm(pgm: &Pgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", pgm.width, pgm.height, pgm.maxval).into_bytes();
    if pgm.maxval > 255 {
        for v in &pgm.samples {
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        out.extend(pgm.samples.iter().map(|&v| v as u8));
    }
    out
}

fn read(path: &Path) -> Result<Pgm> {
    let bytes = std::fs::read(path)?;
    decode_pgm(&bytes).map_err(|msg| Error::format(path, msg))
}

/// Intensities scaled to `[0, 1]` by `maxval`.
pub fn read_pgm_image<T: Scalar>(path: &Path) -> Result<FeatureMap<T>> {
    let pgm = read(path)?;
    let scale = T::lit(pgm.maxval as f64);
    let data = pgm.samples.iter().map(|&v| T::lit(v as f64) / scale).collect();
    FeatureMap::new(pgm.height, pgm.width, 1, data)
}

/// Class ids stored directly as sample values.
pub fn read_pgm_labels(path: &Path) -> Result<LabelMap> {
    let pgm = read(path)?;
    if let Some(v) = pgm.samples.iter().find(|&&v| v as usize >= NUM_CLASSES) {
        return Err(Error::format(path, format!("label value {v} outside 0..{NUM_CLASSES}")));
    }
    LabelMap::new(pgm.height, pgm.width, pgm.samples.iter().map(|&v| v as u8).collect())
}

pub fn write_pgm_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let pgm = Pgm {
        width: labels.width(),
        height: labels.height(),
        maxval: 255,
        samples: labels.data().iter().map(|&v| v as u16).collect(),
    };
    std::fs::write(path, encode_pgm(&pgm))?;
    Ok(())
}

/// Writes an 8-bit image after min–max scaling.
pub fn write_pgm_image<T: Scalar>(path: &Path, image: &FeatureMap<T>) -> Result<()> {
    let gray = to_gray(image);
    let pgm = Pgm {
        width: image.width(),
        height: image.height(),
        maxval: 255,
        samples: gray.into_iter().map(u16::from).collect(),
    };
    std::fs::write(path, encode_pgm(&pgm))?;
    Ok(())
}

fn to_gray<T: Scalar>(image: &FeatureMap<T>) -> Vec<u8> {
    let vals: Vec<f64> = image.data().iter().map(|v| v.as_f64()).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    vals.iter().map(|v| ((v - lo) / span * 255.0).round() as u8).collect()
}

const OVERLAY_COLOURS: [[u8; 3]; NUM_CLASSES] = [[0, 0, 0], [230, 60, 60], [60, 200, 80], [70, 110, 240]];
const OVERLAY_ALPHA: f64 = 0.45;

/// Grey-scale image with foreground classes blended in colour, as binary PPM.
pub fn write_overlay<T: Scalar>(path: &Path, image: &FeatureMap<T>, labels: &LabelMap) -> Result<()> {
    if image.shape() != (labels.height(), labels.width(), 1) {
        return Err(Error::invalid("overlay image and labels differ in shape"));
    }
    let gray = to_gray(image);
    let mut out = format!("P6\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    for (&g, &l) in gray.iter().zip(labels.data()) {
        for ch in 0..3 {
            let v = if l == 0 {
                g as f64
            } else {
                (1.0 - OVERLAY_ALPHA) * g as f64 + OVERLAY_ALPHA * OVERLAY_COLOURS[l as usize][ch] as f64
            };
            out.push(v.round() as u8);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_8bit_scales_by_maxval() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flat.pgm");
        let mut bytes = b"P5\n# comment line\n4 4\n255\n".to_vec();
        bytes.extend([128u8; 16]);
        std::fs::write(&p, bytes).unwrap();
        let m: FeatureMap<f64> = read_pgm_image(&p).unwrap();
        assert_eq!(m.shape(), (4, 4, 1));
        assert!(m.data().iter().all(|&v| v == 128.0 / 255.0));
    }

    #[test]
    fn sixteen_bit_is_big_endian() {
        let pgm = decode_pgm(b"P5 2 1 65535\n\x01\x00\xff\xff").unwrap();
        assert_eq!(pgm.samples, vec![256, 65535]);
        assert_eq!(decode_pgm(&encode_pgm(&pgm)).unwrap(), pgm);
    }

    #[test]
    fn labels_outside_range_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad_labels.pgm");
        std::fs::write(&p, b"P5 2 1 255\n\x01\x05").unwrap();
        let err = read_pgm_labels(&p).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("bad_labels.pgm"), "{err}");
    }

    #[test]
    fn label_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.pgm");
        let l = LabelMap::new(2, 3, vec![0, 1, 2, 3, 2, 1]).unwrap();
        write_pgm_labels(&p, &l).unwrap();
        assert_eq!(read_pgm_labels(&p).unwrap(), l);
    }

    #[test]
    fn malformed_headers() {
        assert!(decode_pgm(b"P2 1 1 255\n\x00").is_err());
        assert!(decode_pgm(b"P5 2 2 255\n\x00\x00").unwrap_err().contains("truncated"));
        assert!(decode_pgm(b"P5 1 1 0\n\x00").is_err());
        assert!(decode_pgm(b"P5 1 1 100\n\xff").is_err());
        assert!(decode_pgm(b"P5 1").is_err());
    }

    #[test]
    fn overlay_keeps_background_grey() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("overlay.ppm");
        let img = FeatureMap::new(1, 2, 1, vec![0.0f64, 1.0]).unwrap();
        let l = LabelMap::new(1, 2, vec![0, 3]).unwrap();
        write_overlay(&p, &img, &l).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let body = &bytes[bytes.len() - 6..];
        assert_eq!(&body[..3], &[0, 0, 0]);
        assert!(body[5] > body[3]);
    }
}
