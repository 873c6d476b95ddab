//! Binary PGM (P5, maxval 255) reading and writing. Parse failures report
//! the byte offset of the offending content.

use std::path::Path;

use crate::data::{ImageBuf, MaskBuf};
use crate::error::{Error, Result};

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), offset, msg: msg.into() }
}

/// Writes a P5 image with the given pixel bytes in row-major order.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Dim(format!(
            "pgm payload has {} bytes for {}x{}",
            pixels.len(),
            width,
            height
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn write_image_pgm(path: &Path, image: &ImageBuf) -> Result<()> {
    let pixels: Vec<u8> = image
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_pgm(path, image.size, image.size, &pixels)
}

pub fn write_mask_pgm(path: &Path, mask: &MaskBuf) -> Result<()> {
    let pixels: Vec<u8> = mask.data.iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    write_pgm(path, mask.size, mask.size, &pixels)
}

/// Raw P5 parse: returns (width, height, payload offset, pixel bytes).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;

    // Header tokens are separated by whitespace; '#' starts a comment that
    // runs to end of line.
    let mut next_token = |bytes: &[u8], pos: &mut usize| -> Result<(usize, String)> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        if *pos >= bytes.len() {
            return Err(format_err(path, bytes.len(), "unexpected end of header"));
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
    };

    let (off, magic) = next_token(&bytes, &mut pos)?;
    if magic != "P5" {
        return Err(format_err(path, off, format!("expected P5 magic, found '{magic}'")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let (off, tok) = next_token(&bytes, &mut pos)?;
        *d = tok
            .parse()
            .map_err(|_| format_err(path, off, format!("expected integer, found '{tok}'")))?;
    }
    let (width, height, maxval) = (dims[0], dims[1], dims[2]);
    if maxval != 255 {
        return Err(format_err(path, pos, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(path, pos, "zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, pos, "missing separator before payload"));
    }
    pos += 1;
    let expected = width * height;
    if bytes.len() - pos < expected {
        return Err(format_err(
            path,
            bytes.len(),
            format!("payload truncated: {} of {} bytes", bytes.len() - pos, expected),
        ));
    }
    Ok((width, height, pos, bytes[pos..pos + expected].to_vec()))
}

/// Loads a square grayscale image, scaling bytes to `[0, 1]`.
pub fn read_image_pgm(path: &Path) -> Result<ImageBuf> {
    let (w, h, _, pixels) = read_pgm(path)?;
    if w != h {
        return Err(Error::Data(format!(
            "expected square image, got {w}x{h} in {}",
            path.display()
        )));
    }
    Ok(ImageBuf { size: w, data: pixels.iter().map(|&b| b as f32 / 255.0).collect() })
}

/// Loads a square binary mask; any byte other than 0 or 255 is an error at
/// its exact file offset.
pub fn read_mask_pgm(path: &Path) -> Result<MaskBuf> {
    let (w, h, payload_offset, pixels) = read_pgm(path)?;
    if w != h {
        return Err(Error::Data(format!(
            "expected square mask, got {w}x{h} in {}",
            path.display()
        )));
    }
    let mut data = Vec::with_capacity(pixels.len());
    for (i, &b) in pixels.iter().enumerate() {
        match b {
            0 => data.push(0.0),
            255 => data.push(1.0),
            other => {
                return Err(format_err(
                    path,
                    payload_offset + i,
                    format!("mask byte must be 0 or 255, found {other}"),
                ));
            }
        }
    }
    Ok(MaskBuf { size: w, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_bytes_scale_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        std::fs::write(&path, b"P5\n2 2\n255\n\x00\x80\xff\x40").unwrap();
        let img = read_image_pgm(&path).unwrap();
        assert_eq!(img.size, 2);
        let want = [0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0];
        for (a, b) in img.data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn image_roundtrip_is_exact_at_byte_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.pgm");
        let img = ImageBuf { size: 3, data: (0..9).map(|i| i as f32 / 8.0).collect() };
        write_image_pgm(&path, &img).unwrap();
        let back = read_image_pgm(&path).unwrap();
        write_image_pgm(&path, &back).unwrap();
        let again = read_image_pgm(&path).unwrap();
        assert_eq!(back.data, again.data);
    }

    #[test]
    fn mask_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = MaskBuf { size: 2, data: vec![1.0, 0.0, 0.0, 1.0] };
        write_mask_pgm(&path, &mask).unwrap();
        assert_eq!(read_mask_pgm(&path).unwrap().data, mask.data);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P2\n2 2\n255\n0 0 0 0").unwrap();
        match read_pgm(&path).unwrap_err() {
            Error::Format { offset, msg, .. } => {
                assert_eq!(offset, 0);
                assert!(msg.contains("P5"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn gray_mask_byte_reports_its_exact_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.pgm");
        // Header "P5\n2 2\n255\n" is 11 bytes; byte index 2 of the payload
        // holds the invalid value.
        std::fs::write(&path, b"P5\n2 2\n255\n\x00\xff\x07\x00").unwrap();
        match read_mask_pgm(&path).unwrap_err() {
            Error::Format { offset, msg, .. } => {
                assert_eq!(offset, 11 + 2);
                assert!(msg.contains('7'));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn truncated_payload_and_wrong_maxval_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(matches!(read_pgm(&path).unwrap_err(), Error::Format { .. }));
        std::fs::write(&path, b"P5\n2 2\n65535\n\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_pgm(&path).unwrap_err(), Error::Format { .. }));
    }

    #[test]
    fn header_comments_are_tolerated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5\n# made by hand\n2 1\n255\n\x10\x20").unwrap();
        let (w, h, _, px) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(px, vec![0x10, 0x20]);
    }

    #[test]
    fn non_square_image_is_rejected_for_buffers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rect.pgm");
        std::fs::write(&path, b"P5\n3 2\n255\n\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(read_image_pgm(&path).is_err());
        assert!(read_pgm(&path).is_ok());
    }
}
