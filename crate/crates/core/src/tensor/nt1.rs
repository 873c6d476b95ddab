//! NT1 on-disk tensor format: one ASCII header line, then raw values.
//!
//! Layout: `NT1 <rank> <extent...>\n` followed by little-endian f32 data in
//! row-major order. The header is deliberately human-readable so a hexdump
//! of the first few bytes identifies a blob. Parse errors carry the byte
//! offset of the first offending byte.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_err(path: &str, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_string(), offset, msg: msg.into() }
}

/// Serializes a tensor into `out`. The same encoding is used standalone and
/// inside checkpoint payloads.
pub fn write_nt1(out: &mut Vec<u8>, shape: &[usize], data: &[f32]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::Dim(format!(
            "nt1: shape {shape:?} does not match {} data elements",
            data.len()
        )));
    }
    let mut header = format!("NT1 {}", shape.len());
    for e in shape {
        header.push(' ');
        header.push_str(&e.to_string());
    }
    header.push('\n');
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Parses one NT1 blob starting at `bytes[0]`. Returns shape, data and the
/// number of bytes consumed, so callers can walk concatenated blobs.
/// `path` is only used for error messages; `base_offset` shifts reported
/// offsets when the blob sits inside a larger file.
pub fn parse_nt1(bytes: &[u8], path: &str, base_offset: usize) -> Result<(Vec<usize>, Vec<f32>, usize)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err(path, base_offset, "missing header newline"))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|e| format_err(path, base_offset + e.valid_up_to(), "header is not ASCII"))?;
    let mut tokens = header.split(' ');
    match tokens.next() {
        Some("NT1") => {}
        _ => return Err(format_err(path, base_offset, "expected magic `NT1`")),
    }
    let rank: usize = tokens
        .next()
        .ok_or_else(|| format_err(path, base_offset + 4, "missing rank"))?
        .parse()
        .map_err(|_| format_err(path, base_offset + 4, "rank is not an integer"))?;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let tok = tokens
            .next()
            .ok_or_else(|| format_err(path, base_offset + nl, format!("missing extent {i}")))?;
        let e: usize = tok.parse().map_err(|_| {
            format_err(path, base_offset + nl, format!("extent {i} `{tok}` is not an integer"))
        })?;
        if e == 0 {
            return Err(format_err(path, base_offset + nl, format!("extent {i} is zero")));
        }
        shape.push(e);
    }
    if tokens.next().is_some() {
        return Err(format_err(path, base_offset + nl, "trailing tokens in header"));
    }
    let n: usize = shape.iter().product();
    let payload_start = nl + 1;
    let need = n * 4;
    if bytes.len() < payload_start + need {
        return Err(format_err(
            path,
            base_offset + bytes.len(),
            format!("payload truncated: need {need} bytes, have {}", bytes.len() - payload_start),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let at = payload_start + i * 4;
        data.push(f32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]));
    }
    Ok((shape, data, payload_start + need))
}

pub fn write_nt1_file(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4 + 32);
    write_nt1(&mut buf, shape, data)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_nt1_file(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let label = path.display().to_string();
    let (shape, data, consumed) = parse_nt1(&bytes, &label, 0)?;
    if consumed != bytes.len() {
        return Err(format_err(&label, consumed, "trailing bytes after tensor payload"));
    }
    Tensor::from_vec(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let shape = vec![2, 3];
        let data = vec![0.0f32, -0.0, 1.5, f32::MIN_POSITIVE, -12345.678, 3.0e-42];
        let mut buf = Vec::new();
        write_nt1(&mut buf, &shape, &data).unwrap();
        let (s, d, consumed) = parse_nt1(&buf, "mem", 0).unwrap();
        assert_eq!(s, shape);
        assert_eq!(consumed, buf.len());
        assert_eq!(
            d.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn header_is_ascii_and_sized() {
        let mut buf = Vec::new();
        write_nt1(&mut buf, &[8, 64], &vec![0.0; 512]).unwrap();
        assert!(buf.starts_with(b"NT1 2 8 64\n"));
        assert_eq!(buf.len(), "NT1 2 8 64\n".len() + 512 * 4);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let err = parse_nt1(b"XT1 1 3\n............", "mem", 0).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_end_offset() {
        let mut buf = Vec::new();
        write_nt1(&mut buf, &[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        buf.truncate(buf.len() - 3);
        let err = parse_nt1(&buf, "mem", 0).unwrap_err();
        match err {
            Error::Format { offset, msg, .. } => {
                assert_eq!(offset, buf.len());
                assert!(msg.contains("truncated"), "unexpected message: {msg}");
            }
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn base_offset_shifts_reported_positions() {
        let err = parse_nt1(b"garbage\n", "mem", 100).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 100),
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nt1");
        write_nt1_file(&p, &[3, 1], &[1.0, -2.0, 0.25]).unwrap();
        let t = read_nt1_file(&p).unwrap();
        assert_eq!(t.shape(), vec![3, 1]);
        assert_eq!(t.to_vec(), vec![1.0, -2.0, 0.25]);
    }
}
