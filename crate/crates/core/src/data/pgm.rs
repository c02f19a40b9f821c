//! Binary PGM (P5) read/write, 8-bit, maxval 255. Hand-rolled so the
//! on-disk bytes are exactly reproducible and parseable anywhere.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::DataError;

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), DataError> {
    if pixels.len() != width * height {
        return Err(DataError::Format(format!(
            "pgm {path:?}: {} pixels for {width}x{height}",
            pixels.len()
        )));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::with_capacity(pixels.len() + 32);
    write!(buf, "P5\n{width} {height}\n255\n")?;
    buf.extend_from_slice(pixels);
    fs::write(path, buf)?;
    Ok(())
}

/// Returns `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| DataError::Format(format!("pgm {path:?}: {msg}"));

    // header: magic, width, height, maxval as whitespace-separated tokens,
    // '#' comments allowed, then a single whitespace byte before the payload
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, DataError> {
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::Format(format!("pgm {path:?}: truncated header")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(&bytes)? != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let width: usize = token(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    pos += 1; // single whitespace separating header from payload
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(bad("payload shorter than dimensions"));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/t.pgm");
        let px: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        write_pgm(&path, 4, 3, &px).unwrap();
        let (w, h, back) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, px);
    }

    #[test]
    fn rejects_wrong_pixel_count() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_pgm(&dir.path().join("x.pgm"), 4, 4, &[0u8; 3]).is_err());
    }

    #[test]
    fn reads_header_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5\n# a comment\n2 2\n255\n\x01\x02\x03\x04").unwrap();
        let (w, h, px) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(px, vec![1, 2, 3, 4]);
    }
}
