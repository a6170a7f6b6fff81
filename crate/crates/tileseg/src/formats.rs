//! Binary image formats (PPM P6, PGM P5) and small text-file helpers.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad {kind} file {path}: {reason}")]
    Malformed {
        kind: &'static str,
        path: String,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn malformed(kind: &'static str, path: &Path, reason: impl Into<String>) -> FormatError {
    FormatError::Malformed {
        kind,
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Write a binary RGB pixmap (PPM P6).
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), FormatError> {
    assert_eq!(rgb.len(), 3 * width * height);
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(rgb)?;
    w.flush()?;
    Ok(())
}

/// Write a binary graymap (PGM P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<(), FormatError> {
    assert_eq!(gray.len(), width * height);
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(gray)?;
    w.flush()?;
    Ok(())
}

fn read_netpbm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>), FormatError> {
    let kind = if channels == 3 { "ppm" } else { "pgm" };
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    // header: magic, width, height, maxval, single whitespace, then raster
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields.len() != 4 || fields[0] != magic {
        return Err(malformed(kind, path, format!("bad header, want {magic}")));
    }
    pos += 1; // the single whitespace after maxval
    let width: usize = fields[1]
        .parse()
        .map_err(|_| malformed(kind, path, "bad width"))?;
    let height: usize = fields[2]
        .parse()
        .map_err(|_| malformed(kind, path, "bad height"))?;
    if fields[3] != "255" {
        return Err(malformed(kind, path, "only maxval 255 supported"));
    }
    let n = width * height * channels;
    if bytes.len() < pos + n {
        return Err(malformed(kind, path, "truncated raster"));
    }
    Ok((width, height, bytes[pos..pos + n].to_vec()))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>), FormatError> {
    read_netpbm(path, "P6", 3)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), FormatError> {
    read_netpbm(path, "P5", 1)
}

/// Write a text file, creating parent directories first.
pub fn write_text(path: &Path, contents: &str) -> Result<(), FormatError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String, FormatError> {
    Ok(fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 7) as u8).collect();
        write_ppm(&path, 3, 2, &rgb).unwrap();
        let (w, h, back) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, rgb);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        let gray = vec![0u8, 64, 128, 255];
        write_pgm(&path, 2, 2, &gray).unwrap();
        let (w, h, back) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(back, gray);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        write_pgm(&path, 1, 1, &[0]).unwrap();
        assert!(read_ppm(&path).is_err());
    }
}
