//! Label rasters on disk: one u16 instance id per pixel, 0 = background.
//!
//! Two formats, picked by file extension:
//! - `.png`: 16-bit grayscale PNG.
//! - `.pgm`: binary netpbm (P5) with maxval 65535. Per the netpbm convention
//!   its samples are big-endian, the one place this toolchain is not
//!   little-endian.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use masklab_core::metrics::LabelImage;

use crate::error::{CliError, Result};

enum RasterFormat {
    Png,
    Pgm,
}

fn format_of(path: &Path) -> Result<RasterFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("png") => Ok(RasterFormat::Png),
        Some("pgm") => Ok(RasterFormat::Pgm),
        _ => Err(CliError::input(format!(
            "{}: label rasters must end in .png or .pgm",
            path.display()
        ))),
    }
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelImage) -> Result<()> {
    let path = path.as_ref();
    let samples: Vec<u16> = labels
        .ids()
        .iter()
        .map(|&id| {
            u16::try_from(id).map_err(|_| {
                CliError::input(format!(
                    "{}: instance id {id} does not fit in 16 bits",
                    path.display()
                ))
            })
        })
        .collect::<Result<_>>()?;
    match format_of(path)? {
        RasterFormat::Png => {
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_raw(labels.width() as u32, labels.height() as u32, samples)
                    .expect("sample count matches dimensions");
            buf.save(path)
                .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        }
        RasterFormat::Pgm => {
            let mut bytes = Vec::with_capacity(32 + samples.len() * 2);
            bytes.extend_from_slice(
                format!("P5\n{} {}\n65535\n", labels.width(), labels.height()).as_bytes(),
            );
            for s in samples {
                bytes.extend_from_slice(&s.to_be_bytes());
            }
            std::fs::write(path, bytes)?;
        }
    }
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelImage> {
    let path = path.as_ref();
    match format_of(path)? {
        RasterFormat::Png => read_png(path),
        RasterFormat::Pgm => read_pgm(path),
    }
}

fn read_png(path: &Path) -> Result<LabelImage> {
    let img = image::open(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    match img {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let ids = buf.into_raw().into_iter().map(u32::from).collect();
            LabelImage::new(w, h, ids).map_err(CliError::from)
        }
        other => Err(CliError::input(format!(
            "{}: expected 16-bit grayscale, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

fn read_pgm(path: &Path) -> Result<LabelImage> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let fail = |pos: usize, msg: &str| CliError::format(path, pos as u64, msg.to_string());

    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(fail(0, "not a binary PGM (missing P5 signature)"));
    }
    let mut pos = 2usize;

    // Header tokens may be separated by whitespace and '#' comments.
    let next_int = |pos: &mut usize, what: &str| -> Result<usize> {
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
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(fail(start, &format!("expected {what}")));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .expect("digits are UTF-8")
            .parse::<usize>()
            .map_err(|e| fail(start, &format!("{what}: {e}")))
    };

    let width = next_int(&mut pos, "width")?;
    let height = next_int(&mut pos, "height")?;
    let maxval = next_int(&mut pos, "maxval")?;
    if maxval != 65535 {
        return Err(fail(pos, &format!("only maxval 65535 is supported, got {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fail(pos, "expected single whitespace before samples"));
    }
    pos += 1;

    let expect = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(2))
        .ok_or_else(|| fail(pos, "image dimensions overflow"))?;
    if bytes.len() - pos != expect {
        return Err(fail(
            pos,
            &format!(
                "sample payload is {} bytes, expected {expect} for {width}x{height}",
                bytes.len() - pos
            ),
        ));
    }
    let ids = bytes[pos..]
        .chunks_exact(2)
        .map(|c| u32::from(u16::from_be_bytes([c[0], c[1]])))
        .collect();
    LabelImage::new(width, height, ids).map_err(CliError::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard() -> LabelImage {
        let ids = (0..24u32).map(|i| (i % 3) * 7).collect();
        LabelImage::new(6, 4, ids).unwrap()
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.png");
        let labels = checkerboard();
        write_labels(&path, &labels).unwrap();
        let back = read_labels(&path).unwrap();
        assert_eq!(back.width(), 6);
        assert_eq!(back.height(), 4);
        assert_eq!(back.ids(), labels.ids());
    }

    #[test]
    fn pgm_round_trips_and_header_is_pinned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.pgm");
        let labels = checkerboard();
        write_labels(&path, &labels).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n6 4\n65535\n"));
        // Samples most significant byte first: id 7 encodes as 0x00 0x07.
        let header = b"P5\n6 4\n65535\n".len();
        assert_eq!(&bytes[header..header + 4], &[0, 0, 0, 7]);
        let back = read_labels(&path).unwrap();
        assert_eq!(back.ids(), labels.ids());
    }

    #[test]
    fn pgm_tolerates_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut bytes = b"P5 # binary pgm\n# tiny\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 0, 2]);
        std::fs::write(&path, bytes).unwrap();
        let labels = read_labels(&path).unwrap();
        assert_eq!(labels.ids(), &[1, 2]);
    }

    #[test]
    fn pgm_with_wrong_maxval_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        std::fs::write(&path, b"P5\n2 1\n255\n\x00\x01").unwrap();
        let err = read_labels(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("65535"), "{err}");
    }

    #[test]
    fn pgm_payload_size_must_match_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        std::fs::write(&path, b"P5\n2 2\n65535\n\x00\x01\x00").unwrap();
        let err = read_labels(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("expected 8"), "{err}");
    }

    #[test]
    fn oversized_ids_cannot_be_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.png");
        let labels = LabelImage::new(1, 1, vec![70_000]).unwrap();
        let err = write_labels(&path, &labels).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn non_16_bit_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eight.png");
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(2, 2, vec![0, 1, 2, 3]).unwrap();
        buf.save(&path).unwrap();
        let err = read_labels(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("16-bit"), "{err}");
    }

    #[test]
    fn unknown_extension_is_rejected() {
        let err = read_labels(Path::new("labels.tiff")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
