//! Binary PGM (P5) frame dumps for eyeballing sequences.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{Field, SequenceField};

/// Writes one 8-bit PGM per frame as `frame_0000.pgm` onward, with
/// intensity quantized as round(255 * value). Values must lie in [0, 1].
pub fn render_sequence(seq: &SequenceField<f64>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(seq.len());
    for (i, frame) in seq.frames().iter().enumerate() {
        if frame.channels() != 1 {
            return Err(Error::contract("rendering expects single-channel frames"));
        }
        if frame.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("rendering expects values in [0, 1]"));
        }
        let path = out_dir.join(format!("frame_{i:04}.pgm"));
        let mut buf = format!("P5\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
        buf.extend(frame.data().iter().map(|&v| (255.0 * v).round() as u8));
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Minimal P5 parser, used to verify rendered output independently.
pub fn read_pgm(path: &Path) -> Result<Field<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header_err = |msg: &str| Error::format(0, format!("pgm: {msg}"));
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| header_err("non-ascii header"))?
                .to_string(),
        );
    }
    if fields.len() < 4 || fields[0] != "P5" {
        return Err(header_err("expected P5 header"));
    }
    let w: usize = fields[1].parse().map_err(|_| header_err("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| header_err("bad height"))?;
    let maxval: usize = fields[3].parse().map_err(|_| header_err("bad maxval"))?;
    if maxval != 255 {
        return Err(header_err("expected 8-bit maxval"));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + h * w {
        return Err(Error::format(bytes.len() as u64, "pgm payload truncated"));
    }
    let data = bytes[pos..pos + h * w]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Field::from_vec(1, h, w, data)
}
