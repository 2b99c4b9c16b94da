//! Binary NetPBM reader/writer: P6 (RGB) for frames, P5 (gray) for masks.
//! The writer emits a canonical header so regenerated files are byte-stable.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * w * h {
        return Err(Error::Data(format!("ppm payload {} != 3*{w}*{h}", rgb.len())));
    }
    write_binary(path, &format!("P6\n{w} {h}\n255\n"), rgb)
}

pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != w * h {
        return Err(Error::Data(format!("pgm payload {} != {w}*{h}", gray.len())));
    }
    write_binary(path, &format!("P5\n{w} {h}\n255\n"), gray)
}

fn write_binary(path: &Path, header: &str, payload: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(header.as_bytes())?;
    f.write_all(payload)?;
    Ok(())
}

pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 (P5) or 3 (P6) interleaved channels, already scaled to max 255.
    pub channels: usize,
    pub pixels: Vec<u8>,
}

pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 2 {
        return Err(Error::Data(format!("{}: not a netpbm file", path.display())));
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(Error::Data(format!("{}: expected P5 or P6 magic", path.display()))),
    };
    let mut pos = 2usize;
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        *field = read_header_int(&bytes, &mut pos)
            .ok_or_else(|| Error::Data(format!("{}: malformed header", path.display())))?;
    }
    // single whitespace byte separates header from payload
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!("{}: unsupported maxval {maxval}", path.display())));
    }
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(Error::Data(format!("{}: truncated pixel data", path.display())));
    }
    let mut pixels = bytes[pos..pos + need].to_vec();
    if maxval != 255 {
        for p in pixels.iter_mut() {
            *p = ((*p as usize * 255) / maxval) as u8;
        }
    }
    Ok(PnmImage { width: w, height: h, channels, pixels })
}

/// Read the next decimal token, skipping whitespace and `#` comments.
fn read_header_int(bytes: &[u8], pos: &mut usize) -> Option<usize> {
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
    if *pos == start {
        return None;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()?.parse().ok()
}
