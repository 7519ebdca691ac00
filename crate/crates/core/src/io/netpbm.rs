use crate::error::{Error, Result};
use crate::labels::Labels;

/// 8-bit interleaved RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Data(format!(
                "{}x{} RGB image needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

fn parse_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        reason: reason.into(),
    }
}

struct Header {
    width: usize,
    height: usize,
    payload: usize,
}

/// Netpbm header: magic, then width, height and maxval separated by
/// whitespace with `#` comments running to end of line, then exactly one
/// whitespace byte before the raster.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(parse_err(
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        let start_ws = pos;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        if pos == start_ws {
            return Err(parse_err(pos, "expected whitespace"));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(match bytes.get(pos) {
                None => parse_err(pos, "truncated header"),
                Some(_) => parse_err(pos, "expected decimal integer"),
            });
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text.parse().map_err(|_| parse_err(start, "integer out of range"))?;
        if *field == 0 && i < 2 {
            return Err(parse_err(start, "zero image dimension"));
        }
    }
    if fields[2] != 255 {
        return Err(parse_err(pos, format!("maxval {} unsupported, need 255", fields[2])));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        None => return Err(parse_err(pos, "truncated header")),
        Some(_) => return Err(parse_err(pos, "expected whitespace after maxval")),
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        payload: pos,
    })
}

fn raster<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h
        .width
        .checked_mul(h.height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| parse_err(h.payload, "image too large"))?;
    let have = bytes.len() - h.payload;
    if have < need {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload: {have} of {need} bytes"),
        ));
    }
    Ok(&bytes[h.payload..h.payload + need])
}

/// Binary PPM (P6).
pub fn read_image(bytes: &[u8]) -> Result<RgbImage> {
    let h = parse_header(bytes, b"P6")?;
    let data = raster(bytes, &h, 3)?.to_vec();
    RgbImage::new(h.width, h.height, data)
}

pub fn write_image(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Binary PGM (P5) as a single-sample label map.
pub fn read_labels(bytes: &[u8]) -> Result<Labels> {
    let h = parse_header(bytes, b"P5")?;
    let data = raster(bytes, &h, 1)?.to_vec();
    Labels::new(1, h.height, h.width, data)
}

/// Writes sample 0 of `labels`.
pub fn write_labels(labels: &Labels) -> Vec<u8> {
    let s = labels.sample(0);
    let mut out = format!("P5\n{} {}\n255\n", s.width(), s.height()).into_bytes();
    out.extend_from_slice(s.data());
    out
}
