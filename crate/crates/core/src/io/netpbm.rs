//! Binary PPM (P6, 8-bit), 16-bit PGM (P5) and two-channel 16-bit PAM (P7).

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub w: usize,
    pub h: usize,
    /// Row-major RGB triples.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(w: usize, h: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != w * h * 3 {
            return Err(Error::dim("rgb_image", format!("{} bytes for {w}x{h}", data.len())));
        }
        Ok(RgbImage { w, h, data })
    }

    /// `[h, w, 3]` in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![self.h, self.w, 3], self.data.iter().map(|&b| b as f64 / 255.0).collect()).expect("sized by construction")
    }

    /// Rounds `[0, 1]` values to bytes; `t` is `[h, w, 3]` or `[h*w, 3]`.
    pub fn from_tensor(t: &Tensor<f64>, w: usize, h: usize) -> Result<Self> {
        let data = t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self::new(w, h, data)
    }
}

fn fmt(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { offset, msg: msg.into() }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<(usize, &'a str)> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(fmt(start, "unexpected end of header"));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| fmt(start, "header is not ASCII"))?;
        Ok((start, s))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let (at, s) = self.token()?;
        s.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(|| fmt(at, format!("invalid {what} '{s}'")))
    }

    /// Consumes the single whitespace byte that ends a netpbm header.
    fn end(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(fmt(self.pos, "header must end with one whitespace byte")),
        }
    }
}

fn magic(bytes: &[u8], want: &[u8; 2]) -> Result<()> {
    if bytes.len() < 2 || &bytes[..2] != want {
        return Err(fmt(0, format!("bad magic, expected {}", String::from_utf8_lossy(want))));
    }
    Ok(())
}

pub fn read_ppm(bytes: &[u8]) -> Result<RgbImage> {
    parse_ppm(bytes, 1)
}

/// [`read_ppm`] that also rejects sides not divisible by `k`, pointing at
/// the offending header field.
pub fn read_ppm_divisible(bytes: &[u8], k: usize) -> Result<RgbImage> {
    parse_ppm(bytes, k.max(1))
}

fn parse_ppm(bytes: &[u8], k: usize) -> Result<RgbImage> {
    magic(bytes, b"P6")?;
    let mut h = Header { bytes, pos: 2 };
    h.skip_space();
    let w_at = h.pos;
    let w = h.number("width")?;
    h.skip_space();
    let h_at = h.pos;
    let ht = h.number("height")?;
    if w % k != 0 {
        return Err(fmt(w_at, format!("width {w} is not a multiple of {k}")));
    }
    if ht % k != 0 {
        return Err(fmt(h_at, format!("height {ht} is not a multiple of {k}")));
    }
    h.skip_space();
    let at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval > 255 {
        return Err(fmt(at, format!("maxval {maxval} is not 8-bit")));
    }
    let start = h.end()?;
    let need = w * ht * 3;
    if bytes.len() < start + need {
        return Err(fmt(bytes.len(), format!("pixel data truncated: {} of {need} bytes", bytes.len() - start)));
    }
    let data = bytes[start..start + need].iter().map(|&b| if maxval == 255 { b } else { ((b as usize * 255 + maxval / 2) / maxval) as u8 }).collect();
    RgbImage::new(w, ht, data)
}

pub fn write_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Big-endian 16-bit grayscale.
pub fn write_pgm16(w: usize, h: usize, values: &[u16]) -> Result<Vec<u8>> {
    if values.len() != w * h {
        return Err(Error::dim("write_pgm16", format!("{} values for {w}x{h}", values.len())));
    }
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

pub fn read_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    magic(bytes, b"P5")?;
    let mut h = Header { bytes, pos: 2 };
    let w = h.number("width")?;
    let ht = h.number("height")?;
    let at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval < 256 || maxval > 65535 {
        return Err(fmt(at, format!("maxval {maxval} is not 16-bit")));
    }
    let start = h.end()?;
    let need = w * ht * 2;
    if bytes.len() < start + need {
        return Err(fmt(bytes.len(), "pixel data truncated"));
    }
    let vals = bytes[start..start + need].chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((w, ht, vals))
}

/// `(class, instance)` per pixel as a DEPTH 2, MAXVAL 65535 PAM.
pub fn write_pam_pairs(w: usize, h: usize, class: &[u16], instance: &[u16]) -> Result<Vec<u8>> {
    if class.len() != w * h || instance.len() != w * h {
        return Err(Error::dim("write_pam_pairs", format!("{}/{} values for {w}x{h}", class.len(), instance.len())));
    }
    let mut out = format!("P7\nWIDTH {w}\nHEIGHT {h}\nDEPTH 2\nMAXVAL 65535\nTUPLTYPE CLASS_INSTANCE\nENDHDR\n").into_bytes();
    for (c, i) in class.iter().zip(instance) {
        out.extend_from_slice(&c.to_be_bytes());
        out.extend_from_slice(&i.to_be_bytes());
    }
    Ok(out)
}

pub fn read_pam_pairs(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>, Vec<u16>)> {
    magic(bytes, b"P7")?;
    let mut h = Header { bytes, pos: 2 };
    let (mut w, mut ht, mut depth, mut maxval) = (0, 0, 0, 0);
    loop {
        let (at, key) = h.token()?;
        match key {
            "ENDHDR" => break,
            "WIDTH" => w = h.number("width")?,
            "HEIGHT" => ht = h.number("height")?,
            "DEPTH" => depth = h.number("depth")?,
            "MAXVAL" => maxval = h.number("maxval")?,
            "TUPLTYPE" => {
                h.token()?;
            }
            other => return Err(fmt(at, format!("unknown PAM header key '{other}'"))),
        }
    }
    if depth != 2 || maxval != 65535 || w == 0 || ht == 0 {
        return Err(fmt(h.pos, "expected a 2-channel 16-bit PAM"));
    }
    let start = h.end()?;
    let need = w * ht * 4;
    if bytes.len() < start + need {
        return Err(fmt(bytes.len(), "pixel data truncated"));
    }
    let (mut class, mut inst) = (Vec::with_capacity(w * ht), Vec::with_capacity(w * ht));
    for c in bytes[start..start + need].chunks(4) {
        class.push(u16::from_be_bytes([c[0], c[1]]));
        inst.push(u16::from_be_bytes([c[2], c[3]]));
    }
    Ok((w, ht, class, inst))
}
