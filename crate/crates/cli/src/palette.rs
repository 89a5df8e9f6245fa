//! Label colors: golden-ratio hue walk at fixed saturation and value.

pub const GOLDEN: f64 = 0.6180339887;
pub const SATURATION: f64 = 0.65;
pub const VALUE: f64 = 0.95;
pub const BACKGROUND: [u8; 3] = [128, 128, 128];

/// HSV with all components in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h.fract() * 6.0).min(6.0 - 1e-12);
    let sector = h6.floor() as usize;
    let f = h6 - sector as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Palette {
    /// Paint label 0 mid-gray.
    pub background: bool,
}

impl Palette {
    pub fn color(&self, label: u32) -> [u8; 3] {
        if self.background && label == 0 {
            return BACKGROUND;
        }
        hsv_to_rgb((label as f64 * GOLDEN).fract(), SATURATION, VALUE)
    }

    pub fn paint(&self, labels: &[u32]) -> Vec<u8> {
        labels.iter().flat_map(|&l| self.color(l)).collect()
    }
}
