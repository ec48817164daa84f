//! Classification maps as binary PPM images.

use crate::error::{contract, Result};

/// Class id → RGB. Class 0 (unlabeled) is black; classes `1..=C` take hues
/// evenly spaced around the color wheel at full saturation and value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    colors: Vec<[u8; 3]>,
}

impl Palette {
    pub fn new(classes: usize) -> Self {
        let mut colors = vec![[0, 0, 0]];
        colors.extend((0..classes).map(|k| hsv_to_rgb(360.0 * k as f64 / classes as f64)));
        Self { colors }
    }

    /// Number of non-background classes.
    pub fn classes(&self) -> usize {
        self.colors.len() - 1
    }

    pub fn color(&self, class: u16) -> Option<[u8; 3]> {
        self.colors.get(class as usize).copied()
    }
}

fn hsv_to_rgb(hue: f64) -> [u8; 3] {
    let h = hue / 60.0;
    let sector = h.floor() as i32 % 6;
    let f = h - h.floor();
    let (q, t) = (1.0 - f, f);
    let (r, g, b) = match sector {
        0 => (1.0, t, 0.0),
        1 => (q, 1.0, 0.0),
        2 => (0.0, 1.0, t),
        3 => (0.0, q, 1.0),
        4 => (t, 0.0, 1.0),
        _ => (1.0, 0.0, q),
    };
    let to_byte = |v: f64| (v * 255.0).round() as u8;
    [to_byte(r), to_byte(g), to_byte(b)]
}

/// `P6` image of a `height × width` class map, row-major.
pub fn render_map(labels: &[u16], height: usize, width: usize, palette: &Palette) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return Err(contract(format!("{} labels for a {height}x{width} map", labels.len())));
    }
    let header = format!("P6\n{width} {height}\n255\n");
    let mut out = Vec::with_capacity(header.len() + 3 * labels.len());
    out.extend_from_slice(header.as_bytes());
    for &l in labels {
        let rgb = palette.color(l).ok_or_else(|| contract(format!("class {l} has no palette entry")))?;
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}
