//! Minimal binary portable-pixmap (P6) canvas.

use crate::kernelview::NormGrid;

pub const CELL: usize = 16;
const GAP: usize = 8;

pub type Rgb = [u8; 3];

pub const BACKGROUND: Rgb = [32, 32, 32];

pub struct Canvas {
    pub width: usize,
    pub height: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Canvas {
            width,
            height,
            px: vec![BACKGROUND; width * height],
        }
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.px[y as usize * self.width + x as usize] = c;
        }
    }

    pub fn fill(&mut self, x: usize, y: usize, w: usize, h: usize, c: Rgb) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx as i64, yy as i64, c);
            }
        }
    }

    pub fn outline(&mut self, x: usize, y: usize, w: usize, h: usize, c: Rgb) {
        for t in 0..2 {
            for xx in x..x + w {
                self.set(xx as i64, (y + t) as i64, c);
                self.set(xx as i64, (y + h - 1 - t) as i64, c);
            }
            for yy in y..y + h {
                self.set((x + t) as i64, yy as i64, c);
                self.set((x + w - 1 - t) as i64, yy as i64, c);
            }
        }
    }

    /// Bresenham line.
    pub fn line(&mut self, from: (i64, i64), to: (i64, i64), c: Rgb) {
        let (mut x0, mut y0) = from;
        let (x1, y1) = to;
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.px {
            out.extend_from_slice(p);
        }
        out
    }
}

/// Black through red and yellow to white.
pub fn heat(v: f64) -> Rgb {
    let v = v.clamp(0.0, 1.0) * 3.0;
    let ch = |t: f64| (t.clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(v), ch(v - 1.0), ch(v - 2.0)]
}

/// Pixel size of a stack of grids drawn one above the other.
pub fn stack_size(grids: &[NormGrid]) -> (usize, usize) {
    let w = grids.iter().map(|g| g.width * CELL).max().unwrap_or(0);
    let h = grids.iter().map(|g| g.height * CELL).sum::<usize>() + GAP * grids.len().saturating_sub(1);
    (w, h)
}

/// Top-left pixel of each scale in a stack drawn at `origin`.
pub fn stack_offsets(grids: &[NormGrid], origin: (usize, usize)) -> Vec<(usize, usize)> {
    let mut y = origin.1;
    grids
        .iter()
        .map(|g| {
            let o = (origin.0, y);
            y += g.height * CELL + GAP;
            o
        })
        .collect()
}

pub fn draw_stack(canvas: &mut Canvas, grids: &[NormGrid], origin: (usize, usize)) {
    for (g, (ox, oy)) in grids.iter().zip(stack_offsets(grids, origin)) {
        for r in 0..g.height {
            for c in 0..g.width {
                canvas.fill(ox + c * CELL, oy + r * CELL, CELL, CELL, heat(g.values[r * g.width + c]));
            }
        }
    }
}

/// Pixel rectangle of a cell in a stack drawn at `origin`.
pub fn cell_rect(grids: &[NormGrid], origin: (usize, usize), scale: usize, row: usize, col: usize) -> (usize, usize) {
    let (ox, oy) = stack_offsets(grids, origin)[scale];
    (ox + col * CELL, oy + row * CELL)
}

pub const PANEL_GAP: usize = 24;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_size() {
        let c = Canvas::new(3, 2);
        let b = c.to_bytes();
        assert!(b.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(b.len(), 11 + 18);
    }

    #[test]
    fn heat_endpoints() {
        assert_eq!(heat(0.0), [0, 0, 0]);
        assert_eq!(heat(1.0), [255, 255, 255]);
    }

    #[test]
    fn line_hits_both_ends() {
        let mut c = Canvas::new(10, 10);
        c.line((1, 1), (8, 5), [1, 2, 3]);
        assert_eq!(c.px[11], [1, 2, 3]);
        assert_eq!(c.px[5 * 10 + 8], [1, 2, 3]);
    }
}
