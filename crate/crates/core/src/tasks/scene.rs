use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    Disc,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rect, ShapeKind::Disc, ShapeKind::Cross];
}

/// One filled shape. `center` is in pixel coordinates `(row, col)`; pixel
/// `(r, c)` is covered when its center `(r + 0.5, c + 0.5)` lies inside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub size: usize,
    pub color: [f64; 3],
}

impl ShapeSpec {
    pub fn covers(&self, r: usize, c: usize) -> bool {
        let dy = r as f64 + 0.5 - self.center.0;
        let dx = c as f64 + 0.5 - self.center.1;
        let half = self.size as f64 / 2.0;
        match self.kind {
            ShapeKind::Rect => dx.abs() <= half && dy.abs() <= half,
            ShapeKind::Disc => dx * dx + dy * dy <= half * half,
            ShapeKind::Cross => {
                let arm = self.size as f64 / 6.0;
                (dx.abs() <= half && dy.abs() <= arm) || (dy.abs() <= half && dx.abs() <= arm)
            }
        }
    }

    /// Number of pixels covered on an `h x w` canvas.
    pub fn area(&self, h: usize, w: usize) -> usize {
        (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .filter(|&(r, c)| self.covers(r, c))
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub canvas: Image,
    pub shapes: Vec<ShapeSpec>,
    pub background: [f64; 3],
}

impl ToyScene {
    /// Draws `shapes` back to front over a flat background.
    pub fn render(h: usize, w: usize, background: [f64; 3], shapes: Vec<ShapeSpec>) -> Self {
        let mut canvas = Image::filled(h, w, background);
        for s in &shapes {
            for r in 0..h {
                for c in 0..w {
                    if s.covers(r, c) {
                        canvas.pixel_mut(r, c).copy_from_slice(&s.color);
                    }
                }
            }
        }
        Self {
            canvas,
            shapes,
            background,
        }
    }
}

/// Uniform shape with center chosen so it stays `margin` pixels inside.
pub(crate) fn random_shape<R: Rng>(rng: &mut R, side: usize, color: [f64; 3]) -> ShapeSpec {
    let kind = ShapeKind::ALL[rng.gen_range(0..3)];
    let size = rng.gen_range(4..=7usize);
    let lo = size as f64 / 2.0 + 1.0;
    let hi = side as f64 - lo;
    ShapeSpec {
        kind,
        center: (rng.gen_range(lo..=hi).round(), rng.gen_range(lo..=hi).round()),
        size,
        color,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_area() {
        let s = ShapeSpec {
            kind: ShapeKind::Rect,
            center: (8.0, 8.0),
            size: 4,
            color: [1.0; 3],
        };
        assert_eq!(s.area(16, 16), 16);
    }

    #[test]
    fn render_back_to_front() {
        let a = ShapeSpec {
            kind: ShapeKind::Rect,
            center: (4.0, 4.0),
            size: 4,
            color: [1.0, 0.0, 0.0],
        };
        let b = ShapeSpec {
            color: [0.0, 0.0, 1.0],
            ..a
        };
        let s = ToyScene::render(8, 8, [0.0; 3], vec![a, b]);
        assert_eq!(s.canvas.pixel(4, 4), &[0.0, 0.0, 1.0]);
        assert_eq!(s.canvas.pixel(0, 0), &[0.0, 0.0, 0.0]);
    }
}
