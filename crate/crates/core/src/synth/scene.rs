//! Shapes, palette and the rasterizer.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

/// Eight saturated colors, RGB in `[0, 1]`.
pub const PALETTE: [(Color, [f32; 3]); 8] = [
    (Color::Black, [0.0, 0.0, 0.0]),
    (Color::White, [1.0, 1.0, 1.0]),
    (Color::Red, [1.0, 0.0, 0.0]),
    (Color::Green, [0.0, 1.0, 0.0]),
    (Color::Blue, [0.0, 0.0, 1.0]),
    (Color::Yellow, [1.0, 1.0, 0.0]),
    (Color::Cyan, [0.0, 1.0, 1.0]),
    (Color::Magenta, [1.0, 0.0, 1.0]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Black,
    White,
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Black,
        Color::White,
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
    ];

    pub fn rgb(self) -> [f32; 3] {
        PALETTE[self as usize].1
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Black => "black",
            Color::White => "white",
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
        }
    }

    /// Palette entry closest to `rgb` in squared distance.
    pub fn nearest(rgb: [f32; 3]) -> Color {
        let mut best = (f32::INFINITY, Color::Black);
        for (c, p) in PALETTE {
            let d: f32 = (0..3).map(|k| (rgb[k] - p[k]).powi(2)).sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether cell `(r, c)` of a `size x size` box is covered.
    pub fn covers(self, size: usize, r: usize, c: usize) -> bool {
        let s = size as f32;
        let (y, x) = (r as f32 + 0.5, c as f32 + 0.5);
        match self {
            Shape::Square => true,
            Shape::Circle => {
                let rad = s / 2.0;
                (y - rad).powi(2) + (x - rad).powi(2) <= rad * rad
            }
            Shape::Triangle => (x - s / 2.0).abs() <= (r as f32 + 1.0) / 2.0,
        }
    }
}

/// Named placement on the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Center,
    Left,
    Right,
    Top,
    Bottom,
}

impl Anchor {
    pub const ALL: [Anchor; 5] = [Anchor::Center, Anchor::Left, Anchor::Right, Anchor::Top, Anchor::Bottom];

    pub fn word(self) -> &'static str {
        match self {
            Anchor::Center => "center",
            Anchor::Left => "left",
            Anchor::Right => "right",
            Anchor::Top => "top",
            Anchor::Bottom => "bottom",
        }
    }

    /// Top-left corner of a `size` box at this anchor.
    pub fn origin(self, size: usize, height: usize, width: usize) -> (i32, i32) {
        let cy = (height - size) as i32 / 2;
        let cx = (width - size) as i32 / 2;
        match self {
            Anchor::Center => (cy, cx),
            Anchor::Left => (cy, 1),
            Anchor::Right => (cy, (width - size) as i32 - 1),
            Anchor::Top => (1, cx),
            Anchor::Bottom => ((height - size) as i32 - 1, cx),
        }
    }
}

/// Direction of travel for generated videos.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    pub fn word(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    pub fn unit(self) -> (i32, i32) {
        match self {
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub size: usize,
    /// Top-left corner at frame 0.
    pub origin: (i32, i32),
    /// Pixels per frame `(dy, dx)`.
    pub velocity: (i32, i32),
}

impl Object {
    pub fn origin_at(&self, frame: usize) -> (i32, i32) {
        (
            self.origin.0 + self.velocity.0 * frame as i32,
            self.origin.1 + self.velocity.1 * frame as i32,
        )
    }

    pub fn inside(&self, frames: usize, height: usize, width: usize) -> bool {
        (0..frames).all(|f| {
            let (y, x) = self.origin_at(f);
            y >= 0 && x >= 0 && y as usize + self.size <= height && x as usize + self.size <= width
        })
    }

    /// Bounding boxes at least `gap` pixels apart at every frame.
    pub fn separated(&self, other: &Object, frames: usize, gap: i32) -> bool {
        (0..frames).all(|f| {
            let (ay, ax) = self.origin_at(f);
            let (by, bx) = other.origin_at(f);
            let (sa, sb) = (self.size as i32, other.size as i32);
            ay + sa + gap <= by || by + sb + gap <= ay || ax + sa + gap <= bx || bx + sb + gap <= ax
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub background: Color,
    pub objects: Vec<Object>,
}

impl SceneSpec {
    /// Render to `(frames, height, width, 3)` pixels in `[0, 1]`.
    pub fn render(&self) -> Array4<f32> {
        let mut px = Array4::<f32>::zeros((self.frames, self.height, self.width, 3));
        let bg = self.background.rgb();
        for f in 0..self.frames {
            for y in 0..self.height {
                for x in 0..self.width {
                    for c in 0..3 {
                        px[[f, y, x, c]] = bg[c];
                    }
                }
            }
            for obj in &self.objects {
                let (oy, ox) = obj.origin_at(f);
                let rgb = obj.color.rgb();
                for r in 0..obj.size {
                    for c in 0..obj.size {
                        let (y, x) = (oy + r as i32, ox + c as i32);
                        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
                            continue;
                        }
                        if obj.shape.covers(obj.size, r, c) {
                            for k in 0..3 {
                                px[[f, y as usize, x as usize, k]] = rgb[k];
                            }
                        }
                    }
                }
            }
        }
        px
    }
}

/// Pixels where two clips differ in any channel.
pub fn diff_mask(a: &Array4<f32>, b: &Array4<f32>) -> Array3<bool> {
    let (t, h, w, _) = a.dim();
    Array3::from_shape_fn((t, h, w), |(f, y, x)| (0..3).any(|c| a[[f, y, x, c]] != b[[f, y, x, c]]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_distinct() {
        let count = |s: Shape| (0..6).flat_map(|r| (0..6).map(move |c| (r, c))).filter(|&(r, c)| s.covers(6, r, c)).count();
        let (sq, ci, tr) = (count(Shape::Square), count(Shape::Circle), count(Shape::Triangle));
        assert_eq!(sq, 36);
        assert!(ci < sq && ci > tr, "{sq} {ci} {tr}");
    }

    #[test]
    fn nearest_color_round_trips() {
        for c in Color::ALL {
            assert_eq!(Color::nearest(c.rgb()), c);
        }
    }

    #[test]
    fn render_places_object() {
        let scene = SceneSpec {
            height: 8,
            width: 8,
            frames: 2,
            background: Color::Black,
            objects: vec![Object {
                shape: Shape::Square,
                color: Color::Red,
                size: 2,
                origin: (1, 1),
                velocity: (0, 2),
            }],
        };
        let px = scene.render();
        assert_eq!(px[[0, 1, 1, 0]], 1.0);
        assert_eq!(px[[0, 1, 3, 0]], 0.0);
        assert_eq!(px[[1, 1, 3, 0]], 1.0);
        assert_eq!(px[[1, 1, 1, 0]], 0.0);
    }
}
