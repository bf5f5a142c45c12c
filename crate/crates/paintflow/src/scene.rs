//! Procedural toy scenes: one colored shape per canvas plus its template
//! caption "<size> <color> <shape> <position>".

use crate::image::{PixelImage, PIXEL_MIN};
use crate::painted::CanvasSpec;

macro_rules! scene_enum {
    ($name:ident { $($variant:ident => $label:expr),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn label(&self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }

            pub fn from_label(s: &str) -> Option<$name> {
                match s {
                    $($label => Some($name::$variant),)+
                    _ => None,
                }
            }
        }
    };
}

scene_enum!(Shape {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
    Cross => "cross",
});

scene_enum!(SceneColor {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    White => "white",
});

scene_enum!(ShapeSize {
    Small => "small",
    Large => "large",
});

scene_enum!(ScenePosition {
    Center => "center",
    Left => "left",
    Right => "right",
    Top => "top",
    Bottom => "bottom",
});

impl SceneColor {
    /// RGB components in the canonical pixel range.
    pub fn rgb(&self) -> [f32; 3] {
        match self {
            SceneColor::Red => [1.0, -1.0, -1.0],
            SceneColor::Green => [-1.0, 1.0, -1.0],
            SceneColor::Blue => [-1.0, -1.0, 1.0],
            SceneColor::Yellow => [1.0, 1.0, -1.0],
            SceneColor::White => [1.0, 1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: SceneColor,
    pub size: ShapeSize,
    pub position: ScenePosition,
    pub seed: u64,
}

impl SceneSpec {
    pub fn caption(&self) -> String {
        format!(
            "{} {} {} {}",
            self.size.label(),
            self.color.label(),
            self.shape.label(),
            self.position.label()
        )
    }

    /// The four descriptive attributes, ignoring the per-sample seed.
    pub fn attributes(&self) -> (Shape, SceneColor, ShapeSize, ScenePosition) {
        (self.shape, self.color, self.size, self.position)
    }
}

/// All 200 attribute combinations in a fixed order, seeds zeroed.
pub fn scene_grid() -> Vec<SceneSpec> {
    let mut out = Vec::with_capacity(200);
    for &shape in Shape::ALL {
        for &color in SceneColor::ALL {
            for &size in ShapeSize::ALL {
                for &position in ScenePosition::ALL {
                    out.push(SceneSpec { shape, color, size, position, seed: 0 });
                }
            }
        }
    }
    out
}

/// Shape center in continuous canvas coordinates.
pub fn position_center(position: ScenePosition, spec: &CanvasSpec) -> (f32, f32) {
    let (w, h) = (spec.width as f32, spec.height as f32);
    match position {
        ScenePosition::Center => (w / 2.0, h / 2.0),
        ScenePosition::Left => (w / 4.0, h / 2.0),
        ScenePosition::Right => (3.0 * w / 4.0, h / 2.0),
        ScenePosition::Top => (w / 2.0, h / 4.0),
        ScenePosition::Bottom => (w / 2.0, 3.0 * h / 4.0),
    }
}

/// Shape radius in pixels (7 or 14 on a 64px canvas, scaled with canvas size).
pub fn shape_radius(size: ShapeSize, spec: &CanvasSpec) -> f32 {
    let m = spec.width.min(spec.height) as f32;
    match size {
        ShapeSize::Small => m * 7.0 / 64.0,
        ShapeSize::Large => m * 14.0 / 64.0,
    }
}

/// Deterministic render of a scene on a black background. Pure in
/// (scene attributes, canvas); the scene seed does not affect pixels.
pub fn render_scene(scene: &SceneSpec, spec: &CanvasSpec) -> PixelImage {
    let mut img = PixelImage::filled(spec.height, spec.width, spec.channels, PIXEL_MIN);
    let (cx, cy) = position_center(scene.position, spec);
    let r = shape_radius(scene.size, spec);
    let rgb = scene.color.rgb();
    for y in 0..spec.height {
        for x in 0..spec.width {
            let px = x as f32 + 0.5;
            let py = y as f32 + 0.5;
            if inside_shape(scene.shape, px - cx, py - cy, r) {
                for (c, &v) in rgb.iter().enumerate().take(spec.channels) {
                    img.set(y, x, c, v);
                }
            }
        }
    }
    img
}

fn inside_shape(shape: Shape, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Triangle => {
            // Vertices (0, -r), (-r, r), (r, r).
            if dy < -r || dy > r {
                return false;
            }
            let half_width_at = (dy + r) / 2.0;
            dx.abs() <= half_width_at
        }
        Shape::Cross => {
            let w = r * 0.35;
            (dx.abs() <= r && dy.abs() <= w) || (dx.abs() <= w && dy.abs() <= r)
        }
    }
}
