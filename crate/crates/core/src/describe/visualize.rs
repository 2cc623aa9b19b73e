//! Before/after composites with a click marker.
//!
//! Marker geometry scales with the screen width: a white-bordered red disc
//! of radius 2% of the width centred on the click, a green square outline of
//! side 8% of the width around it, and a "C" glyph sitting on the square's
//! top-right corner.

use std::io::Cursor;

use image::{ImageFormat, Rgba, RgbaImage};
use thiserror::Error;

use crate::action::Action;

const WHITE: Rgba<u8> = Rgba([255, 255, 255, 255]);
const RED: Rgba<u8> = Rgba([230, 0, 0, 255]);
const GREEN: Rgba<u8> = Rgba([0, 200, 0, 255]);

pub const RING_RADIUS_FRACTION: f64 = 0.02;
pub const SQUARE_SIDE_FRACTION: f64 = 0.08;

#[derive(Debug, Error)]
pub enum VisualizationError {
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("click ({x}, {y}) lies outside the {width}x{height} screen")]
    OutOfBounds { x: u32, y: u32, width: u32, height: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClickMarker {
    pub center: (u32, u32),
    pub ring_radius: u32,
    pub square_side: u32,
    /// Top-left pixel of the "C" glyph, possibly off-canvas.
    pub label_origin: (i64, i64),
}

#[derive(Debug, Clone)]
pub struct ActionVisualization {
    pub composite: RgbaImage,
    pub marker: Option<ClickMarker>,
}

impl ActionVisualization {
    pub fn to_png(&self) -> Result<Vec<u8>, VisualizationError> {
        let mut out = Cursor::new(Vec::new());
        self.composite.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

// 5x7 bitmap, one row per byte, low five bits used, MSB on the left.
const GLYPH_C: [u8; 7] = [
    0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110,
];

fn put(img: &mut RgbaImage, x: i64, y: i64, color: Rgba<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn fill_disc(img: &mut RgbaImage, cx: i64, cy: i64, radius: i64, color: Rgba<u8>) {
    let r2 = radius * radius;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy <= r2 {
                put(img, cx + dx, cy + dy, color);
            }
        }
    }
}

fn square_outline(img: &mut RgbaImage, cx: i64, cy: i64, side: i64, thickness: i64, color: Rgba<u8>) {
    let half = side / 2;
    let (left, top) = (cx - half, cy - half);
    let (right, bottom) = (left + side - 1, top + side - 1);
    for y in top..=bottom {
        for x in left..=right {
            let edge = x - left < thickness
                || right - x < thickness
                || y - top < thickness
                || bottom - y < thickness;
            if edge {
                put(img, x, y, color);
            }
        }
    }
}

fn draw_glyph(img: &mut RgbaImage, origin: (i64, i64), scale: i64, color: Rgba<u8>) {
    for (row, bits) in GLYPH_C.iter().enumerate() {
        for col in 0..5 {
            if bits & (1 << (4 - col)) != 0 {
                for sy in 0..scale {
                    for sx in 0..scale {
                        put(
                            img,
                            origin.0 + col * scale + sx,
                            origin.1 + row as i64 * scale + sy,
                            color,
                        );
                    }
                }
            }
        }
    }
}

fn scaled(width: u32, fraction: f64, floor: u32) -> u32 {
    ((width as f64 * fraction).round() as u32).max(floor)
}

/// Places `before` left and `after` right; marks the click on the left pane.
pub fn build_visualization(
    before: &RgbaImage,
    after: &RgbaImage,
    action: &Action,
) -> Result<ActionVisualization, VisualizationError> {
    let width = before.width();
    let height = before.height();
    let mut composite = RgbaImage::from_pixel(
        width + after.width(),
        height.max(after.height()),
        Rgba([0, 0, 0, 255]),
    );
    image::imageops::replace(&mut composite, before, 0, 0);
    image::imageops::replace(&mut composite, after, width as i64, 0);

    let marker = match *action {
        Action::Click { x, y } => {
            if x >= width || y >= height {
                return Err(VisualizationError::OutOfBounds { x, y, width, height });
            }
            let ring_radius = scaled(width, RING_RADIUS_FRACTION, 2);
            let square_side = scaled(width, SQUARE_SIDE_FRACTION, 4);
            let (cx, cy) = (x as i64, y as i64);
            let border = (ring_radius as i64 / 4).max(1);
            let thickness = scaled(width, 0.004, 1) as i64;

            square_outline(&mut composite, cx, cy, square_side as i64, thickness, GREEN);
            fill_disc(&mut composite, cx, cy, ring_radius as i64, WHITE);
            fill_disc(&mut composite, cx, cy, ring_radius as i64 - border, RED);

            let scale = (square_side as i64 / 16).max(1);
            let half = square_side as i64 / 2;
            let label_origin = (cx - half + square_side as i64, cy - half - 7 * scale);
            draw_glyph(&mut composite, label_origin, scale, GREEN);
            Some(ClickMarker {
                center: (x, y),
                ring_radius,
                square_side,
                label_origin,
            })
        }
        _ => None,
    };
    Ok(ActionVisualization { composite, marker })
}
