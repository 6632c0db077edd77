//! Procedural rendering of attribute vectors and the inverse rule decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttributeSpace, AttributeVector};
use crate::error::{IntentError, Result};
use crate::image::Image;

/// Background gray on the 8-bit grid.
pub const BACKGROUND: f64 = 128.0 / 255.0;

/// Saturated foreground colors; none of them is gray.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 25],
    [25, 200, 40],
    [30, 60, 230],
    [240, 220, 20],
    [220, 30, 220],
    [20, 210, 220],
    [250, 130, 10],
    [120, 40, 10],
];

/// Half-extent of each size class, as a fraction of the cell side.
const SIZE_FRACTIONS: [f64; 3] = [0.2, 0.32, 0.45];

pub const MAX_SHAPES: usize = 4;
pub const MAX_SIZES: usize = SIZE_FRACTIONS.len();
pub const MAX_POSITIONS: usize = 9;

const CLUTTER_ATTEMPTS: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Cross,
}

const SHAPES: [ShapeKind; MAX_SHAPES] = [
    ShapeKind::Square,
    ShapeKind::Circle,
    ShapeKind::Triangle,
    ShapeKind::Cross,
];

/// Placement of the foreground shape: center pixel and half-extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Placement {
    pub cy: i64,
    pub cx: i64,
    pub radius: i64,
}

fn grid_side(space: &AttributeSpace) -> usize {
    (1..).find(|g| g * g >= space.positions).unwrap()
}

fn cross_arm(radius: i64) -> i64 {
    ((radius as f64 / 3.0).round() as i64).max(1)
}

pub(crate) fn placement(space: &AttributeSpace, attrs: &AttributeVector, size: usize) -> Placement {
    let g = grid_side(space);
    let cell = size / g;
    let (row, col) = (attrs.position / g, attrs.position % g);
    let radius = ((cell as f64 * SIZE_FRACTIONS[attrs.size]).round() as i64).max(1);
    Placement {
        cy: (row * cell + cell / 2) as i64,
        cx: (col * cell + cell / 2) as i64,
        radius,
    }
}

fn inside(kind: ShapeKind, dy: i64, dx: i64, r: i64) -> bool {
    if dy.abs() > r || dx.abs() > r {
        return false;
    }
    match kind {
        ShapeKind::Square => true,
        ShapeKind::Circle => dy * dy + dx * dx <= r * r + r,
        ShapeKind::Triangle => 2 * dx.abs() <= dy + r,
        ShapeKind::Cross => {
            let t = cross_arm(r);
            dx.abs() <= t || dy.abs() <= t
        }
    }
}

/// Renders `attrs` over a seeded clutter background.
///
/// Clutter rectangles are low-contrast grays whose union covers at most
/// `clutter_level` of the image; the shape is painted last so it is never
/// occluded. Output values lie on the 8-bit grid.
pub fn render_image(
    space: &AttributeSpace,
    attrs: &AttributeVector,
    image_size: usize,
    clutter_level: f64,
    seed: u64,
) -> Result<Image> {
    space.check(attrs)?;
    if image_size < 16 {
        return Err(IntentError::InvalidArgument(format!(
            "image size {image_size} is below the minimum of 16"
        )));
    }
    if !(0.0..=1.0).contains(&clutter_level) {
        return Err(IntentError::InvalidArgument(format!(
            "clutter level {clutter_level} outside [0, 1]"
        )));
    }
    let n = image_size;
    let mut img = Image::filled(n, n, 3, BACKGROUND)?;

    let budget = (clutter_level * (n * n) as f64).floor() as usize;
    if budget > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut covered = vec![false; n * n];
        let mut covered_count = 0usize;
        for _ in 0..CLUTTER_ATTEMPTS {
            let h = rng.gen_range(n / 8..=n / 2);
            let w = rng.gen_range(n / 8..=n / 2);
            let y0 = rng.gen_range(0..=n - h);
            let x0 = rng.gen_range(0..=n - w);
            let base = BACKGROUND + rng.gen_range(-0.15..0.15);
            let tint: [f64; 3] = [
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
            ];
            let fresh = (y0..y0 + h)
                .flat_map(|y| (x0..x0 + w).map(move |x| y * n + x))
                .filter(|i| !covered[*i])
                .count();
            if covered_count + fresh > budget {
                continue;
            }
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    covered[y * n + x] = true;
                    for (c, t) in tint.iter().enumerate() {
                        img.set(y, x, c, base + t);
                    }
                }
            }
            covered_count += fresh;
        }
    }

    let kind = SHAPES[attrs.shape];
    let color = PALETTE[attrs.color];
    let p = placement(space, attrs, n);
    for y in 0..n as i64 {
        for x in 0..n as i64 {
            if inside(kind, y - p.cy, x - p.cx, p.radius) {
                for (c, v) in color.iter().enumerate() {
                    img.set(y as usize, x as usize, c, *v as f64 / 255.0);
                }
            }
        }
    }
    Ok(img.quantized())
}

/// Recovers the attribute vector of a clutter-free rendering.
pub fn decode_attributes(space: &AttributeSpace, image: &Image) -> Result<AttributeVector> {
    let (n, _, c) = image.shape();
    if c != 3 || image.width() != n {
        return Err(IntentError::InvalidImage("decoder expects square RGB images".into()));
    }
    let fg = |y: i64, x: i64| -> bool {
        if y < 0 || x < 0 || y >= n as i64 || x >= n as i64 {
            return false;
        }
        (0..3).any(|ch| (image.get(y as usize, x as usize, ch) - BACKGROUND).abs() > 1e-9)
    };
    let (mut y0, mut y1, mut x0, mut x1) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
    let mut sample = None;
    for y in 0..n as i64 {
        for x in 0..n as i64 {
            if fg(y, x) {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
                sample.get_or_insert((y, x));
            }
        }
    }
    let Some((sy, sx)) = sample else {
        return Err(IntentError::Degenerate("no foreground pixels".into()));
    };
    let (cy, cx, r) = ((y0 + y1) / 2, (x0 + x1) / 2, (x1 - x0) / 2);

    let kind = if fg(cy - r, cx - r) {
        ShapeKind::Square
    } else if fg(cy + r, cx - r) {
        ShapeKind::Triangle
    } else {
        let probe = cross_arm(r) + 1;
        if fg(cy - probe, cx - probe) {
            ShapeKind::Circle
        } else {
            ShapeKind::Cross
        }
    };
    let shape = SHAPES.iter().position(|k| *k == kind).unwrap();

    let rgb: Vec<f64> = (0..3).map(|ch| image.get(sy as usize, sx as usize, ch)).collect();
    let color = (0..space.colors)
        .min_by(|a, b| {
            let d = |i: usize| -> f64 {
                PALETTE[i]
                    .iter()
                    .zip(&rgb)
                    .map(|(p, v)| (*p as f64 / 255.0 - v).powi(2))
                    .sum()
            };
            d(*a).total_cmp(&d(*b))
        })
        .unwrap();

    let g = grid_side(space);
    let cell = (n / g) as i64;
    let position = ((cy / cell) as usize) * g + (cx / cell) as usize;
    let size = (0..space.sizes)
        .min_by_key(|z| {
            let expected = ((cell as f64 * SIZE_FRACTIONS[*z]).round() as i64).max(1);
            (expected - r).abs()
        })
        .unwrap();
    Ok(AttributeVector {
        shape,
        color,
        size,
        position,
    })
}
