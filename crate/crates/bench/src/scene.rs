//! Procedural scenes: up to three coloured shapes on a 2×2 layout.

use lore_core::prompt::{Background, Cell, Class, Color, Shape};
use lore_core::PromptSeq;
use lore_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

pub const IMAGE_SIZE: usize = 32;
const CELL_PX: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: Class,
    pub cell: Cell,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub background: Background,
    /// Drives per-object jitter and size.
    pub seed: u64,
}

/// A rasterised scene. `image` is `[32, 32, 3]` in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Tensor,
    pub prompt: PromptSeq,
    /// Per object (in `SceneSpec` order), row-major footprint.
    pub masks: Vec<Vec<bool>>,
}

pub fn rgb(color: Color) -> [f32; 3] {
    match color {
        Color::Red => [1.0, -1.0, -1.0],
        Color::Green => [-1.0, 1.0, -1.0],
        Color::Blue => [-1.0, -1.0, 1.0],
        Color::Yellow => [1.0, 1.0, -1.0],
        Color::Magenta => [1.0, -1.0, 1.0],
        Color::Cyan => [-1.0, 1.0, 1.0],
    }
}

fn background_value(bg: Background, x: usize, y: usize) -> f32 {
    match bg {
        Background::Black => -1.0,
        Background::Gray => 0.0,
        // Two-tone 8 px checkerboard of black and gray.
        Background::Checker => {
            if (x / 8 + y / 8) % 2 == 0 {
                -1.0
            } else {
                0.0
            }
        }
    }
}

/// Signed distance (pixels) from `(dx, dy)`, relative to the shape centre,
/// to a shape of nominal radius `r`. Negative inside.
pub fn sdf(shape: Shape, dx: f64, dy: f64, r: f64) -> f64 {
    let len = |a: f64, b: f64| (a * a + b * b).sqrt();
    let rect = |hx: f64, hy: f64| (dx.abs() - hx).max(dy.abs() - hy);
    match shape {
        Shape::Circle => len(dx, dy) - r,
        Shape::Square => rect(0.85 * r, 0.85 * r),
        Shape::Triangle => {
            // Upward-pointing, flat bottom edge; scaled to fit the cell.
            let r = 0.85 * r;
            let bottom = dy - 0.8 * r;
            let left = -0.5 * dy - 0.866 * dx - 0.55 * r;
            let right = -0.5 * dy + 0.866 * dx - 0.55 * r;
            bottom.max(left).max(right)
        }
        Shape::Cross => rect(r, 0.33 * r).min(rect(0.33 * r, r)),
        Shape::Ring => (len(dx, dy) - 0.72 * r).abs() - 0.28 * r,
        Shape::Bar => rect(r, 0.38 * r),
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.len() > 3 {
            return Err(BenchError::Scene(format!("{} objects, at most 3 allowed", self.objects.len())));
        }
        for (i, a) in self.objects.iter().enumerate() {
            if self.objects[..i].iter().any(|b| b.cell == a.cell) {
                return Err(BenchError::Scene(format!("two objects share cell {}", a.cell)));
            }
        }
        Ok(())
    }

    pub fn prompt(&self) -> PromptSeq {
        let objs: Vec<(Class, Cell)> = self.objects.iter().map(|o| (o.class, o.cell)).collect();
        PromptSeq::scene(self.background, &objs)
    }

    /// Random scene with `lo..=hi` objects in distinct cells.
    pub fn random(rng: &mut Rng, lo: usize, hi: usize) -> SceneSpec {
        let n = lo + rng.below(hi - lo + 1);
        let mut cells = Cell::ALL.to_vec();
        rng.shuffle(&mut cells);
        let objects = cells[..n]
            .iter()
            .map(|&cell| ObjectSpec {
                class: Class::from_index(rng.below(Class::COUNT)).expect("in range"),
                cell,
            })
            .collect();
        let background = Background::ALL[rng.below(Background::ALL.len())];
        SceneSpec {
            objects,
            background,
            seed: rng.next_u64(),
        }
    }
}

/// Centre `(x, y)` and radius of each object, drawn from the scene seed.
pub fn placements(spec: &SceneSpec) -> Vec<(f64, f64, f64)> {
    let mut rng = Rng::new(spec.seed);
    spec.objects
        .iter()
        .map(|o| {
            let (row, col) = o.cell.row_col();
            // ±1 px jitter and r ≤ 6.5 keep every footprint inside its cell.
            let jx = rng.below(3) as f64 - 1.0;
            let jy = rng.below(3) as f64 - 1.0;
            let r = 5.0 + 0.5 * rng.below(4) as f64;
            (col as f64 * CELL_PX + 8.0 + jx, row as f64 * CELL_PX + 8.0 + jy, r)
        })
        .collect()
}

/// Rasterises with a one-pixel anti-aliased edge: coverage
/// `clamp(0.5 − sdf, 0, 1)` at pixel centres, objects composited in order.
pub fn gen_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let s = IMAGE_SIZE;
    let mut img = vec![0.0f32; s * s * 3];
    for y in 0..s {
        for x in 0..s {
            let v = background_value(spec.background, x, y);
            img[(y * s + x) * 3..(y * s + x) * 3 + 3].fill(v);
        }
    }
    let mut masks = Vec::with_capacity(spec.objects.len());
    for (o, (cx, cy, r)) in spec.objects.iter().zip(placements(spec)) {
        let col = rgb(o.class.color);
        let mut mask = vec![false; s * s];
        for y in 0..s {
            for x in 0..s {
                let d = sdf(o.class.shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
                let a = (0.5 - d).clamp(0.0, 1.0) as f32;
                if a > 0.0 {
                    mask[y * s + x] = true;
                    let px = &mut img[(y * s + x) * 3..(y * s + x) * 3 + 3];
                    for (p, c) in px.iter_mut().zip(col) {
                        *p = *p * (1.0 - a) + c * a;
                    }
                }
            }
        }
        masks.push(mask);
    }
    Ok(Scene {
        image: Tensor::new(vec![s, s, 3], img)?,
        prompt: spec.prompt(),
        masks,
    })
}
