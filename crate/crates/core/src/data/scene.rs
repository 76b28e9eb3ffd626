//! Synthetic blood-smear scenes and their rasterisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    Task, DISEASES, FLAG_DARK_NUCLEUS, FLAG_ELONGATED, FLAG_ENLARGED, FLAG_GRANULAR, FLAG_PALE,
    FLAG_VACUOLATED, PARASITE, RBC, SICKLE, WBC,
};
use crate::heads::BoxCxCyWh;
use crate::tensor::Tensor;

/// Colour regime of a scene; `Shifted` changes background and stain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Standard,
    Shifted,
}

/// One elliptical cell; lengths in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    pub class: usize,
    pub color: [f64; 3],
    pub morph: [bool; 6],
}

impl Cell {
    /// Unit-ellipse coordinates of pixel-space point `(x, y)`.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        ((dx * c + dy * s) / self.a, (-dx * s + dy * c) / self.b)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.local(x, y);
        u * u + v * v <= 1.0
    }

    /// Half extents of the tight axis-aligned bounding box.
    pub fn half_extent(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (
            ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt(),
            ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt(),
        )
    }

    /// Normalised tight box on a `w×h` canvas.
    pub fn bbox(&self, w: usize, h: usize) -> BoxCxCyWh {
        let (hx, hy) = self.half_extent();
        let x0 = ((self.cx - hx) / w as f64).max(0.0);
        let x1 = ((self.cx + hx) / w as f64).min(1.0);
        let y0 = ((self.cy - hy) / h as f64).max(0.0);
        let y1 = ((self.cy + hy) / h as f64).min(1.0);
        [(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0]
    }

    fn shade(&self, u: f64, v: f64) -> [f64; 3] {
        let r2 = u * u + v * v;
        let mut col = self.color;
        let mix = |col: &mut [f64; 3], target: [f64; 3], t: f64| {
            for k in 0..3 {
                col[k] = col[k] * (1.0 - t) + target[k] * t;
            }
        };
        let dark = self.morph[FLAG_DARK_NUCLEUS];
        match self.class {
            WBC => {
                if r2 < 0.3 {
                    let nucleus = if dark {
                        [0.18, 0.06, 0.28]
                    } else {
                        [0.45, 0.28, 0.62]
                    };
                    mix(&mut col, nucleus, 0.9);
                }
            }
            PARASITE => {
                let (pu, pv) = (u - 0.3, v + 0.2);
                let d2 = pu * pu + pv * pv;
                if (0.04..0.12).contains(&d2) || (dark && d2 < 0.04) {
                    mix(&mut col, [0.3, 0.1, 0.42], 0.85);
                }
            }
            _ => {
                if r2 < 0.12 {
                    mix(&mut col, [1.0, 0.9, 0.9], 0.35);
                }
                if dark && r2 < 0.05 {
                    mix(&mut col, [0.25, 0.08, 0.2], 0.9);
                }
            }
        }
        if self.morph[FLAG_GRANULAR] && r2 >= 0.3 {
            let cell = ((u * 5.0).floor() as i64 * 7 + (v * 5.0).floor() as i64 * 13).rem_euclid(3);
            if cell == 0 {
                mix(&mut col, [0.2, 0.05, 0.25], 0.35);
            }
        }
        if self.morph[FLAG_VACUOLATED] {
            for (hu, hv) in [(-0.4, 0.15), (0.2, -0.45)] {
                if (u - hu).powi(2) + (v - hv).powi(2) < 0.04 {
                    mix(&mut col, [0.97, 0.95, 0.95], 0.8);
                }
            }
        }
        if self.morph[FLAG_PALE] {
            mix(&mut col, [1.0, 1.0, 1.0], 0.45);
        }
        if r2 > 0.8 {
            mix(&mut col, [0.3, 0.1, 0.15], 0.25);
        }
        col
    }
}

/// Cells on a square canvas plus the scene's disease tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub canvas: usize,
    pub cells: Vec<Cell>,
    pub disease: String,
    pub style: Style,
    pub seed: u64,
}

/// Canvas sizes of generated scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanvasSizes {
    pub fov: usize,
    pub cell: usize,
}

impl Default for CanvasSizes {
    fn default() -> Self {
        CanvasSizes { fov: 48, cell: 32 }
    }
}

const MAX_BOX_IOU: f64 = 0.3;

fn base_color(class: usize, style: Style, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let base = match class {
        RBC => [0.86, 0.36, 0.4],
        WBC => [0.74, 0.64, 0.86],
        PARASITE => [0.84, 0.4, 0.44],
        _ => [0.78, 0.28, 0.3],
    };
    let jitter: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.03..0.03));
    let mut c: [f64; 3] = std::array::from_fn(|k| base[k] + jitter[k]);
    if style == Style::Shifted {
        c = [c[0] * 0.8, (c[1] * 1.15).min(1.0), (c[2] * 1.2).min(1.0)];
    }
    c.map(|v| v.clamp(0.0, 1.0))
}

fn sample_flags(class: usize, rng: &mut ChaCha8Rng) -> [bool; 6] {
    let mut f = [false; 6];
    f[FLAG_DARK_NUCLEUS] = rng.gen_bool(if matches!(class, WBC | PARASITE) {
        0.5
    } else {
        0.25
    });
    f[FLAG_ENLARGED] = rng.gen_bool(0.3);
    f[FLAG_GRANULAR] = rng.gen_bool(if class == WBC { 0.5 } else { 0.2 });
    f[FLAG_PALE] = rng.gen_bool(0.3);
    f[FLAG_ELONGATED] = class == SICKLE || rng.gen_bool(0.15);
    f[FLAG_VACUOLATED] = !f[FLAG_GRANULAR] && rng.gen_bool(0.25);
    f
}

/// Semi-axes for a class before morphology scaling, as a fraction of the
/// field-of-view canvas.
fn base_radius(class: usize, rng: &mut ChaCha8Rng) -> f64 {
    match class {
        WBC => rng.gen_range(0.11..0.14),
        _ => rng.gen_range(0.075..0.1),
    }
}

fn make_cell(
    class: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    style: Style,
    rng: &mut ChaCha8Rng,
) -> Cell {
    let morph = sample_flags(class, rng);
    let mut a = radius;
    let mut b = radius * rng.gen_range(0.85..1.0);
    if morph[FLAG_ENLARGED] {
        a *= 1.25;
        b *= 1.25;
    }
    if morph[FLAG_ELONGATED] {
        a *= 1.45;
        b *= 0.6;
    }
    Cell {
        cx,
        cy,
        a,
        b,
        theta: rng.gen_range(0.0..std::f64::consts::PI),
        class,
        color: base_color(class, style, rng),
        morph,
    }
}

fn box_iou_px(a: &Cell, b: &Cell) -> f64 {
    let (ah, av) = a.half_extent();
    let (bh, bv) = b.half_extent();
    let iw = ((a.cx + ah).min(b.cx + bh) - (a.cx - ah).max(b.cx - bh)).max(0.0);
    let ih = ((a.cy + av).min(b.cy + bv) - (a.cy - av).max(b.cy - bv)).max(0.0);
    let inter = iw * ih;
    inter / (4.0 * ah * av + 4.0 * bh * bv - inter)
}

/// Cell classes for a field of view with `disease`.
fn fov_classes(disease: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut classes = Vec::with_capacity(n);
    match DISEASES[disease] {
        "malaria" => classes.extend(std::iter::repeat_n(PARASITE, rng.gen_range(1..=3).min(n))),
        "sickle-cell" => classes.extend(std::iter::repeat_n(SICKLE, rng.gen_range(1..=3).min(n))),
        "leukemia" => classes.extend(std::iter::repeat_n(WBC, rng.gen_range(2..=3).min(n))),
        _ => {}
    }
    if classes.len() < n && DISEASES[disease] != "leukemia" && rng.gen_bool(0.3) {
        classes.push(WBC);
    }
    while classes.len() < n {
        classes.push(RBC);
    }
    classes
}

/// Disease tag implied by a single cell's class.
pub fn disease_of_class(class: usize) -> &'static str {
    match class {
        PARASITE => "malaria",
        SICKLE => "sickle-cell",
        WBC => "leukemia",
        _ => "normal",
    }
}

/// Deterministic scene for `task` from `seed`.
pub fn generate_scene(seed: u64, task: Task, sizes: CanvasSizes, style: Style) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if task.single_cell() {
        let canvas = sizes.cell as f64;
        let class = rng.gen_range(0..4);
        // Single cells fill a larger share of their canvas.
        let radius = base_radius(class, &mut rng) * 2.4 * canvas;
        let cell = make_cell(class, canvas / 2.0, canvas / 2.0, radius, style, &mut rng);
        return Scene {
            canvas: sizes.cell,
            cells: vec![cell],
            disease: disease_of_class(class).to_string(),
            style,
            seed,
        };
    }
    let canvas = sizes.fov as f64;
    let disease = rng.gen_range(0..DISEASES.len());
    let (n, scale) = match task {
        Task::Seg => (rng.gen_range(1..=4), 1.6),
        _ => (rng.gen_range(3..=8), 1.0),
    };
    let mut cells: Vec<Cell> = Vec::with_capacity(n);
    for class in fov_classes(disease, n, &mut rng) {
        for _ in 0..200 {
            let radius = base_radius(class, &mut rng) * scale * canvas;
            let mut cell = make_cell(class, 0.0, 0.0, radius, style, &mut rng);
            let (hx, hy) = cell.half_extent();
            if 2.0 * hx >= canvas - 2.0 || 2.0 * hy >= canvas - 2.0 {
                continue;
            }
            cell.cx = rng.gen_range(hx + 1.0..canvas - hx - 1.0);
            cell.cy = rng.gen_range(hy + 1.0..canvas - hy - 1.0);
            if cells.iter().all(|c| box_iou_px(c, &cell) <= MAX_BOX_IOU) {
                cells.push(cell);
                break;
            }
        }
    }
    Scene {
        canvas: sizes.fov,
        cells,
        disease: DISEASES[disease].to_string(),
        style,
        seed,
    }
}

/// Raster image and ground truth of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    /// `[3×H×W]` in `[0, 1]`.
    pub image: Tensor,
    pub boxes: Vec<BoxCxCyWh>,
    /// Row-major union of the cells, by pixel-centre membership.
    pub mask: Vec<bool>,
}

const SUPERSAMPLE: usize = 4;

fn background(x: f64, y: f64, style: Style, seed: u64) -> [f64; 3] {
    let base = match style {
        Style::Standard => [0.94, 0.88, 0.86],
        Style::Shifted => [0.82, 0.88, 0.95],
    };
    let t =
        ((x * 0.71 + y * 0.37 + (seed % 97) as f64).sin() * (y * 0.53 - x * 0.29).cos()) * 0.025;
    base.map(|v| (v + t).clamp(0.0, 1.0))
}

/// Rasterise with `4×4` supersampling per pixel; later cells paint over earlier.
pub fn render(scene: &Scene) -> Rendered {
    let n = scene.canvas;
    let mut data = vec![0.0; 3 * n * n];
    let mut mask = vec![false; n * n];
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in 0..n {
        for px in 0..n {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step;
                    let y = py as f64 + (sy as f64 + 0.5) * step;
                    let col = match scene.cells.iter().rev().find(|c| c.contains(x, y)) {
                        Some(c) => {
                            let (u, v) = c.local(x, y);
                            c.shade(u, v)
                        }
                        None => background(x, y, scene.style, scene.seed),
                    };
                    for k in 0..3 {
                        acc[k] += col[k];
                    }
                }
            }
            let count = (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for k in 0..3 {
                data[(k * n + py) * n + px] = acc[k] / count;
            }
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            mask[py * n + px] = scene.cells.iter().any(|c| c.contains(cx, cy));
        }
    }
    Rendered {
        image: Tensor::new(vec![3, n, n], data).expect("consistent image shape"),
        boxes: scene.cells.iter().map(|c| c.bbox(n, n)).collect(),
        mask,
    }
}
