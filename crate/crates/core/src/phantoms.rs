//! Test objects: three nested squares, a seeded Voronoi "grains" object, and
//! ellipse phantoms with closed-form line integrals.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::geometry::{Geometry, Image, Sinogram, SinogramKind};
use crate::simulate::stream_rng;

/// Discriminants below this are treated as tangent rays with zero chord.
const TANGENT_DISCRIMINANT: f64 = 1e-14;

/// Domain side of the nested-squares object, cm.
pub const THREE_SQUARES_SIDE: f64 = 1.0;

/// Nested axis-aligned squares on a 1 cm domain: the inner square (side
/// 0.3 cm) has 0.5 cm^-1, the middle one (side 0.6 cm) 0.25 cm^-1, the
/// outer square (the domain) 0.
pub fn three_squares(grid_n: usize) -> Result<Image> {
    if grid_n < 8 {
        return invalid("three_squares needs grid_n >= 8");
    }
    Ok(Image::from_fn(grid_n, THREE_SQUARES_SIDE, |x, y| {
        let m = x.abs().max(y.abs());
        if m <= 0.15 {
            0.5
        } else if m <= 0.3 {
            0.25
        } else {
            0.0
        }
    }))
}

/// Parameters of the Voronoi grains object.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GrainsSpec {
    pub seed: u64,
    pub num_grains: usize,
    /// Cell values are drawn uniformly from `[low, high]`, cm^-1.
    pub value_range: [f64; 2],
    /// Everything outside this radius (cm) is zero.
    pub mask_radius: f64,
}

impl Default for GrainsSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            num_grains: 100,
            value_range: [0.0, 1.2],
            mask_radius: 0.8,
        }
    }
}

struct Grain {
    x: f64,
    y: f64,
    value: f64,
}

fn grain_cells(spec: &GrainsSpec) -> Vec<Grain> {
    let mut rng: ChaCha8Rng = stream_rng(spec.seed, "grains", 0);
    let [low, high] = spec.value_range;
    (0..spec.num_grains)
        .map(|_| {
            // uniform in the disk by rejection from the bounding square
            let (x, y) = loop {
                let x = rng.random_range(-1.0..1.0);
                let y = rng.random_range(-1.0..1.0);
                if x * x + y * y <= 1.0 {
                    break (x * spec.mask_radius, y * spec.mask_radius);
                }
            };
            let value = if high > low { rng.random_range(low..=high) } else { low };
            Grain { x, y, value }
        })
        .collect()
}

/// Seeded Voronoi partition of the disk of `mask_radius`; each cell carries a
/// constant value. Sampling is at pixel centers, so the same spec produces
/// consistent objects on any grid.
pub fn grains(spec: &GrainsSpec, grid_n: usize, domain_side: f64) -> Result<Image> {
    if spec.num_grains == 0 {
        return invalid("grains needs at least one cell");
    }
    let [low, high] = spec.value_range;
    if !(low >= 0.0 && high >= low) {
        return invalid(format!("invalid grain value range [{low}, {high}]"));
    }
    if !(spec.mask_radius > 0.0) {
        return invalid("grain mask radius must be positive");
    }
    let cells = grain_cells(spec);
    let r2 = spec.mask_radius * spec.mask_radius;
    Ok(Image::from_fn(grid_n, domain_side, |x, y| {
        if x * x + y * y > r2 {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        let mut value = 0.0;
        for c in &cells {
            let d = (x - c.x).powi(2) + (y - c.y).powi(2);
            if d < best {
                best = d;
                value = c.value;
            }
        }
        value
    }))
}

/// One ellipse of an additive ellipse phantom.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    pub b: f64,
    /// Counter-clockwise rotation, radians.
    pub phi: f64,
    /// Attenuation added inside the ellipse, cm^-1.
    pub rho: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.phi.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        u * u + v * v <= 1.0
    }

    /// Chord of the line `x . (cos theta, sin theta) = t` through the ellipse.
    pub fn chord(&self, theta: f64, t: f64) -> f64 {
        let (st, ct) = theta.sin_cos();
        let (px, py) = (t * ct - self.cx, t * st - self.cy);
        let (dx, dy) = (-st, ct);
        let (s, c) = self.phi.sin_cos();
        let pu = (c * px + s * py) / self.a;
        let pv = (-s * px + c * py) / self.b;
        let du = (c * dx + s * dy) / self.a;
        let dv = (-s * dx + c * dy) / self.b;
        let dd = du * du + dv * dv;
        let pd = pu * du + pv * dv;
        let disc = pd * pd - dd * (pu * pu + pv * pv - 1.0);
        if disc < TANGENT_DISCRIMINANT {
            return 0.0;
        }
        2.0 * disc.sqrt() / dd
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EllipsePhantom {
    pub ellipses: Vec<Ellipse>,
}

impl EllipsePhantom {
    pub fn new(ellipses: Vec<Ellipse>) -> Result<Self> {
        if ellipses.iter().any(|e| !(e.a > 0.0 && e.b > 0.0)) {
            return invalid("ellipse semi-axes must be positive");
        }
        Ok(Self { ellipses })
    }

    /// Scales all positions and semi-axes by `factor`; attenuation values are
    /// left unchanged.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            ellipses: self
                .ellipses
                .iter()
                .map(|e| Ellipse {
                    cx: e.cx * factor,
                    cy: e.cy * factor,
                    a: e.a * factor,
                    b: e.b * factor,
                    ..*e
                })
                .collect(),
        }
    }

    pub fn value_at(&self, x: f64, y: f64) -> f64 {
        self.ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.rho).sum()
    }
}

/// Modified (Toft) Shepp-Logan table on `[-1, 1]^2`; scale with
/// [`EllipsePhantom::scaled`] to fit another domain.
pub fn shepp_logan() -> EllipsePhantom {
    let deg = std::f64::consts::PI / 180.0;
    #[rustfmt::skip]
    let table: [(f64, f64, f64, f64, f64, f64); 10] = [
        //  rho     a       b       cx      cy       phi
        ( 1.0,  0.69,   0.92,   0.0,    0.0,     0.0),
        (-0.8,  0.6624, 0.874,  0.0,   -0.0184,  0.0),
        (-0.2,  0.11,   0.31,   0.22,   0.0,   -18.0),
        (-0.2,  0.16,   0.41,  -0.22,   0.0,    18.0),
        ( 0.1,  0.21,   0.25,   0.0,    0.35,    0.0),
        ( 0.1,  0.046,  0.046,  0.0,    0.1,     0.0),
        ( 0.1,  0.046,  0.046,  0.0,   -0.1,     0.0),
        ( 0.1,  0.046,  0.023, -0.08,  -0.605,   0.0),
        ( 0.1,  0.023,  0.023,  0.0,   -0.606,   0.0),
        ( 0.1,  0.023,  0.046,  0.06,  -0.605,   0.0),
    ];
    EllipsePhantom {
        ellipses: table
            .iter()
            .map(|&(rho, a, b, cx, cy, phi)| Ellipse {
                cx,
                cy,
                a,
                b,
                phi: phi * deg,
                rho,
            })
            .collect(),
    }
}

/// Exact line integrals of an ellipse phantom for every ray of `geom`.
pub fn analytic_sinogram(ph: &EllipsePhantom, geom: &Geometry) -> Sinogram {
    let r = geom.detectors();
    let mut values = Vec::with_capacity(geom.rays());
    for &theta in geom.angles() {
        for i in 0..r {
            let t = geom.detector_offset(i);
            values.push(ph.ellipses.iter().map(|e| e.rho * e.chord(theta, t)).sum());
        }
    }
    Sinogram::from_values(r, geom.projections(), SinogramKind::LineIntegrals, values)
        .expect("analytic sinogram has consistent shape")
}

/// Pixel-center sampling of the additive ellipse sum.
pub fn rasterize(ph: &EllipsePhantom, grid_n: usize, domain_side: f64) -> Image {
    Image::from_fn(grid_n, domain_side, |x, y| ph.value_at(x, y))
}
