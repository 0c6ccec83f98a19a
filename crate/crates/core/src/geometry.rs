//! Parallel-beam scan geometry and the matrix-free system operator.
//!
//! The system matrix entry for ray `(i, j)` and pixel `k` is the exact length
//! of the intersection of the ray with the pixel square (Siddon). Rays are
//! indexed detector-fastest, so a sinogram vector is `vec(Y)` with `Y` of
//! size `r x p`: entry `(i, j)` lives at `j * r + i`.
//!
//! Images are stored row-major with row 0 at the top of the domain
//! (largest `y`), column 0 at the left (smallest `x`).

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{invalid, mismatch, Result};

/// Fraction of a pixel side below which a ray segment is dropped. Such
/// segments only arise when a ray passes within rounding of a grid corner.
const SEGMENT_EPS: f64 = 1e-12;

/// Number of angle chunks used by the adjoint. Fixed so the reduction order,
/// and therefore the result, does not depend on the thread count.
const ADJOINT_CHUNKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleSpan {
    /// Equispaced angles over `[0, pi)`.
    Half,
    /// Equispaced angles over `[0, 2 pi)`.
    Full,
}

impl AngleSpan {
    pub fn extent(self) -> f64 {
        match self {
            AngleSpan::Half => PI,
            AngleSpan::Full => 2.0 * PI,
        }
    }
}

/// Description of a 2D parallel-beam scan and its reconstruction grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    detectors: usize,
    detector_width: f64,
    angles: Vec<f64>,
    domain_side: f64,
    grid_n: usize,
    forward_grid_n: usize,
}

impl Geometry {
    /// Builds a geometry from explicit angles. Angles must be strictly
    /// increasing inside `[0, 2 pi)`.
    pub fn new(
        detectors: usize,
        detector_width: f64,
        angles: Vec<f64>,
        domain_side: f64,
        grid_n: usize,
        forward_grid_n: usize,
    ) -> Result<Self> {
        if detectors == 0 {
            return invalid("detector count must be at least 1");
        }
        if angles.is_empty() {
            return invalid("projection count must be at least 1");
        }
        if !(detector_width > 0.0 && detector_width.is_finite()) {
            return invalid(format!("detector width must be positive, got {detector_width}"));
        }
        if !(domain_side > 0.0 && domain_side.is_finite()) {
            return invalid(format!("domain side must be positive, got {domain_side}"));
        }
        if grid_n < 2 || forward_grid_n < 2 {
            return invalid("grid side must be at least 2");
        }
        let in_range = angles.iter().all(|a| (0.0..2.0 * PI).contains(a));
        let increasing = angles.windows(2).all(|w| w[0] < w[1]);
        if !in_range || !increasing {
            return invalid("angles must be strictly increasing within [0, 2pi)");
        }
        Ok(Self {
            detectors,
            detector_width,
            angles,
            domain_side,
            grid_n,
            forward_grid_n,
        })
    }

    /// Equispaced parallel-beam geometry; the simulation grid defaults to
    /// twice the reconstruction grid.
    pub fn parallel(
        detectors: usize,
        projections: usize,
        detector_width: f64,
        domain_side: f64,
        grid_n: usize,
        span: AngleSpan,
    ) -> Result<Self> {
        if projections == 0 {
            return invalid("projection count must be at least 1");
        }
        let step = span.extent() / projections as f64;
        let angles = (0..projections).map(|j| j as f64 * step).collect();
        Self::new(detectors, detector_width, angles, domain_side, grid_n, 2 * grid_n)
    }

    /// Same scan, different reconstruction grid.
    pub fn with_grid(&self, grid_n: usize) -> Result<Self> {
        if grid_n < 2 {
            return invalid("grid side must be at least 2");
        }
        Ok(Self { grid_n, ..self.clone() })
    }

    /// The scan re-targeted to the simulation grid.
    pub fn forward_geometry(&self) -> Self {
        Self {
            grid_n: self.forward_grid_n,
            ..self.clone()
        }
    }

    pub fn detectors(&self) -> usize {
        self.detectors
    }

    pub fn projections(&self) -> usize {
        self.angles.len()
    }

    pub fn rays(&self) -> usize {
        self.detectors * self.angles.len()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn detector_width(&self) -> f64 {
        self.detector_width
    }

    pub fn detector_spacing(&self) -> f64 {
        self.detector_width / self.detectors as f64
    }

    /// Signed offset of detector `i`'s center from the rotation axis.
    pub fn detector_offset(&self, i: usize) -> f64 {
        -0.5 * self.detector_width + (i as f64 + 0.5) * self.detector_spacing()
    }

    pub fn domain_side(&self) -> f64 {
        self.domain_side
    }

    pub fn grid_n(&self) -> usize {
        self.grid_n
    }

    pub fn forward_grid_n(&self) -> usize {
        self.forward_grid_n
    }

    pub fn pixel_size(&self) -> f64 {
        self.domain_side / self.grid_n as f64
    }

    pub fn pixels(&self) -> usize {
        self.grid_n * self.grid_n
    }

    /// True when the angles cover a full turn (largest angle beyond pi).
    pub fn is_full_rotation(&self) -> bool {
        self.angles.last().is_some_and(|&a| a >= PI)
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        if img.n() != self.grid_n {
            return mismatch(format!("image grid {} does not match geometry grid {}", img.n(), self.grid_n));
        }
        if (img.pixel_size() - self.pixel_size()).abs() > 1e-12 * self.pixel_size() {
            return mismatch("image pixel size does not match geometry");
        }
        Ok(())
    }

    fn check_sinogram(&self, sino: &Sinogram) -> Result<()> {
        if sino.rows() != self.detectors || sino.cols() != self.projections() {
            return mismatch(format!(
                "sinogram is {}x{}, geometry expects {}x{}",
                sino.rows(),
                sino.cols(),
                self.detectors,
                self.projections()
            ));
        }
        Ok(())
    }
}

/// Square image of attenuation coefficients in cm^-1.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    n: usize,
    pixel_size: f64,
    values: Vec<f64>,
}

impl Image {
    pub fn zeros(n: usize, domain_side: f64) -> Self {
        Self {
            n,
            pixel_size: domain_side / n as f64,
            values: vec![0.0; n * n],
        }
    }

    pub fn from_values(n: usize, domain_side: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return mismatch(format!("expected {} pixel values, got {}", n * n, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("image values must be finite");
        }
        Ok(Self {
            n,
            pixel_size: domain_side / n as f64,
            values,
        })
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel center.
    pub fn from_fn(n: usize, domain_side: f64, f: impl Fn(f64, f64) -> f64) -> Self {
        let h = domain_side / n as f64;
        let half = 0.5 * domain_side;
        let mut values = Vec::with_capacity(n * n);
        for row in 0..n {
            let y = half - (row as f64 + 0.5) * h;
            for col in 0..n {
                let x = -half + (col as f64 + 0.5) * h;
                values.push(f(x, y));
            }
        }
        Self {
            n,
            pixel_size: h,
            values,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn domain_side(&self) -> f64 {
        self.pixel_size * self.n as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n + col]
    }

    /// Pixel-center coordinates of `(row, col)`.
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        let half = 0.5 * self.domain_side();
        (
            -half + (col as f64 + 0.5) * self.pixel_size,
            half - (row as f64 + 0.5) * self.pixel_size,
        )
    }

    /// Indicator of pixels whose centers lie within `radius` of the origin.
    pub fn disk_mask(n: usize, domain_side: f64, radius: f64) -> Vec<bool> {
        Image::from_fn(n, domain_side, |x, y| f64::from(u8::from(x * x + y * y <= radius * radius)))
            .values
            .iter()
            .map(|&v| v > 0.5)
            .collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinogramKind {
    Counts,
    LineIntegrals,
    LogRatio,
}

impl SinogramKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SinogramKind::Counts => "counts",
            SinogramKind::LineIntegrals => "line_integrals",
            SinogramKind::LogRatio => "log_ratio",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            SinogramKind::Counts => 0,
            SinogramKind::LineIntegrals => 1,
            SinogramKind::LogRatio => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(SinogramKind::Counts),
            1 => Some(SinogramKind::LineIntegrals),
            2 => Some(SinogramKind::LogRatio),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "counts" => Some(SinogramKind::Counts),
            "line_integrals" => Some(SinogramKind::LineIntegrals),
            "log_ratio" => Some(SinogramKind::LogRatio),
            _ => None,
        }
    }
}

/// An `rows x cols` matrix of projection data stored column-major, so the
/// flat vector is `vec(Y)`. Flat-field samples use the same container with
/// one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    rows: usize,
    cols: usize,
    kind: SinogramKind,
    values: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(rows: usize, cols: usize, kind: SinogramKind) -> Self {
        Self {
            rows,
            cols,
            kind,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_values(rows: usize, cols: usize, kind: SinogramKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return mismatch(format!("expected {} entries, got {}", rows * cols, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("sinogram entries must be finite");
        }
        if kind == SinogramKind::Counts && values.iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
            return invalid("count data must be nonnegative integers");
        }
        Ok(Self {
            rows,
            cols,
            kind,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn kind(&self) -> SinogramKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.rows + i]
    }

    /// Sum over columns for each row (`Y 1`).
    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.rows];
        for col in self.values.chunks_exact(self.rows) {
            for (s, v) in sums.iter_mut().zip(col) {
                *s += v;
            }
        }
        sums
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.cols).map(|j| self.get(i, j)).collect()
    }
}

/// A linear map between flat vectors with an exact adjoint.
pub trait LinearOperator: Sync {
    /// Dimension of the range (number of rays for a projector).
    fn rows(&self) -> usize;
    /// Dimension of the domain (number of pixels for a projector).
    fn cols(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]);

    fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows()];
        self.apply(x, &mut out);
        out
    }

    fn apply_adjoint_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols()];
        self.apply_adjoint(y, &mut out);
        out
    }
}

/// Row-major dense matrix; handy for small problems and as a reference for
/// the projector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return mismatch(format!("{} values for a {rows}x{cols} matrix", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { rows: n, cols: n, data }
    }

    /// Materializes any operator column by column.
    pub fn from_operator(op: &dyn LinearOperator) -> Self {
        let (rows, cols) = (op.rows(), op.cols());
        let mut data = vec![0.0; rows * cols];
        let mut e = vec![0.0; cols];
        let mut col = vec![0.0; rows];
        for c in 0..cols {
            e[c] = 1.0;
            op.apply(&e, &mut col);
            e[c] = 0.0;
            for r in 0..rows {
                data[r * cols + c] = col[r];
            }
        }
        Self { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

impl LinearOperator for DenseMatrix {
    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.cols);
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.data[r * self.cols..(r + 1) * self.cols].iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        assert_eq!(y.len(), self.rows);
        out.fill(0.0);
        for (r, &yv) in y.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(&self.data[r * self.cols..(r + 1) * self.cols]) {
                *o += a * yv;
            }
        }
    }
}

/// Walks ray `x . (c, s) = t` through an `n x n` grid covering the square of
/// side `side` centered at the origin, reporting `(pixel, length)` for every
/// pixel it crosses in order of travel.
fn trace_ray(n: usize, side: f64, cos: f64, sin: f64, t: f64, mut visit: impl FnMut(usize, f64)) {
    let half = 0.5 * side;
    let h = side / n as f64;
    let (px, py) = (t * cos, t * sin);
    let (dx, dy) = (-sin, cos);

    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (p, d) in [(px, dx), (py, dy)] {
        if d == 0.0 {
            if p < -half || p >= half {
                return;
            }
        } else {
            let a = (-half - p) / d;
            let b = (half - p) / d;
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
    }
    if hi - lo <= SEGMENT_EPS * h {
        return;
    }

    // Parameters at which the ray crosses interior grid lines, one
    // monotone sequence per axis, merged on the fly.
    let crossings = |p: f64, d: f64| -> (f64, f64, usize) {
        if d == 0.0 {
            return (f64::INFINITY, 0.0, 0);
        }
        let step = h / d.abs();
        let enter = p + lo * d;
        let k = (enter + half) / h;
        // first grid line strictly ahead of the entry point in travel direction
        let first_line = if d > 0.0 { k.floor() + 1.0 } else { k.ceil() - 1.0 };
        let first = (-half + first_line * h - p) / d;
        (first, step, n + 1)
    };
    let (mut next_x, step_x, mut left_x) = crossings(px, dx);
    let (mut next_y, step_y, mut left_y) = crossings(py, dy);

    let mut prev = lo;
    loop {
        let (cut, from_x) = if next_x <= next_y { (next_x, true) } else { (next_y, false) };
        let end = if cut < hi { cut } else { hi };
        let len = end - prev;
        if len > SEGMENT_EPS * h {
            let mid = 0.5 * (prev + end);
            let x = px + mid * dx;
            let y = py + mid * dy;
            let col = (((x + half) / h).floor() as isize).clamp(0, n as isize - 1) as usize;
            let up = (((y + half) / h).floor() as isize).clamp(0, n as isize - 1) as usize;
            visit((n - 1 - up) * n + col, len);
        }
        if end >= hi {
            break;
        }
        prev = prev.max(end);
        if from_x {
            left_x = left_x.saturating_sub(1);
            next_x = if left_x == 0 { f64::INFINITY } else { next_x + step_x };
        } else {
            left_y = left_y.saturating_sub(1);
            next_y = if left_y == 0 { f64::INFINITY } else { next_y + step_y };
        }
    }
}

/// Intersection weights for the ray of detector `i` at projection `j`:
/// `(pixel index, intersection length in cm)` pairs. Empty when the ray
/// misses the domain.
pub fn operator_row(geom: &Geometry, i: usize, j: usize) -> Result<Vec<(usize, f64)>> {
    if i >= geom.detectors() || j >= geom.projections() {
        return invalid(format!(
            "ray ({i}, {j}) out of range for {}x{} scan",
            geom.detectors(),
            geom.projections()
        ));
    }
    let theta = geom.angles[j];
    let mut row = Vec::new();
    trace_ray(
        geom.grid_n,
        geom.domain_side,
        theta.cos(),
        theta.sin(),
        geom.detector_offset(i),
        |k, w| row.push((k, w)),
    );
    Ok(row)
}

/// Precomputed system matrix in compressed-row form, rays in sinogram order.
#[derive(Debug, Clone)]
struct SystemMatrix {
    offsets: Vec<usize>,
    pixels: Vec<u32>,
    weights: Vec<f64>,
}

impl SystemMatrix {
    fn build(geom: &Geometry) -> Self {
        let r = geom.detectors();
        let mut offsets = Vec::with_capacity(geom.rays() + 1);
        let mut pixels = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for &theta in &geom.angles {
            let (sin, cos) = theta.sin_cos();
            for i in 0..r {
                trace_ray(geom.grid_n, geom.domain_side, cos, sin, geom.detector_offset(i), |k, w| {
                    pixels.push(k as u32);
                    weights.push(w);
                });
                offsets.push(pixels.len());
            }
        }
        Self {
            offsets,
            pixels,
            weights,
        }
    }

    fn ray(&self, ray: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[ray]..self.offsets[ray + 1];
        self.pixels[span.clone()]
            .iter()
            .zip(&self.weights[span])
            .map(|(&k, &w)| (k as usize, w))
    }
}

/// The system operator `A` for a geometry. Rows are traced on the fly
/// unless the projector was built with [`Projector::cached`], which stores
/// the weights once and reuses them for every apply.
#[derive(Debug, Clone)]
pub struct Projector {
    geom: Geometry,
    trig: Vec<(f64, f64)>,
    matrix: Option<SystemMatrix>,
}

impl Projector {
    pub fn new(geom: Geometry) -> Self {
        let trig = geom.angles.iter().map(|a| (a.cos(), a.sin())).collect();
        Self {
            geom,
            trig,
            matrix: None,
        }
    }

    /// Projector with precomputed weights; memory is roughly
    /// `12 * rays * 1.5 * grid_n` bytes.
    pub fn cached(geom: Geometry) -> Self {
        let matrix = Some(SystemMatrix::build(&geom));
        Self {
            matrix,
            ..Self::new(geom)
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn is_cached(&self) -> bool {
        self.matrix.is_some()
    }

    pub fn nonzeros(&self) -> Option<usize> {
        self.matrix.as_ref().map(|m| m.weights.len())
    }

    fn for_each_in_ray(&self, i: usize, j: usize, mut visit: impl FnMut(usize, f64)) {
        match &self.matrix {
            Some(m) => m.ray(j * self.geom.detectors + i).for_each(|(k, w)| visit(k, w)),
            None => {
                let (cos, sin) = self.trig[j];
                trace_ray(
                    self.geom.grid_n,
                    self.geom.domain_side,
                    cos,
                    sin,
                    self.geom.detector_offset(i),
                    visit,
                )
            }
        }
    }

    /// Line integrals of `img` along every ray.
    pub fn forward(&self, img: &Image) -> Result<Sinogram> {
        self.geom.check_image(img)?;
        let mut out = vec![0.0; self.geom.rays()];
        self.apply(img.values(), &mut out);
        Ok(Sinogram {
            rows: self.geom.detectors,
            cols: self.geom.projections(),
            kind: SinogramKind::LineIntegrals,
            values: out,
        })
    }

    /// Matched adjoint `A^T y`.
    pub fn back(&self, sino: &Sinogram) -> Result<Image> {
        self.geom.check_sinogram(sino)?;
        let mut out = vec![0.0; self.geom.pixels()];
        self.apply_adjoint(sino.values(), &mut out);
        Image::from_values(self.geom.grid_n, self.geom.domain_side, out)
    }
}

impl LinearOperator for Projector {
    fn rows(&self) -> usize {
        self.geom.rays()
    }

    fn cols(&self) -> usize {
        self.geom.pixels()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.cols(), "projector input length");
        assert_eq!(out.len(), self.rows(), "projector output length");
        let r = self.geom.detectors;
        out.par_chunks_mut(r).enumerate().for_each(|(j, column)| {
            for (i, o) in column.iter_mut().enumerate() {
                let mut acc = 0.0;
                self.for_each_in_ray(i, j, |k, w| acc += w * x[k]);
                *o = acc;
            }
        });
    }

    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        assert_eq!(y.len(), self.rows(), "projector input length");
        assert_eq!(out.len(), self.cols(), "projector output length");
        let r = self.geom.detectors;
        let p = self.geom.projections();
        let per_chunk = p.div_ceil(ADJOINT_CHUNKS);
        let partials: Vec<Vec<f64>> = (0..p.div_ceil(per_chunk))
            .into_par_iter()
            .map(|c| {
                let mut acc = vec![0.0; self.cols()];
                for j in c * per_chunk..((c + 1) * per_chunk).min(p) {
                    for i in 0..r {
                        let yv = y[j * r + i];
                        if yv != 0.0 {
                            self.for_each_in_ray(i, j, |k, w| acc[k] += w * yv);
                        }
                    }
                }
                acc
            })
            .collect();
        out.fill(0.0);
        for part in &partials {
            for (o, v) in out.iter_mut().zip(part) {
                *o += v;
            }
        }
    }
}

/// `A u` for a single image, tracing rays on the fly.
pub fn forward_project(geom: &Geometry, img: &Image) -> Result<Sinogram> {
    Projector::new(geom.clone()).forward(img)
}

/// `A^T y` with the same weights as [`forward_project`].
pub fn back_project(geom: &Geometry, sino: &Sinogram) -> Result<Image> {
    Projector::new(geom.clone()).back(sino)
}

/// Length of the chord of ray `x . (cos, sin) = t` through the square domain.
pub fn chord_length(side: f64, theta: f64, t: f64) -> f64 {
    let half = 0.5 * side;
    let (sin, cos) = theta.sin_cos();
    let (px, py) = (t * cos, t * sin);
    let (dx, dy) = (-sin, cos);
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (p, d) in [(px, dx), (py, dy)] {
        if d == 0.0 {
            if p < -half || p >= half {
                return 0.0;
            }
        } else {
            let a = (-half - p) / d;
            let b = (half - p) / d;
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
    }
    (hi - lo).max(0.0)
}
