//! Simulated GelSight sensing.
//!
//! The forward model shades surface gradients with three colored virtual
//! lights. A lookup table built from simulated ball presses inverts intensity
//! back to gradients, and a DST Poisson solver integrates gradients into a
//! height map with a zero boundary ring.

use std::f64::consts::PI;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slopes beyond this magnitude are clamped before shading or lookup.
pub const MAX_SLOPE: f64 = 2.5;
pub const DEFAULT_BINS: usize = 32;

#[derive(Debug, Error)]
pub enum TactileError {
    #[error("lookup table has no calibration samples")]
    InsufficientCalibration,
    #[error("invalid sensor spec: {0}")]
    InvalidSpec(String),
    #[error("image is {got:?}, expected {want:?}")]
    ShapeMismatch { got: (usize, usize), want: (usize, usize) },
    #[error("bad image file: {0}")]
    BadImage(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub contact_width_mm: f64,
    pub contact_height_mm: f64,
    pub res_u: usize,
    pub res_v: usize,
    /// Side of the square touch footprint, in voxels.
    pub k_voxels: usize,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            contact_width_mm: 19.0,
            contact_height_mm: 14.0,
            res_u: 160,
            res_v: 120,
            k_voxels: 5,
        }
    }
}

impl SensorSpec {
    pub fn validate(&self) -> Result<(), TactileError> {
        if self.res_u < 3 || self.res_v < 3 {
            return Err(TactileError::InvalidSpec(format!(
                "resolution {}x{} too small",
                self.res_u, self.res_v
            )));
        }
        if !(self.contact_width_mm > 0.0 && self.contact_height_mm > 0.0) {
            return Err(TactileError::InvalidSpec("contact area must be positive".into()));
        }
        if self.k_voxels == 0 {
            return Err(TactileError::InvalidSpec("k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn pitch_u(&self) -> f64 {
        self.contact_width_mm / self.res_u as f64
    }

    pub fn pitch_v(&self) -> f64 {
        self.contact_height_mm / self.res_v as f64
    }

    /// Sensor-plane position (mm) of a pixel center, origin at the image corner.
    pub fn pixel_position(&self, row: usize, col: usize) -> (f64, f64) {
        ((col as f64 + 0.5) * self.pitch_u(), (row as f64 + 0.5) * self.pitch_v())
    }
}

/// RGB intensity image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl IntensityImage {
    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        self.data[row * self.width + col]
    }
}

/// Where a sensor sat when it captured a frame: plane center, in-plane axes
/// along image columns and rows, and the approach direction (into the
/// surface), all in world millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorPose {
    pub origin: Point3<f64>,
    pub u_axis: Vector3<f64>,
    pub v_axis: Vector3<f64>,
    pub approach: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct TactileFrame {
    pub intensity: IntensityImage,
    pub grad_x: DMatrix<f64>,
    pub grad_y: DMatrix<f64>,
    pub height: DMatrix<f64>,
    pub pose: Option<SensorPose>,
}

pub fn clamp_gradient(gx: f64, gy: f64) -> (f64, f64) {
    let m = gx.hypot(gy);
    if m > MAX_SLOPE {
        let s = MAX_SLOPE / m;
        (gx * s, gy * s)
    } else {
        (gx, gy)
    }
}

/// Fixed forward reflectance: three lights at 120° azimuth spacing and 45°
/// elevation, `channel = clamp(0.2 + 0.8 max(0, n·L))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReflectanceModel {
    lights: [Vector3<f64>; 3],
    ambient: f64,
    gain: f64,
}

impl Default for ReflectanceModel {
    fn default() -> Self {
        let elev = PI / 4.0;
        let light = |az_deg: f64| {
            let az = az_deg.to_radians();
            Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin())
        };
        Self {
            lights: [light(0.0), light(120.0), light(240.0)],
            ambient: 0.2,
            gain: 0.8,
        }
    }
}

impl ReflectanceModel {
    pub const ID: &'static str = "tri-light-45deg-v1";

    pub fn shade(&self, gx: f64, gy: f64) -> [f64; 3] {
        let (gx, gy) = clamp_gradient(gx, gy);
        let n = Vector3::new(-gx, -gy, 1.0).normalize();
        self.lights
            .map(|l| (self.ambient + self.gain * n.dot(&l).max(0.0)).clamp(0.0, 1.0))
    }

    /// Color of a flat, untouched pixel.
    pub fn flat_color(&self) -> [f64; 3] {
        self.shade(0.0, 0.0)
    }

    pub fn render_gradients(&self, gx: &DMatrix<f64>, gy: &DMatrix<f64>) -> IntensityImage {
        let (h, w) = gx.shape();
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(self.shade(gx[(r, c)], gy[(r, c)]));
            }
        }
        IntensityImage {
            width: w,
            height: h,
            data,
        }
    }
}

/// Central differences in the interior, one-sided at the border.
/// `x` runs along columns, `y` along rows.
pub fn central_gradients(f: &DMatrix<f64>, pitch_u: f64, pitch_v: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (h, w) = f.shape();
    let mut gx = DMatrix::zeros(h, w);
    let mut gy = DMatrix::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            gx[(r, c)] = if w < 2 {
                0.0
            } else if c == 0 {
                (f[(r, 1)] - f[(r, 0)]) / pitch_u
            } else if c == w - 1 {
                (f[(r, c)] - f[(r, c - 1)]) / pitch_u
            } else {
                (f[(r, c + 1)] - f[(r, c - 1)]) / (2.0 * pitch_u)
            };
            gy[(r, c)] = if h < 2 {
                0.0
            } else if r == 0 {
                (f[(1, c)] - f[(0, c)]) / pitch_v
            } else if r == h - 1 {
                (f[(r, c)] - f[(r - 1, c)]) / pitch_v
            } else {
                (f[(r + 1, c)] - f[(r - 1, c)]) / (2.0 * pitch_v)
            };
        }
    }
    (gx, gy)
}

/// `I = R(∂f/∂x, ∂f/∂y)` with gradients from central differences.
pub fn render_tactile(model: &ReflectanceModel, heights: &DMatrix<f64>, pitch_u: f64, pitch_v: f64) -> IntensityImage {
    let (gx, gy) = central_gradients(heights, pitch_u, pitch_v);
    model.render_gradients(&gx, &gy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LutEntry {
    pub bin: u32,
    pub grad_x: f64,
    pub grad_y: f64,
    pub count: u64,
}

/// Quantized intensity → mean gradient table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectanceLut {
    pub bins_per_channel: usize,
    pub forward_model_id: String,
    /// Occupied bins, ascending by bin index.
    pub entries: Vec<LutEntry>,
    /// For every bin, the position in `entries` of the nearest occupied bin.
    #[serde(skip)]
    resolved: Vec<u32>,
}

impl ReflectanceLut {
    pub fn from_entries(bins_per_channel: usize, forward_model_id: String, mut entries: Vec<LutEntry>) -> Self {
        entries.sort_by_key(|e| e.bin);
        let mut lut = Self {
            bins_per_channel,
            forward_model_id,
            entries,
            resolved: Vec::new(),
        };
        lut.resolve();
        lut
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn occupied_bins(&self) -> usize {
        self.entries.len()
    }

    pub fn bin_of(&self, rgb: [f64; 3]) -> u32 {
        let b = self.bins_per_channel;
        let q = rgb.map(|v| ((v.clamp(0.0, 1.0) * b as f64) as usize).min(b - 1));
        ((q[0] * b + q[1]) * b + q[2]) as u32
    }

    fn bin_coords(&self, bin: u32) -> [i64; 3] {
        let b = self.bins_per_channel as u32;
        [(bin / (b * b)) as i64, ((bin / b) % b) as i64, (bin % b) as i64]
    }

    /// Nearest occupied bin (L2 over the quantized triple, lowest index on
    /// ties) for every bin.
    fn resolve(&mut self) {
        let total = self.bins_per_channel.pow(3);
        if self.entries.is_empty() {
            self.resolved.clear();
            return;
        }
        let coords: Vec<[i64; 3]> = self.entries.iter().map(|e| self.bin_coords(e.bin)).collect();
        self.resolved = (0..total as u32)
            .map(|bin| {
                let c = self.bin_coords(bin);
                let mut best = (i64::MAX, 0u32);
                for (i, o) in coords.iter().enumerate() {
                    let d: i64 = (0..3).map(|a| (c[a] - o[a]).pow(2)).sum();
                    if d < best.0 {
                        best = (d, i as u32);
                        if d == 0 {
                            break;
                        }
                    }
                }
                best.1
            })
            .collect();
    }

    pub fn lookup(&self, rgb: [f64; 3]) -> Result<(f64, f64), TactileError> {
        if self.entries.is_empty() {
            return Err(TactileError::InsufficientCalibration);
        }
        if self.resolved.is_empty() {
            // Deserialized tables carry no resolution cache.
            let mut fresh = self.clone();
            fresh.resolve();
            return fresh.lookup(rgb);
        }
        let e = &self.entries[self.resolved[self.bin_of(rgb) as usize] as usize];
        Ok((e.grad_x, e.grad_y))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("lut serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let lut: ReflectanceLut = serde_json::from_str(s)?;
        Ok(Self::from_entries(lut.bins_per_channel, lut.forward_model_id, lut.entries))
    }
}

/// Height field of a ball of `radius` pressed `depth` into the gel, centered
/// at `(cx, cy)` mm on the sensor plane. Zero outside the contact disc.
pub fn sphere_cap_heights(spec: &SensorSpec, cx: f64, cy: f64, radius: f64, depth: f64) -> DMatrix<f64> {
    DMatrix::from_fn(spec.res_v, spec.res_u, |r, c| {
        let (x, y) = spec.pixel_position(r, c);
        let rho2 = (x - cx).powi(2) + (y - cy).powi(2);
        if rho2 >= radius * radius {
            return 0.0;
        }
        ((radius * radius - rho2).sqrt() - (radius - depth)).max(0.0)
    })
}

/// Analytic gradient of a sphere cap at a pixel, `None` outside the contact disc.
pub fn sphere_cap_gradient(spec: &SensorSpec, row: usize, col: usize, cx: f64, cy: f64, radius: f64, depth: f64) -> Option<(f64, f64)> {
    let (x, y) = spec.pixel_position(row, col);
    let contact2 = 2.0 * radius * depth - depth * depth;
    let rho2 = (x - cx).powi(2) + (y - cy).powi(2);
    if rho2 >= contact2 {
        return None;
    }
    let zs = (radius * radius - rho2).sqrt();
    Some((-(x - cx) / zs, -(y - cy) / zs))
}

/// Calibrates the lookup table from simulated ball presses.
///
/// Each press pairs pixel intensity with the analytic gradient. Pixels whose
/// difference stencil straddles the contact rim are skipped: their rendered
/// slope is a blend of two regimes and matches no single gradient.
pub fn calibrate_lut(
    spec: &SensorSpec,
    model: &ReflectanceModel,
    sphere_radius: f64,
    n_presses: usize,
    seed: u64,
) -> Result<ReflectanceLut, TactileError> {
    spec.validate()?;
    if n_presses == 0 {
        return Err(TactileError::InsufficientCalibration);
    }
    if sphere_radius <= spec.pitch_u().max(spec.pitch_v()) {
        return Err(TactileError::InvalidSpec(format!(
            "ball radius {sphere_radius} mm is below the pixel pitch"
        )));
    }
    let bins = DEFAULT_BINS;
    let mut acc = vec![(0.0f64, 0.0f64, 0u64); bins.pow(3)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let empty = ReflectanceLut::from_entries(bins, ReflectanceModel::ID.into(), Vec::new());
    let (w, h) = (spec.contact_width_mm, spec.contact_height_mm);
    for _ in 0..n_presses {
        let depth = rng.random_range(0.05..0.3) * sphere_radius;
        let contact = (2.0 * sphere_radius * depth - depth * depth).sqrt();
        let margin = (contact + 2.0 * spec.pitch_u().max(spec.pitch_v())).min(w.min(h) / 2.0);
        let cx = rng.random_range(margin..=(w - margin));
        let cy = rng.random_range(margin..=(h - margin));
        let f = sphere_cap_heights(spec, cx, cy, sphere_radius, depth);
        let image = render_tactile(model, &f, spec.pitch_u(), spec.pitch_v());
        let inside = |r: usize, c: usize| sphere_cap_gradient(spec, r, c, cx, cy, sphere_radius, depth);
        for r in 1..spec.res_v - 1 {
            for c in 1..spec.res_u - 1 {
                let stencil = [(r, c), (r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)];
                let n_in = stencil.iter().filter(|&&(a, b)| inside(a, b).is_some()).count();
                let g = match n_in {
                    5 => inside(r, c).expect("center is inside"),
                    0 => (0.0, 0.0),
                    _ => continue,
                };
                let g = clamp_gradient(g.0, g.1);
                let slot = &mut acc[empty.bin_of(image.get(r, c)) as usize];
                slot.0 += g.0;
                slot.1 += g.1;
                slot.2 += 1;
            }
        }
    }
    let entries = acc
        .iter()
        .enumerate()
        .filter(|(_, a)| a.2 > 0)
        .map(|(bin, a)| LutEntry {
            bin: bin as u32,
            grad_x: a.0 / a.2 as f64,
            grad_y: a.1 / a.2 as f64,
            count: a.2,
        })
        .collect();
    Ok(ReflectanceLut::from_entries(bins, ReflectanceModel::ID.into(), entries))
}

/// `(∂f/∂x, ∂f/∂y) = R⁻¹(I)` by table lookup.
pub fn invert_intensity(lut: &ReflectanceLut, image: &IntensityImage) -> Result<(DMatrix<f64>, DMatrix<f64>), TactileError> {
    if lut.is_empty() {
        return Err(TactileError::InsufficientCalibration);
    }
    let mut resolved = std::borrow::Cow::Borrowed(lut);
    if lut.resolved.is_empty() {
        resolved.to_mut().resolve();
    }
    let mut gx = DMatrix::zeros(image.height, image.width);
    let mut gy = DMatrix::zeros(image.height, image.width);
    for r in 0..image.height {
        for c in 0..image.width {
            let (a, b) = resolved.lookup(image.get(r, c))?;
            gx[(r, c)] = a;
            gy[(r, c)] = b;
        }
    }
    Ok((gx, gy))
}

/// Type-I DST matrix, `S[j][k] = sin(π (j+1)(k+1) / (n+1))`. `S·S = (n+1)/2 · I`.
fn dst1_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |j, k| (PI * ((j + 1) * (k + 1)) as f64 / (n + 1) as f64).sin())
}

/// Central-difference divergence of `(gx, gy)` on interior cells; the
/// border ring is zero.
pub fn divergence(gx: &DMatrix<f64>, gy: &DMatrix<f64>, pitch_u: f64, pitch_v: f64) -> DMatrix<f64> {
    let (h, w) = gx.shape();
    let mut d = DMatrix::zeros(h, w);
    for r in 1..h.saturating_sub(1) {
        for c in 1..w.saturating_sub(1) {
            d[(r, c)] = (gx[(r, c + 1)] - gx[(r, c - 1)]) / (2.0 * pitch_u)
                + (gy[(r + 1, c)] - gy[(r - 1, c)]) / (2.0 * pitch_v);
        }
    }
    d
}

/// Five-point Laplacian on interior cells (border treated as given values).
pub fn laplacian(f: &DMatrix<f64>, pitch_u: f64, pitch_v: f64) -> DMatrix<f64> {
    let (h, w) = f.shape();
    let mut l = DMatrix::zeros(h, w);
    for r in 1..h.saturating_sub(1) {
        for c in 1..w.saturating_sub(1) {
            l[(r, c)] = (f[(r, c + 1)] - 2.0 * f[(r, c)] + f[(r, c - 1)]) / (pitch_u * pitch_u)
                + (f[(r + 1, c)] - 2.0 * f[(r, c)] + f[(r - 1, c)]) / (pitch_v * pitch_v);
        }
    }
    l
}

/// Solves `∇²f = div(g)` with `f = 0` on the border ring by diagonalizing
/// the five-point Laplacian with type-I sine transforms.
pub fn integrate_heights(gx: &DMatrix<f64>, gy: &DMatrix<f64>, pitch_u: f64, pitch_v: f64) -> DMatrix<f64> {
    let (h, w) = gx.shape();
    assert_eq!(gy.shape(), (h, w), "gradient fields must share a shape");
    let mut f = DMatrix::zeros(h, w);
    if h < 3 || w < 3 {
        return f;
    }
    let (a, b) = (h - 2, w - 2);
    let div = divergence(gx, gy, pitch_u, pitch_v);
    let rhs = div.view((1, 1), (a, b)).into_owned();
    let sa = dst1_matrix(a);
    let sb = dst1_matrix(b);
    let mut spec = &sa * rhs * &sb;
    let eig = |k: usize, n: usize, pitch: f64| {
        -4.0 * (PI * (k + 1) as f64 / (2.0 * (n + 1) as f64)).sin().powi(2) / (pitch * pitch)
    };
    let row_eig: Vec<f64> = (0..a).map(|p| eig(p, a, pitch_v)).collect();
    let col_eig: Vec<f64> = (0..b).map(|q| eig(q, b, pitch_u)).collect();
    for q in 0..b {
        for p in 0..a {
            spec[(p, q)] /= row_eig[p] + col_eig[q];
        }
    }
    let norm = 4.0 / ((a + 1) as f64 * (b + 1) as f64);
    let interior = (&sa * spec * &sb) * norm;
    f.view_mut((1, 1), (a, b)).copy_from(&interior);
    f
}

/// Render → invert → integrate, the full simulated sensing path.
#[derive(Debug, Clone)]
pub struct TactileSensor {
    pub spec: SensorSpec,
    pub model: ReflectanceModel,
    pub lut: ReflectanceLut,
}

impl TactileSensor {
    pub fn calibrated(spec: SensorSpec, sphere_radius: f64, n_presses: usize, seed: u64) -> Result<Self, TactileError> {
        let model = ReflectanceModel::default();
        let lut = calibrate_lut(&spec, &model, sphere_radius, n_presses, seed)?;
        Ok(Self { spec, model, lut })
    }

    /// Senses a true height field (gel indentation, mm) and reconstructs it.
    pub fn sense(&self, true_heights: &DMatrix<f64>, pose: Option<SensorPose>) -> Result<TactileFrame, TactileError> {
        let want = (self.spec.res_v, self.spec.res_u);
        if true_heights.shape() != want {
            return Err(TactileError::ShapeMismatch {
                got: true_heights.shape(),
                want,
            });
        }
        let (pu, pv) = (self.spec.pitch_u(), self.spec.pitch_v());
        let intensity = render_tactile(&self.model, true_heights, pu, pv);
        let (grad_x, grad_y) = invert_intensity(&self.lut, &intensity)?;
        let height = integrate_heights(&grad_x, &grad_y, pu, pv);
        Ok(TactileFrame {
            intensity,
            grad_x,
            grad_y,
            height,
            pose,
        })
    }
}

/// Writes heights as a 16-bit binary PGM. A `# scale <mm per count>` header
/// comment records the quantization; negative heights clamp to zero.
pub fn write_height_pgm(heights: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<f64, TactileError> {
    let max = heights.iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { max / 65535.0 } else { 1.0 };
    let (h, w) = heights.shape();
    let mut out = format!("P5\n# scale {scale:e}\n{w} {h}\n65535\n").into_bytes();
    for r in 0..h {
        for c in 0..w {
            let q = (heights[(r, c)].max(0.0) / scale).round().min(65535.0) as u16;
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(scale)
}

pub fn read_height_pgm(path: impl AsRef<Path>) -> Result<DMatrix<f64>, TactileError> {
    let bytes = fs::read(path)?;
    let mut reader = BufReader::new(&bytes[..]);
    let mut scale = None;
    let mut fields: Vec<String> = Vec::new();
    let mut consumed = 0usize;
    while fields.len() < 4 {
        let mut line = String::new();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            return Err(TactileError::BadImage("truncated header".into()));
        }
        consumed += n;
        let line = line.trim();
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("scale") {
                scale = v.trim().parse::<f64>().ok();
            }
            continue;
        }
        fields.extend(line.split_whitespace().map(String::from));
    }
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(TactileError::BadImage("expected 16-bit P5".into()));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| TactileError::BadImage(format!("bad size {s}")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let scale = scale.ok_or_else(|| TactileError::BadImage("missing scale comment".into()))?;
    let data = &bytes[consumed..];
    if data.len() < w * h * 2 {
        return Err(TactileError::BadImage("truncated pixel data".into()));
    }
    Ok(DMatrix::from_fn(h, w, |r, c| {
        let i = 2 * (r * w + c);
        u16::from_be_bytes([data[i], data[i + 1]]) as f64 * scale
    }))
}

/// Writes an 8-bit binary PPM.
pub fn write_intensity_ppm(image: &IntensityImage, path: impl AsRef<Path>) -> Result<(), TactileError> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    for px in &image.data {
        out.extend(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SensorSpec {
        SensorSpec::default()
    }

    fn rms(m: &DMatrix<f64>) -> f64 {
        (m.iter().map(|v| v * v).sum::<f64>() / m.len() as f64).sqrt()
    }

    #[test]
    fn flat_patch_renders_flat_color() {
        let model = ReflectanceModel::default();
        let img = render_tactile(&model, &DMatrix::zeros(12, 16), 0.1, 0.1);
        let flat = model.flat_color();
        assert!(img.data.iter().all(|&p| p == flat));
        // 0.2 + 0.8 sin 45° per channel.
        for ch in flat {
            assert!((ch - (0.2 + 0.8 * (PI / 4.0).sin())).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_offset_does_not_change_image() {
        let model = ReflectanceModel::default();
        let s = spec();
        let f = sphere_cap_heights(&s, 9.5, 7.0, 4.0, 0.8);
        let g = f.add_scalar(1.25);
        assert_eq!(
            render_tactile(&model, &f, s.pitch_u(), s.pitch_v()),
            render_tactile(&model, &g, s.pitch_u(), s.pitch_v())
        );
    }

    #[test]
    fn hemisphere_shading_is_radially_symmetric() {
        let model = ReflectanceModel::default();
        let s = SensorSpec {
            contact_width_mm: 10.0,
            contact_height_mm: 10.0,
            res_u: 101,
            res_v: 101,
            k_voxels: 1,
        };
        let c = 5.0;
        let f = sphere_cap_heights(&s, c, c, 3.0, 1.0);
        let img = render_tactile(&model, &f, s.pitch_u(), s.pitch_v());
        assert_eq!(img.get(50, 50), model.flat_color());
        // Shading at mirrored offsets equals the model evaluated at the
        // analytic central-difference gradients, which are mirror images.
        let (gx, gy) = central_gradients(&f, s.pitch_u(), s.pitch_v());
        for (r, col) in [(50, 60), (40, 50), (55, 45)] {
            assert_eq!(img.get(r, col), model.shade(gx[(r, col)], gy[(r, col)]));
            let (mr, mc) = (100 - r, 100 - col);
            assert!((gx[(r, col)] + gx[(mr, mc)]).abs() < 1e-12);
            assert!((gy[(r, col)] + gy[(mr, mc)]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_presses_is_insufficient() {
        let r = calibrate_lut(&spec(), &ReflectanceModel::default(), 4.0, 0, 1);
        assert!(matches!(r, Err(TactileError::InsufficientCalibration)));
        let empty = ReflectanceLut::from_entries(32, "x".into(), vec![]);
        let img = IntensityImage {
            width: 1,
            height: 1,
            data: vec![[0.5; 3]],
        };
        assert!(matches!(
            invert_intensity(&empty, &img),
            Err(TactileError::InsufficientCalibration)
        ));
    }

    #[test]
    fn calibration_is_deterministic() {
        let m = ReflectanceModel::default();
        let a = calibrate_lut(&spec(), &m, 4.0, 5, 42).unwrap();
        let b = calibrate_lut(&spec(), &m, 4.0, 5, 42).unwrap();
        assert_eq!(a, b);
        let a_bits: Vec<u64> = a.entries.iter().map(|e| e.grad_x.to_bits()).collect();
        let b_bits: Vec<u64> = b.entries.iter().map(|e| e.grad_x.to_bits()).collect();
        assert_eq!(a_bits, b_bits);
    }

    #[test]
    fn bin_center_lookup_returns_bin_mean() {
        let lut = ReflectanceLut::from_entries(
            4,
            "t".into(),
            vec![
                LutEntry { bin: 0, grad_x: 0.3, grad_y: -0.1, count: 2 },
                LutEntry { bin: 63, grad_x: -1.0, grad_y: 1.0, count: 1 },
            ],
        );
        assert_eq!(lut.lookup([0.1, 0.1, 0.1]).unwrap(), (0.3, -0.1));
        assert_eq!(lut.lookup([0.9, 0.9, 0.9]).unwrap(), (-1.0, 1.0));
        // Empty bin (1,0,0) is nearer bin 0.
        assert_eq!(lut.lookup([0.3, 0.1, 0.1]).unwrap(), (0.3, -0.1));
    }

    #[test]
    fn lut_json_round_trip() {
        let m = ReflectanceModel::default();
        let lut = calibrate_lut(&spec(), &m, 4.0, 3, 9).unwrap();
        let back = ReflectanceLut::from_json(&lut.to_json()).unwrap();
        assert_eq!(lut, back);
    }

    #[test]
    fn zero_gradients_integrate_to_zero() {
        let z = DMatrix::zeros(20, 30);
        let f = integrate_heights(&z, &z, 0.1, 0.1);
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dome_eigenfunction_integrates() {
        let (h, w) = (120usize, 160usize);
        let (pu, pv) = (0.11875, 0.11666);
        let lx = (w - 1) as f64 * pu;
        let ly = (h - 1) as f64 * pv;
        let truth = DMatrix::from_fn(h, w, |r, c| {
            (PI * c as f64 * pu / lx).sin() * (PI * r as f64 * pv / ly).sin()
        });
        let gx = DMatrix::from_fn(h, w, |r, c| {
            PI / lx * (PI * c as f64 * pu / lx).cos() * (PI * r as f64 * pv / ly).sin()
        });
        let gy = DMatrix::from_fn(h, w, |r, c| {
            PI / ly * (PI * c as f64 * pu / lx).sin() * (PI * r as f64 * pv / ly).cos()
        });
        let f = integrate_heights(&gx, &gy, pu, pv);
        let err = rms(&(&f - &truth));
        assert!(err <= 0.01, "rmse {err}");
        for c in 0..w {
            assert_eq!(f[(0, c)], 0.0);
            assert_eq!(f[(h - 1, c)], 0.0);
        }
    }

    #[test]
    fn solver_residual_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (24, 31);
        let gx = DMatrix::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0));
        let gy = DMatrix::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0));
        let (pu, pv) = (0.2, 0.15);
        let f = integrate_heights(&gx, &gy, pu, pv);
        let div = divergence(&gx, &gy, pu, pv);
        let lap = laplacian(&f, pu, pv);
        let resid = (&lap - &div).view((1, 1), (h - 2, w - 2)).into_owned();
        assert!(rms(&resid) <= 1e-8 * rms(&div), "{}", rms(&resid));

        let f3 = integrate_heights(&(&gx * 3.0), &(&gy * 3.0), pu, pv);
        let scale = f.amax();
        assert!((&f3 - &f * 3.0).amax() <= 1e-9 * 3.0 * scale);
    }

    #[test]
    fn sphere_cap_integrates_to_dome() {
        let s = spec();
        let (cx, cy, radius, depth) = (9.5, 7.0, 4.0, 0.6);
        let grads: Vec<(f64, f64)> = (0..s.res_v * s.res_u)
            .map(|i| {
                sphere_cap_gradient(&s, i / s.res_u, i % s.res_u, cx, cy, radius, depth).unwrap_or((0.0, 0.0))
            })
            .collect();
        let gx = DMatrix::from_fn(s.res_v, s.res_u, |r, c| grads[r * s.res_u + c].0);
        let gy = DMatrix::from_fn(s.res_v, s.res_u, |r, c| grads[r * s.res_u + c].1);
        let f = integrate_heights(&gx, &gy, s.pitch_u(), s.pitch_v());
        let peak = f.max();
        assert!((peak - depth).abs() <= 0.05 * depth, "peak {peak}");
        // Monotone along the row through the center.
        let row = (cy / s.pitch_v()) as usize;
        let col = (cx / s.pitch_u()) as usize;
        // Monotone inside the contact disc; outside, only the small ringing
        // left by the gradient jump at the rim.
        let inside = |c: usize| sphere_cap_gradient(&s, row, c, cx, cy, radius, depth).is_some();
        for c in 1..=col {
            if inside(c - 1) {
                assert!(f[(row, c)] >= f[(row, c - 1)] - 1e-9, "c={c}");
            }
        }
        for c in col + 1..s.res_u {
            if inside(c) {
                assert!(f[(row, c)] <= f[(row, c - 1)] + 1e-9, "c={c}");
            }
        }
        for c in 0..s.res_u {
            if !inside(c) {
                assert!(f[(row, c)].abs() <= 0.02 * depth, "c={c} {}", f[(row, c)]);
            }
        }
    }

    #[test]
    fn pgm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let f = sphere_cap_heights(&s, 9.0, 7.0, 4.0, 0.5);
        let path = dir.path().join("h.pgm");
        let scale = write_height_pgm(&f, &path).unwrap();
        let back = read_height_pgm(&path).unwrap();
        assert!((&back - &f).amax() <= scale);
        write_intensity_ppm(&render_tactile(&ReflectanceModel::default(), &f, 0.1, 0.1), dir.path().join("i.ppm")).unwrap();
    }
}
