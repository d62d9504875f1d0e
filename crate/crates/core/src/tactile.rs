//! Synthetic vision-based tactile sensor.
//!
//! The gel pad observes the gripped peg, so the informative signal is the
//! shear displacement of the peg's imprint under contact force — enough for
//! a policy to feel which side of the hole edge it is pressing on. The
//! imprint model is deliberately simple and is this module's own design
//! (no attempt at photorealistic gel optics):
//!
//! 1. `contact_heightmap` stamps an elliptical indentation band whose
//!    centre shifts with the lateral force components and whose depth and
//!    width grow with force magnitude;
//! 2. `smooth` applies a Gaussian low-pass (gel elasticity);
//! 3. `shade` converts surface gradients to RGB through a calibrated
//!    degree-2 polynomial per channel — the polynomial has no constant
//!    term, so a flat gel renders the background colour *exactly*.
//!
//! Calibration fits the polynomial to Lambertian shading of a probe
//! sphere under a configurable set of coloured directional lights, the
//! same scheme real sensors use with a reference ball.

use crate::rng::StreamRng;
use crate::sim::Vec3;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

/// Side length of the square tactile image, pixels.
pub const FRAME_SIZE: usize = 64;
/// Values per frame (height × width × RGB).
pub const FRAME_LEN: usize = FRAME_SIZE * FRAME_SIZE * 3;

/// Gel and imprint parameters. Pixel-valued gains act on forces in Newtons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GelParams {
    /// Metres of gel surface per pixel.
    pub pixel_pitch: f64,
    /// Imprint half-width at zero force, px.
    pub band_half_width: f64,
    /// Imprint half-length (vertical extent), px.
    pub band_half_length: f64,
    /// Half-width growth per Newton of force magnitude, px/N.
    pub area_gain: f64,
    /// Imprint centre shift per Newton of lateral force, px/N.
    pub shear_gain: f64,
    /// Indentation depth at zero force, m. Zero by default, so an
    /// uncontacted gel renders the background exactly; set it positive to
    /// model a resting grip imprint.
    pub base_depth: f64,
    /// Depth growth per Newton of force magnitude, m/N.
    pub normal_gain: f64,
    /// Maximum indentation (gel thickness), m.
    pub gel_thickness: f64,
    /// Gaussian smoothing radius, px.
    pub smooth_sigma: f64,
    /// Std-dev of optional additive pixel noise (applied by the
    /// environment after shading, before 8-bit quantisation).
    pub noise_sigma: f64,
    /// Elevation of the calibration lights above the gel plane, degrees.
    pub light_elevation_deg: f64,
    /// Intensity of each calibration light.
    pub light_intensity: f64,
}

impl Default for GelParams {
    fn default() -> Self {
        Self {
            pixel_pitch: 1e-4,
            band_half_width: 5.0,
            band_half_length: 11.0,
            area_gain: 1.5,
            shear_gain: 6.0,
            base_depth: 0.0,
            normal_gain: 1e-4,
            gel_thickness: 2e-3,
            smooth_sigma: 1.0,
            noise_sigma: 0.01,
            light_elevation_deg: 45.0,
            light_intensity: 0.8,
        }
    }
}

/// 64×64 grid of indentation depths in metres (row-major, row = image y).
#[derive(Debug, Clone, PartialEq)]
pub struct HeightMap {
    data: Vec<f64>,
}

impl HeightMap {
    pub fn zeros() -> Self {
        Self {
            data: vec![0.0; FRAME_SIZE * FRAME_SIZE],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * FRAME_SIZE + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * FRAME_SIZE + col] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn total_mass(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// 64×64 RGB image, row-major HWC layout, values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TactileFrame {
    data: Vec<f64>,
}

impl TactileFrame {
    pub fn from_values(data: Vec<f64>) -> Self {
        assert_eq!(data.len(), FRAME_LEN, "tactile frame must hold {FRAME_LEN} values");
        Self { data }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * FRAME_SIZE + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Quantises to 8-bit RGB (the storage and replay representation).
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Reconstructs the frame an agent sees from stored 8-bit data.
    pub fn from_rgb8(bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), FRAME_LEN, "tactile frame must hold {FRAME_LEN} bytes");
        Self {
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    /// Binary PPM (P6) encoding: `P6\n64 64\n255\n` + 12288 RGB bytes.
    pub fn write_ppm<W: Write>(&self, w: &mut W) -> io::Result<()> {
        write!(w, "P6\n{FRAME_SIZE} {FRAME_SIZE}\n255\n")?;
        w.write_all(&self.to_rgb8())
    }

    pub fn ppm_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_LEN + 16);
        self.write_ppm(&mut out).expect("in-memory write cannot fail");
        out
    }
}

/// Directional light: unit direction from the surface toward the light,
/// plus RGB intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub dir: [f64; 3],
    pub rgb: [f64; 3],
}

impl Light {
    pub fn from_angles(azimuth_deg: f64, elevation_deg: f64, rgb: [f64; 3]) -> Self {
        let az = azimuth_deg.to_radians();
        let el = elevation_deg.to_radians();
        Self {
            dir: [az.cos() * el.cos(), az.sin() * el.cos(), el.sin()],
            rgb,
        }
    }
}

/// Standard rig: red, green and blue lights at 120° azimuth spacing.
pub fn default_lights(elevation_deg: f64, intensity: f64) -> Vec<Light> {
    [
        (0.0, [intensity, 0.0, 0.0]),
        (120.0, [0.0, intensity, 0.0]),
        (240.0, [0.0, 0.0, intensity]),
    ]
    .into_iter()
    .map(|(az, rgb)| Light::from_angles(az, elevation_deg, rgb))
    .collect()
}

/// Calibrated gradient→colour map: per channel, a degree-2 polynomial over
/// the surface gradient with **no constant term** (terms `gx, gy, gx²,
/// gx·gy, gy²`), plus the flat-surface background colour. Evaluating at
/// zero gradient therefore returns the background exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadingLut {
    pub coeffs: [[f64; 5]; 3],
    pub background: [f64; 3],
    pub residual_rms: f64,
}

impl ShadingLut {
    /// Colour response at surface gradient `(gx, gy)`, clipped to `[0,1]`.
    pub fn eval(&self, gx: f64, gy: f64) -> [f64; 3] {
        let terms = [gx, gy, gx * gx, gx * gy, gy * gy];
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let mut v = self.background[ch];
            for (c, t) in self.coeffs[ch].iter().zip(&terms) {
                v += c * t;
            }
            *o = v.clamp(0.0, 1.0);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("LUT serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("shading calibration is singular (degenerate light configuration)")]
    SingularFit,
}

/// Lambertian response of a surface with gradient `(gx, gy)` under `lights`.
fn lambertian(gx: f64, gy: f64, lights: &[Light]) -> [f64; 3] {
    let inv_n = 1.0 / (1.0 + gx * gx + gy * gy).sqrt();
    let n = [-gx * inv_n, -gy * inv_n, inv_n];
    let mut out = [0.0; 3];
    for l in lights {
        let cos = (n[0] * l.dir[0] + n[1] * l.dir[1] + n[2] * l.dir[2]).max(0.0);
        for ch in 0..3 {
            out[ch] += cos * l.rgb[ch];
        }
    }
    out
}

/// Fits the per-channel shading polynomial to Lambertian shading of a probe
/// sphere's gradient field by least squares over a dense gradient grid.
/// The fitted quantity is the *difference* from the flat response, so the
/// zero-gradient colour is the background by construction.
pub fn calibrate_shading(lights: &[Light]) -> Result<ShadingLut, CalibrationError> {
    const GRID: i32 = 20;
    const G_MAX: f64 = 1.5;
    let background = lambertian(0.0, 0.0, lights);

    // Normal equations AᵀA x = Aᵀb per channel, 5 unknowns.
    let mut ata = [[0.0f64; 5]; 5];
    let mut atb = [[0.0f64; 5]; 3];
    let mut n_samples = 0usize;
    for ix in -GRID..=GRID {
        for iy in -GRID..=GRID {
            let gx = ix as f64 / GRID as f64 * G_MAX;
            let gy = iy as f64 / GRID as f64 * G_MAX;
            if gx * gx + gy * gy > G_MAX * G_MAX {
                continue; // probe sphere exposes a disk of gradients
            }
            let row = [gx, gy, gx * gx, gx * gy, gy * gy];
            let shade = lambertian(gx, gy, lights);
            for i in 0..5 {
                for j in 0..5 {
                    ata[i][j] += row[i] * row[j];
                }
                for ch in 0..3 {
                    atb[ch][i] += row[i] * (shade[ch] - background[ch]);
                }
            }
            n_samples += 1;
        }
    }

    let mut coeffs = [[0.0; 5]; 3];
    for ch in 0..3 {
        coeffs[ch] = solve5(ata, atb[ch]).ok_or(CalibrationError::SingularFit)?;
    }

    // Residual RMS of the fit over the same grid, all channels pooled.
    let lut = ShadingLut {
        coeffs,
        background,
        residual_rms: 0.0,
    };
    let mut sq = 0.0;
    for ix in -GRID..=GRID {
        for iy in -GRID..=GRID {
            let gx = ix as f64 / GRID as f64 * G_MAX;
            let gy = iy as f64 / GRID as f64 * G_MAX;
            if gx * gx + gy * gy > G_MAX * G_MAX {
                continue;
            }
            let truth = lambertian(gx, gy, lights);
            let terms = [gx, gy, gx * gx, gx * gy, gy * gy];
            for ch in 0..3 {
                let mut fit = background[ch];
                for (c, t) in coeffs[ch].iter().zip(&terms) {
                    fit += c * t;
                }
                sq += (fit - truth[ch]) * (fit - truth[ch]);
            }
        }
    }
    Ok(ShadingLut {
        residual_rms: (sq / (3 * n_samples) as f64).sqrt(),
        ..lut
    })
}

/// Gaussian elimination with partial pivoting for the 5×5 normal equations.
fn solve5(mut a: [[f64; 5]; 5], mut b: [f64; 5]) -> Option<[f64; 5]> {
    for col in 0..5 {
        let pivot = (col..5).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).expect("finite")
        })?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..5 {
            let f = a[row][col] / a[col][col];
            for k in col..5 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 5];
    for col in (0..5).rev() {
        let mut v = b[col];
        for k in col + 1..5 {
            v -= a[col][k] * x[k];
        }
        x[col] = v / a[col][col];
    }
    Some(x)
}

/// Stamps the peg imprint for a given contact force: an elliptical dome of
/// depth `base_depth + normal_gain·‖f‖` (clipped to the gel thickness),
/// half-width `band_half_width + area_gain·‖f‖`, centred at the image
/// centre shifted by `shear_gain·(f_x, f_z)` pixels. Pixel-centre
/// coordinates put zero force exactly on the 31.5 px centreline, so
/// opposite lateral forces produce exactly mirrored imprints.
pub fn contact_heightmap(force: Vec3, p: &GelParams) -> HeightMap {
    let mag = (force[0] * force[0] + force[1] * force[1] + force[2] * force[2]).sqrt();
    let depth = (p.base_depth + p.normal_gain * mag).min(p.gel_thickness);
    let half_w = p.band_half_width + p.area_gain * mag;
    let half_l = p.band_half_length;
    let centre = (FRAME_SIZE as f64 - 1.0) / 2.0;
    let cu = centre + p.shear_gain * force[0];
    let cv = centre + p.shear_gain * force[2];
    let mut h = HeightMap::zeros();
    for row in 0..FRAME_SIZE {
        for col in 0..FRAME_SIZE {
            let du = (col as f64 - cu) / half_w;
            let dv = (row as f64 - cv) / half_l;
            let dome = 1.0 - du * du - dv * dv;
            if dome > 0.0 {
                h.set(row, col, depth * dome);
            }
        }
    }
    h
}

/// Gaussian blur with reflective boundary; `sigma = 0` is the identity.
/// Separable symmetric kernel of radius `ceil(3σ)` — reflection makes every
/// input pixel's outgoing weight sum to one, so total mass is preserved.
pub fn smooth(h: &HeightMap, sigma: f64) -> HeightMap {
    assert!(sigma >= 0.0, "smoothing sigma must be nonnegative");
    if sigma == 0.0 {
        return h.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    assert!(
        (radius as usize) < FRAME_SIZE,
        "smoothing radius {radius} too large for {FRAME_SIZE}px frame"
    );
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for k in -radius..=radius {
        kernel.push((-(k * k) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for w in kernel.iter_mut() {
        *w /= total;
    }

    let n = FRAME_SIZE as i64;
    let reflect = |x: i64| -> usize {
        let m = if x < 0 {
            -x - 1
        } else if x >= n {
            2 * n - 1 - x
        } else {
            x
        };
        m as usize
    };

    // Horizontal pass then vertical pass.
    let mut mid = HeightMap::zeros();
    for row in 0..FRAME_SIZE {
        for col in 0..FRAME_SIZE {
            let mut acc = 0.0;
            for (i, w) in kernel.iter().enumerate() {
                let src = reflect(col as i64 + i as i64 - radius);
                acc += w * h.get(row, src);
            }
            mid.set(row, col, acc);
        }
    }
    let mut out = HeightMap::zeros();
    for row in 0..FRAME_SIZE {
        for col in 0..FRAME_SIZE {
            let mut acc = 0.0;
            for (i, w) in kernel.iter().enumerate() {
                let src = reflect(row as i64 + i as i64 - radius);
                acc += w * mid.get(src, col);
            }
            out.set(row, col, acc);
        }
    }
    out
}

/// Central-difference surface gradients (dimensionless slope) with
/// reflective boundary, scaled by the pixel pitch.
pub fn gradients(h: &HeightMap, pixel_pitch: f64) -> (Vec<f64>, Vec<f64>) {
    let n = FRAME_SIZE as i64;
    let reflect = |x: i64| -> usize {
        (if x < 0 {
            -x - 1
        } else if x >= n {
            2 * n - 1 - x
        } else {
            x
        }) as usize
    };
    let scale = 1.0 / (2.0 * pixel_pitch);
    let mut gx = vec![0.0; FRAME_SIZE * FRAME_SIZE];
    let mut gy = vec![0.0; FRAME_SIZE * FRAME_SIZE];
    for row in 0..FRAME_SIZE {
        for col in 0..FRAME_SIZE {
            let r = row as i64;
            let c = col as i64;
            gx[row * FRAME_SIZE + col] =
                (h.get(row, reflect(c + 1)) - h.get(row, reflect(c - 1))) * scale;
            gy[row * FRAME_SIZE + col] =
                (h.get(reflect(r + 1), col) - h.get(reflect(r - 1), col)) * scale;
        }
    }
    (gx, gy)
}

/// Shades a (pre-smoothed) heightmap into an RGB frame through the LUT.
pub fn shade(h: &HeightMap, lut: &ShadingLut, pixel_pitch: f64) -> TactileFrame {
    let (gx, gy) = gradients(h, pixel_pitch);
    let mut data = vec![0.0; FRAME_LEN];
    for i in 0..FRAME_SIZE * FRAME_SIZE {
        let rgb = lut.eval(gx[i], gy[i]);
        data[i * 3] = rgb[0];
        data[i * 3 + 1] = rgb[1];
        data[i * 3 + 2] = rgb[2];
    }
    TactileFrame { data }
}

/// Additive Gaussian pixel noise (applied by the environment), clipped back
/// to `[0,1]`.
pub fn apply_pixel_noise(frame: &mut TactileFrame, sigma: f64, rng: &mut StreamRng) {
    if sigma == 0.0 {
        return;
    }
    for v in frame.data.iter_mut() {
        *v = (*v + sigma * rng.normal()).clamp(0.0, 1.0);
    }
}

/// Fully configured renderer: parameters plus a calibrated LUT.
#[derive(Debug, Clone)]
pub struct GelRenderer {
    pub params: GelParams,
    pub lut: ShadingLut,
}

impl GelRenderer {
    pub fn new(params: GelParams) -> Result<Self, CalibrationError> {
        let lights = default_lights(params.light_elevation_deg, params.light_intensity);
        let lut = calibrate_shading(&lights)?;
        Ok(Self { params, lut })
    }

    /// Pure render: contact force → tactile frame (no noise).
    pub fn render(&self, force: Vec3) -> TactileFrame {
        let h = contact_heightmap(force, &self.params);
        let hs = smooth(&h, self.params.smooth_sigma);
        shade(&hs, &self.lut, self.params.pixel_pitch)
    }
}

/// Intensity-weighted centroid of a frame's deviation from the background,
/// in (col, row) pixels. Used to measure imprint registration.
pub fn deviation_centroid(frame: &TactileFrame, background: [f64; 3]) -> (f64, f64) {
    let mut mass = 0.0;
    let mut cu = 0.0;
    let mut cv = 0.0;
    for row in 0..FRAME_SIZE {
        for col in 0..FRAME_SIZE {
            let px = frame.pixel(row, col);
            let dev: f64 = (0..3).map(|c| (px[c] - background[c]).abs()).sum();
            mass += dev;
            cu += dev * col as f64;
            cv += dev * row as f64;
        }
    }
    if mass == 0.0 {
        let c = (FRAME_SIZE as f64 - 1.0) / 2.0;
        (c, c)
    } else {
        (cu / mass, cv / mass)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn renderer() -> GelRenderer {
        GelRenderer::new(GelParams::default()).expect("default lights calibrate")
    }

    #[test]
    fn zero_force_leaves_no_imprint_by_default() {
        let h = contact_heightmap([0.0; 3], &GelParams::default());
        assert_eq!(h.total_mass(), 0.0, "no contact, no deformation");
    }

    #[test]
    fn resting_imprint_is_centred_and_symmetric() {
        // With a positive resting depth the zero-force band reappears.
        let p = GelParams { base_depth: 3e-4, ..GelParams::default() };
        let h = contact_heightmap([0.0; 3], &p);
        for row in 0..FRAME_SIZE {
            for col in 0..FRAME_SIZE {
                assert_eq!(
                    h.get(row, col),
                    h.get(row, FRAME_SIZE - 1 - col),
                    "row {row} col {col}"
                );
                assert_eq!(h.get(row, col), h.get(FRAME_SIZE - 1 - row, col));
                assert!(h.get(row, col) >= 0.0);
            }
        }
        assert!(h.total_mass() > 0.0, "resting grip leaves an imprint");
    }

    #[test]
    fn depth_is_clipped_to_gel_thickness() {
        let p = GelParams::default();
        let h = contact_heightmap([0.0, 0.0, -1e6], &p);
        let max = h.data().iter().cloned().fold(0.0, f64::max);
        assert!(max <= p.gel_thickness + 1e-15);
    }

    #[test]
    fn lateral_force_shifts_the_imprint_centroid() {
        let p = GelParams::default();
        let f = 1.0;
        let h = smooth(&contact_heightmap([f, 0.0, 0.0], &p), p.smooth_sigma);
        let mut mass = 0.0;
        let mut cu = 0.0;
        for row in 0..FRAME_SIZE {
            for col in 0..FRAME_SIZE {
                mass += h.get(row, col);
                cu += h.get(row, col) * col as f64;
            }
        }
        let centroid = cu / mass;
        let expected = (FRAME_SIZE as f64 - 1.0) / 2.0 + p.shear_gain * f;
        assert!(
            (centroid - expected).abs() < 0.1,
            "centroid {centroid} vs expected {expected}"
        );
    }

    #[test]
    fn opposite_lateral_forces_mirror_the_heightmap() {
        let p = GelParams::default();
        // Exact mirror when the pixel shift is binary-representable
        // (0.5 N · 6 px/N = 3 px)...
        let hp = contact_heightmap([0.5, 0.0, 0.0], &p);
        let hm = contact_heightmap([-0.5, 0.0, 0.0], &p);
        for row in 0..FRAME_SIZE {
            for col in 0..FRAME_SIZE {
                assert_eq!(hp.get(row, col), hm.get(row, FRAME_SIZE - 1 - col));
            }
        }
        // ...and to rounding error for arbitrary forces.
        let hp = contact_heightmap([0.7, 0.0, 0.0], &p);
        let hm = contact_heightmap([-0.7, 0.0, 0.0], &p);
        for row in 0..FRAME_SIZE {
            for col in 0..FRAME_SIZE {
                assert_relative_eq!(
                    hp.get(row, col),
                    hm.get(row, FRAME_SIZE - 1 - col),
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn contact_area_grows_with_force() {
        let p = GelParams::default();
        let area = |f: f64| {
            contact_heightmap([0.0, 0.0, -f], &p)
                .data()
                .iter()
                .filter(|&&v| v > 0.0)
                .count()
        };
        let a0 = area(0.0);
        let a1 = area(1.0);
        let a2 = area(2.0);
        assert!(a0 <= a1 && a1 <= a2, "{a0} {a1} {a2}");
        assert!(a2 > a0, "area must strictly grow over a 2 N sweep");
    }

    #[test]
    fn smoothing_with_zero_sigma_is_identity() {
        let h = contact_heightmap([0.3, 0.0, -0.5], &GelParams::default());
        assert_eq!(smooth(&h, 0.0), h);
    }

    #[test]
    fn smoothing_preserves_constant_maps() {
        let mut h = HeightMap::zeros();
        for row in 0..FRAME_SIZE {
            for col in 0..FRAME_SIZE {
                h.set(row, col, 0.125);
            }
        }
        let s = smooth(&h, 2.0);
        for (a, b) in s.data().iter().zip(h.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn smoothing_preserves_total_mass() {
        let h = contact_heightmap([1.2, 0.0, -0.8], &GelParams::default());
        for sigma in [0.5, 1.0, 2.5] {
            let s = smooth(&h, sigma);
            assert_relative_eq!(
                s.total_mass(),
                h.total_mass(),
                max_relative = 1e-9
            );
        }
    }

    #[test]
    fn flat_gel_renders_background_exactly() {
        let r = renderer();
        let frame = shade(&HeightMap::zeros(), &r.lut, r.params.pixel_pitch);
        for row in 0..FRAME_SIZE {
            for col in 0..FRAME_SIZE {
                assert_eq!(frame.pixel(row, col), r.lut.background);
            }
        }
    }

    #[test]
    fn constant_heightmap_renders_background_everywhere() {
        let r = renderer();
        let mut h = HeightMap::zeros();
        for row in 0..FRAME_SIZE {
            for col in 0..FRAME_SIZE {
                h.set(row, col, 4e-4);
            }
        }
        let frame = shade(&h, &r.lut, r.params.pixel_pitch);
        for row in 0..FRAME_SIZE {
            for col in 0..FRAME_SIZE {
                assert_eq!(frame.pixel(row, col), r.lut.background);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let r = renderer();
        let f = [0.4, 0.0, -1.1];
        assert_eq!(r.render(f), r.render(f));
    }

    #[test]
    fn shading_is_shift_equivariant_in_the_interior() {
        let r = renderer();
        let p = &r.params;
        let base = smooth(&contact_heightmap([0.6, 0.0, -0.8], p), p.smooth_sigma);
        // Translate the heightmap by whole pixels (+3 cols, +2 rows).
        let (dc, dr) = (3i64, 2i64);
        let mut shifted = HeightMap::zeros();
        for row in 0..FRAME_SIZE as i64 {
            for col in 0..FRAME_SIZE as i64 {
                let (sr, sc) = (row - dr, col - dc);
                if (0..FRAME_SIZE as i64).contains(&sr) && (0..FRAME_SIZE as i64).contains(&sc) {
                    shifted.set(row as usize, col as usize, base.get(sr as usize, sc as usize));
                }
            }
        }
        let img_a = shade(&base, &r.lut, p.pixel_pitch);
        let img_b = shade(&shifted, &r.lut, p.pixel_pitch);
        // Compare away from borders and from the copy seam.
        for row in (dr + 4)..(FRAME_SIZE as i64 - 4) {
            for col in (dc + 4)..(FRAME_SIZE as i64 - 4) {
                assert_eq!(
                    img_b.pixel(row as usize, col as usize),
                    img_a.pixel((row - dr) as usize, (col - dc) as usize),
                    "row {row} col {col}"
                );
            }
        }
    }

    #[test]
    fn opposite_lateral_forces_mirror_frame_registration() {
        let r = renderer();
        let plus = r.render([1.5, 0.0, 0.0]);
        let minus = r.render([-1.5, 0.0, 0.0]);
        let (cu_p, cv_p) = deviation_centroid(&plus, r.lut.background);
        let (cu_m, cv_m) = deviation_centroid(&minus, r.lut.background);
        let mirrored_cu = (FRAME_SIZE as f64 - 1.0) - cu_m;
        assert!(
            (cu_p - mirrored_cu).abs() <= 1.0,
            "u-centroids {cu_p} vs mirrored {mirrored_cu}"
        );
        assert!((cv_p - cv_m).abs() <= 1.0);
        // And the imprint really moved off-centre.
        assert!((cu_p - 31.5).abs() > 3.0);
    }

    #[test]
    fn vertical_force_shifts_the_imprint_vertically() {
        let r = renderer();
        let down = r.render([0.0, 0.0, -1.0]);
        let up = r.render([0.0, 0.0, 1.0]);
        let (_, cv_d) = deviation_centroid(&down, r.lut.background);
        let (_, cv_u) = deviation_centroid(&up, r.lut.background);
        assert!(cv_u - cv_d > 3.0, "up {cv_u} vs down {cv_d}");
    }

    #[test]
    fn frames_stay_in_unit_range_and_finite() {
        let r = renderer();
        for f in [[0.0; 3], [3.0, -2.0, -5.0], [-10.0, 10.0, -10.0]] {
            let frame = r.render(f);
            for &v in frame.data() {
                assert!((0.0..=1.0).contains(&v) && v.is_finite());
            }
        }
    }

    #[test]
    fn overhead_white_light_dims_with_slope() {
        let lut = calibrate_shading(&[Light::from_angles(0.0, 90.0, [0.9, 0.9, 0.9])])
            .expect("overhead light calibrates");
        for ch in 0..3 {
            assert_relative_eq!(lut.background[ch], 0.9, epsilon = 1e-12);
        }
        for angle in [0.0f64, 45.0, 133.0, 260.0] {
            let (dx, dy) = (angle.to_radians().cos(), angle.to_radians().sin());
            let b = |r: f64| lut.eval(r * dx, r * dy).iter().sum::<f64>();
            assert!(b(0.0) > b(0.6));
            assert!(b(0.6) > b(1.2));
        }
    }

    #[test]
    fn three_light_rig_separates_gradient_directions_by_hue() {
        let r = renderer();
        // Slope facing the red light (azimuth 0 → +x) brightens red the most.
        let toward_red = r.lut.eval(-1.0, 0.0);
        let away_red = r.lut.eval(1.0, 0.0);
        assert!(toward_red[0] > away_red[0]);
        // The three lights respond differently to the same gradient.
        let g = r.lut.eval(0.8, 0.8);
        assert!(g[0] != g[1] && g[1] != g[2]);
    }

    #[test]
    fn zero_intensity_lights_give_constant_background() {
        let lut = calibrate_shading(&default_lights(45.0, 0.0)).expect("calibrates");
        assert_eq!(lut.background, [0.0; 3]);
        for g in [(0.0, 0.0), (1.0, -0.5), (-1.2, 0.3)] {
            assert_eq!(lut.eval(g.0, g.1), [0.0; 3]);
        }
    }

    #[test]
    fn calibration_residual_is_small() {
        // A degree-2 polynomial cannot capture the shadowing kink of the
        // Lambertian max(0,·), so the bound is loose but still meaningful:
        // colours span [0,1] and the fit stays within a few percent RMS.
        let r = renderer();
        assert!(
            r.lut.residual_rms < 0.08,
            "residual {} too large for a usable fit",
            r.lut.residual_rms
        );
    }

    #[test]
    fn lut_round_trips_through_json() {
        let r = renderer();
        let json = r.lut.to_json();
        let back = ShadingLut::from_json(&json).unwrap();
        assert_eq!(back, r.lut);
    }

    /// Maintenance helper: prints the current calibration as JSON so the
    /// golden file can be refreshed after an intentional change. Run with
    /// `cargo test -p tacpeg-core regenerate_golden_lut -- --ignored --nocapture`.
    #[test]
    #[ignore]
    fn regenerate_golden_lut() {
        println!("\n{}", renderer().lut.to_json());
    }

    #[test]
    fn lut_matches_golden_calibration() {
        let golden = ShadingLut::from_json(include_str!("golden/shading_lut.json"))
            .expect("golden LUT parses");
        let lut = renderer().lut;
        for ch in 0..3 {
            assert_relative_eq!(lut.background[ch], golden.background[ch], epsilon = 1e-9);
            for k in 0..5 {
                assert_relative_eq!(lut.coeffs[ch][k], golden.coeffs[ch][k], epsilon = 1e-9);
            }
        }
        assert_relative_eq!(lut.residual_rms, golden.residual_rms, epsilon = 1e-9);
    }

    #[test]
    fn ppm_encoding_has_exact_header_and_length() {
        let r = renderer();
        let bytes = r.render([0.0; 3]).ppm_bytes();
        assert!(bytes.starts_with(b"P6\n64 64\n255\n"));
        assert_eq!(bytes.len(), b"P6\n64 64\n255\n".len() + FRAME_LEN);
    }

    #[test]
    fn rgb8_round_trip_is_idempotent() {
        let r = renderer();
        let frame = r.render([0.9, 0.0, -1.3]);
        let q1 = frame.to_rgb8();
        let back = TactileFrame::from_rgb8(&q1);
        // Quantising an already-quantised frame changes nothing.
        assert_eq!(back.to_rgb8(), q1);
    }

    #[test]
    fn pixel_noise_is_seeded_and_bounded() {
        let r = renderer();
        let base = r.render([0.0; 3]);
        let mut a = base.clone();
        let mut b = base.clone();
        apply_pixel_noise(&mut a, 0.01, &mut StreamRng::root(7));
        apply_pixel_noise(&mut b, 0.01, &mut StreamRng::root(7));
        assert_eq!(a, b);
        assert_ne!(a, base);
        for &v in a.data() {
            assert!((0.0..=1.0).contains(&v));
        }
        let mut c = base.clone();
        apply_pixel_noise(&mut c, 0.0, &mut StreamRng::root(7));
        assert_eq!(c, base);
    }
}
