//! Synthetic shape scenes and photometric domain shifts.
//!
//! Geometry is drawn before anything style-related, so a scene rendered
//! from the same stream under two domains has identical boxes and labels.

use std::io::Write;
use std::path::Path;

use dgdetr_core::{FeatureMap, RngStream, Shape4};
use serde::{Deserialize, Serialize};

use crate::eval::{iou, BoxCxCyWh};
use crate::{Error, Result};

pub const IMAGE_SIZE: usize = 64;
pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];
const MAX_OVERLAP: f64 = 0.3;
const SIZE_RANGE: (f64, f64) = (12.0, 22.0);

/// Object colors; class is carried by shape only.
const OBJECT_PALETTE: [[f64; 3]; 5] = [
    [0.85, 0.20, 0.15],
    [0.15, 0.55, 0.85],
    [0.95, 0.80, 0.10],
    [0.20, 0.70, 0.30],
    [0.60, 0.25, 0.75],
];

/// A photometric style shift applied after rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub brightness_shift: f64,
    pub contrast_scale: f64,
    /// Rotation about the gray axis, in degrees.
    pub hue_rotation: f64,
    pub additive_noise_std: f64,
    pub background_palette: Vec<[f64; 3]>,
}

fn source_background() -> Vec<[f64; 3]> {
    vec![[0.55, 0.60, 0.55], [0.62, 0.58, 0.50], [0.50, 0.55, 0.62], [0.58, 0.58, 0.58]]
}

impl DomainSpec {
    pub fn identity(name: &str) -> Self {
        Self {
            name: name.into(),
            brightness_shift: 0.0,
            contrast_scale: 1.0,
            hue_rotation: 0.0,
            additive_noise_std: 0.0,
            background_palette: source_background(),
        }
    }

    fn shifted(name: &str, brightness: f64, contrast: f64, hue: f64, noise: f64) -> Self {
        Self {
            brightness_shift: brightness,
            contrast_scale: contrast,
            hue_rotation: hue,
            additive_noise_std: noise,
            ..Self::identity(name)
        }
    }

    /// The training domain.
    pub fn source() -> Self {
        Self::identity("daytime-sunny")
    }

    /// The four shifted evaluation domains.
    pub fn shifted_presets() -> Vec<Self> {
        vec![
            Self::shifted("night-sunny", -0.30, 0.60, 0.0, 0.02),
            Self::shifted("dusk-rainy", -0.15, 0.80, 30.0, 0.05),
            Self::shifted("night-rainy", -0.35, 0.50, 15.0, 0.08),
            Self::shifted("daytime-foggy", 0.25, 0.50, 0.0, 0.0),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.brightness_shift, self.contrast_scale, self.hue_rotation, self.additive_noise_std]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.contrast_scale < 0.0 || self.additive_noise_std < 0.0 {
            return Err(Error::contract(format!("domain {}: invalid photometric parameters", self.name)));
        }
        if self.background_palette.is_empty()
            || self.background_palette.iter().flatten().any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::contract(format!("domain {}: background palette must be non-empty in [0,1]", self.name)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.brightness_shift == 0.0
            && self.contrast_scale == 1.0
            && self.hue_rotation == 0.0
            && self.additive_noise_std == 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `(1, 3, 64, 64)` with values in `[0, 1]`.
    pub image: FeatureMap<f64>,
    pub boxes: Vec<BoxCxCyWh>,
    pub labels: Vec<usize>,
}

impl SceneSample {
    pub fn ground_truth(&self) -> Vec<(BoxCxCyWh, usize)> {
        self.boxes.iter().copied().zip(self.labels.iter().copied()).collect()
    }

    /// Binary PPM (P6).
    pub fn write_ppm(&self, mut w: impl Write) -> Result<()> {
        let s = self.image.shape();
        write!(w, "P6\n{} {}\n255\n", s.w, s.h)?;
        let mut bytes = Vec::with_capacity(s.h * s.w * 3);
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..3 {
                    bytes.push((self.image.at(0, c, y, x) * 255.0).round() as u8);
                }
            }
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    /// Writes `<stem>.ppm` and a `<stem>.json` label sidecar.
    pub fn export(&self, dir: &Path, stem: &str, domain: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_ppm(std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.ppm")))?))?;
        let objects: Vec<_> = self
            .boxes
            .iter()
            .zip(&self.labels)
            .map(|(b, &l)| serde_json::json!({ "box_cxcywh": b, "label": l, "class": CLASS_NAMES[l] }))
            .collect();
        let sidecar = serde_json::json!({ "domain": domain, "width": IMAGE_SIZE, "height": IMAGE_SIZE, "objects": objects });
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }
}

struct Placed {
    class: usize,
    /// Pixel box `(x0, y0, size)`.
    x0: f64,
    y0: f64,
    size: f64,
    color: [f64; 3],
}

impl Placed {
    fn normalized(&self) -> BoxCxCyWh {
        let s = IMAGE_SIZE as f64;
        [(self.x0 + self.size / 2.0) / s, (self.y0 + self.size / 2.0) / s, self.size / s, self.size / s]
    }

    /// Whether the pixel center `(px, py)` lies inside the shape.
    fn covers(&self, px: f64, py: f64) -> bool {
        let (u, v) = ((px - self.x0) / self.size, (py - self.y0) / self.size);
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return false;
        }
        match self.class {
            0 => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            1 => true,
            // Apex at top center, base along the bottom edge.
            _ => (u - 0.5).abs() <= v / 2.0,
        }
    }
}

fn place_objects(rng: &mut RngStream) -> Vec<Placed> {
    let count = 1 + rng.below(3);
    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..50 {
            let size = rng.uniform_range(SIZE_RANGE.0, SIZE_RANGE.1).round();
            let x0 = rng.uniform_range(0.0, IMAGE_SIZE as f64 - size).floor();
            let y0 = rng.uniform_range(0.0, IMAGE_SIZE as f64 - size).floor();
            let class = rng.below(3);
            let color = OBJECT_PALETTE[rng.below(OBJECT_PALETTE.len())];
            let candidate = Placed { class, x0, y0, size, color };
            let b = candidate.normalized();
            if placed.iter().all(|p| iou(&p.normalized(), &b) <= MAX_OVERLAP) {
                placed.push(candidate);
                break;
            }
        }
    }
    placed
}

/// Renders a source-style scene: palette background with a soft gradient
/// and mild texture, then the objects.
fn render(objects: &[Placed], rng: &mut RngStream, palette: &[[f64; 3]]) -> FeatureMap<f64> {
    let bg = palette[((rng.uniform() * palette.len() as f64) as usize).min(palette.len() - 1)];
    let (gx, gy) = (rng.uniform_range(-0.1, 0.1), rng.uniform_range(-0.1, 0.1));
    let jitter: Vec<f64> = (0..objects.len()).map(|_| rng.uniform_range(-0.05, 0.05)).collect();
    let n = IMAGE_SIZE;
    let mut texture = vec![0.0; n * n];
    texture.iter_mut().for_each(|t| *t = 0.02 * rng.normal());
    let mut img = FeatureMap::zeros(Shape4::new(1, 3, n, n));
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let ramp = gx * (px / n as f64 - 0.5) + gy * (py / n as f64 - 0.5);
            let mut rgb = [bg[0] + ramp, bg[1] + ramp, bg[2] + ramp];
            // Later objects are drawn on top.
            for (o, j) in objects.iter().zip(&jitter) {
                if o.covers(px, py) {
                    rgb = [o.color[0] + j, o.color[1] + j, o.color[2] + j];
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                let i = img.index(0, c, y, x);
                img.data_mut()[i] = (v + texture[y * n + x]).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Rotation by `degrees` about the `(1,1,1)` axis.
fn hue_matrix(degrees: f64) -> [[f64; 3]; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let k = 1.0 / 3.0;
    let r = (1.0 / 3.0f64).sqrt();
    let a = c + (1.0 - c) * k;
    let b = (1.0 - c) * k - r * s;
    let d = (1.0 - c) * k + r * s;
    [[a, b, d], [d, a, b], [b, d, a]]
}

/// Applies hue rotation, contrast about mid-gray, brightness and additive
/// noise in that order, then clamps to `[0, 1]`. Identity steps are skipped
/// so the identity domain is bit-exact.
pub fn apply_domain(image: &FeatureMap<f64>, domain: &DomainSpec, rng: &mut RngStream) -> FeatureMap<f64> {
    let mut out = image.clone();
    let s = image.shape();
    let plane = s.plane();
    if domain.hue_rotation != 0.0 {
        let m = hue_matrix(domain.hue_rotation);
        let src = image.data();
        let dst = out.data_mut();
        for n in 0..s.n {
            let base = n * 3 * plane;
            for i in 0..plane {
                let rgb = [src[base + i], src[base + plane + i], src[base + 2 * plane + i]];
                for (c, row) in m.iter().enumerate() {
                    dst[base + c * plane + i] = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
                }
            }
        }
    }
    let noise = domain.additive_noise_std;
    for v in out.data_mut() {
        if domain.contrast_scale != 1.0 {
            *v = (*v - 0.5) * domain.contrast_scale + 0.5;
        }
        *v += domain.brightness_shift;
        if noise > 0.0 {
            *v += noise * rng.normal();
        }
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Renders one scene from `rng` under `domain`.
pub fn generate_scene(rng: &mut RngStream, domain: &DomainSpec) -> SceneSample {
    let objects = place_objects(rng);
    let image = render(&objects, rng, &domain.background_palette);
    let image = apply_domain(&image, domain, rng);
    SceneSample {
        image,
        boxes: objects.iter().map(Placed::normalized).collect(),
        labels: objects.iter().map(|o| o.class).collect(),
    }
}

/// `n` scenes whose geometry depends only on `(seed, index)`, so the same
/// seed under different domains yields paired scenes.
pub fn generate_set(seed: u64, n: usize, domain: &DomainSpec) -> Vec<SceneSample> {
    let root = RngStream::new(seed);
    (0..n).map(|i| generate_scene(&mut root.derive(i as u64), domain)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_named() {
        DomainSpec::source().validate().unwrap();
        let names: Vec<_> = DomainSpec::shifted_presets().into_iter().map(|d| {
            d.validate().unwrap();
            assert!(!d.is_identity());
            d.name
        }).collect();
        assert_eq!(names, ["night-sunny", "dusk-rainy", "night-rainy", "daytime-foggy"]);
    }

    #[test]
    fn zero_hue_matrix_is_identity() {
        let m = hue_matrix(0.0);
        for (i, row) in m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn hue_rotation_preserves_gray() {
        let m = hue_matrix(73.0);
        for row in m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shapes_cover_expected_pixels() {
        let p = |class| Placed { class, x0: 0.0, y0: 0.0, size: 10.0, color: [0.0; 3] };
        assert!(p(1).covers(0.5, 0.5));
        assert!(!p(0).covers(0.5, 0.5));
        assert!(p(0).covers(5.0, 5.0));
        assert!(!p(2).covers(0.5, 0.5));
        assert!(p(2).covers(5.0, 9.5));
    }

    #[test]
    fn validate_rejects_bad_domains() {
        let mut d = DomainSpec::source();
        d.contrast_scale = -1.0;
        assert!(d.validate().is_err());
        let mut d = DomainSpec::source();
        d.background_palette.clear();
        assert!(d.validate().is_err());
    }
}
