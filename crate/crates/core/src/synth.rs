//! Procedural scenes of overlapping worm-like tubes with exact amodal labels.
//!
//! Each worm is a tapered tube swept along a Catmull-Rom spline. Worms are
//! rasterised independently before compositing, so every amodal mask is
//! exact even where another worm covers it. The image is a bright-field
//! style rendering; the `cluttered` profile adds debris blobs and speckle to
//! the image channel only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask_algebra::{decompose_instances, BinaryMask, PixelBox};

/// Background intensity of the clean bright-field rendering.
pub const BACKGROUND: f64 = 0.85;

/// Grayscale image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        GrayImage {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Bilinear sample at continuous pixel-centre coordinates; `fill` outside.
    pub fn sample(&self, y: f64, x: f64, fill: f64) -> f64 {
        if y < -0.5 || x < -0.5 || y > self.height as f64 - 0.5 || x > self.width as f64 - 0.5 {
            return fill;
        }
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (yc.floor() as usize, xc.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (yc - y0 as f64, xc - x0 as f64);
        let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
        let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Geometry and appearance of one synthetic worm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WormSpec {
    /// Spline control points as `(x, y)` pixel coordinates.
    pub spine: Vec<[f64; 2]>,
    pub half_width: f64,
    /// Absorbance in `[0, 1]`; 1 renders fully dark.
    pub intensity: f64,
    pub z_order: i32,
}

/// Image-noise regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseProfile {
    /// Low noise, empty background.
    Clean,
    /// Debris blobs and speckle noise.
    Cluttered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    /// Inclusive `(min, max)` number of worms.
    pub worm_count_range: (usize, usize),
    /// Probability that each worm after the first is forced to cross an
    /// earlier one.
    pub overlap_bias: f64,
    pub noise_profile: NoiseProfile,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: (256, 256),
            worm_count_range: (2, 4),
            overlap_bias: 0.7,
            noise_profile: NoiseProfile::Clean,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 64 || w < 64 {
            return Err(Error::Config(format!("image size {h}x{w} below 64x64")));
        }
        let (lo, hi) = self.worm_count_range;
        if lo < 1 || hi < lo {
            return Err(Error::Config(format!("invalid worm count range ({lo}, {hi})")));
        }
        if !(0.0..=1.0).contains(&self.overlap_bias) {
            return Err(Error::Config("overlap_bias must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Config for the `index`-th scene of a dataset.
    pub fn for_scene(&self, index: u64) -> SceneConfig {
        SceneConfig {
            seed: mix_seed(self.seed, index),
            ..self.clone()
        }
    }
}

/// One annotated worm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub bbox: PixelBox,
    pub amodal: BinaryMask,
    pub overlap: BinaryMask,
    pub nonoverlap: BinaryMask,
}

/// Image plus per-instance amodal masks and their overlap decomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedScene {
    pub image: GrayImage,
    pub instances: Vec<Instance>,
    pub noise_level: f64,
}

impl AnnotatedScene {
    /// Builds a scene from amodal masks, deriving boxes and regions.
    pub fn from_amodal(image: GrayImage, masks: Vec<BinaryMask>, noise_level: f64) -> Result<Self> {
        let masks: Vec<BinaryMask> = masks.into_iter().filter(|m| !m.is_empty()).collect();
        if masks.is_empty() {
            return Err(Error::invalid("a scene needs at least one non-empty instance"));
        }
        for m in &masks {
            if m.dims() != (image.height, image.width) {
                return Err(Error::ShapeMismatch {
                    expected: vec![image.height, image.width],
                    actual: vec![m.height(), m.width()],
                });
            }
        }
        let parts = decompose_instances(&masks)?;
        let instances = masks
            .into_iter()
            .zip(parts)
            .map(|(amodal, (overlap, nonoverlap))| Instance {
                bbox: amodal.bbox().expect("non-empty"),
                amodal,
                overlap,
                nonoverlap,
            })
            .collect();
        Ok(AnnotatedScene {
            image,
            instances,
            noise_level,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.image.height, self.image.width)
    }

    pub fn amodal_masks(&self) -> Vec<BinaryMask> {
        self.instances.iter().map(|i| i.amodal.clone()).collect()
    }

    /// Checks every structural invariant of an annotated scene.
    pub fn validate(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::invalid("scene has no instances"));
        }
        if self.image.pixels.len() != self.image.height * self.image.width {
            return Err(Error::invalid("image buffer size mismatch"));
        }
        let masks = self.amodal_masks();
        let parts = decompose_instances(&masks)?;
        for (k, (inst, (o, n))) in self.instances.iter().zip(parts).enumerate() {
            if inst.amodal.bbox() != Some(inst.bbox) {
                return Err(Error::invalid(format!("instance {k}: bbox is not tight")));
            }
            if inst.overlap != o || inst.nonoverlap != n {
                return Err(Error::invalid(format!(
                    "instance {k}: overlap/non-overlap regions do not match the amodal masks"
                )));
            }
        }
        Ok(())
    }

    /// Mean intensity of pixels not covered by any instance.
    pub fn background_level(&self) -> f64 {
        let (h, w) = self.dims();
        let mut sum = 0.0;
        let mut count = 0usize;
        for p in 0..h * w {
            if self.instances.iter().all(|i| i.amodal.bits()[p] == 0) {
                sum += self.image.pixels[p];
                count += 1;
            }
        }
        if count == 0 {
            BACKGROUND
        } else {
            sum / count as f64
        }
    }
}

/// SplitMix64-style derivation of independent seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Dense centre-line samples of a Catmull-Rom spline through `spine`.
pub fn spine_curve(spine: &[[f64; 2]], samples_per_segment: usize) -> Vec<[f64; 2]> {
    let n = spine.len();
    let mut out = Vec::with_capacity((n - 1) * samples_per_segment + 1);
    for i in 0..n - 1 {
        let p0 = spine[i.saturating_sub(1)];
        let p1 = spine[i];
        let p2 = spine[i + 1];
        let p3 = spine[(i + 2).min(n - 1)];
        for s in 0..samples_per_segment {
            let t = s as f64 / samples_per_segment as f64;
            let (t2, t3) = (t * t, t * t * t);
            let mut q = [0.0; 2];
            for d in 0..2 {
                q[d] = 0.5
                    * (2.0 * p1[d]
                        + (-p0[d] + p2[d]) * t
                        + (2.0 * p0[d] - 5.0 * p1[d] + 4.0 * p2[d] - p3[d]) * t2
                        + (-p0[d] + 3.0 * p1[d] - 3.0 * p2[d] + p3[d]) * t3);
            }
            out.push(q);
        }
    }
    out.push(spine[n - 1]);
    out
}

const SAMPLES_PER_SEGMENT: usize = 8;

/// Tube radius at arc fraction `t`: full width in the body, tapering to half
/// at head and tail.
fn radius_at(half_width: f64, t: f64) -> f64 {
    let body = (t.min(1.0 - t) * 4.0).min(1.0);
    half_width * (0.5 + 0.5 * body)
}

/// Rasterises a worm: binary mask (pixel centres within the tube) and an
/// anti-aliased coverage map for the image.
pub fn render_worm(spec: &WormSpec, height: usize, width: usize) -> Result<(BinaryMask, Vec<f64>)> {
    if spec.spine.len() < 4 {
        return Err(Error::invalid("a worm spine needs at least 4 control points"));
    }
    if !(spec.half_width > 0.0) {
        return Err(Error::invalid("worm half_width must be positive"));
    }
    let curve = spine_curve(&spec.spine, SAMPLES_PER_SEGMENT);
    // cumulative arc length for the taper profile
    let mut arc = vec![0.0; curve.len()];
    for i in 1..curve.len() {
        let (dx, dy) = (curve[i][0] - curve[i - 1][0], curve[i][1] - curve[i - 1][1]);
        arc[i] = arc[i - 1] + (dx * dx + dy * dy).sqrt();
    }
    let total = arc.last().copied().unwrap_or(0.0).max(1e-9);
    let reach = spec.half_width + 1.0;
    let (mut xmin, mut ymin, mut xmax, mut ymax) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in &curve {
        xmin = xmin.min(p[0]);
        xmax = xmax.max(p[0]);
        ymin = ymin.min(p[1]);
        ymax = ymax.max(p[1]);
    }
    let x_lo = ((xmin - reach).floor().max(0.0)) as usize;
    let y_lo = ((ymin - reach).floor().max(0.0)) as usize;
    let x_hi = ((xmax + reach).ceil().max(0.0) as usize).min(width);
    let y_hi = ((ymax + reach).ceil().max(0.0) as usize).min(height);

    let mut mask = BinaryMask::new(height, width)?;
    let mut coverage = vec![0.0; height * width];
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            // signed clearance r(t) - d, maximised over segments
            let mut best = f64::NEG_INFINITY;
            for i in 0..curve.len() - 1 {
                let (a, b) = (curve[i], curve[i + 1]);
                let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
                let len2 = ex * ex + ey * ey;
                let s = if len2 > 0.0 {
                    (((px - a[0]) * ex + (py - a[1]) * ey) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (cx, cy) = (a[0] + s * ex, a[1] + s * ey);
                let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                let t = (arc[i] + s * (arc[i + 1] - arc[i])) / total;
                best = best.max(radius_at(spec.half_width, t) - d);
            }
            if best >= 0.0 {
                mask.set(y, x, true);
            }
            coverage[y * width + x] = (best + 0.5).clamp(0.0, 1.0);
        }
    }
    Ok((mask, coverage))
}

fn spine_in_bounds(spine: &[[f64; 2]], height: usize, width: usize, margin: f64) -> bool {
    spine_curve(spine, SAMPLES_PER_SEGMENT).iter().all(|p| {
        p[0] >= margin && p[1] >= margin && p[0] <= width as f64 - margin && p[1] <= height as f64 - margin
    })
}

/// Random smooth spine of roughly `length` pixels starting at the origin.
fn random_shape(rng: &mut ChaCha8Rng, length: f64) -> Vec<[f64; 2]> {
    let points = 6;
    let step = length / (points - 1) as f64;
    let mut heading = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut p = [0.0, 0.0];
    let mut spine = vec![p];
    for _ in 1..points {
        heading += 0.35 * gaussian(rng);
        p = [p[0] + step * heading.cos(), p[1] + step * heading.sin()];
        spine.push(p);
    }
    spine
}

fn translate(spine: &[[f64; 2]], dx: f64, dy: f64) -> Vec<[f64; 2]> {
    spine.iter().map(|p| [p[0] + dx, p[1] + dy]).collect()
}

/// Samples worm geometry for a scene. Deterministic in `cfg.seed`.
pub fn sample_worms(cfg: &SceneConfig) -> Result<Vec<WormSpec>> {
    cfg.validate()?;
    let (h, w) = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = cfg.worm_count_range;
    let count = rng.gen_range(lo..=hi);
    let short_side = h.min(w) as f64;
    let mut worms: Vec<WormSpec> = Vec::with_capacity(count);
    for z in 0..count {
        let mut length = rng.gen_range(0.3..0.5) * short_side;
        let ratio = rng.gen_range(10.0..20.0);
        let half_width = (length / ratio / 2.0).max(1.5);
        let intensity = rng.gen_range(0.35..0.6);
        let margin = half_width + 2.0;
        let force_cross = !worms.is_empty() && rng.gen_bool(cfg.overlap_bias);
        let anchor = if force_cross {
            let other = &worms[rng.gen_range(0..worms.len())];
            let curve = spine_curve(&other.spine, SAMPLES_PER_SEGMENT);
            // stay off the tapered tips so the crossing pixel is solidly inside
            let k = rng.gen_range(curve.len() / 4..=3 * curve.len() / 4);
            Some(curve[k])
        } else {
            None
        };
        let mut spine = None;
        for attempt in 0..200 {
            if attempt > 0 && attempt % 10 == 0 {
                length *= 0.85;
            }
            let shape = random_shape(&mut rng, length);
            let candidate = match anchor {
                Some(p) => {
                    let curve = spine_curve(&shape, SAMPLES_PER_SEGMENT);
                    let q = curve[rng.gen_range(curve.len() / 4..=3 * curve.len() / 4)];
                    translate(&shape, p[0] - q[0], p[1] - q[1])
                }
                None => {
                    let cx = rng.gen_range(margin..w as f64 - margin);
                    let cy = rng.gen_range(margin..h as f64 - margin);
                    let mid = spine_curve(&shape, SAMPLES_PER_SEGMENT);
                    let q = mid[mid.len() / 2];
                    translate(&shape, cx - q[0], cy - q[1])
                }
            };
            if spine_in_bounds(&candidate, h, w, margin) {
                spine = Some(candidate);
                break;
            }
        }
        let spine = match spine {
            Some(s) => s,
            // shrink onto the anchor (or image centre) until it fits
            None => {
                let c = anchor.unwrap_or([w as f64 / 2.0, h as f64 / 2.0]);
                let shape = random_shape(&mut rng, 2.0 * half_width);
                let mid = spine_curve(&shape, SAMPLES_PER_SEGMENT);
                let q = mid[mid.len() / 2];
                translate(&shape, c[0] - q[0], c[1] - q[1])
            }
        };
        worms.push(WormSpec {
            spine,
            half_width,
            intensity,
            z_order: z as i32,
        });
    }
    Ok(worms)
}

/// Generates one annotated scene. Identical configs give identical scenes.
pub fn generate_scene(cfg: &SceneConfig) -> Result<AnnotatedScene> {
    let worms = sample_worms(cfg)?;
    let (h, w) = cfg.image_size;
    let mut image = GrayImage::filled(h, w, BACKGROUND);
    // mild illumination falloff
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f64 + 0.5) / h as f64 - 0.5;
            let dx = (x as f64 + 0.5) / w as f64 - 0.5;
            image.pixels[y * w + x] *= 1.0 - 0.12 * (dx * dx + dy * dy);
        }
    }
    let mut masks = Vec::with_capacity(worms.len());
    let mut ordered: Vec<&WormSpec> = worms.iter().collect();
    ordered.sort_by_key(|s| s.z_order);
    for spec in ordered {
        let (mask, coverage) = render_worm(spec, h, w)?;
        for (p, c) in image.pixels.iter_mut().zip(&coverage) {
            *p *= 1.0 - spec.intensity * c;
        }
        masks.push(mask);
    }

    // the noise stream is independent of geometry so profiles share masks
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x6e6f697365));
    let noise_level = match cfg.noise_profile {
        NoiseProfile::Clean => 0.01,
        NoiseProfile::Cluttered => {
            let blobs = rng.gen_range(15..40);
            for _ in 0..blobs {
                let cx = rng.gen_range(0.0..w as f64);
                let cy = rng.gen_range(0.0..h as f64);
                let rx = rng.gen_range(1.5..6.0);
                let ry = rng.gen_range(1.5..6.0);
                let amp = if rng.gen_bool(0.6) {
                    -rng.gen_range(0.1..0.35)
                } else {
                    rng.gen_range(0.05..0.15)
                };
                let (y0, y1) = ((cy - ry - 1.0).max(0.0) as usize, ((cy + ry + 1.0) as usize).min(h));
                let (x0, x1) = ((cx - rx - 1.0).max(0.0) as usize, ((cx + rx + 1.0) as usize).min(w));
                for y in y0..y1 {
                    for x in x0..x1 {
                        let d = ((x as f64 + 0.5 - cx) / rx).powi(2) + ((y as f64 + 0.5 - cy) / ry).powi(2);
                        if d <= 1.0 {
                            image.pixels[y * w + x] += amp * (1.0 - d);
                        }
                    }
                }
            }
            0.04
        }
    };
    for p in image.pixels.iter_mut() {
        *p = (*p + noise_level * gaussian(&mut rng)).clamp(0.0, 1.0);
    }
    AnnotatedScene::from_amodal(image, masks, noise_level)
}

/// Geometric augmentations applied identically to image and masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    Rotate,
    Crop,
    Hflip,
}

/// Minimum visible fraction of an instance's amodal area for a crop window
/// to be accepted.
pub const MIN_CROP_VISIBILITY: f64 = 0.25;

const CROP_ATTEMPTS: usize = 10;

/// Mirrors the scene about its vertical centre line.
pub fn hflip(scene: &AnnotatedScene) -> AnnotatedScene {
    let (h, w) = scene.dims();
    let mut image = scene.image.clone();
    for y in 0..h {
        image.pixels[y * w..(y + 1) * w].reverse();
    }
    let flip = |m: &BinaryMask| {
        BinaryMask::from_fn(h, w, |y, x| m.get(y, w - 1 - x)).expect("same dims")
    };
    let masks = scene.instances.iter().map(|i| flip(&i.amodal)).collect();
    AnnotatedScene::from_amodal(image, masks, scene.noise_level).expect("flip keeps instances")
}

/// Rotates the scene by `degrees` (counter-clockwise in image view) about its
/// centre. Exposed corners take the background level; masks use nearest
/// neighbour. Instances rotated fully out of frame are dropped; if none
/// survive the scene is returned unchanged.
pub fn rotate(scene: &AnnotatedScene, degrees: f64) -> AnnotatedScene {
    let (h, w) = scene.dims();
    let theta = degrees.to_radians();
    let (s, c) = theta.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let fill = scene.background_level();
    // inverse map: destination pixel -> source coordinates
    let src = |y: usize, x: usize| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        // counter-clockwise on screen (y down) is a clockwise rotation in maths axes
        let sx = c * dx - s * dy + cx;
        let sy = s * dx + c * dy + cy;
        (sy, sx)
    };
    let mut image = GrayImage::filled(h, w, fill);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            image.pixels[y * w + x] = scene.image.sample(sy, sx, fill);
        }
    }
    let masks: Vec<BinaryMask> = scene
        .instances
        .iter()
        .map(|inst| {
            BinaryMask::from_fn(h, w, |y, x| {
                let (sy, sx) = src(y, x);
                let (ry, rx) = (sy.round(), sx.round());
                ry >= 0.0 && rx >= 0.0 && ry < h as f64 && rx < w as f64 && inst.amodal.get(ry as usize, rx as usize)
            })
            .expect("same dims")
        })
        .collect();
    AnnotatedScene::from_amodal(image, masks, scene.noise_level).unwrap_or_else(|_| scene.clone())
}

/// Cuts out `window`. Instances with no visible pixel are dropped.
pub fn crop(scene: &AnnotatedScene, window: PixelBox) -> Result<AnnotatedScene> {
    let (h, w) = scene.dims();
    if window.x1 <= window.x0 || window.y1 <= window.y0 || window.x1 > w || window.y1 > h {
        return Err(Error::invalid(format!("crop window {window:?} outside {h}x{w}")));
    }
    let (ch, cw) = (window.y1 - window.y0, window.x1 - window.x0);
    let mut image = GrayImage::filled(ch, cw, 0.0);
    for y in 0..ch {
        for x in 0..cw {
            image.pixels[y * cw + x] = scene.image.get(y + window.y0, x + window.x0);
        }
    }
    let masks = scene
        .instances
        .iter()
        .map(|i| BinaryMask::from_fn(ch, cw, |y, x| i.amodal.get(y + window.y0, x + window.x0)))
        .collect::<Result<Vec<_>>>()?;
    AnnotatedScene::from_amodal(image, masks, scene.noise_level)
}

fn crop_visibility_ok(scene: &AnnotatedScene, window: PixelBox) -> bool {
    scene.instances.iter().any(|inst| {
        let total = inst.amodal.count();
        let mut visible = 0;
        for y in window.y0..window.y1 {
            for x in window.x0..window.x1 {
                visible += inst.amodal.get(y, x) as usize;
            }
        }
        total > 0 && visible as f64 >= MIN_CROP_VISIBILITY * total as f64
    })
}

/// Crop side lengths: multiples of 32, at least 64 and half the original.
fn crop_sizes(dim: usize) -> Vec<usize> {
    let lo = (dim / 2).max(64);
    (1..=dim / 32).map(|k| k * 32).filter(|&s| s >= lo && s <= dim).collect()
}

/// Applies `ops` in order with randomly drawn parameters.
///
/// Rotation angle is uniform in `[-180°, 180°)`, horizontal flip fires with
/// probability 1/2, and crops keep side lengths divisible by 32 so the result
/// still fits the detector's stride.
pub fn augment(scene: &AnnotatedScene, ops: &[AugmentOp], seed: u64) -> AnnotatedScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = scene.clone();
    for op in ops {
        out = match op {
            AugmentOp::Rotate => {
                let deg = rng.gen_range(-180.0..180.0);
                rotate(&out, deg)
            }
            AugmentOp::Hflip => {
                if rng.gen_bool(0.5) {
                    hflip(&out)
                } else {
                    out
                }
            }
            AugmentOp::Crop => {
                let (h, w) = out.dims();
                let (hs, ws) = (crop_sizes(h), crop_sizes(w));
                let mut chosen = None;
                if !hs.is_empty() && !ws.is_empty() {
                    for _ in 0..CROP_ATTEMPTS {
                        let ch = hs[rng.gen_range(0..hs.len())];
                        let cw = ws[rng.gen_range(0..ws.len())];
                        let y0 = rng.gen_range(0..=h - ch);
                        let x0 = rng.gen_range(0..=w - cw);
                        let window = PixelBox { x0, y0, x1: x0 + cw, y1: y0 + ch };
                        if crop_visibility_ok(&out, window) {
                            chosen = Some(window);
                            break;
                        }
                    }
                }
                match chosen.map(|w| crop(&out, w)) {
                    Some(Ok(s)) => s,
                    _ => out,
                }
            }
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> SceneConfig {
        SceneConfig {
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn single_worm_has_no_overlap() {
        let c = SceneConfig {
            worm_count_range: (1, 1),
            ..cfg(3)
        };
        let s = generate_scene(&c).unwrap();
        assert_eq!(s.instances.len(), 1);
        assert!(s.instances[0].overlap.is_empty());
    }

    #[test]
    fn forced_crossing_intersects() {
        for seed in 0..40 {
            let c = SceneConfig {
                worm_count_range: (2, 2),
                overlap_bias: 1.0,
                ..cfg(seed)
            };
            let s = generate_scene(&c).unwrap();
            let (a, b) = (&s.instances[0].amodal, &s.instances[1].amodal);
            let shared = a.bits().iter().zip(b.bits()).filter(|(&x, &y)| x == 1 && y == 1).count();
            assert!(shared >= 1, "seed {seed}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_scene(&cfg(11)).unwrap(), generate_scene(&cfg(11)).unwrap());
        assert_ne!(generate_scene(&cfg(11)).unwrap(), generate_scene(&cfg(12)).unwrap());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let small = SceneConfig {
            image_size: (32, 256),
            ..cfg(0)
        };
        assert!(generate_scene(&small).is_err());
        let zero = SceneConfig {
            worm_count_range: (0, 2),
            ..cfg(0)
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn worm_aspect_ratio_is_worm_like() {
        for seed in 0..20 {
            for worm in sample_worms(&cfg(seed)).unwrap() {
                let curve = spine_curve(&worm.spine, SAMPLES_PER_SEGMENT);
                let len: f64 = curve
                    .windows(2)
                    .map(|p| ((p[1][0] - p[0][0]).powi(2) + (p[1][1] - p[0][1]).powi(2)).sqrt())
                    .sum();
                let ratio = len / (2.0 * worm.half_width);
                assert!(ratio > 3.0 && ratio < 30.0, "ratio {ratio}");
            }
        }
    }

    #[test]
    fn render_rejects_bad_specs() {
        let spec = WormSpec {
            spine: vec![[10.0, 10.0], [20.0, 10.0], [30.0, 10.0]],
            half_width: 2.0,
            intensity: 0.5,
            z_order: 0,
        };
        assert!(render_worm(&spec, 64, 64).is_err());
        let spec = WormSpec {
            spine: vec![[10.0, 10.0], [20.0, 10.0], [30.0, 10.0], [40.0, 10.0]],
            half_width: 0.0,
            ..spec
        };
        assert!(render_worm(&spec, 64, 64).is_err());
    }

    #[test]
    fn hflip_is_an_involution_and_preserves_area() {
        let s = generate_scene(&cfg(5)).unwrap();
        let f = hflip(&s);
        for (a, b) in s.instances.iter().zip(&f.instances) {
            assert_eq!(a.amodal.count(), b.amodal.count());
        }
        assert_eq!(hflip(&f), s);
    }

    #[test]
    fn rotate_zero_is_identity() {
        let s = generate_scene(&cfg(6)).unwrap();
        let r = rotate(&s, 0.0);
        assert_eq!(r.instances, s.instances);
        for (a, b) in r.image.pixels.iter().zip(&s.image.pixels) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rotate_90_matches_index_remap() {
        let s = generate_scene(&SceneConfig {
            worm_count_range: (2, 2),
            ..cfg(8)
        })
        .unwrap();
        let (h, w) = s.dims();
        let r = rotate(&s, 90.0);
        // counter-clockwise quarter turn: dst(y, x) = src(x, w-1-y)
        for (orig, rot) in s.instances.iter().zip(&r.instances) {
            let expect = BinaryMask::from_fn(h, w, |y, x| orig.amodal.get(x, w - 1 - y)).unwrap();
            assert_eq!(rot.amodal, expect);
        }
        for y in 0..h {
            for x in 0..w {
                assert!((r.image.get(y, x) - s.image.get(x, w - 1 - y)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn crop_reestablishes_partition() {
        let s = generate_scene(&cfg(9)).unwrap();
        let out = augment(&s, &[AugmentOp::Crop], 4);
        out.validate().unwrap();
        assert_eq!(out.dims().0 % 32, 0);
        assert_eq!(out.dims().1 % 32, 0);
    }

    #[test]
    fn augment_is_deterministic_and_valid() {
        let s = generate_scene(&cfg(10)).unwrap();
        let ops = [AugmentOp::Rotate, AugmentOp::Crop, AugmentOp::Hflip];
        let a = augment(&s, &ops, 99);
        assert_eq!(a, augment(&s, &ops, 99));
        a.validate().unwrap();
    }
}
