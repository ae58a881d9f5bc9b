//! Procedurally rendered pedestrians for desk-scale runs.
//!
//! A figure is split into four horizontal bands (head, upper torso, lower
//! torso, legs). Each band carries a colour and a texture; an identity is a
//! tuple of band attributes, and every band value is shared by at least two
//! identities, so no single band identifies a person. Cameras differ in
//! illumination and tint, figures are jittered and some images carry an
//! occluding horizontal bar.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ingest::{format_name, ingest, ParsedName, GALLERY_DIR, QUERY_DIR, TRAIN_DIR};
use super::DatasetManifest;
use crate::error::IoContext;
use crate::image::Image;
use crate::{Error, Result};

pub const BANDS: usize = 4;
const TEXTURES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Total identities; the last `test_identities` are held out.
    pub identities: usize,
    pub test_identities: usize,
    pub images_per_identity: usize,
    pub queries_per_identity: usize,
    pub cameras: u32,
    pub height: usize,
    pub width: usize,
    /// Number of distinct band colours.
    pub palette: usize,
    /// Distinct `(colour, texture)` values used per band; fewer values make
    /// identities share more bands.
    pub values_per_band: usize,
    /// Probability that an image carries an occluder bar.
    pub occlusion_rate: f64,
    /// Brightness drop of the darkest camera, in `[0, 1)`.
    pub illumination: f32,
    /// Maximum figure displacement in pixels.
    pub jitter: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            identities: 24,
            test_identities: 8,
            images_per_identity: 10,
            queries_per_identity: 3,
            cameras: 2,
            height: 64,
            width: 32,
            palette: 9,
            values_per_band: 4,
            occlusion_rate: 0.4,
            illumination: 0.5,
            jitter: 3,
            noise: 0.12,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.test_identities == 0 || self.test_identities >= self.identities {
            return bad("need at least one training and one test identity");
        }
        if self.cameras < 2 {
            return bad("at least two cameras are required");
        }
        if self.images_per_identity < 2 || self.queries_per_identity == 0 {
            return bad("each identity needs a query and a gallery image");
        }
        if self.height < 16 || self.width < 8 {
            return bad("images must be at least 16x8");
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) || !(0.0..1.0).contains(&self.illumination) {
            return bad("occlusion rate and illumination must be fractions");
        }
        if self.palette < 2 {
            return bad("palette needs at least two colours");
        }
        let per_band = self.values_per_band.min(self.palette * TEXTURES);
        if per_band < 2 || self.identities < 2 * per_band || per_band.pow(BANDS as u32) < 2 * self.identities {
            return bad("too few identities or colours to share every band value");
        }
        Ok(())
    }
}

/// Ground truth kept alongside each rendered file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    /// `(colour, texture)` per band.
    pub code: Vec<(usize, usize)>,
    pub occluded: bool,
}

type Code = Vec<(usize, usize)>;

/// Identity codes where every band value is used by at least two identities.
fn identity_codes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Code> {
    let n = spec.identities;
    let values: Vec<(usize, usize)> = (0..spec.palette)
        .flat_map(|c| (0..TEXTURES).map(move |t| (c, t)))
        .collect();
    let per_band = spec.values_per_band.min(values.len());
    loop {
        let columns: Vec<Vec<(usize, usize)>> = (0..BANDS)
            .map(|_| {
                let mut chosen = values.clone();
                chosen.shuffle(rng);
                chosen.truncate(per_band);
                let mut col: Vec<_> = (0..n).map(|i| chosen[i % per_band]).collect();
                col.shuffle(rng);
                col
            })
            .collect();
        let codes: Vec<Code> = (0..n).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
        if codes.iter().collect::<BTreeSet<_>>().len() == n {
            return codes;
        }
    }
}

fn palette_colour(i: usize, n: usize) -> [f32; 3] {
    // Evenly spaced hues at two saturation levels.
    let hue = (i as f32 * 0.618_034) % 1.0;
    let sat = if i.is_multiple_of(2) { 0.75 } else { 0.45 };
    let val = 0.55 + 0.35 * ((i * 7 % n.max(1)) as f32 / n.max(1) as f32);
    hsv(hue, sat, val)
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn texture(t: usize, y: usize, x: usize) -> f32 {
    match t {
        0 => 1.0,
        1 => {
            if (y / 2).is_multiple_of(2) {
                1.0
            } else {
                0.55
            }
        }
        _ => {
            if (x / 2).is_multiple_of(2) {
                1.0
            } else {
                0.55
            }
        }
    }
}

fn render(spec: &SyntheticSpec, code: &Code, camera: u32, occluded: bool, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (spec.height, spec.width);
    let cam = (camera - 1) as f32 / (spec.cameras - 1).max(1) as f32;
    let gain = 1.0 - spec.illumination * cam;
    let tint = [1.0 + 0.08 * cam, 1.0, 1.0 - 0.08 * cam];
    let background = [0.35 + 0.2 * cam, 0.4, 0.45 - 0.15 * cam];
    let j = spec.jitter as i64;
    let dy = rng.random_range(-j..=j);
    let dx = rng.random_range(-j..=j);
    let brightness: f32 = rng.random_range(0.9..1.1);
    let (top, bottom) = (h as i64 / 32 + dy, h as i64 - h as i64 / 32 + dy);
    let (left, right) = (w as i64 / 5 + dx, w as i64 - w as i64 / 5 + dx);
    let band_h = (bottom - top) as f32 / BANDS as f32;
    let mut data = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as i64, x as i64);
            let px = if yi >= top && yi < bottom && xi >= left && xi < right {
                let band = (((yi - top) as f32 / band_h) as usize).min(BANDS - 1);
                let (colour, tex) = code[band];
                let narrow = band == 0 && (xi < left + (right - left) / 4 || xi >= right - (right - left) / 4);
                if narrow {
                    background
                } else {
                    let c = palette_colour(colour, spec.palette);
                    let k = texture(tex, (yi - top) as usize, (xi - left) as usize);
                    [c[0] * k, c[1] * k, c[2] * k]
                }
            } else {
                background
            };
            for ch in 0..3 {
                data[[ch, y, x]] = px[ch] * gain * tint[ch] * brightness;
            }
        }
    }
    if occluded {
        let bar = rng.random_range(h / 6..=h / 4);
        let y0 = rng.random_range(0..=h - bar);
        let grey: f32 = rng.random_range(0.1..0.9);
        data.slice_mut(ndarray::s![.., y0..y0 + bar, ..]).fill(grey);
    }
    let noise = Normal::new(0.0f32, spec.noise.max(0.0)).expect("finite noise level");
    data.mapv_inplace(|v| (v + noise.sample(rng)).clamp(0.0, 1.0));
    Image::new(data)
}

/// Renders the dataset under `root` in the Market-1501 layout, ingests it
/// and stores the manifest (with per-file ground truth) next to the images.
/// Identical specs produce byte-identical files.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let codes = identity_codes(spec, &mut rng);
    let first_test = spec.identities - spec.test_identities;
    for dir in [TRAIN_DIR, QUERY_DIR, GALLERY_DIR] {
        let d = root.join(dir);
        if d.exists() {
            fs::remove_dir_all(&d).at(&d)?;
        }
        fs::create_dir_all(&d).at(&d)?;
    }
    let jobs: Vec<(usize, usize)> = (0..spec.identities)
        .flat_map(|id| (0..spec.images_per_identity).map(move |k| (id, k)))
        .collect();
    let metas = jobs
        .par_iter()
        .map(|&(id, k)| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                spec.seed ^ ((id as u64) << 32 | k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            );
            let camera = (k as u32 % spec.cameras) + 1;
            let occluded = rng.random_bool(spec.occlusion_rate);
            let img = render(spec, &codes[id], camera, occluded, &mut rng);
            let dir = if id < first_test {
                TRAIN_DIR
            } else if camera == 1 && k / (spec.cameras as usize) < spec.queries_per_identity {
                QUERY_DIR
            } else {
                GALLERY_DIR
            };
            let name = format_name(
                &ParsedName {
                    identity: id as i64 + 1,
                    camera,
                    sequence: 1,
                    frame: k as u32,
                    index: 0,
                },
                "png",
            );
            let rel = format!("{dir}/{name}");
            img.save_png(&root.join(&rel))?;
            Ok((
                rel,
                SyntheticMeta {
                    code: codes[id].clone(),
                    occluded,
                },
            ))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut manifest = ingest(root, "synthetic")?;
    manifest.synthetic = metas;
    manifest.save(root)?;
    Ok(manifest)
}
