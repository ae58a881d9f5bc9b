//! View geometry, deterministic view cropping, stage-dependent augmentation
//! and the erasure overlap used to mask regression losses.
//!
//! A view is a horizontal stripe of the pedestrian crop given by two
//! fractions of the image height, together with the resolution the stripe
//! is resized to. Stripe boundaries are `round(frac * H)` with halves
//! rounded up, computed in exact integer arithmetic.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::{Image, Interpolation};
use crate::{Error, Result};

pub const HOLISTIC: &str = "Holistic";
pub const GROUP1: [&str; 3] = ["Up1", "Mid1", "Dn1"];
pub const GROUP2: [&str; 3] = ["Up2", "Mid2", "Dn2"];

/// Non-negative rational `num/den`, serialized as `"num/den"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fraction {
    pub num: u32,
    pub den: u32,
}

impl Fraction {
    pub const ZERO: Fraction = Fraction { num: 0, den: 1 };
    pub const ONE: Fraction = Fraction { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 {
            return Err(Error::Config(format!("fraction {num}/0 has a zero denominator")));
        }
        Ok(Self { num, den })
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `round(self * n)` with halves rounded up.
    pub fn round_mul(self, n: usize) -> usize {
        let (num, den, n) = (self.num as u64, self.den as u64, n as u64);
        ((2 * num * n + den) / (2 * den)) as usize
    }

    fn cmp_value(self, other: Fraction) -> std::cmp::Ordering {
        (self.num as u64 * other.den as u64).cmp(&(other.num as u64 * self.den as u64))
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("expected a fraction like \"1/4\", got {s:?}"));
        let (n, d) = s.split_once('/').ok_or_else(bad)?;
        let num = n.trim().parse().map_err(|_| bad())?;
        let den = d.trim().parse().map_err(|_| bad())?;
        Fraction::new(num, den)
    }
}

impl Serialize for Fraction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub name: String,
    pub top: Fraction,
    pub bottom: Fraction,
    pub out_height: usize,
    pub out_width: usize,
    #[serde(default)]
    pub interpolation: Interpolation,
}

impl ViewSpec {
    pub fn new(name: &str, top: Fraction, bottom: Fraction, out_height: usize, out_width: usize) -> Result<Self> {
        let spec = Self {
            name: name.to_string(),
            top,
            bottom,
            out_height,
            out_width,
            interpolation: Interpolation::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.top.cmp_value(self.bottom).is_lt()
            && self.bottom.cmp_value(Fraction::ONE).is_le()
            && self.out_height > 0
            && self.out_width > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "view {} needs 0 <= top < bottom <= 1 and a non-empty output size (got {}-{}, {}x{})",
                self.name, self.top, self.bottom, self.out_height, self.out_width
            )))
        }
    }

    pub fn is_holistic(&self) -> bool {
        self.top.num == 0 && self.bottom.num == self.bottom.den
    }

    /// Number of uniform stripes the image is divided into for this view's group.
    pub fn stripe_count(&self) -> usize {
        self.top.den.max(self.bottom.den) as usize
    }

    /// Pixel rows `[start, end)` of this view in an image of `height` rows.
    pub fn row_range(&self, height: usize) -> (usize, usize) {
        (self.top.round_mul(height), self.bottom.round_mul(height))
    }
}

/// Ordered set of views; order defines view ids used in caches and models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ViewRegistry {
    pub views: Vec<ViewSpec>,
}

impl ViewRegistry {
    /// The seven views: holistic at 256x128, two partial groups at 224x224.
    pub fn canonical() -> Self {
        Self::with_resolutions((256, 128), (224, 224))
    }

    /// Canonical fractions with custom output sizes (desk-scale experiments).
    pub fn with_resolutions(holistic: (usize, usize), partial: (usize, usize)) -> Self {
        let f = |n, d| Fraction { num: n, den: d };
        let p = |name: &str, t, b| ViewSpec {
            name: name.into(),
            top: t,
            bottom: b,
            out_height: partial.0,
            out_width: partial.1,
            interpolation: Interpolation::default(),
        };
        Self {
            views: vec![
                ViewSpec {
                    name: HOLISTIC.into(),
                    top: Fraction::ZERO,
                    bottom: Fraction::ONE,
                    out_height: holistic.0,
                    out_width: holistic.1,
                    interpolation: Interpolation::default(),
                },
                p("Up1", f(1, 4), f(2, 4)),
                p("Mid1", f(2, 4), f(3, 4)),
                p("Dn1", f(3, 4), f(4, 4)),
                p("Up2", f(1, 7), f(3, 7)),
                p("Mid2", f(3, 7), f(5, 7)),
                p("Dn2", f(5, 7), f(7, 7)),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Config("view registry is empty".into()));
        }
        for (i, v) in self.views.iter().enumerate() {
            v.validate()?;
            if self.views[..i].iter().any(|o| o.name == v.name) {
                return Err(Error::Config(format!("duplicate view name {}", v.name)));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ViewSpec> {
        self.views.iter().find(|v| v.name == name)
    }

    pub fn holistic(&self) -> Option<&ViewSpec> {
        self.views.iter().find(|v| v.is_holistic())
    }

    /// Keeps only the named views, in registry order.
    pub fn subset(&self, names: &[String]) -> Result<ViewRegistry> {
        for n in names {
            if self.get(n).is_none() {
                return Err(Error::Config(format!("unknown view {n}")));
            }
        }
        Ok(ViewRegistry {
            views: self.views.iter().filter(|v| names.contains(&v.name)).cloned().collect(),
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.views.iter().map(|v| v.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Extracts the view's stripe over the full width and resizes it.
pub fn crop_view(image: &Image, spec: &ViewSpec) -> Result<Image> {
    let h = image.height();
    if h < spec.stripe_count() || image.width() == 0 {
        return Err(Error::Geometry(format!(
            "image of {}x{} is too small for view {} ({} stripes)",
            h,
            image.width(),
            spec.name,
            spec.stripe_count()
        )));
    }
    let (r0, r1) = spec.row_range(h);
    if r0 >= r1 {
        return Err(Error::Geometry(format!(
            "view {} has an empty stripe at height {h}",
            spec.name
        )));
    }
    Ok(image
        .rows(r0, r1)
        .resize(spec.out_height, spec.out_width, spec.interpolation))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentStage {
    PartialTeacher,
    HolisticOrInitialStudent,
    FinalStudent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentOps {
    pub flip: bool,
    pub erasing: bool,
    pub crop: bool,
    pub color: bool,
    pub rotation: bool,
}

impl AugmentStage {
    pub fn ops(self) -> AugmentOps {
        match self {
            AugmentStage::PartialTeacher => AugmentOps {
                flip: true,
                erasing: true,
                crop: true,
                color: true,
                rotation: true,
            },
            AugmentStage::HolisticOrInitialStudent => AugmentOps {
                flip: true,
                erasing: true,
                crop: true,
                color: false,
                rotation: false,
            },
            AugmentStage::FinalStudent => AugmentOps {
                flip: true,
                erasing: true,
                crop: false,
                color: false,
                rotation: false,
            },
        }
    }

    /// Training stage for a teacher of the given view.
    pub fn for_teacher(spec: &ViewSpec) -> Self {
        if spec.is_holistic() {
            AugmentStage::HolisticOrInitialStudent
        } else {
            AugmentStage::PartialTeacher
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub flip_prob: f64,
    pub erase_prob: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
    pub erase_retries: usize,
    pub crop_pad: usize,
    pub rotation_degrees: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            erase_prob: 0.5,
            erase_area: (0.02, 0.4),
            erase_aspect: (0.3, 3.33),
            erase_retries: 100,
            crop_pad: 4,
            rotation_degrees: 10.0,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
        }
    }
}

/// Half-open rectangle `[row0, row1) x [col0, col1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EraseRecord {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
    pub present: bool,
}

impl EraseRecord {
    pub const NONE: EraseRecord = EraseRecord {
        row0: 0,
        row1: 0,
        col0: 0,
        col1: 0,
        present: false,
    };

    pub fn rect(row0: usize, row1: usize, col0: usize, col1: usize) -> Self {
        Self {
            row0,
            row1,
            col0,
            col1,
            present: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub image: Image,
    pub flip_applied: bool,
    /// Erased rectangle in the coordinates of the input image.
    pub erase: EraseRecord,
}

/// Applies the ops enabled for `stage`, in the order flip, crop, color,
/// rotation, erasing. Identical inputs and seed give identical outputs.
pub fn augment(image: &Image, stage: AugmentStage, params: &AugmentParams, seed: u64) -> Augmented {
    let ops = stage.ops();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (image.height(), image.width());
    let mut img = image.clone();

    let mut flip_applied = false;
    if ops.flip && rng.random_bool(params.flip_prob) {
        img = img.flip_horizontal();
        flip_applied = true;
    }

    // Translation of output pixels relative to the input: input = output + shift.
    let (mut dy, mut dx) = (0isize, 0isize);
    if ops.crop && params.crop_pad > 0 {
        let pad = params.crop_pad;
        let oy = rng.random_range(0..=2 * pad);
        let ox = rng.random_range(0..=2 * pad);
        img = shift_crop(&img, oy as isize - pad as isize, ox as isize - pad as isize);
        dy = oy as isize - pad as isize;
        dx = ox as isize - pad as isize;
    }

    if ops.color {
        color_jitter(&mut img, params, &mut rng);
    }

    if ops.rotation && params.rotation_degrees > 0.0 {
        let deg = rng.random_range(-params.rotation_degrees..=params.rotation_degrees);
        img = rotate(&img, deg.to_radians());
    }

    let mut erase = EraseRecord::NONE;
    if ops.erasing && rng.random_bool(params.erase_prob) {
        if let Some(r) = random_erase(&mut img, params, &mut rng) {
            erase = to_input_coords(r, dy, dx, flip_applied, h, w);
        }
    }

    Augmented {
        image: img,
        flip_applied,
        erase,
    }
}

/// Output pixel `(y, x)` takes input pixel `(y + dy, x + dx)`; outside is zero.
fn shift_crop(img: &Image, dy: isize, dx: isize) -> Image {
    let (c, h, w) = img.data.dim();
    let mut out = ndarray::Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx >= 0 && sx < w as isize {
                    out[[ch, y, x]] = img.data[[ch, sy as usize, sx as usize]];
                }
            }
        }
    }
    Image::new(out)
}

fn color_jitter(img: &mut Image, params: &AugmentParams, rng: &mut ChaCha8Rng) {
    let factor = |rng: &mut ChaCha8Rng, amount: f64| {
        if amount > 0.0 {
            rng.random_range(1.0 - amount..=1.0 + amount) as f32
        } else {
            1.0
        }
    };
    let b = factor(rng, params.brightness);
    let c = factor(rng, params.contrast);
    let s = factor(rng, params.saturation);
    let (_, h, w) = img.data.dim();
    img.data.mapv_inplace(|v| v * b);
    let gray = |d: &ndarray::Array3<f32>, y: usize, x: usize| {
        0.299 * d[[0, y, x]] + 0.587 * d[[1, y, x]] + 0.114 * d[[2, y, x]]
    };
    let mean = {
        let mut acc = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                acc += gray(&img.data, y, x) as f64;
            }
        }
        (acc / (h * w).max(1) as f64) as f32
    };
    img.data.mapv_inplace(|v| (v - mean) * c + mean);
    for y in 0..h {
        for x in 0..w {
            let g = gray(&img.data, y, x);
            for ch in 0..3 {
                img.data[[ch, y, x]] = (img.data[[ch, y, x]] - g) * s + g;
            }
        }
    }
    img.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

/// Rotation about the image centre with bilinear sampling and zero fill.
fn rotate(img: &Image, radians: f64) -> Image {
    let (c, h, w) = img.data.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = radians.sin_cos();
    let mut out = ndarray::Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let (ry, rx) = (y as f64 - cy, x as f64 - cx);
            let sy = cos * ry - sin * rx + cy;
            let sx = sin * ry + cos * rx + cx;
            if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
                continue;
            }
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for ch in 0..c {
                let d = &img.data;
                let top = d[[ch, y0, x0]] * (1.0 - fx) + d[[ch, y0, x1]] * fx;
                let bot = d[[ch, y1, x0]] * (1.0 - fx) + d[[ch, y1, x1]] * fx;
                out[[ch, y, x]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Image::new(out)
}

/// Erases a random rectangle with uniform noise. Returns it in the image's
/// own coordinates, or `None` when every attempt was degenerate.
fn random_erase(img: &mut Image, params: &AugmentParams, rng: &mut ChaCha8Rng) -> Option<EraseRecord> {
    let (c, h, w) = img.data.dim();
    let area = (h * w) as f64;
    for _ in 0..params.erase_retries {
        let target = rng.random_range(params.erase_area.0..=params.erase_area.1) * area;
        let aspect = rng.random_range(params.erase_aspect.0..=params.erase_aspect.1);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let r0 = rng.random_range(0..=h - eh);
        let c0 = rng.random_range(0..=w - ew);
        for ch in 0..c {
            for y in r0..r0 + eh {
                for x in c0..c0 + ew {
                    img.data[[ch, y, x]] = rng.random::<f32>();
                }
            }
        }
        return Some(EraseRecord::rect(r0, r0 + eh, c0, c0 + ew));
    }
    None
}

/// Maps a rectangle from augmented coordinates back through the crop shift
/// and the flip, clipped to the input bounds.
fn to_input_coords(r: EraseRecord, dy: isize, dx: isize, flipped: bool, h: usize, w: usize) -> EraseRecord {
    let clip = |a: isize, hi: usize| a.clamp(0, hi as isize) as usize;
    let row0 = clip(r.row0 as isize + dy, h);
    let row1 = clip(r.row1 as isize + dy, h);
    let mut col0 = clip(r.col0 as isize + dx, w);
    let mut col1 = clip(r.col1 as isize + dx, w);
    if flipped {
        (col0, col1) = (w - col1, w - col0);
    }
    if row0 >= row1 || col0 >= col1 {
        return EraseRecord::NONE;
    }
    EraseRecord::rect(row0, row1, col0, col1)
}

/// Fraction of the view's stripe (in an `height x width` image) covered by
/// the erased rectangle.
pub fn erase_overlap_fraction(erase: &EraseRecord, spec: &ViewSpec, height: usize, width: usize) -> f64 {
    if !erase.present {
        return 0.0;
    }
    let (s0, s1) = spec.row_range(height);
    let stripe = (s1.saturating_sub(s0) * width) as f64;
    if stripe == 0.0 {
        return 0.0;
    }
    let rows = erase.row1.min(s1).saturating_sub(erase.row0.max(s0));
    let cols = erase.col1.min(width).saturating_sub(erase.col0);
    (rows * cols) as f64 / stripe
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Axis};
    use proptest::prelude::*;

    fn gradient_image(h: usize, w: usize) -> Image {
        Image::new(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            ((c * 31 + y * 7 + x * 3) % 97) as f32 / 97.0
        }))
    }

    #[test]
    fn fraction_parses_and_prints() {
        let f: Fraction = "3/7".parse().unwrap();
        assert_eq!(f, Fraction { num: 3, den: 7 });
        assert_eq!(f.to_string(), "3/7");
        assert!("3".parse::<Fraction>().is_err());
        assert!("1/0".parse::<Fraction>().is_err());
    }

    #[test]
    fn rounding_is_half_up() {
        let half = Fraction { num: 1, den: 2 };
        assert_eq!(half.round_mul(3), 2);
        assert_eq!(Fraction { num: 1, den: 4 }.round_mul(6), 2);
        assert_eq!(Fraction { num: 1, den: 7 }.round_mul(4), 1);
    }

    #[test]
    fn holistic_crop_resizes_whole_image() {
        let reg = ViewRegistry::canonical();
        let img = gradient_image(500, 200);
        let out = crop_view(&img, reg.get(HOLISTIC).unwrap()).unwrap();
        assert_eq!((out.height(), out.width()), (256, 128));
    }

    #[test]
    fn up1_takes_second_quarter() {
        let reg = ViewRegistry::canonical();
        let up1 = reg.get("Up1").unwrap();
        assert_eq!(up1.row_range(400), (100, 200));
        let img = gradient_image(400, 160);
        let out = crop_view(&img, up1).unwrap();
        assert_eq!((out.height(), out.width()), (224, 224));
        let direct = img.rows(100, 200).resize_bilinear(224, 224);
        assert_eq!(out, direct);
    }

    #[test]
    fn smallest_legal_stripe() {
        let reg = ViewRegistry::canonical();
        let dn1 = reg.get("Dn1").unwrap();
        assert_eq!(dn1.row_range(4), (3, 4));
        assert!(crop_view(&gradient_image(4, 4), dn1).is_ok());
        let err = crop_view(&gradient_image(3, 4), dn1).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
        assert!(crop_view(&gradient_image(6, 4), reg.get("Up2").unwrap()).is_err());
    }

    #[test]
    fn interpolation_is_per_view() {
        let img = gradient_image(8, 4);
        let mut spec = ViewSpec::new("Up1", Fraction::new(1, 4).unwrap(), Fraction::new(2, 4).unwrap(), 4, 4).unwrap();
        assert_eq!(spec.interpolation, Interpolation::Bilinear);
        spec.interpolation = Interpolation::Nearest;
        let out = crop_view(&img, &spec).unwrap();
        assert_eq!(out, img.rows(2, 4).resize_nearest(4, 4));
        assert_eq!(out.data.index_axis(Axis(1), 0), img.data.index_axis(Axis(1), 2));
    }

    #[test]
    fn registry_serializes_fractions_as_strings() {
        #[derive(Serialize, Deserialize)]
        struct Doc {
            views: ViewRegistry,
        }
        let reg = ViewRegistry::canonical();
        let text = toml::to_string(&Doc { views: reg.clone() }).unwrap();
        assert!(text.contains("[[views]]"));
        assert!(text.contains("\"1/7\""));
        let back: Doc = toml::from_str(&text).unwrap();
        assert_eq!(back.views, reg);
    }

    #[test]
    fn final_student_never_jitters_color_or_rotates() {
        let img = gradient_image(32, 16);
        let params = AugmentParams {
            erase_prob: 0.0,
            ..Default::default()
        };
        for seed in 0..40 {
            let out = augment(&img, AugmentStage::FinalStudent, &params, seed);
            let expected = if out.flip_applied {
                img.flip_horizontal()
            } else {
                img.clone()
            };
            assert_eq!(out.image, expected, "seed {seed}");
        }
    }

    #[test]
    fn flip_is_reported() {
        let img = gradient_image(16, 8);
        let params = AugmentParams {
            flip_prob: 1.0,
            erase_prob: 0.0,
            ..Default::default()
        };
        let out = augment(&img, AugmentStage::FinalStudent, &params, 3);
        assert!(out.flip_applied);
        assert_eq!(out.image.flip_horizontal(), img);
    }

    #[test]
    fn erasing_records_an_in_bounds_rect() {
        let img = gradient_image(64, 32);
        let params = AugmentParams {
            erase_prob: 1.0,
            ..Default::default()
        };
        for seed in 0..50 {
            let out = augment(&img, AugmentStage::PartialTeacher, &params, seed);
            let e = out.erase;
            assert!(e.present, "seed {seed}");
            assert!(e.row0 < e.row1 && e.row1 <= 64 && e.col0 < e.col1 && e.col1 <= 32);
        }
    }

    #[test]
    fn erase_rect_maps_back_through_flip() {
        let img = Image::filled(20, 10, [0.0, 0.0, 0.0]);
        let params = AugmentParams {
            flip_prob: 1.0,
            erase_prob: 1.0,
            ..Default::default()
        };
        let out = augment(&img, AugmentStage::FinalStudent, &params, 11);
        let e = out.erase;
        // Erased pixels are noise in the flipped output; mirror them back.
        let restored = out.image.flip_horizontal();
        for y in 0..20 {
            for x in 0..10 {
                let inside = y >= e.row0 && y < e.row1 && x >= e.col0 && x < e.col1;
                let touched = (0..3).any(|c| restored.data[[c, y, x]] != 0.0);
                if touched {
                    assert!(inside, "pixel ({y},{x}) erased outside record {e:?}");
                }
            }
        }
    }

    #[test]
    fn overlap_examples() {
        let reg = ViewRegistry::canonical();
        let up1 = reg.get("Up1").unwrap();
        assert_eq!(
            erase_overlap_fraction(&EraseRecord::rect(0, 400, 0, 160), up1, 400, 160),
            1.0
        );
        assert_eq!(erase_overlap_fraction(&EraseRecord::NONE, up1, 400, 160), 0.0);
        assert_eq!(
            erase_overlap_fraction(&EraseRecord::rect(100, 150, 0, 160), up1, 400, 160),
            0.5
        );
    }

    proptest! {
        #[test]
        fn augment_is_pure(seed in any::<u64>(), stage in 0usize..3) {
            let stage = [AugmentStage::PartialTeacher, AugmentStage::HolisticOrInitialStudent, AugmentStage::FinalStudent][stage];
            let img = gradient_image(24, 12);
            let p = AugmentParams::default();
            let a = augment(&img, stage, &p, seed);
            let b = augment(&img, stage, &p, seed);
            prop_assert_eq!(a.image, b.image);
            prop_assert_eq!(a.flip_applied, b.flip_applied);
            prop_assert_eq!(a.erase, b.erase);
        }

        #[test]
        fn overlap_is_monotone(
            r0 in 0usize..60, dr in 1usize..40, c0 in 0usize..30, dc in 1usize..20,
            grow in 0usize..10, view in 0usize..7,
        ) {
            let reg = ViewRegistry::canonical();
            let spec = &reg.views[view];
            let (h, w) = (64, 32);
            let small = EraseRecord::rect(r0.min(h - 1), (r0 + dr).min(h), c0.min(w - 1), (c0 + dc).min(w));
            let big = EraseRecord::rect(
                small.row0.saturating_sub(grow), (small.row1 + grow).min(h),
                small.col0.saturating_sub(grow), (small.col1 + grow).min(w),
            );
            let a = erase_overlap_fraction(&small, spec, h, w);
            let b = erase_overlap_fraction(&big, spec, h, w);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(b >= a);
        }

        #[test]
        fn holistic_crop_is_idempotent(h in 1usize..20, w in 1usize..20) {
            let spec = ViewSpec::new(HOLISTIC, Fraction::ZERO, Fraction::ONE, h, w).unwrap();
            let once = crop_view(&gradient_image(h + 5, w + 3), &spec).unwrap();
            let twice = crop_view(&once, &spec).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
