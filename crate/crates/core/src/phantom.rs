//! Synthetic abdominal phantoms: a contrasted lumen inside an irregular
//! thrombus annulus, with spine and kidney-like distractors close to the
//! thrombus intensity. Also fold planning and per-slice bounding boxes.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::detect::BBox2D;
use crate::error::{invalid, CoreError, Result};
use crate::volume::{ValueKind, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    pub background: f64,
    pub lumen: f64,
    pub thrombus: f64,
    pub spine: f64,
    pub kidney: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Self { background: 0.0, lumen: 300.0, thrombus: 40.0, spine: 45.0, kidney: 42.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    /// In-plane position of the vessel axis, mm.
    pub center_mm: [f64; 2],
    /// Inclusive slice range carrying thrombus.
    pub thrombus_z: (usize, usize),
    pub lumen_radius_mm: f64,
    /// Mean outer radius of the thrombus, mm.
    pub outer_radius_mm: f64,
    /// Amplitude of the seeded radius variation along z and around the axis.
    pub irregularity_mm: f64,
    /// Fraction by which the thrombus thins towards both ends of its span.
    pub end_taper: f64,
    /// Amplitude of the in-plane wander of the vessel axis along z, mm.
    pub axis_drift_mm: f64,
    pub spine: bool,
    pub kidneys: bool,
    pub noise_std: f64,
    pub intensities: Intensities,
    /// Standard deviation, in slices, of simulated observer selections.
    pub observer_std_slices: f64,
}

impl PhantomSpec {
    /// Default desk-size phantom with geometry drawn from `seed`.
    pub fn desk(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0f7_ab1e);
        let start = rng.gen_range(8..=14);
        let len = rng.gen_range(20..=27);
        Self {
            seed,
            extents: [64, 64, 48],
            spacing: [1.0; 3],
            center_mm: [32.0 + rng.gen_range(-3.0..3.0), 30.0 + rng.gen_range(-3.0..3.0)],
            thrombus_z: (start, start + len - 1),
            lumen_radius_mm: rng.gen_range(4.0..5.0),
            outer_radius_mm: rng.gen_range(11.0..13.0),
            irregularity_mm: 2.0,
            end_taper: 0.4,
            axis_drift_mm: 1.5,
            spine: true,
            kidneys: true,
            noise_std: 5.0,
            intensities: Intensities::default(),
            observer_std_slices: 2.0,
        }
    }

    /// Override fields from a `key = value` file; unspecified fields keep the
    /// defaults of [`PhantomSpec::desk`] for the given (or default) seed.
    pub fn from_config(mut kv: KvConfig) -> Result<Self> {
        let seed = kv.take::<u64>("seed")?.unwrap_or(0);
        Self::desk_with(seed, kv)
    }

    /// [`PhantomSpec::desk`] for `seed` with the overrides in `kv`, which
    /// must not contain a `seed` key.
    pub fn desk_with(seed: u64, mut kv: KvConfig) -> Result<Self> {
        if kv.take_raw("seed").is_some() {
            return Err(CoreError::Config("`seed` is set per phantom, not in the file".into()));
        }
        let mut s = Self::desk(seed);
        if let Some(v) = kv.take_raw("extents") {
            s.extents = parse_triple(&v, "extents")?;
        }
        if let Some(v) = kv.take_raw("spacing") {
            s.spacing = parse_triple(&v, "spacing")?;
        }
        if let Some(v) = kv.take::<f64>("center_x_mm")? {
            s.center_mm[0] = v;
        }
        if let Some(v) = kv.take::<f64>("center_y_mm")? {
            s.center_mm[1] = v;
        }
        if let Some(v) = kv.take::<usize>("thrombus_zmin")? {
            s.thrombus_z.0 = v;
        }
        if let Some(v) = kv.take::<usize>("thrombus_zmax")? {
            s.thrombus_z.1 = v;
        }
        macro_rules! field {
            ($key:literal, $dst:expr) => {
                if let Some(v) = kv.take($key)? {
                    $dst = v;
                }
            };
        }
        field!("lumen_radius_mm", s.lumen_radius_mm);
        field!("outer_radius_mm", s.outer_radius_mm);
        field!("irregularity_mm", s.irregularity_mm);
        field!("end_taper", s.end_taper);
        field!("axis_drift_mm", s.axis_drift_mm);
        field!("spine", s.spine);
        field!("kidneys", s.kidneys);
        field!("noise_std", s.noise_std);
        field!("observer_std_slices", s.observer_std_slices);
        field!("background", s.intensities.background);
        field!("lumen", s.intensities.lumen);
        field!("thrombus", s.intensities.thrombus);
        field!("spine_level", s.intensities.spine);
        field!("kidney_level", s.intensities.kidney);
        kv.finish()?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let [nx, ny, nz] = self.extents;
        if nx == 0 || ny == 0 || nz == 0 || self.spacing.iter().any(|&s| s <= 0.0) {
            return Err(invalid("phantom extents and spacing must be positive"));
        }
        let (z0, z1) = self.thrombus_z;
        if z0 > z1 || z1 >= nz {
            return Err(invalid(format!("thrombus span {z0}..={z1} outside {nz} slices")));
        }
        if self.lumen_radius_mm <= 0.0 {
            return Err(invalid("lumen radius must be positive"));
        }
        if self.min_outer_radius() <= self.lumen_radius_mm + self.axis_drift_mm * 0.5 + self.spacing[0] {
            return Err(invalid(format!(
                "outer radius {:.2} mm (minimum over the span) does not enclose lumen radius {:.2} mm",
                self.min_outer_radius(),
                self.lumen_radius_mm
            )));
        }
        if !(0.0..1.0).contains(&self.end_taper) || self.noise_std < 0.0 || self.irregularity_mm < 0.0 {
            return Err(invalid("end_taper must be in [0, 1); noise and irregularity non-negative"));
        }
        Ok(())
    }

    fn min_outer_radius(&self) -> f64 {
        let thickness = (self.outer_radius_mm - self.lumen_radius_mm - 1.5 * self.irregularity_mm).max(0.0);
        self.lumen_radius_mm + thickness * (1.0 - self.end_taper)
    }

    /// Largest in-plane reach of the thrombus from the nominal axis, mm.
    pub fn max_outer_radius(&self) -> f64 {
        self.outer_radius_mm + 1.5 * self.irregularity_mm + self.axis_drift_mm
    }
}

fn parse_triple<T: std::str::FromStr + Copy>(v: &str, what: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = v
        .split_whitespace()
        .map(|p| p.parse::<T>().map_err(|_| invalid(format!("{what}: cannot parse `{v}`"))))
        .collect::<Result<_>>()?;
    <[T; 3]>::try_from(parts).map_err(|_| invalid(format!("{what}: expected three values")))
}

/// Image, truth mask and simulated observer slice selections.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub image: Volume,
    pub mask: Volume,
    pub observers: Vec<(usize, usize)>,
}

/// Sidecar record of observer selections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObserverRecord {
    pub observers: Vec<(usize, usize)>,
}

/// Smooth seeded profile in [-1, 1]: a few low-frequency sinusoids.
struct Wave {
    terms: Vec<(f64, f64, f64)>,
}

impl Wave {
    fn new(rng: &mut ChaCha8Rng, terms: usize, max_freq: f64) -> Self {
        let terms = (0..terms)
            .map(|_| {
                (
                    rng.gen_range(-1.0..1.0) / terms as f64,
                    rng.gen_range(0.3..max_freq),
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect();
        Self { terms }
    }

    fn at(&self, t: f64) -> f64 {
        self.terms.iter().map(|(a, f, p)| a * (2.0 * PI * f * t + p).sin()).sum()
    }
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [nx, ny, nz] = spec.extents;
    let [sx, sy, sz] = spec.spacing;
    let lv = spec.intensities;

    let radius_wave = Wave::new(&mut rng, 3, 2.5);
    let harmonics: Vec<(usize, f64, Wave)> = (2..=3)
        .map(|h| (h, rng.gen_range(0.0..2.0 * PI), Wave::new(&mut rng, 2, 1.5)))
        .collect();
    let drift_x = Wave::new(&mut rng, 2, 1.0);
    let drift_y = Wave::new(&mut rng, 2, 1.0);
    let ecc_x = Wave::new(&mut rng, 2, 1.5);
    let ecc_y = Wave::new(&mut rng, 2, 1.5);

    let (z0, z1) = spec.thrombus_z;
    let span = (z1 - z0 + 1) as f64;
    let reach = spec.max_outer_radius();
    let kidney_rx = 6.0;
    let kidney_ry = 8.0;
    let kidney_rz = 0.3 * nz as f64 * sz;
    let kidney_zc = z0 as f64 * sz;

    let mut image = vec![lv.background; nx * ny * nz];
    let mut mask = vec![0.0; nx * ny * nz];
    for z in 0..nz {
        let t = z as f64 / nz as f64;
        let zmm = z as f64 * sz;
        let cx = spec.center_mm[0] + spec.axis_drift_mm * drift_x.at(t);
        let cy = spec.center_mm[1] + spec.axis_drift_mm * drift_y.at(t);
        // The lumen sits slightly off-centre inside the thrombus.
        let lx = cx + 0.5 * spec.axis_drift_mm * ecc_x.at(t);
        let ly = cy + 0.5 * spec.axis_drift_mm * ecc_y.at(t);
        let in_span = (z0..=z1).contains(&z);
        let taper = if in_span {
            let u = (z - z0) as f64 + 0.5;
            1.0 - spec.end_taper * (1.0 - (PI * u / span).sin())
        } else {
            0.0
        };
        for y in 0..ny {
            let ymm = y as f64 * sy;
            for x in 0..nx {
                let xmm = x as f64 * sx;
                let i = x + nx * (y + ny * z);
                let mut v = lv.background;
                if spec.spine
                    && (xmm - spec.center_mm[0]).abs() <= 9.0
                    && ymm >= spec.center_mm[1] + reach + 3.0
                    && ymm <= spec.center_mm[1] + reach + 15.0
                {
                    v = lv.spine;
                }
                if spec.kidneys {
                    for side in [-1.0, 1.0] {
                        let kx = spec.center_mm[0] + side * (reach + 4.0 + kidney_rx);
                        let ky = spec.center_mm[1] + 2.0;
                        let d = ((xmm - kx) / kidney_rx).powi(2)
                            + ((ymm - ky) / kidney_ry).powi(2)
                            + ((zmm - kidney_zc) / kidney_rz).powi(2);
                        if d <= 1.0 {
                            v = lv.kidney;
                        }
                    }
                }
                let (dx, dy) = (xmm - cx, ymm - cy);
                let r = dx.hypot(dy);
                let r_lumen = (xmm - lx).hypot(ymm - ly);
                if in_span {
                    let theta = dy.atan2(dx);
                    let mut wobble = radius_wave.at(t);
                    for (h, phase, w) in &harmonics {
                        wobble += 0.5 * w.at(t) * (*h as f64 * theta + phase).cos();
                    }
                    let outer_nominal = spec.outer_radius_mm + spec.irregularity_mm * wobble;
                    let outer = spec.lumen_radius_mm + (outer_nominal - spec.lumen_radius_mm).max(0.0) * taper;
                    if r <= outer && r_lumen > spec.lumen_radius_mm {
                        v = lv.thrombus;
                        mask[i] = 1.0;
                    }
                }
                if r_lumen <= spec.lumen_radius_mm {
                    v = lv.lumen;
                }
                image[i] = v;
            }
        }
    }
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).map_err(|e| invalid(e.to_string()))?;
        for v in image.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let jitter = Normal::new(0.0, spec.observer_std_slices.max(1e-12)).map_err(|e| invalid(e.to_string()))?;
    let observers = (0..3)
        .map(|_| {
            let a = (z0 as f64 + jitter.sample(&mut rng)).round().clamp(0.0, (nz - 1) as f64) as usize;
            let b = (z1 as f64 + jitter.sample(&mut rng)).round().clamp(0.0, (nz - 1) as f64) as usize;
            (a.min(b), a.max(b))
        })
        .collect();
    Ok(Phantom {
        spec: spec.clone(),
        image: Volume::new(spec.extents, spec.spacing, image, ValueKind::Intensity)?,
        mask: Volume::new(spec.extents, spec.spacing, mask, ValueKind::Mask)?,
        observers,
    })
}

/// Write `<dir>/<stem>_image.mhd`, `<stem>_mask.mhd`, `<stem>_observers.json`
/// and `<stem>_spec.json`.
pub fn write_phantom(p: &Phantom, dir: &Path, stem: &str) -> Result<()> {
    crate::volume::write_volume(&p.image, &dir.join(format!("{stem}_image.mhd")))?;
    crate::volume::write_volume(&p.mask, &dir.join(format!("{stem}_mask.mhd")))?;
    let rec = ObserverRecord { observers: p.observers.clone() };
    std::fs::write(dir.join(format!("{stem}_observers.json")), serde_json::to_string_pretty(&rec)?)?;
    std::fs::write(dir.join(format!("{stem}_spec.json")), serde_json::to_string_pretty(&p.spec)?)?;
    Ok(())
}

/// Inverse of [`write_phantom`].
pub fn read_phantom(dir: &Path, stem: &str) -> Result<Phantom> {
    let image = crate::volume::read_volume(&dir.join(format!("{stem}_image.mhd")))?;
    let mask = crate::volume::read_volume(&dir.join(format!("{stem}_mask.mhd")))?;
    if mask.kind() != ValueKind::Mask || !mask.same_grid(&image) {
        return Err(invalid(format!("{stem}: mask is not a binary volume on the image grid")));
    }
    let rec: ObserverRecord = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}_observers.json")))?)?;
    let spec: PhantomSpec = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}_spec.json")))?)?;
    Ok(Phantom { spec, image, mask, observers: rec.observers })
}

/// Stems of every `<stem>_image.mhd` in `dir`, sorted.
pub fn list_phantoms(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix("_image.mhd") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    Ok(stems)
}

/// Tight half-open bounding box of the foreground in each slice.
pub fn mask_to_bboxes(mask: &Volume) -> Vec<Option<BBox2D>> {
    let [nx, ny, nz] = mask.extents();
    (0..nz)
        .map(|z| {
            let s = mask.slice(z);
            let mut b: Option<(usize, usize, usize, usize)> = None;
            for y in 0..ny {
                for x in 0..nx {
                    if s[x + nx * y] == 1.0 {
                        b = Some(match b {
                            None => (x, y, x + 1, y + 1),
                            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                        });
                    }
                }
            }
            b.map(|(x0, y0, x1, y1)| BBox2D {
                z,
                xmin: x0 as f64,
                ymin: y0 as f64,
                xmax: x1 as f64,
                ymax: y1 as f64,
                score: 1.0,
            })
        })
        .collect()
}

/// Assignment of dataset ids to cross-validation folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_count: usize,
    pub assignment: BTreeMap<usize, usize>,
    pub seed: u64,
}

impl FoldPlan {
    /// Datasets tested in `fold`. With a single fold, the plan degenerates to
    /// a plain split: the fold's test set holds a quarter of the datasets.
    pub fn test_ids(&self, fold: usize) -> Vec<usize> {
        self.assignment.iter().filter(|(_, &f)| f == fold).map(|(&id, _)| id).collect()
    }

    pub fn train_ids(&self, fold: usize) -> Vec<usize> {
        self.assignment.iter().filter(|(_, &f)| f != fold).map(|(&id, _)| id).collect()
    }
}

/// Seeded shuffle then round-robin assignment.
pub fn make_folds(dataset_ids: &[usize], fold_count: usize, seed: u64) -> Result<FoldPlan> {
    if fold_count == 0 || fold_count > dataset_ids.len() {
        return Err(invalid(format!(
            "cannot split {} datasets into {fold_count} folds",
            dataset_ids.len()
        )));
    }
    let mut ids = dataset_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != dataset_ids.len() {
        return Err(invalid("dataset ids must be unique"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignment = if fold_count == 1 {
        // Plain train/test split: fold 0 tests a quarter, the rest train
        // under the out-of-range fold index 1.
        let test = (ids.len() / 4).max(1);
        ids.iter().enumerate().map(|(i, &id)| (id, if i < test { 0 } else { 1 })).collect()
    } else {
        ids.iter().enumerate().map(|(i, &id)| (id, i % fold_count)).collect()
    };
    Ok(FoldPlan { fold_count, assignment, seed })
}

/// Seeded choice of `round(fraction * n)` items (at least one when `n >= 2`)
/// reserved for validation.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let mut count = (fraction * n as f64).round() as usize;
    if n >= 2 {
        count = count.clamp(1, n - 1);
    } else {
        count = 0;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![false; n];
    for &i in &idx[..count] {
        out[i] = true;
    }
    out
}
