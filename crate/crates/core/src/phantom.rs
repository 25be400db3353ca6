//! Synthetic two-domain cardiac phantoms with exact label masks.
//!
//! Geometry is shared by both domains: a filled LV disk, a myocardial annulus
//! around it and an optional RV crescent hugging the epicardium. The domains
//! differ only in appearance. Source slices are sharp with strong blood-pool
//! contrast; target slices carry bright intra-myocardial patches, blurred
//! boundaries and heavier noise.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageSlice, LabelMask, BG, LV, MYO, RV};
use crate::imageio;
use crate::manifest::{DatasetManifest, Domain, ManifestEntry, MANIFEST_FILE};

/// Mean intensity of each class in `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityProfile {
    pub background: f64,
    pub lv: f64,
    pub myo: f64,
    pub rv: f64,
}

impl IntensityProfile {
    fn of(&self, label: u8) -> f64 {
        match label {
            LV => self.lv,
            MYO => self.myo,
            RV => self.rv,
            _ => self.background,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub image_size: usize,
    /// LV radius as a fraction of the image side.
    pub lv_radius_range: (f64, f64),
    /// Myocardial wall thickness as a fraction of the image side.
    pub myo_thickness_range: (f64, f64),
    pub rv_crescent: bool,
    /// Angular extent of the RV crescent in degrees.
    pub rv_angle_range_deg: (f64, f64),
    pub scar_patch_count_range: (u32, u32),
    pub scar_intensity: f64,
    pub noise_sigma_source: f64,
    pub noise_sigma_target: f64,
    /// Gaussian blur std in pixels applied to target slices.
    pub boundary_blur_target: f64,
    pub intensity_profile_source: IntensityProfile,
    pub intensity_profile_target: IntensityProfile,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            lv_radius_range: (0.09, 0.15),
            myo_thickness_range: (0.05, 0.08),
            rv_crescent: true,
            rv_angle_range_deg: (100.0, 160.0),
            scar_patch_count_range: (1, 3),
            scar_intensity: 0.8,
            noise_sigma_source: 0.03,
            noise_sigma_target: 0.08,
            boundary_blur_target: 1.0,
            intensity_profile_source: IntensityProfile { background: -0.8, lv: 0.7, myo: -0.3, rv: 0.5 },
            intensity_profile_target: IntensityProfile { background: -0.1, lv: 0.3, myo: -0.4, rv: 0.2 },
        }
    }
}

fn check_range(field: &str, (lo, hi): (f64, f64), min: f64, max: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::validation(field, format!("({lo}, {hi}) needs min <= max")));
    }
    if lo <= min || hi >= max {
        return Err(Error::validation(field, format!("({lo}, {hi}) must lie in ({min}, {max})")));
    }
    Ok(())
}

fn check_intensity(field: &str, v: f64) -> Result<()> {
    if (-1.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::validation(field, format!("{v} outside [-1, 1]")))
    }
}

impl PhantomSpec {
    /// Every invalid field, in declaration order.
    pub fn problems(&self) -> Vec<Error> {
        let mut out = Vec::new();
        if self.image_size < 32 {
            out.push(Error::validation("phantom.image_size", format!("{} < 32", self.image_size)));
        }
        out.extend(check_range("phantom.lv_radius_range", self.lv_radius_range, 0.0, 0.5).err());
        out.extend(check_range("phantom.myo_thickness_range", self.myo_thickness_range, 0.0, 0.5).err());
        if self.lv_radius_range.1 + self.myo_thickness_range.1 >= 0.45 {
            out.push(Error::validation(
                "phantom.myo_thickness_range",
                "LV radius plus wall thickness must stay below 0.45 of the image",
            ));
        }
        if self.myo_thickness_range.0 * (self.image_size as f64) < 1.5 {
            out.push(Error::validation("phantom.myo_thickness_range", "wall thinner than 1.5 pixels"));
        }
        out.extend(check_range("phantom.rv_angle_range_deg", self.rv_angle_range_deg, 0.0, 360.0).err());
        let (a, b) = self.scar_patch_count_range;
        if a > b {
            out.push(Error::validation("phantom.scar_patch_count_range", format!("({a}, {b}) needs min <= max")));
        }
        out.extend(check_intensity("phantom.scar_intensity", self.scar_intensity).err());
        for (name, v) in [
            ("phantom.noise_sigma_source", self.noise_sigma_source),
            ("phantom.noise_sigma_target", self.noise_sigma_target),
            ("phantom.boundary_blur_target", self.boundary_blur_target),
        ] {
            if !v.is_finite() || v < 0.0 {
                out.push(Error::validation(name, format!("{v} must be finite and non-negative")));
            }
        }
        for (name, p) in [
            ("phantom.intensity_profile_source", &self.intensity_profile_source),
            ("phantom.intensity_profile_target", &self.intensity_profile_target),
        ] {
            for (cls, v) in [("background", p.background), ("lv", p.lv), ("myo", p.myo), ("rv", p.rv)] {
                out.extend(check_intensity(&format!("{name}.{cls}"), v).err());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub image: ImageSlice,
    pub mask: LabelMask,
    pub domain: Domain,
    pub seed: u64,
    pub patient_id: u32,
    pub slice_index: u32,
}

/// Sampled anatomy of one slice, in pixel units.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    cx: f64,
    cy: f64,
    r_lv: f64,
    r_epi: f64,
    rv: Option<(f64, f64, f64)>, // (center angle, half extent, max width)
}

impl Geometry {
    fn sample(spec: &PhantomSpec, rng: &mut impl Rng) -> Self {
        let s = spec.image_size as f64;
        let u = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        let r_lv = u(rng, spec.lv_radius_range) * s;
        let r_epi = r_lv + u(rng, spec.myo_thickness_range) * s;
        let rv = spec.rv_crescent.then(|| {
            let center = std::f64::consts::PI + rng.gen_range(-0.35..=0.35);
            let extent = u(rng, spec.rv_angle_range_deg).to_radians();
            let width = rng.gen_range(0.5..=0.9) * r_lv;
            (center, extent / 2.0, width)
        });
        let reach = r_epi + rv.map_or(0.0, |r| r.2) + 2.0;
        let jitter = ((s / 2.0 - reach).max(0.0)).min(0.08 * s);
        let cx = s / 2.0 + rng.gen_range(-jitter..=jitter);
        let cy = s / 2.0 + rng.gen_range(-jitter..=jitter);
        Self { cx, cy, r_lv, r_epi, rv }
    }

    fn label(&self, x: usize, y: usize) -> u8 {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let d = dx.hypot(dy);
        if d <= self.r_lv {
            return LV;
        }
        if d <= self.r_epi {
            return MYO;
        }
        if let Some((center, half, width)) = self.rv {
            let ang = dy.atan2(dx);
            let off = (ang - center + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
            if off.abs() < half {
                let w = width * (std::f64::consts::FRAC_PI_2 * off / half).cos();
                if d <= self.r_epi + w {
                    return RV;
                }
            }
        }
        BG
    }
}

/// Generates one slice; a pure function of `(spec, domain, seed)`.
pub fn generate_sample(spec: &PhantomSpec, domain: Domain, seed: u64) -> Result<PhantomSample> {
    spec.validate()?;
    let n = spec.image_size;
    let mut geo_rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = Geometry::sample(spec, &mut geo_rng);
    let labels: Vec<u8> = (0..n * n).map(|i| geo.label(i % n, i / n)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match domain {
        Domain::Source => 1,
        Domain::Target => 2,
    });
    let (profile, sigma) = match domain {
        Domain::Source => (&spec.intensity_profile_source, spec.noise_sigma_source),
        Domain::Target => (&spec.intensity_profile_target, spec.noise_sigma_target),
    };
    let mut img: Vec<f64> = labels.iter().map(|&l| profile.of(l)).collect();
    if domain == Domain::Target {
        paint_scars(spec, &geo, &labels, &mut img, &mut rng);
        if spec.boundary_blur_target > 0.0 {
            gaussian_blur(&mut img, n, n, spec.boundary_blur_target);
        }
    }
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("valid sigma");
        for v in &mut img {
            *v += noise.sample(&mut rng);
        }
    }
    let pixels = img.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect();
    Ok(PhantomSample {
        image: ImageSlice::new(n, n, pixels, domain)?,
        mask: LabelMask::new(n, n, labels)?,
        domain,
        seed,
        patient_id: 0,
        slice_index: 0,
    })
}

/// Bright blobs (unions of small disks) clipped to the myocardium.
fn paint_scars(spec: &PhantomSpec, geo: &Geometry, labels: &[u8], img: &mut [f64], rng: &mut ChaCha8Rng) {
    let (lo, hi) = spec.scar_patch_count_range;
    let count = rng.gen_range(lo..=hi);
    let myo: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == MYO).collect();
    if myo.is_empty() {
        return;
    }
    let n = spec.image_size;
    let wall = geo.r_epi - geo.r_lv;
    for _ in 0..count {
        let seed_px = myo[rng.gen_range(0..myo.len())];
        let (sx, sy) = ((seed_px % n) as f64 + 0.5, (seed_px / n) as f64 + 0.5);
        let disks: Vec<(f64, f64, f64)> = (0..rng.gen_range(2..=4))
            .map(|_| {
                let r = rng.gen_range(0.5..=1.0) * wall;
                (sx + rng.gen_range(-0.6..=0.6) * wall, sy + rng.gen_range(-0.6..=0.6) * wall, r)
            })
            .collect();
        for &i in &myo {
            let (px, py) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
            if disks.iter().any(|&(x, y, r)| (px - x).hypot(py - y) <= r) {
                img[i] = spec.scar_intensity;
            }
        }
    }
}

/// Separable Gaussian blur with clamp-to-edge borders.
fn gaussian_blur(img: &mut [f64], h: usize, w: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * img[y * w + (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            img[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[(y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize * w + x])
                .sum();
        }
    }
}

/// Deterministic per-slice seed derived from the dataset seed.
pub fn slice_seed(seed: u64, domain: Domain, patient_id: u32, slice_index: u32) -> u64 {
    let mut z = seed
        ^ (patient_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (slice_index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ match domain {
            Domain::Source => 0x1656_67B1_9E37_79F9,
            Domain::Target => 0x27D4_EB2F_1656_67C5,
        };
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Writes `n_patients * slices_per_patient` slices plus `manifest.json` into
/// `out_dir`. Refuses to replace an existing manifest unless `overwrite`.
pub fn generate_dataset(
    spec: &PhantomSpec,
    n_patients: u32,
    slices_per_patient: u32,
    domain: Domain,
    seed: u64,
    out_dir: &Path,
    overwrite: bool,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if n_patients == 0 {
        return Err(Error::validation("patients", "must be at least 1"));
    }
    if slices_per_patient == 0 {
        return Err(Error::validation("slices", "must be at least 1"));
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    if manifest_path.exists() && !overwrite {
        return Err(Error::AlreadyExists(manifest_path));
    }
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let n = spec.image_size;
    let mut entries = Vec::new();
    for patient_id in 0..n_patients {
        for slice_index in 0..slices_per_patient {
            let s = slice_seed(seed, domain, patient_id, slice_index);
            let sample = generate_sample(spec, domain, s)?;
            let name = format!("p{patient_id:03}_s{slice_index:02}.png");
            let image_path = PathBuf::from("images").join(&name);
            let mask_path = PathBuf::from("masks").join(&name);
            let px: Vec<u16> = sample.image.pixels.iter().map(|&v| imageio::to_u16(v)).collect();
            imageio::write_gray16(&out_dir.join(&image_path), n, n, &px)?;
            imageio::write_mask(&out_dir.join(&mask_path), n, n, &sample.mask.labels)?;
            entries.push(ManifestEntry {
                patient_id,
                slice_index,
                domain,
                image_path,
                mask_path: Some(mask_path),
                seed: Some(s),
            });
        }
    }
    let manifest = DatasetManifest::new(entries);
    manifest.save(&manifest_path)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn region_mean(s: &PhantomSample, label: u8) -> f64 {
        let v: Vec<f64> = s
            .mask
            .labels
            .iter()
            .zip(&s.image.pixels)
            .filter(|(&l, _)| l == label)
            .map(|(_, &p)| p as f64)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = PhantomSpec::default();
        let a = generate_sample(&spec, Domain::Source, 42).unwrap();
        let b = generate_sample(&spec, Domain::Source, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(&spec, Domain::Source, 43).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn geometry_is_shared_across_domains() {
        let spec = PhantomSpec::default();
        let a = generate_sample(&spec, Domain::Source, 5).unwrap();
        let b = generate_sample(&spec, Domain::Target, 5).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_ne!(a.image.pixels, b.image.pixels);
    }

    /// Breadth-first search from the LV over non-MYO pixels; the ring is closed
    /// when the border is unreachable.
    fn lv_escapes_without_crossing_myo(mask: &LabelMask) -> bool {
        let (h, w) = (mask.height, mask.width);
        let mut seen = vec![false; h * w];
        let mut q: VecDeque<usize> = (0..h * w).filter(|&i| mask.labels[i] == LV).collect();
        for &i in &q {
            seen[i] = true;
        }
        while let Some(i) = q.pop_front() {
            let (y, x) = (i / w, i % w);
            if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                return true;
            }
            for j in [i - 1, i + 1, i - w, i + w] {
                if !seen[j] && mask.labels[j] != MYO {
                    seen[j] = true;
                    q.push_back(j);
                }
            }
        }
        false
    }

    #[test]
    fn myocardium_rings_the_lv_for_many_seeds() {
        let spec = PhantomSpec::default();
        for seed in 0..60 {
            let s = generate_sample(&spec, Domain::Target, seed).unwrap();
            assert!(s.mask.count(LV) > 0 && s.mask.count(MYO) > 0);
            assert!(!lv_escapes_without_crossing_myo(&s.mask), "seed {seed}");
        }
    }

    #[test]
    fn rv_touches_the_myocardium() {
        let spec = PhantomSpec::default();
        let s = generate_sample(&spec, Domain::Source, 3).unwrap();
        let m = &s.mask;
        assert!(m.count(RV) > 0);
        let touches = (1..m.height - 1).any(|y| {
            (1..m.width - 1).any(|x| {
                m.get(y, x) == RV && [m.get(y - 1, x), m.get(y + 1, x), m.get(y, x - 1), m.get(y, x + 1)].contains(&MYO)
            })
        });
        assert!(touches);
        // RV never touches LV directly
        let lv_rv = (1..m.height - 1).any(|y| {
            (1..m.width - 1).any(|x| {
                m.get(y, x) == RV && [m.get(y - 1, x), m.get(y + 1, x), m.get(y, x - 1), m.get(y, x + 1)].contains(&LV)
            })
        });
        assert!(!lv_rv);
    }

    #[test]
    fn without_scars_myocardium_variance_is_noise_only() {
        let spec = PhantomSpec {
            scar_patch_count_range: (0, 0),
            boundary_blur_target: 0.0,
            ..PhantomSpec::default()
        };
        let s = generate_sample(&spec, Domain::Target, 9).unwrap();
        let v: Vec<f64> = s
            .mask
            .labels
            .iter()
            .zip(&s.image.pixels)
            .filter(|(&l, _)| l == MYO)
            .map(|(_, &p)| p as f64)
            .collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        let want = spec.noise_sigma_target.powi(2);
        // sample variance of n Gaussians has relative std sqrt(2 / (n - 1))
        let tol = 4.0 * want * (2.0 / (v.len() - 1) as f64).sqrt();
        assert!((var - want).abs() < tol, "var {var} vs {want} (n = {})", v.len());
    }

    #[test]
    fn scars_brighten_the_target_myocardium() {
        let spec = PhantomSpec { scar_patch_count_range: (2, 2), ..PhantomSpec::default() };
        let plain = PhantomSpec { scar_patch_count_range: (0, 0), ..PhantomSpec::default() };
        let a = generate_sample(&spec, Domain::Target, 4).unwrap();
        let b = generate_sample(&plain, Domain::Target, 4).unwrap();
        assert!(region_mean(&a, MYO) > region_mean(&b, MYO) + 0.05);
    }

    #[test]
    fn source_contrast_exceeds_target_contrast() {
        let spec = PhantomSpec::default();
        for seed in 0..100 {
            let s = generate_sample(&spec, Domain::Source, seed).unwrap();
            let t = generate_sample(&spec, Domain::Target, seed).unwrap();
            let cs = (region_mean(&s, MYO) - region_mean(&s, LV)).abs();
            let ct = (region_mean(&t, MYO) - region_mean(&t, LV)).abs();
            assert!(cs > ct, "seed {seed}: {cs} <= {ct}");
        }
    }

    #[test]
    fn invalid_spec_names_the_field() {
        let spec = PhantomSpec { lv_radius_range: (0.2, 0.1), ..PhantomSpec::default() };
        let err = generate_sample(&spec, Domain::Source, 0).unwrap_err();
        assert!(err.to_string().contains("lv_radius_range"), "{err}");
        let spec = PhantomSpec { image_size: 16, ..PhantomSpec::default() };
        assert!(generate_sample(&spec, Domain::Source, 0).unwrap_err().to_string().contains("image_size"));
        let mut spec = PhantomSpec::default();
        spec.intensity_profile_target.myo = 1.5;
        assert!(generate_sample(&spec, Domain::Source, 0).unwrap_err().to_string().contains("intensity_profile_target.myo"));
    }

    #[test]
    fn slice_seeds_differ() {
        let a = slice_seed(7, Domain::Source, 0, 0);
        assert_ne!(a, slice_seed(7, Domain::Source, 0, 1));
        assert_ne!(a, slice_seed(7, Domain::Source, 1, 0));
        assert_ne!(a, slice_seed(7, Domain::Target, 0, 0));
    }

    #[test]
    fn dataset_layout_and_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::default();
        let m = generate_dataset(&spec, 5, 4, Domain::Source, 7, dir.path(), false).unwrap();
        assert_eq!(m.samples.len(), 20);
        assert_eq!(m.by_patient().len(), 5);
        let first = std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let img = std::fs::read(dir.path().join(&m.samples[3].image_path)).unwrap();
        assert!(matches!(
            generate_dataset(&spec, 5, 4, Domain::Source, 7, dir.path(), false),
            Err(Error::AlreadyExists(_))
        ));
        generate_dataset(&spec, 5, 4, Domain::Source, 7, dir.path(), true).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap());
        assert_eq!(img, std::fs::read(dir.path().join(&m.samples[3].image_path)).unwrap());
    }

    #[test]
    fn written_mask_uses_the_label_alphabet() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&PhantomSpec::default(), 1, 1, Domain::Target, 3, dir.path(), false).unwrap();
        let mask = imageio::read_mask(&dir.path().join(m.samples[0].mask_path.as_ref().unwrap())).unwrap();
        let mut seen: Vec<u8> = mask.pixels.clone();
        seen.sort_unstable();
        seen.dedup();
        assert!(seen.len() <= 4 && seen.iter().all(|&l| l < 4), "{seen:?}");
    }
}
