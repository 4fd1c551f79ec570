//! Synthetic multi-modal brain phantoms in the BraTS layout.
//!
//! Each case is an elliptic "brain" (white matter, a cortical gray-matter
//! ring, two ventricles) with a nested tumor: edema shell ⊃ enhancing rim ⊃
//! necrotic core. Tissue contrasts differ per modality; FLAIR brightens
//! edema and T1ce brightens the enhancing rim. Background stays exactly 0,
//! as in skull-stripped scans, and Gaussian noise is added inside the brain.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Case, DataError, Result};
use crate::niftio::Volume;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    /// Noise standard deviation as a fraction of each modality's
    /// noiseless intensity range.
    pub noise_sigma: f64,
    /// Inclusive axial range containing tumor; drawn from the seed if unset.
    pub tumor_z: Option<(usize, usize)>,
    /// Intensity scale of the stored volumes.
    pub intensity_scale: f32,
}

impl PhantomConfig {
    pub fn new(dims: [usize; 3]) -> Self {
        Self {
            dims,
            noise_sigma: 0.03,
            tumor_z: None,
            intensity_scale: 1000.0,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Background,
    Csf,
    Gray,
    White,
    Edema,
    Enhancing,
    Necrosis,
}

impl Tissue {
    /// Noiseless (T1, T2, FLAIR, T1ce) intensities in [0, 1].
    fn contrast(self) -> [f32; 4] {
        match self {
            Tissue::Background => [0.0, 0.0, 0.0, 0.0],
            Tissue::Csf => [0.20, 0.95, 0.10, 0.20],
            Tissue::Gray => [0.50, 0.60, 0.55, 0.50],
            Tissue::White => [0.70, 0.40, 0.45, 0.70],
            Tissue::Edema => [0.45, 0.80, 0.95, 0.45],
            Tissue::Enhancing => [0.50, 0.60, 0.70, 1.00],
            Tissue::Necrosis => [0.25, 0.90, 0.40, 0.20],
        }
    }

    fn brats_label(self) -> f32 {
        match self {
            Tissue::Necrosis => 1.0,
            Tissue::Edema => 2.0,
            Tissue::Enhancing => 4.0,
            _ => 0.0,
        }
    }
}

struct Geometry {
    center: [f64; 2],
    brain_radii: [f64; 2],
    ventricle_offset: f64,
    ventricle_radii: [f64; 2],
    tumor_center: [f64; 2],
    tumor_radius: f64,
    tumor_z: (usize, usize),
    gain: [f32; 4],
}

impl Geometry {
    fn draw(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Self {
        let [nx, ny, nz] = cfg.dims;
        let (fx, fy) = (nx as f64, ny as f64);
        let center = [
            fx / 2.0 + rng.random_range(-0.03..0.03) * fx,
            fy / 2.0 + rng.random_range(-0.03..0.03) * fy,
        ];
        let brain_radii = [
            fx * rng.random_range(0.36..0.42),
            fy * rng.random_range(0.40..0.46),
        ];
        let tumor_radius = fx.min(fy) * rng.random_range(0.10..0.15);
        // Tumor sits in one hemisphere, clear of the ventricles.
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let tumor_center = [
            center[0] + side * brain_radii[0] * rng.random_range(0.35..0.45),
            center[1] + brain_radii[1] * rng.random_range(-0.3..0.3),
        ];
        let tumor_z = cfg.tumor_z.unwrap_or_else(|| {
            let span = (nz / 3).max(1);
            let lo = rng.random_range(nz / 4..=(nz - span - nz / 4).max(nz / 4));
            (lo, (lo + span - 1).min(nz - 1))
        });
        let gain = std::array::from_fn(|_| rng.random_range(0.95f32..1.05));
        Self {
            center,
            brain_radii,
            ventricle_offset: brain_radii[1] * 0.12,
            ventricle_radii: [brain_radii[0] * 0.12, brain_radii[1] * 0.06],
            tumor_center,
            tumor_radius,
            tumor_z,
            gain,
        }
    }

    fn tissue(&self, x: usize, y: usize, z: usize, nz: usize) -> Tissue {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        // Brain cross-section shrinks gently towards the first/last slices.
        let t = (2.0 * (z as f64 + 0.5) / nz as f64 - 1.0).clamp(-1.0, 1.0);
        let shrink = 0.85 + 0.15 * (1.0 - t * t).sqrt();
        let (rx, ry) = (self.brain_radii[0] * shrink, self.brain_radii[1] * shrink);
        let u = (px - self.center[0]) / rx;
        let v = (py - self.center[1]) / ry;
        let r2 = u * u + v * v;
        if r2 > 1.0 {
            return Tissue::Background;
        }

        let (z0, z1) = self.tumor_z;
        if (z0..=z1).contains(&z) {
            let half = (z1 - z0) as f64 / 2.0;
            let tz = if half > 0.0 {
                (z as f64 - (z0 as f64 + half)) / (half + 0.5)
            } else {
                0.0
            };
            let radius = self.tumor_radius * (0.6 + 0.4 * (1.0 - tz * tz).max(0.0).sqrt());
            let d = ((px - self.tumor_center[0]).powi(2) + (py - self.tumor_center[1]).powi(2)).sqrt()
                / radius;
            if d <= 0.35 {
                return Tissue::Necrosis;
            }
            if d <= 0.65 {
                return Tissue::Enhancing;
            }
            if d <= 1.0 {
                return Tissue::Edema;
            }
        }

        for sign in [-1.0, 1.0] {
            let vu = (px - self.center[0]) / self.ventricle_radii[0];
            let vv = (py - self.center[1] - sign * self.ventricle_offset) / self.ventricle_radii[1];
            if vu * vu + vv * vv <= 1.0 {
                return Tissue::Csf;
            }
        }
        if r2 > 0.72 {
            Tissue::Gray
        } else {
            Tissue::White
        }
    }
}

/// Deterministic phantom case for `seed`.
pub fn generate_phantom(seed: u64, cfg: &PhantomConfig) -> Result<Case> {
    let [nx, ny, nz] = cfg.dims;
    if nx < 8 || ny < 8 || nz == 0 || !(cfg.noise_sigma >= 0.0) {
        return Err(DataError::BadDims(cfg.dims));
    }
    if let Some((z0, z1)) = cfg.tumor_z {
        if z0 > z1 || z1 >= nz {
            return Err(DataError::BadDims(cfg.dims));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = Geometry::draw(cfg, &mut rng);

    let tissues = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| geom.tissue(x, y, z, nz));
    let labels = tissues.mapv(Tissue::brats_label);

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut modality = |m: usize| -> Array3<f32> {
        let mut out = Array3::zeros((nx, ny, nz));
        for (o, t) in out.iter_mut().zip(tissues.iter()) {
            if *t == Tissue::Background {
                continue;
            }
            let clean = t.contrast()[m] * geom.gain[m];
            let n = cfg.noise_sigma * noise.sample(&mut rng);
            *o = ((clean as f64 + n).max(0.0) as f32) * cfg.intensity_scale;
        }
        out
    };
    let t1 = modality(0);
    let t2 = modality(1);
    let flair = modality(2);
    let t1ce = modality(3);

    let vol = |v: Array3<f32>| Volume::new(v, [1.0, 1.0, 1.0]).expect("phantom voxels are finite");
    Ok(Case {
        case_id: format!("phantom_{seed:05}"),
        t1: vol(t1),
        t2: vol(t2),
        flair: vol(flair),
        t1ce: Some(vol(t1ce)),
        labels: vol(labels),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{compose_regions, make_slices, remap_labels};
    use ndarray::s;

    fn small() -> PhantomConfig {
        PhantomConfig::new([40, 40, 24])
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_phantom(7, &small()).unwrap(), generate_phantom(7, &small()).unwrap());
        assert_ne!(generate_phantom(7, &small()).unwrap(), generate_phantom(8, &small()).unwrap());
    }

    #[test]
    fn labels_are_nested() {
        for seed in 0..5 {
            let case = generate_phantom(seed, &small()).unwrap();
            for z in 0..24 {
                let seg = remap_labels(case.labels.voxels.slice(s![.., .., z])).unwrap();
                let m = compose_regions(seg.view());
                for ((&wt, &tc), &et) in m.wt.iter().zip(&m.tc).zip(&m.et) {
                    assert!(!et || tc);
                    assert!(!tc || wt);
                }
            }
        }
    }

    #[test]
    fn t1ce_enhancing_rim_brighter_than_core() {
        let case = generate_phantom(3, &small()).unwrap();
        let t1ce = &case.t1ce.as_ref().unwrap().voxels;
        let mean_where = |code: f32| {
            let vals: Vec<f32> = t1ce
                .iter()
                .zip(case.labels.voxels.iter())
                .filter(|(_, &l)| l == code)
                .map(|(&v, _)| v)
                .collect();
            assert!(!vals.is_empty());
            vals.iter().sum::<f32>() / vals.len() as f32
        };
        assert!(mean_where(4.0) > mean_where(1.0));
    }

    #[test]
    fn tumor_range_controls_slice_count() {
        let mut cfg = PhantomConfig::new([40, 40, 30]);
        cfg.tumor_z = Some((10, 20));
        let case = generate_phantom(1, &cfg).unwrap();
        let slices = make_slices(&case, 32).unwrap();
        assert_eq!(slices.len(), 11);
        assert_eq!(slices.first().unwrap().slice_index, 10);
        assert_eq!(slices.last().unwrap().slice_index, 20);
    }

    #[test]
    fn background_is_exactly_zero() {
        let case = generate_phantom(2, &small()).unwrap();
        assert_eq!(case.t1.voxels[[0, 0, 0]], 0.0);
        assert_eq!(case.flair.voxels[[39, 39, 23]], 0.0);
    }

    #[test]
    fn bad_dims_rejected() {
        assert!(generate_phantom(0, &PhantomConfig::new([4, 40, 4])).is_err());
        let mut cfg = small();
        cfg.tumor_z = Some((5, 30));
        assert!(generate_phantom(0, &cfg).is_err());
    }
}
