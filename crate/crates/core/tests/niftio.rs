use std::path::PathBuf;

use mafnet::niftio::{self, Volume};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

// Both files were written by nibabel 5.4.2 from closed-form arrays.

#[test]
fn reads_float32_written_by_nibabel() {
    let v = niftio::load(fixture("nib_f32.nii")).unwrap();
    assert_eq!(v.extents(), [4, 3, 2]);
    assert_eq!(v.header.spacing(), [1.5, 2.0, 2.5]);
    for ((i, j, k), &x) in v.voxels.indexed_iter() {
        assert_eq!(x, (i + 4 * j + 12 * k) as f32 * 0.5 - 3.25);
    }
    assert_eq!(v.voxels[[1, 2, 1]], 7.25);
}

#[test]
fn reads_gzipped_int16_written_by_nibabel() {
    let v = niftio::load(fixture("nib_i16.nii.gz")).unwrap();
    assert_eq!(v.extents(), [5, 4, 3]);
    for ((i, j, k), &x) in v.voxels.indexed_iter() {
        assert_eq!(x, (i + 5 * j + 20 * k) as f32 - 30.0);
    }
    assert_eq!(v.voxels.sum(), -30.0);
}

#[test]
fn random_volumes_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..100 {
        let dims = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..6));
        let voxels = Array3::from_shape_fn(dims, |_| {
            // Arbitrary finite bit patterns, subnormals included.
            loop {
                let v = f32::from_bits(rng.random());
                if v.is_finite() {
                    break v;
                }
            }
        });
        let spacing = [rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), rng.random_range(0.5..5.0)];
        let vol = Volume::new(voxels, spacing).unwrap();
        let path = dir.path().join(if i % 2 == 0 { "v.nii" } else { "v.nii.gz" });
        niftio::save(&vol, &path).unwrap();
        let back = niftio::load(&path).unwrap();
        assert_eq!(back.extents(), vol.extents());
        assert_eq!(back.header.spacing(), spacing);
        assert!(back.voxels.iter().zip(vol.voxels.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
