//! Cases, axial slice extraction, label handling and dataset splits.

mod phantom;

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::niftio::{self, NiftiError, Volume};

pub use phantom::{generate_phantom, PhantomConfig};

/// In-plane size the networks consume.
pub const CROP_SIZE: usize = 224;
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("case {case}: missing {modality} volume")]
    MissingModality { case: String, modality: Modality },
    #[error("case {case}: {modality} extents {found:?} differ from {expected:?}")]
    DimensionMismatch {
        case: String,
        modality: Modality,
        expected: [usize; 3],
        found: [usize; 3],
    },
    #[error("in-plane extent {found:?} is smaller than crop {crop}")]
    TooSmall { found: [usize; 2], crop: usize },
    #[error("non-finite intensity in slice")]
    NonFinite,
    #[error("label code {0} is not one of 0, 1, 2, 4")]
    UnknownLabel(f32),
    #[error("need at least 10 cases to split, got {0}")]
    TooFewCases(usize),
    #[error("bad phantom extents {0:?}")]
    BadDims([usize; 3]),
    #[error("{path}: {source}")]
    Nifti {
        path: PathBuf,
        #[source]
        source: NiftiError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    T1,
    T2,
    Flair,
    T1ce,
    Seg,
}

impl Modality {
    pub const ALL: [Modality; 5] = [Self::T1, Self::T2, Self::Flair, Self::T1ce, Self::Seg];

    /// File-name suffix in the BraTS layout.
    pub fn suffix(self) -> &'static str {
        match self {
            Self::T1 => "t1",
            Self::T2 => "t2",
            Self::Flair => "flair",
            Self::T1ce => "t1ce",
            Self::Seg => "seg",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.suffix())
    }
}

/// One patient: co-registered source modalities, optional T1ce, labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub case_id: String,
    pub t1: Volume,
    pub t2: Volume,
    pub flair: Volume,
    pub t1ce: Option<Volume>,
    /// Raw BraTS codes {0, 1, 2, 4}.
    pub labels: Volume,
}

impl Case {
    pub fn extents(&self) -> [usize; 3] {
        self.t1.extents()
    }

    fn volumes(&self) -> impl Iterator<Item = (Modality, &Volume)> {
        [
            (Modality::T1, Some(&self.t1)),
            (Modality::T2, Some(&self.t2)),
            (Modality::Flair, Some(&self.flair)),
            (Modality::T1ce, self.t1ce.as_ref()),
            (Modality::Seg, Some(&self.labels)),
        ]
        .into_iter()
        .filter_map(|(m, v)| v.map(|v| (m, v)))
    }

    /// All present volumes share the T1 extents.
    pub fn validate(&self) -> Result<()> {
        let expected = self.extents();
        for (modality, v) in self.volumes() {
            if v.extents() != expected {
                return Err(DataError::DimensionMismatch {
                    case: self.case_id.clone(),
                    modality,
                    expected,
                    found: v.extents(),
                });
            }
        }
        Ok(())
    }
}

fn modality_path(dir: &Path, case_id: &str, m: Modality) -> Option<PathBuf> {
    ["nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{case_id}_{}.{ext}", m.suffix())))
        .find(|p| p.is_file())
}

fn load_volume(path: &Path) -> Result<Volume> {
    niftio::load(path).map_err(|source| DataError::Nifti {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads `<dir>/<case_id>_{t1,t2,flair,t1ce,seg}.nii[.gz]`, where `case_id`
/// is the directory name. T1ce is optional; everything else is required.
pub fn load_case(dir: impl AsRef<Path>) -> Result<Case> {
    let dir = dir.as_ref();
    let case_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let required = |m: Modality| -> Result<Volume> {
        let path = modality_path(dir, &case_id, m).ok_or_else(|| DataError::MissingModality {
            case: case_id.clone(),
            modality: m,
        })?;
        load_volume(&path)
    };
    let case = Case {
        t1: required(Modality::T1)?,
        t2: required(Modality::T2)?,
        flair: required(Modality::Flair)?,
        t1ce: modality_path(dir, &case_id, Modality::T1ce)
            .map(|p| load_volume(&p))
            .transpose()?,
        labels: required(Modality::Seg)?,
        case_id,
    };
    case.validate()?;
    Ok(case)
}

/// Case directories directly under `root`, sorted by name.
pub fn list_case_dirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<Case>> {
    list_case_dirs(root)?.into_iter().map(load_case).collect()
}

/// Writes `case` in the BraTS layout under `root/<case_id>/`.
pub fn save_case(case: &Case, root: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = root.as_ref().join(&case.case_id);
    std::fs::create_dir_all(&dir)?;
    for (m, v) in case.volumes() {
        let path = dir.join(format!("{}_{}.nii.gz", case.case_id, m.suffix()));
        niftio::save(v, &path).map_err(|source| DataError::Nifti { path, source })?;
    }
    Ok(dir)
}

/// One axial training/evaluation slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    /// T1, T2, FLAIR, each normalized to [-1, 1].
    pub x: Array3<f64>,
    pub y_t1ce: Option<Array2<f64>>,
    /// Classes {0: background, 1: necrosis, 2: edema, 3: enhancing tumor}.
    pub seg: Array2<u8>,
    pub case_id: String,
    pub slice_index: usize,
}

impl SliceSample {
    pub fn size(&self) -> usize {
        self.seg.nrows()
    }
}

/// Start offsets of a centered `crop`-wide window; the low side gets the
/// smaller half when the margin is odd.
pub fn crop_window(extent: usize, crop: usize) -> Option<Range<usize>> {
    (extent >= crop).then(|| {
        let lo = (extent - crop) / 2;
        lo..lo + crop
    })
}

/// One `SliceSample` per axial index whose labels contain tumor.
///
/// `crop` is [`CROP_SIZE`] for real data; smaller values serve desk-scale
/// experiments.
pub fn make_slices(case: &Case, crop: usize) -> Result<Vec<SliceSample>> {
    let [nx, ny, nz] = case.extents();
    let (rows, cols) = match (crop_window(nx, crop), crop_window(ny, crop)) {
        (Some(r), Some(c)) => (r, c),
        _ => return Err(DataError::TooSmall { found: [nx, ny], crop }),
    };
    fn plane<'v>(v: &'v Volume, rows: &Range<usize>, cols: &Range<usize>, z: usize) -> ArrayView2<'v, f32> {
        v.voxels.slice(s![rows.clone(), cols.clone(), z])
    }
    let plane = |v, z| plane(v, &rows, &cols, z);
    let mut out = Vec::new();
    for z in 0..nz {
        let raw_labels = plane(&case.labels, z);
        if raw_labels.iter().all(|&v| v == 0.0) {
            continue;
        }
        let seg = remap_labels(raw_labels)?;
        let mut x = Array3::zeros((3, crop, crop));
        for (c, v) in [&case.t1, &case.t2, &case.flair].into_iter().enumerate() {
            x.index_axis_mut(Axis(0), c)
                .assign(&normalize(plane(v, z).mapv(f64::from).view())?);
        }
        let y_t1ce = case
            .t1ce
            .as_ref()
            .map(|v| normalize(plane(v, z).mapv(f64::from).view()))
            .transpose()?;
        out.push(SliceSample {
            x,
            y_t1ce,
            seg,
            case_id: case.case_id.clone(),
            slice_index: z,
        });
    }
    Ok(out)
}

/// Per-slice min-max scaling to [-1, 1]; constant slices become all −1.
pub fn normalize(slice: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if slice.iter().any(|v| !v.is_finite()) {
        return Err(DataError::NonFinite);
    }
    let min = slice.iter().copied().fold(f64::INFINITY, f64::min);
    let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return Ok(Array2::from_elem(slice.raw_dim(), -1.0));
    }
    Ok(slice.mapv(|v| 2.0 * (v - min) / range - 1.0))
}

/// BraTS codes to class indices: 0→0, 1→1, 2→2, 4→3.
pub fn remap_labels(raw: ArrayView2<'_, f32>) -> Result<Array2<u8>> {
    let mut out = Array2::zeros(raw.raw_dim());
    for (o, &v) in out.iter_mut().zip(raw.iter()) {
        *o = match v {
            0.0 => 0,
            1.0 => 1,
            2.0 => 2,
            4.0 => 3,
            other => return Err(DataError::UnknownLabel(other)),
        };
    }
    Ok(out)
}

pub const CLASS_NECROSIS: u8 = 1;
pub const CLASS_EDEMA: u8 = 2;
pub const CLASS_ENHANCING: u8 = 3;

/// Whole tumor ⊇ tumor core ⊇ enhancing tumor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMasks {
    pub wt: Array2<bool>,
    pub tc: Array2<bool>,
    pub et: Array2<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Region {
    #[serde(rename = "WT")]
    Wt,
    #[serde(rename = "ET")]
    Et,
    #[serde(rename = "TC")]
    Tc,
}

impl Region {
    /// Column order of the published tables.
    pub const ALL: [Region; 3] = [Region::Wt, Region::Et, Region::Tc];

    pub fn name(self) -> &'static str {
        match self {
            Region::Wt => "WT",
            Region::Et => "ET",
            Region::Tc => "TC",
        }
    }
}

impl RegionMasks {
    pub fn get(&self, r: Region) -> &Array2<bool> {
        match r {
            Region::Wt => &self.wt,
            Region::Et => &self.et,
            Region::Tc => &self.tc,
        }
    }
}

pub fn compose_regions(seg: ArrayView2<'_, u8>) -> RegionMasks {
    RegionMasks {
        wt: seg.mapv(|c| matches!(c, CLASS_NECROSIS | CLASS_EDEMA | CLASS_ENHANCING)),
        tc: seg.mapv(|c| matches!(c, CLASS_NECROSIS | CLASS_ENHANCING)),
        et: seg.mapv(|c| c == CLASS_ENHANCING),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// 7:1:2 case-level split after a seeded shuffle of the sorted ids.
pub fn split_cases(case_ids: &[String], seed: u64) -> Result<DatasetSplit> {
    let n = case_ids.len();
    if n < 10 {
        return Err(DataError::TooFewCases(n));
    }
    let mut ids = case_ids.to_vec();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = 7 * n / 10;
    let n_val = n / 10;
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(DatasetSplit {
        train: ids,
        val,
        test,
        seed,
    })
}

/// Picks, for each source sample in a batch, the index of a T1ce target
/// from a *different* case whenever one exists, so no batch pairs a
/// source triple with its own T1ce.
pub fn unpaired_targets<R: Rng>(
    samples: &[SliceSample],
    batch: &[usize],
    rng: &mut R,
) -> Vec<usize> {
    let with_t1ce: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].y_t1ce.is_some())
        .collect();
    assert!(!with_t1ce.is_empty(), "no T1ce slices available");
    batch
        .iter()
        .map(|&i| {
            let others: Vec<usize> = with_t1ce
                .iter()
                .copied()
                .filter(|&j| samples[j].case_id != samples[i].case_id)
                .collect();
            let pool = if others.is_empty() { &with_t1ce } else { &others };
            pool[rng.random_range(0..pool.len())]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalize_examples() {
        let a = array![[0.0, 50.0, 100.0]];
        assert_eq!(normalize(a.view()).unwrap(), array![[-1.0, 0.0, 1.0]]);
        let z = Array2::<f64>::zeros((3, 3));
        assert!(normalize(z.view()).unwrap().iter().all(|&v| v == -1.0));
        let b = array![[10.0, 15.0, 30.0]];
        assert_eq!(normalize(b.view()).unwrap()[[0, 1]], -0.5);
        let bad = array![[1.0, f64::NAN]];
        assert!(matches!(normalize(bad.view()), Err(DataError::NonFinite)));
    }

    #[test]
    fn remap_examples() {
        let raw = array![[0.0f32, 1.0, 2.0, 4.0]];
        assert_eq!(remap_labels(raw.view()).unwrap(), array![[0u8, 1, 2, 3]]);
        let zeros = Array2::<f32>::zeros((2, 2));
        assert_eq!(remap_labels(zeros.view()).unwrap(), Array2::<u8>::zeros((2, 2)));
        let bad = array![[0.0f32, 3.0]];
        assert!(matches!(remap_labels(bad.view()), Err(DataError::UnknownLabel(v)) if v == 3.0));
    }

    #[test]
    fn compose_examples() {
        let all_et = Array2::from_elem((2, 2), 3u8);
        let m = compose_regions(all_et.view());
        assert!(m.wt.iter().chain(m.tc.iter()).chain(m.et.iter()).all(|&b| b));

        let seg = array![[1u8, 2, 3, 0]];
        let m = compose_regions(seg.view());
        let count = |a: &Array2<bool>| a.iter().filter(|&&b| b).count();
        assert_eq!((count(&m.wt), count(&m.tc), count(&m.et)), (3, 2, 1));

        let bg = Array2::<u8>::zeros((3, 3));
        let m = compose_regions(bg.view());
        assert_eq!(count(&m.wt) + count(&m.tc) + count(&m.et), 0);
    }

    #[test]
    fn crop_window_examples() {
        assert_eq!(crop_window(240, 224), Some(8..232));
        assert_eq!(crop_window(225, 224), Some(0..224));
        assert_eq!(crop_window(224, 224), Some(0..224));
        assert_eq!(crop_window(223, 224), None);
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("case{i:03}")).collect()
    }

    #[test]
    fn split_sizes() {
        let s = split_cases(&ids(369), 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (258, 36, 75));
        let s = split_cases(&ids(10), 5).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        assert_eq!(split_cases(&ids(40), 3).unwrap(), split_cases(&ids(40), 3).unwrap());
        assert_ne!(split_cases(&ids(40), 3).unwrap(), split_cases(&ids(40), 4).unwrap());
        assert!(matches!(split_cases(&ids(9), 0), Err(DataError::TooFewCases(9))));
    }

    #[test]
    fn unpaired_targets_avoid_own_case() {
        let sample = |case: &str| SliceSample {
            x: Array3::zeros((3, 2, 2)),
            y_t1ce: Some(Array2::zeros((2, 2))),
            seg: Array2::zeros((2, 2)),
            case_id: case.into(),
            slice_index: 0,
        };
        let samples = vec![sample("a"), sample("a"), sample("b"), sample("c")];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let t = unpaired_targets(&samples, &[0, 1, 2, 3], &mut rng);
            for (i, j) in [0, 1, 2, 3].iter().zip(&t) {
                assert_ne!(samples[*i].case_id, samples[*j].case_id);
            }
        }
        // A single case has no alternative.
        let single = vec![sample("a")];
        assert_eq!(unpaired_targets(&single, &[0], &mut rng), vec![0]);
    }
}
