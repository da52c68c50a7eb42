//! Ensemble manifests, synthetic generation and batch sampling.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::family::AnalyticFamily;
use super::volume::{load_volume_expect, save_volume, voxel_position, VolumeGrid};
use crate::error::{Error, Result};
use crate::field::domain::DomainSpec;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train|test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberEntry {
    pub name: String,
    pub split: Split,
    /// Physical parameter vector.
    pub params: Vec<f64>,
    /// Volume path relative to the manifest directory, without extension.
    pub volume: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub domain: DomainSpec,
    pub dims: [usize; 3],
    pub family: Option<AnalyticFamily>,
    pub seed: u64,
    pub members: Vec<MemberEntry>,
}

impl EnsembleManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let f = File::open(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let f = File::create(dir.join(MANIFEST_FILE))?;
        serde_json::to_writer_pretty(BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.domain.n_params()
    }
}

/// Manifest plus member volumes held in memory (physical values).
#[derive(Clone, Debug)]
pub struct EnsembleDataset {
    pub manifest: EnsembleManifest,
    pub volumes: Vec<VolumeGrid>,
}

/// Uniform parameter draws inside the family's parameter box.
pub fn sample_params(family: &AnalyticFamily, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| family.params.iter().map(|a| rng.random_range(a.min..=a.max)).collect())
        .collect()
}

/// Samples `f` at voxel centers.
pub fn render_member(family: &AnalyticFamily, p: &[f64], dims: [usize; 3]) -> VolumeGrid {
    let m = family.member(p);
    let bounds = family.spatial;
    VolumeGrid::from_fn(dims, bounds, |i, j, k| m.value(voxel_position(dims, &bounds, [i, j, k])))
}

impl EnsembleDataset {
    /// Builds a synthetic ensemble in memory. Members are drawn uniformly in
    /// the parameter box from `seed`; the value range comes from the training
    /// members.
    pub fn synthesize(family: &AnalyticFamily, n_train: usize, n_test: usize, dims: usize, seed: u64) -> Result<Self> {
        family.validate()?;
        if dims < 8 {
            return Err(Error::Config(format!("dims must be at least 8, got {dims}")));
        }
        if n_train == 0 {
            return Err(Error::Config("at least one training member is required".into()));
        }
        let d = [dims; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = sample_params(family, n_train + n_test, &mut rng);
        let volumes: Vec<VolumeGrid> = params.par_iter().map(|p| render_member(family, p, d)).collect();
        let (lo, hi) = volumes[..n_train].iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let (a, b) = v.min_max();
            (lo.min(a), hi.max(b))
        });
        let hi = if hi > lo { hi } else { lo + 1.0 };
        let members = params
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let (split, k) = if i < n_train { (Split::Train, i) } else { (Split::Test, i - n_train) };
                let name = format!("{}_{k:03}", if split == Split::Train { "train" } else { "test" });
                MemberEntry { volume: name.clone(), name, split, params: p }
            })
            .collect();
        Ok(Self {
            manifest: EnsembleManifest {
                domain: family.domain(lo, hi),
                dims: d,
                family: Some(family.clone()),
                seed,
                members,
            },
            volumes,
        })
    }

    /// Writes the manifest and every member volume into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (m, v) in self.manifest.members.iter().zip(&self.volumes) {
            save_volume(v, &dir.join(&m.volume))?;
        }
        self.manifest.save(dir)
    }

    /// Loads a manifest and all member volumes, checking that every listed
    /// volume exists with the manifest's dims.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = EnsembleManifest::load(dir)?;
        let m = manifest.n_params();
        let mut volumes = Vec::with_capacity(manifest.members.len());
        for e in &manifest.members {
            if e.params.len() != m {
                return Err(Error::Data(format!("member {} has {} parameters, expected {m}", e.name, e.params.len())));
            }
            let path: PathBuf = dir.join(&e.volume);
            let v = load_volume_expect(&path, manifest.dims)
                .map_err(|err| Error::Data(format!("member {}: {err}", e.name)))?;
            volumes.push(v);
        }
        Ok(Self { manifest, volumes })
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.manifest.domain
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.manifest.members.len())
            .filter(|&i| self.manifest.members[i].split == split)
            .collect()
    }

    /// Normalized parameter vector of member `i`.
    pub fn normalized_params(&self, i: usize) -> Vec<f64> {
        self.domain()
            .normalize_params(&self.manifest.members[i].params)
            .expect("manifest validated")
    }

    pub fn voxels_per_member(&self) -> usize {
        self.manifest.dims.iter().product()
    }
}

/// One minibatch in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Vec<[f64; 3]>,
    /// Row-major `[len × m]`.
    pub p: Vec<f64>,
    pub y: Vec<f64>,
    pub members: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Precomputed normalized inputs per member, shared by batch sampling.
#[derive(Clone, Debug)]
pub struct Sampler {
    members: Vec<usize>,
    params: Vec<Vec<f64>>,
    dims: [usize; 3],
}

impl Sampler {
    pub fn new(data: &EnsembleDataset, members: &[usize]) -> Result<Self> {
        if members.is_empty() || data.voxels_per_member() == 0 {
            return Err(Error::Data("cannot sample from an empty dataset".into()));
        }
        Ok(Self {
            members: members.to_vec(),
            params: members.iter().map(|&i| data.normalized_params(i)).collect(),
            dims: data.manifest.dims,
        })
    }

    /// `n` (member, voxel) pairs drawn uniformly with replacement.
    pub fn sample(&self, data: &EnsembleDataset, n: usize, rng: &mut impl Rng) -> Batch {
        let volume_len = data.voxels_per_member();
        let domain = data.domain();
        let m = domain.n_params();
        let mut b = Batch {
            x: Vec::with_capacity(n),
            p: Vec::with_capacity(n * m),
            y: Vec::with_capacity(n),
            members: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let slot = rng.random_range(0..self.members.len());
            let voxel = rng.random_range(0..volume_len);
            let member = self.members[slot];
            let v = &data.volumes[member];
            let idx = v.coords_of(voxel);
            b.x.push(voxel_normalized(self.dims, idx));
            b.p.extend_from_slice(&self.params[slot]);
            b.y.push(domain.normalize_value(v.values[voxel] as f64));
            b.members.push(member);
        }
        b
    }

    /// Every voxel of one member, in storage order.
    pub fn full_member(&self, data: &EnsembleDataset, member: usize) -> Batch {
        let v = &data.volumes[member];
        let p = data.normalized_params(member);
        let n = v.values.len();
        let domain = data.domain();
        Batch {
            x: (0..n).map(|i| voxel_normalized(self.dims, v.coords_of(i))).collect(),
            p: p.iter().copied().cycle().take(n * p.len()).collect(),
            y: v.values.iter().map(|&y| domain.normalize_value(y as f64)).collect(),
            members: vec![member; n],
        }
    }
}

/// Normalized coordinate of a voxel center.
pub fn voxel_normalized(dims: [usize; 3], idx: [usize; 3]) -> [f64; 3] {
    [
        DomainSpec::voxel_center(idx[0], dims[0]),
        DomainSpec::voxel_center(idx[1], dims[1]),
        DomainSpec::voxel_center(idx[2], dims[2]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_family_gives_constant_volumes() {
        let f = AnalyticFamily::constant(0.5);
        let d = EnsembleDataset::synthesize(&f, 3, 1, 8, 1).unwrap();
        for v in &d.volumes {
            assert!(v.values.iter().all(|&x| x == 0.5));
        }
    }

    #[test]
    fn voxels_equal_direct_evaluation() {
        let f = AnalyticFamily::desk();
        let d = EnsembleDataset::synthesize(&f, 2, 1, 8, 3).unwrap();
        for (e, v) in d.manifest.members.iter().zip(&d.volumes) {
            for idx in [0, 17, 300, 511] {
                let x = v.voxel_position(v.coords_of(idx));
                assert_eq!(v.values[idx], f.eval(x, &e.params) as f32);
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        let f = AnalyticFamily::desk();
        let a = EnsembleDataset::synthesize(&f, 3, 2, 8, 9).unwrap();
        let b = EnsembleDataset::synthesize(&f, 3, 2, 8, 9).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.volumes, b.volumes);
    }

    #[test]
    fn splits_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = EnsembleDataset::synthesize(&AnalyticFamily::desk(), 4, 2, 8, 0).unwrap();
        d.save(dir.path()).unwrap();
        let files = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(files, 6 * 2 + 1);
        let back = EnsembleDataset::load(dir.path()).unwrap();
        assert_eq!(back.indices(Split::Train), vec![0, 1, 2, 3]);
        assert_eq!(back.indices(Split::Test), vec![4, 5]);
        assert_eq!(back.volumes, d.volumes);
    }

    #[test]
    fn missing_volume_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let d = EnsembleDataset::synthesize(&AnalyticFamily::desk(), 2, 0, 8, 0).unwrap();
        d.save(dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("train_001.f32")).unwrap();
        assert!(matches!(EnsembleDataset::load(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn training_values_normalize_into_unit_range() {
        let d = EnsembleDataset::synthesize(&AnalyticFamily::desk(), 5, 0, 8, 2).unwrap();
        let s = Sampler::new(&d, &d.indices(Split::Train)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = s.sample(&d, 2000, &mut rng);
        assert!(b.y.iter().all(|&y| (0.0..=1.0).contains(&y)));
        assert!(b.x.iter().flatten().all(|&u| u.abs() < 1.0));
    }

    #[test]
    fn batches_repeat_under_seed() {
        let d = EnsembleDataset::synthesize(&AnalyticFamily::desk(), 3, 0, 8, 2).unwrap();
        let s = Sampler::new(&d, &[0, 1, 2]).unwrap();
        let a = s.sample(&d, 64, &mut ChaCha8Rng::seed_from_u64(5));
        let b = s.sample(&d, 64, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn empty_member_list_is_error() {
        let d = EnsembleDataset::synthesize(&AnalyticFamily::desk(), 1, 0, 8, 2).unwrap();
        assert!(matches!(Sampler::new(&d, &[]), Err(Error::Data(_))));
    }
}
