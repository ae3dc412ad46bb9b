use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::spec::DomainSpec;
use crate::error::{Error, Result};
use crate::tensor::{read_blob, read_label_blob, write_blob, write_label_blob, BlobKind, DType, Tensor};

/// One generated or loaded sample: `volume` is `[modalities, h, w, d]`,
/// `labels` holds local class indices (0 = background) in the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub volume: Tensor,
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn shape(&self) -> [usize; 3] {
        [self.volume.dim(1), self.volume.dim(2), self.volume.dim(3)]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Splits {
    pub fn get(&self, s: Split) -> &[usize] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub volume: String,
    pub labels: String,
}

/// On-disk index of a generated domain. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domain_id: usize,
    pub name: String,
    pub labels: Vec<String>,
    pub n_modalities: usize,
    pub spec: DomainSpec,
    pub spec_hash: String,
    pub seed: u64,
    pub splits: Splits,
    pub samples: Vec<SampleEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file)
            .map_err(|e| Error::config(format!("cannot read manifest {}: {e}", file.display())))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest {}: {e}", file.display())))?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        let e = self
            .samples
            .get(index)
            .ok_or_else(|| Error::config(format!("manifest '{}' has no sample {index}", self.name)))?;
        let volume = read_blob(&mut open(&self.root.join(&e.volume))?.as_slice(), BlobKind::Volume)?;
        let (shape, labels) = read_label_blob(&mut open(&self.root.join(&e.labels))?.as_slice())?;
        if volume.rank() != 4 || shape != volume.shape()[1..] {
            return Err(Error::Data(format!(
                "sample {index} of '{}': volume {:?} and labelmap {shape:?} disagree",
                self.name,
                volume.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > self.labels.len()) {
            return Err(Error::Data(format!("sample {index} of '{}': class {bad} outside label set", self.name)));
        }
        Ok(Sample { volume, labels })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.splits.get(split).iter().map(|&i| self.load_sample(i)).collect()
    }
}

fn open(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

/// Class offsets in units of intensity std, in `label_set` order.
pub fn class_offsets(spec: &DomainSpec) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6f66_6673_6574);
    spec.label_set
        .iter()
        .map(|l| {
            let drawn = rng.random_range(1.5..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            spec.lesions[l].offset.unwrap_or(drawn)
        })
        .collect()
}

struct Sphere {
    center: [f64; 3],
    radius: f64,
}

fn draw_sphere(rng: &mut ChaCha8Rng, shape: [usize; 3], radius: f64) -> Sphere {
    let mut center = [0.0; 3];
    for a in 0..3 {
        let (lo, hi) = (radius, shape[a] as f64 - 1.0 - radius);
        center[a] = if hi > lo { rng.random_range(lo..hi) } else { (shape[a] as f64 - 1.0) / 2.0 };
    }
    Sphere { center, radius }
}

fn rasterize(s: &Sphere, shape: [usize; 3], mut visit: impl FnMut(usize)) {
    let r2 = s.radius * s.radius;
    let range = |a: usize| {
        let lo = (s.center[a] - s.radius).floor().max(0.0) as usize;
        let hi = ((s.center[a] + s.radius).ceil() as usize).min(shape[a] - 1);
        lo..=hi
    };
    for x in range(0) {
        for y in range(1) {
            for z in range(2) {
                let d = [x as f64 - s.center[0], y as f64 - s.center[1], z as f64 - s.center[2]];
                if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= r2 {
                    visit((x * shape[1] + y) * shape[2] + z);
                }
            }
        }
    }
}

fn sample_rng(spec: &DomainSpec, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Voxel count of one rasterized sphere; used to check the renderer.
pub fn sphere_voxels(shape: [usize; 3], center: [f64; 3], radius: f64) -> usize {
    let mut n = 0;
    rasterize(&Sphere { center, radius }, shape, |_| n += 1);
    n
}

/// Deterministic in `(spec.seed, index)`.
pub fn generate_sample(spec: &DomainSpec, index: usize) -> Sample {
    let shape = spec.volume_shape;
    let vox = shape.iter().product::<usize>();
    let mut rng = sample_rng(spec, index);
    let offsets = class_offsets(spec);
    let mut labels = vec![0u8; vox];

    let roots: Vec<usize> = (0..spec.label_set.len()).filter(|&k| spec.lesions[&spec.label_set[k]].inside.is_none()).collect();
    let mut placed: Vec<Vec<Sphere>> = (0..spec.label_set.len()).map(|_| Vec::new()).collect();
    for &k in &roots {
        let ls = &spec.lesions[&spec.label_set[k]];
        let n = rng.random_range(ls.count[0]..=ls.count[1]);
        for _ in 0..n {
            let r = rng.random_range(ls.radius[0]..=ls.radius[1]);
            let s = draw_sphere(&mut rng, shape, r);
            rasterize(&s, shape, |i| labels[i] = k as u8 + 1);
            placed[k].push(s);
        }
    }
    for k in 0..spec.label_set.len() {
        let ls = &spec.lesions[&spec.label_set[k]];
        let Some(parent) = &ls.inside else { continue };
        let p = spec.label_set.iter().position(|l| l == parent).expect("validated");
        let parents: Vec<(f64, [f64; 3])> = placed[p].iter().map(|s| (s.radius, s.center)).collect();
        for (pr, center) in parents {
            let n = rng.random_range(ls.count[0]..=ls.count[1]);
            for _ in 0..n {
                let r = rng.random_range(ls.radius[0]..=ls.radius[1]).min(pr);
                rasterize(&Sphere { center, radius: r }, shape, |i| labels[i] = k as u8 + 1);
            }
        }
    }

    let m = spec.n_modalities;
    let mut data = vec![0.0; m * vox];
    for c in 0..m {
        let (mean, std) = (spec.intensity_mean[c], spec.intensity_std[c]);
        for (i, v) in data[c * vox..(c + 1) * vox].iter_mut().enumerate() {
            let class_offset = if labels[i] == 0 { 0.0 } else { offsets[labels[i] as usize - 1] };
            let noise: f64 = if spec.noise_std > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
            *v = mean + std * (class_offset + spec.noise_std * noise);
        }
    }
    let volume = Tensor::new(&[m, shape[0], shape[1], shape[2]], data).expect("consistent shape");
    Sample { volume, labels }
}

/// 70/10/20 split of a seeded permutation; val and test take the floor,
/// train takes the remainder.
pub fn split_indices(n: usize, seed: u64) -> Splits {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    idx.shuffle(&mut rng);
    let n_val = n / 10;
    let n_test = n / 5;
    let n_train = n - n_val - n_test;
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Splits { train, val, test }
}

/// Writes `n_samples` volumes and labelmaps plus `manifest.json` into
/// `out_dir`, returning the manifest.
pub fn generate_domain(spec: &DomainSpec, n_samples: usize, out_dir: &Path, dtype: DType) -> Result<DatasetManifest> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(Error::config("n_samples must be >= 1"));
    }
    fs::create_dir_all(out_dir)?;
    let entries: Vec<SampleEntry> = (0..n_samples)
        .into_par_iter()
        .map(|i| -> Result<SampleEntry> {
            let s = generate_sample(spec, i);
            let e = SampleEntry {
                index: i,
                volume: format!("sample_{i:05}.vol"),
                labels: format!("sample_{i:05}.lbl"),
            };
            let mut buf = Vec::new();
            write_blob(&mut buf, BlobKind::Volume, &s.volume.cast(dtype))?;
            fs::write(out_dir.join(&e.volume), &buf)?;
            buf.clear();
            write_label_blob(&mut buf, &spec.volume_shape, &s.labels)?;
            fs::write(out_dir.join(&e.labels), &buf)?;
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        domain_id: spec.domain_id,
        name: spec.name.clone(),
        labels: spec.label_set.clone(),
        n_modalities: spec.n_modalities,
        spec: spec.clone(),
        spec_hash: spec.hash(),
        seed: spec.seed,
        splits: split_indices(n_samples, spec.seed),
        samples: entries,
        root: out_dir.to_path_buf(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(out_dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}
