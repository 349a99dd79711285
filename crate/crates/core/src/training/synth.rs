//! Synthetic labelled volumes built from nested ellipsoids, and the
//! on-disk dataset layout (manifest, class table, `.vol` pairs).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::Dims;
use crate::pipeline::{read_labels, read_volume, write_labels, write_volume, ClassEntry, ClassRole, ClassTable, LabelMap, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub class: usize,
    /// Voxel coordinates `(z, y, x)`.
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }

    fn volume(&self) -> f64 {
        self.radii.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dims: Dims,
    pub n_classes: usize,
    pub shapes: Vec<Ellipsoid>,
    /// Mean intensity per class, background included.
    pub means: Vec<f64>,
    pub noise_sigma: f64,
    pub count: usize,
    /// Per-sample translation bound, in voxels, shared by all shapes.
    #[serde(default)]
    pub jitter: f64,
    /// Per-sample radius scale bound: radii scale by `1 ± radius_jitter`.
    #[serde(default)]
    pub radius_jitter: f64,
}

impl SyntheticSpec {
    /// One outer shell (class 1) enclosing `n_classes - 2` disjoint inner
    /// ellipsoids placed around the centre. With at least four classes,
    /// classes 2 and 3 are the left and right hippocampus.
    pub fn nested(size: usize, n_classes: usize, count: usize) -> Self {
        let s = size as f64;
        let c = (s - 1.0) / 2.0;
        let mut shapes = vec![Ellipsoid { class: 1, center: [c; 3], radii: [0.40 * s, 0.36 * s, 0.38 * s] }];
        let inner = n_classes.saturating_sub(2);
        for i in 0..inner {
            let angle = std::f64::consts::TAU * i as f64 / inner.max(1) as f64;
            let ring = if inner == 1 { 0.0 } else { 0.18 * s };
            let spacing = if inner < 3 { f64::INFINITY } else { ring * (std::f64::consts::PI / inner as f64).sin() };
            let r = (0.125 * s).min(0.88 * spacing) * (1.0 - 0.05 * (i % 3) as f64);
            shapes.push(Ellipsoid {
                class: i + 2,
                center: [c + 0.04 * s * (i % 2) as f64, c + ring * angle.sin(), c + ring * angle.cos()],
                radii: [r * 1.1, r, r * 0.95],
            });
        }
        let means = (0..n_classes).map(|k| 0.1 + 0.8 * k as f64 / n_classes.saturating_sub(1).max(1) as f64).collect();
        SyntheticSpec {
            dims: [size; 3],
            n_classes,
            shapes,
            means,
            noise_sigma: 0.03,
            count,
            jitter: 0.04 * s,
            radius_jitter: 0.08,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("synthetic data needs at least two classes"));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("volume dims must be positive, got {:?}", self.dims)));
        }
        if self.means.len() != self.n_classes {
            return Err(Error::config(format!("{} means for {} classes", self.means.len(), self.n_classes)));
        }
        if !(self.noise_sigma >= 0.0) || !(self.jitter >= 0.0) || !(0.0..1.0).contains(&self.radius_jitter) {
            return Err(Error::config("noise and jitter must be non-negative, radius jitter below 1"));
        }
        for e in &self.shapes {
            if e.class == 0 || e.class >= self.n_classes {
                return Err(Error::config(format!("shape class {} outside 1..{}", e.class, self.n_classes)));
            }
            if e.radii.iter().any(|&r| !(r > 0.0)) {
                return Err(Error::config("ellipsoid radii must be positive"));
            }
        }
        rasterize(self.dims, &self.shapes).map(|_| ())
    }

    pub fn class_table(&self) -> ClassTable {
        let entries = (0..self.n_classes)
            .map(|i| {
                let (name, role) = match i {
                    0 => ("background".to_string(), ClassRole::Background),
                    2 if self.n_classes >= 4 => ("hippocampus_left".into(), ClassRole::HippocampusLeft),
                    3 if self.n_classes >= 4 => ("hippocampus_right".into(), ClassRole::HippocampusRight),
                    _ => (format!("structure{i}"), ClassRole::Structure),
                };
                ClassEntry { index: i, label_id: i as i32, name, role }
            })
            .collect();
        ClassTable::new(entries).expect("synthetic table is valid")
    }
}

/// Class per voxel: the smallest containing ellipsoid wins. Ellipsoids
/// must be nested or disjoint on the voxel grid.
fn rasterize(dims: Dims, shapes: &[Ellipsoid]) -> Result<Vec<u16>> {
    let [d, h, w] = dims;
    let n = d * h * w;
    let inside: Vec<Vec<bool>> = shapes
        .iter()
        .map(|e| {
            let mut m = Vec::with_capacity(n);
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        m.push(e.contains([z as f64, y as f64, x as f64]));
                    }
                }
            }
            m
        })
        .collect();
    let counts: Vec<usize> = inside.iter().map(|m| m.iter().filter(|&&b| b).count()).collect();
    for i in 0..shapes.len() {
        for j in i + 1..shapes.len() {
            let both = inside[i].iter().zip(&inside[j]).filter(|(a, b)| **a && **b).count();
            if both > 0 && both != counts[i] && both != counts[j] {
                return Err(Error::config(format!("ellipsoids {i} and {j} partially overlap")));
            }
        }
    }
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    order.sort_by(|&a, &b| shapes[b].volume().total_cmp(&shapes[a].volume()));
    let mut labels = vec![0u16; n];
    for &s in &order {
        for (l, &hit) in labels.iter_mut().zip(&inside[s]) {
            if hit {
                *l = shapes[s].class as u16;
            }
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub volume: Volume,
    pub labels: LabelMap,
}

/// `spec.count` samples, each a pure function of `(spec, seed, index)`.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let classes = spec.class_table();
    (0..spec.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let shift: [f64; 3] =
                std::array::from_fn(|_| if spec.jitter > 0.0 { rng.gen_range(-spec.jitter..=spec.jitter) } else { 0.0 });
            let shapes: Vec<Ellipsoid> = spec
                .shapes
                .iter()
                .map(|e| {
                    let mut e = e.clone();
                    for a in 0..3 {
                        e.center[a] += shift[a];
                    }
                    if spec.radius_jitter > 0.0 {
                        let k = 1.0 + rng.gen_range(-spec.radius_jitter..=spec.radius_jitter);
                        e.radii = e.radii.map(|r| r * k);
                    }
                    e
                })
                .collect();
            let labels = rasterize(spec.dims, &shapes)?;
            let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
            let data = labels
                .iter()
                .map(|&c| {
                    let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    (spec.means[c as usize] + n) as f32
                })
                .collect();
            Ok(Sample {
                id: format!("sample_{i}"),
                volume: Volume::new(spec.dims, data)?,
                labels: LabelMap::new(spec.dims, labels, classes.clone())?,
            })
        })
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLASSES_FILE: &str = "classes.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub labels: String,
}

/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: String,
    pub samples: Vec<ManifestEntry>,
}

pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample], classes: &ClassTable) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    classes.write(dir.join(CLASSES_FILE))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image = format!("{}_image.vol", s.id);
        let labels = format!("{}_labels.vol", s.id);
        write_volume(dir.join(&image), &s.volume)?;
        write_labels(dir.join(&labels), &s.labels)?;
        entries.push(ManifestEntry { id: s.id.clone(), image, labels });
    }
    let manifest = Manifest { classes: CLASSES_FILE.into(), samples: entries };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: ClassTable,
    pub samples: Vec<Sample>,
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let resolve = |p: &str| -> PathBuf { dir.join(p) };
    let classes = ClassTable::read(resolve(&manifest.classes))?;
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            let volume = read_volume(resolve(&e.image))?;
            let labels = read_labels(resolve(&e.labels), &classes)?;
            if volume.dims != labels.dims {
                return Err(Error::shape(format!("{}: image {:?} vs labels {:?}", e.id, volume.dims, labels.dims)));
            }
            Ok(Sample { id: e.id.clone(), volume, labels })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { classes, samples })
}
