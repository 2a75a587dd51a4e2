//! Samples, on-disk datasets and their manifests.
//!
//! A dataset directory holds `train/` and `test/` subdirectories of
//! `NNNNN.ppm` / `NNNNN.pgm` pairs and a `manifest.tsv`:
//!
//! ```text
//! taxonomy	A
//! 0	train/00000.ppm	train/00000.pgm
//! ```
//!
//! Paths are relative to the manifest. The split is read off the first path
//! component.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::netpbm::{self, NetpbmError};
use crate::synth::{generate_range, SceneSpec};
use crate::taxonomy::{Level, Taxonomy};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `H×W×3`, values in `[0, 1]`.
    pub image: Tensor,
    /// Finest-level labels.
    pub labels: LabelMap,
    /// Level-2 regions as drawn by the generator.
    pub parts: LabelMap,
    /// Whether a later figure covered part of an earlier one.
    pub occluded: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn of_path(path: &Path) -> Option<Split> {
        match path.components().next()?.as_os_str().to_str()? {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub taxonomy: Taxonomy,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            taxonomy: self.taxonomy.clone(),
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub image: PathBuf,
    pub labels: PathBuf,
}

impl ManifestEntry {
    pub fn split(&self) -> Option<Split> {
        Split::of_path(&self.image)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub taxonomy: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("taxonomy\t{}\n", self.taxonomy);
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}", e.index, e.image.display(), e.labels.display());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Dataset(format!("manifest line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        let taxonomy = match lines.next() {
            Some((_, l)) => match l.split_once('\t') {
                Some(("taxonomy", name)) if !name.is_empty() => name.to_string(),
                _ => return Err(bad(1, "expected `taxonomy<TAB><name>`")),
            },
            None => return Err(bad(1, "empty manifest")),
        };
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(i + 1, "expected `index<TAB>image<TAB>labels`"));
            }
            let index = f[0].parse().map_err(|_| bad(i + 1, "index is not a number"))?;
            entries.push(ManifestEntry {
                index,
                image: f[1].into(),
                labels: f[2].into(),
            });
        }
        Ok(Self { taxonomy, entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

pub fn write_sample(image_path: &Path, label_path: &Path, sample: &Sample) -> Result<()> {
    netpbm::write_file(image_path, &netpbm::encode_ppm(&sample.image))?;
    netpbm::write_file(label_path, &netpbm::encode_pgm(&sample.labels))?;
    Ok(())
}

/// Reads an image/label pair. `parts` is recomputed from the labels and
/// `occluded` is unknown (false).
pub fn read_sample(image_path: &Path, label_path: &Path, taxonomy: &Taxonomy) -> Result<Sample> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::Dataset(format!("{}: {e}", p.display())));
    let with_path = |p: &Path, e: NetpbmError| Error::Dataset(format!("{}: {e}", p.display()));
    let image = netpbm::decode_ppm(&read(image_path)?).map_err(|e| with_path(image_path, e))?;
    let (h, w, values) = netpbm::decode_pgm(&read(label_path)?).map_err(|e| with_path(label_path, e))?;
    if image.shape()[..2] != [h, w] {
        return Err(Error::Dataset(format!(
            "{} is {}x{} but {} is {h}x{w}",
            image_path.display(),
            image.shape()[0],
            image.shape()[1],
            label_path.display()
        )));
    }
    let labels = LabelMap::new(
        h,
        w,
        taxonomy.num_classes(Level::Three),
        values.into_iter().map(usize::from).collect(),
    )
    .map_err(|e| Error::Dataset(format!("{}: {e}", label_path.display())))?;
    let parts = taxonomy.coarsen(&labels, Level::Two)?;
    Ok(Sample {
        image,
        labels,
        parts,
        occluded: false,
    })
}

/// Loads one split of the dataset described by the manifest at `path`.
pub fn load_split(path: impl AsRef<Path>, split: Split, taxonomy: &Taxonomy) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest = Manifest::load(path)?;
    if manifest.taxonomy != taxonomy.name() {
        return Err(Error::Mismatch(format!(
            "{} lists taxonomy `{}`, expected `{}`",
            path.display(),
            manifest.taxonomy,
            taxonomy.name()
        )));
    }
    let root = path.parent().unwrap_or(Path::new("."));
    let samples = manifest
        .entries
        .iter()
        .filter(|e| e.split() == Some(split))
        .map(|e| read_sample(&root.join(&e.image), &root.join(&e.labels), taxonomy))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        taxonomy: taxonomy.clone(),
        samples,
    })
}

/// Loads a split, resolving the taxonomy from the manifest (built-in names
/// or a `<name>.tax` file next to the manifest).
pub fn load_split_auto(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest = Manifest::load(path)?;
    let taxonomy = resolve_taxonomy(&manifest.taxonomy, path.parent())?;
    load_split(path, split, &taxonomy)
}

/// A built-in taxonomy by name, or a config file `<dir>/<name>.tax`.
pub fn resolve_taxonomy(name: &str, dir: Option<&Path>) -> Result<Taxonomy> {
    if let Ok(t) = Taxonomy::builtin(name) {
        return Ok(t);
    }
    if let Some(dir) = dir {
        let file = dir.join(format!("{name}.tax"));
        if file.exists() {
            return Ok(Taxonomy::load(file)?.validated()?);
        }
    }
    Err(Error::Mismatch(format!("unknown taxonomy `{name}`")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub taxonomy: Taxonomy,
    pub train: usize,
    pub test: usize,
}

/// Generates and writes one dataset under `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec, scene: &SceneSpec) -> Result<PathBuf> {
    let tax = &spec.taxonomy;
    let scene = SceneSpec {
        seed: dataset_seed(scene.seed, tax.name()),
        ..scene.clone()
    };
    let mut manifest = Manifest {
        taxonomy: tax.name().to_string(),
        entries: Vec::new(),
    };
    let mut index = 0;
    for (split, count) in [(Split::Train, spec.train), (Split::Test, spec.test)] {
        fs::create_dir_all(dir.join(split.dir()))?;
        let samples = generate_range(&scene, tax, index as u64, count)?;
        for sample in samples {
            let image = PathBuf::from(format!("{}/{index:05}.ppm", split.dir()));
            let labels = PathBuf::from(format!("{}/{index:05}.pgm", split.dir()));
            write_sample(&dir.join(&image), &dir.join(&labels), &sample)?;
            manifest.entries.push(ManifestEntry { index, image, labels });
            index += 1;
        }
    }
    if Taxonomy::builtin(tax.name()).is_err() {
        fs::write(dir.join(format!("{}.tax", tax.name())), tax.to_config())?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text())?;
    Ok(path)
}

/// Same samples as `write_dataset` would write, kept in memory.
pub fn generate_dataset(spec: &DatasetSpec, scene: &SceneSpec) -> Result<(Dataset, Dataset)> {
    let tax = &spec.taxonomy;
    let scene = SceneSpec {
        seed: dataset_seed(scene.seed, tax.name()),
        ..scene.clone()
    };
    let train = generate_range(&scene, tax, 0, spec.train)?;
    let test = generate_range(&scene, tax, spec.train as u64, spec.test)?;
    Ok((
        Dataset {
            taxonomy: tax.clone(),
            samples: train,
        },
        Dataset {
            taxonomy: tax.clone(),
            samples: test,
        },
    ))
}

/// The three standard datasets: A (7 labels, 200/50), B (12, 600/100),
/// C (10, 400/100).
pub fn benchmark_specs() -> Vec<DatasetSpec> {
    [("A", 200, 50), ("B", 600, 100), ("C", 400, 100)]
        .into_iter()
        .map(|(name, train, test)| DatasetSpec {
            taxonomy: Taxonomy::builtin(name).expect("built-in"),
            train,
            test,
        })
        .collect()
}

/// Writes every dataset in `specs` to `out/<name>/`; returns manifest paths.
pub fn make_benchmark(out: &Path, specs: &[DatasetSpec], scene: &SceneSpec) -> Result<Vec<PathBuf>> {
    specs
        .iter()
        .map(|spec| write_dataset(&out.join(spec.taxonomy.name()), spec, scene))
        .collect()
}

/// Each dataset gets its own stream so adding one does not shift the others.
fn dataset_seed(seed: u64, name: &str) -> u64 {
    name.bytes()
        .fold(seed ^ 0xCBF2_9CE4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_text_round_trip() {
        let m = Manifest {
            taxonomy: "B".into(),
            entries: vec![
                ManifestEntry {
                    index: 0,
                    image: "train/00000.ppm".into(),
                    labels: "train/00000.pgm".into(),
                },
                ManifestEntry {
                    index: 1,
                    image: "test/00001.ppm".into(),
                    labels: "test/00001.pgm".into(),
                },
            ],
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert_eq!(m.entries[1].split(), Some(Split::Test));
        assert!(Manifest::parse("name\tB\n").is_err());
        assert!(Manifest::parse("taxonomy\tB\n0\tx.ppm\n").is_err());
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            taxonomy: Taxonomy::builtin("C").unwrap(),
            train: 3,
            test: 2,
        };
        let scene = SceneSpec {
            seed: 4,
            ..SceneSpec::default()
        };
        let path = write_dataset(dir.path(), &spec, &scene).unwrap();
        let train = load_split_auto(&path, Split::Train).unwrap();
        let test = load_split(&path, Split::Test, &spec.taxonomy).unwrap();
        assert_eq!((train.len(), test.len()), (3, 2));
        let (mem_train, _) = generate_dataset(&spec, &scene).unwrap();
        for (disk, mem) in train.samples.iter().zip(&mem_train.samples) {
            assert_eq!(disk.labels, mem.labels);
            assert_eq!(netpbm::encode_ppm(&disk.image), netpbm::encode_ppm(&mem.image));
        }
        let wrong = Taxonomy::builtin("A").unwrap();
        assert!(matches!(load_split(&path, Split::Train, &wrong), Err(Error::Mismatch(_))));
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let tax = Taxonomy::builtin("A").unwrap();
        let img = dir.path().join("x.ppm");
        let lab = dir.path().join("x.pgm");
        netpbm::write_file(&img, &netpbm::encode_ppm(&Tensor::zeros(&[4, 5, 3]))).unwrap();
        netpbm::write_file(&lab, &netpbm::encode_pgm(&LabelMap::filled(4, 4, 7, 0))).unwrap();
        let err = read_sample(&img, &lab, &tax).unwrap_err();
        assert!(err.to_string().contains("4x5"), "{err}");
    }
}
