//! Procedural dataset: normal textures, injected defects, masks, captions
//! and a tab-separated manifest.
//!
//! Manifest columns, one header line then one row per sample:
//!
//! ```text
//! id  split  image_path  mask_path  reference_id  T_a  T_t  keyword
//! ```
//!
//! Paths are relative to the dataset directory. Defect-free rows carry an
//! all-zero mask and `-` in `reference_id`, `T_a` and `keyword`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use super::defect::{inject_defect, DefectKind, DefectSpec};
use super::image::{Image, Mask};
use super::prompt::{reference_caption, target_caption};
use super::texture::{gen_normal, TextureKind};
use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str =
    "id\tsplit\timage_path\tmask_path\treference_id\tT_a\tT_t\tkeyword";

/// How training references are chosen for each anomalous sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferencePairing {
    /// The sample is its own reference.
    SelfPair,
    /// A random sample of the same anomaly type from the same split.
    SameTypeRandom,
}

impl ReferencePairing {
    pub fn name(self) -> &'static str {
        match self {
            ReferencePairing::SelfPair => "self",
            ReferencePairing::SameTypeRandom => "same_type_random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(ReferencePairing::SelfPair),
            "same_type_random" => Ok(ReferencePairing::SameTypeRandom),
            _ => Err(Error::Config(format!("unknown reference pairing {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub textures: Vec<TextureKind>,
    pub defects: Vec<DefectKind>,
    pub normals_per_texture: usize,
    pub anomalies_per_category: usize,
    /// Share of each category (lowest ids first) assigned to training.
    pub train_fraction: f64,
    pub pairing: ReferencePairing,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: 32,
            textures: TextureKind::ALL.to_vec(),
            defects: DefectKind::ALL.to_vec(),
            normals_per_texture: 24,
            anomalies_per_category: 24,
            train_fraction: 1.0 / 3.0,
            pairing: ReferencePairing::SameTypeRandom,
        }
    }
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        if self.textures.is_empty() || self.defects.is_empty() {
            return Err(Error::Validation(
                "texture and defect lists must be nonempty".into(),
            ));
        }
        if self.normals_per_texture == 0 || self.anomalies_per_category == 0 {
            return Err(Error::Validation("sample counts must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "train fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// Training share of a category of `n` samples, rounded to nearest.
    pub fn train_count(&self, n: usize) -> usize {
        (n as f64 * self.train_fraction + 0.5).floor() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub split: Split,
    pub texture: TextureKind,
    pub defect: Option<DefectKind>,
    pub image: Image,
    pub mask: Mask,
    pub reference_id: Option<usize>,
    pub reference_text: Option<String>,
    pub target_text: String,
    pub keyword: Option<String>,
}

impl Sample {
    pub fn is_anomalous(&self) -> bool {
        self.defect.is_some()
    }

    fn image_path(&self) -> String {
        format!("images/{:05}.png", self.id)
    }

    fn mask_path(&self) -> String {
        format!("masks/{:05}.png", self.id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

struct Slot {
    id: usize,
    split: Split,
    texture: TextureKind,
    defect: Option<DefectKind>,
}

fn generate(slot: &Slot, size: usize, seed: u64) -> Result<(Image, Mask)> {
    let tex_seed = rng::stream_seed(seed, "texture", slot.id as u64);
    let normal = gen_normal(slot.texture, tex_seed, size)?.quantized();
    match slot.defect {
        None => Ok((normal, Mask::empty(size, size))),
        Some(kind) => {
            let mut r = rng::stream(seed, "defect", slot.id as u64);
            let spec = DefectSpec::random(kind, size, &mut r);
            let (img, mask) = inject_defect(&normal, &spec)?;
            Ok((img.quantized(), mask))
        }
    }
}

/// Builds the dataset in memory; a pure function of `(config, seed)`.
pub fn build_dataset(config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut slots = Vec::new();
    let mut push_category = |texture, defect, n: usize| {
        let train = config.train_count(n);
        for i in 0..n {
            slots.push(Slot {
                id: slots.len(),
                split: if i < train { Split::Train } else { Split::Test },
                texture,
                defect,
            });
        }
    };
    for &t in &config.textures {
        push_category(t, None, config.normals_per_texture);
        for &d in &config.defects {
            push_category(t, Some(d), config.anomalies_per_category);
        }
    }

    let rendered: Result<Vec<(Image, Mask)>> = slots
        .par_iter()
        .map(|s| generate(s, config.image_size, seed))
        .collect();
    let rendered = rendered?;

    let mut samples: Vec<Sample> = slots
        .iter()
        .zip(rendered)
        .map(|(s, (image, mask))| {
            let keyword = s.defect.map(|d| d.name().to_string());
            Sample {
                id: s.id,
                split: s.split,
                texture: s.texture,
                defect: s.defect,
                image,
                mask,
                reference_id: None,
                reference_text: keyword.as_deref().map(reference_caption),
                target_text: target_caption(s.texture, keyword.as_deref()),
                keyword,
            }
        })
        .collect();

    for i in 0..samples.len() {
        let Some(kind) = samples[i].defect else {
            continue;
        };
        let reference = match config.pairing {
            ReferencePairing::SelfPair => samples[i].id,
            ReferencePairing::SameTypeRandom => {
                let pool: Vec<usize> = samples
                    .iter()
                    .filter(|o| {
                        o.defect == Some(kind)
                            && o.split == samples[i].split
                            && o.id != samples[i].id
                    })
                    .map(|o| o.id)
                    .collect();
                if pool.is_empty() {
                    samples[i].id
                } else {
                    let mut r = rng::stream(seed, "pairing", samples[i].id as u64);
                    pool[r.random_range(0..pool.len())]
                }
            }
        };
        samples[i].reference_id = Some(reference);
    }
    Ok(Dataset { samples })
}

fn dash<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "-".into())
}

impl Dataset {
    pub fn get(&self, id: usize) -> Option<&Sample> {
        self.samples.get(id).filter(|s| s.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn manifest(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{:05}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                s.id,
                s.split.name(),
                s.image_path(),
                s.mask_path(),
                dash(s.reference_id.map(|r| format!("{r:05}"))),
                dash(s.reference_text.as_deref()),
                s.target_text,
                dash(s.keyword.as_deref()),
            );
        }
        out
    }

    /// Writes PNGs and the manifest under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        self.samples.par_iter().try_for_each(|s| {
            s.image.save_png(&dir.join(s.image_path()))?;
            s.mask.save_png(&dir.join(s.mask_path()))
        })?;
        let path = dir.join(MANIFEST);
        fs::write(&path, self.manifest()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Format(format!(
                "{}: unexpected header",
                path.display()
            )));
        }
        let bad = |line: &str| Error::Format(format!("malformed manifest row {line:?}"));
        let opt = |s: &str| (s != "-").then(|| s.to_string());
        let mut samples = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(bad(line));
            }
            let id: usize = f[0].parse().map_err(|_| bad(line))?;
            let split = match f[1] {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad(line)),
            };
            let texture: TextureKind = f[6].split(' ').nth(1).ok_or_else(|| bad(line))?.parse()?;
            let keyword = opt(f[7]);
            let defect = match &keyword {
                Some(k) => Some(
                    k.rsplit(' ')
                        .next()
                        .unwrap_or_default()
                        .parse::<DefectKind>()?,
                ),
                None => None,
            };
            let reference_id = match opt(f[4]) {
                Some(r) => Some(r.parse().map_err(|_| bad(line))?),
                None => None,
            };
            samples.push(Sample {
                id,
                split,
                texture,
                defect,
                image: Image::load_png(&dir.join(f[2]))?,
                mask: Mask::load_png(&dir.join(f[3]))?,
                reference_id,
                reference_text: opt(f[5]),
                target_text: f[6].to_string(),
                keyword,
            });
        }
        Ok(Dataset { samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            normals_per_texture: 3,
            anomalies_per_category: 6,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn deterministic_manifest() {
        let a = build_dataset(&small(), 5).unwrap();
        let b = build_dataset(&small(), 5).unwrap();
        assert_eq!(a.manifest(), b.manifest());
        assert_eq!(a, b);
    }

    #[test]
    fn split_counts_and_masks() {
        let cfg = small();
        let d = build_dataset(&cfg, 1).unwrap();
        let categories = cfg.textures.len() * (1 + cfg.defects.len());
        assert_eq!(
            d.samples.len(),
            cfg.textures.len() * (3 + 6 * cfg.defects.len())
        );
        let train = d.split(Split::Train).count();
        let expected = cfg.textures.len() * (1 + 2 * cfg.defects.len());
        assert_eq!(train, expected);
        assert!(categories > 0);
        for s in &d.samples {
            assert_eq!(s.is_anomalous(), !s.mask.is_empty());
            if let Some(r) = s.reference_id {
                let r = d.get(r).unwrap();
                assert_eq!(r.defect, s.defect);
                assert_eq!(r.split, s.split);
            }
        }
    }

    #[test]
    fn zero_counts_rejected() {
        let cfg = DatasetConfig {
            anomalies_per_category: 0,
            ..small()
        };
        assert!(matches!(build_dataset(&cfg, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn write_and_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let d = build_dataset(&small(), 9).unwrap();
        d.write(dir.path()).unwrap();
        let loaded = Dataset::load(dir.path()).unwrap();
        assert_eq!(loaded, d);
    }
}
