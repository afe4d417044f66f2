//! In-memory datasets and the tab-separated manifest that describes them.
//!
//! Manifest lines are `id  width  height  gt_file  proposal_file  [feature_file]`,
//! tab-separated, with paths relative to the manifest's directory. Lines
//! starting with `#` are comments, except `# key = value` lines which carry
//! dataset metadata (`stride`, `classes`, `channels`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::boxfile::{self, BoxRecord};
use crate::detect::{select_scale, ScaleConfig};
use crate::roipool::FeatureMap;
use crate::sampler::{AnnotatedImage, GroundTruth};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One image with its single-scale feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: AnnotatedImage,
    pub features: FeatureMap,
    /// Resize factor from image pixels to the resolution `features` was computed at.
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub stride: f64,
    pub num_classes: usize,
}

impl Dataset {
    pub fn images(&self) -> Vec<AnnotatedImage> {
        self.scenes.iter().map(|s| s.image.clone()).collect()
    }

    pub fn channels(&self) -> usize {
        self.scenes.first().map_or(0, |s| s.features.channels())
    }

    pub fn ground_truth(&self) -> Vec<Vec<GroundTruth>> {
        self.scenes.iter().map(|s| s.image.gts.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub width: f64,
    pub height: f64,
    pub gt_path: PathBuf,
    pub proposal_path: PathBuf,
    pub feature_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (lineno, line) in text.lines().enumerate() {
            let err = |message: String| Error::Parse {
                source_name: source_name.to_string(),
                line: lineno + 1,
                message,
            };
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.trim().strip_prefix('#') {
                if let Some((k, v)) = comment.split_once('=') {
                    m.meta.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            if !(5..=6).contains(&fields.len()) {
                return Err(err(format!(
                    "expected 5 or 6 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| err(format!("bad image size {s:?}: {e}")))
            };
            m.entries.push(ManifestEntry {
                id: fields[0].to_string(),
                width: num(fields[1])?,
                height: num(fields[2])?,
                gt_path: PathBuf::from(fields[3]),
                proposal_path: PathBuf::from(fields[4]),
                feature_path: fields.get(5).filter(|s| !s.is_empty()).map(PathBuf::from),
            });
        }
        Ok(m)
    }

    pub fn format(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(s, "# {k} = {v}");
        }
        for e in &self.entries {
            let _ = write!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                e.id,
                e.width,
                e.height,
                e.gt_path.display(),
                e.proposal_path.display()
            );
            if let Some(f) = &e.feature_path {
                let _ = write!(s, "\t{}", f.display());
            }
            s.push('\n');
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text, &path.display().to_string())
    }

    fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.meta
            .get(key)
            .map(|v| {
                v.parse::<T>().map_err(|_| {
                    Error::Config(format!("manifest metadata {key} = {v:?} is invalid"))
                })
            })
            .transpose()
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads images (and feature maps, when listed) referenced by a manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let stride = manifest.meta_value::<f64>("stride")?.unwrap_or(16.0);
    let mut max_class = manifest.meta_value::<usize>("classes")?.unwrap_or(0);
    let mut scenes = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let gts = boxfile::read(&resolve(base, &e.gt_path))?
            .into_iter()
            .map(|r| {
                let class = r.label.ok_or_else(|| {
                    Error::Config(format!(
                        "ground truth of image {} lacks a class label",
                        e.id
                    ))
                })?;
                max_class = max_class.max(class);
                Ok(GroundTruth {
                    bbox: r.bbox,
                    class,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let proposals = boxfile::read(&resolve(base, &e.proposal_path))?
            .into_iter()
            .map(|r| r.bbox)
            .collect();
        let image = AnnotatedImage::new(e.id.clone(), e.width, e.height, gts, proposals)?;
        let features = match &e.feature_path {
            Some(p) => FeatureMap::from_tensor(&Tensor::read(&resolve(base, p))?)?,
            None => {
                return Err(Error::Config(format!(
                    "manifest entry {} has no feature file",
                    e.id
                )))
            }
        };
        let factor = select_scale(e.width, e.height, &ScaleConfig::default())?;
        scenes.push(Scene {
            image,
            features,
            factor,
        });
    }
    Ok(Dataset {
        scenes,
        stride,
        num_classes: max_class,
    })
}

/// Writes box files, feature tensors and `manifest.tsv` into `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    manifest
        .meta
        .insert("stride".into(), dataset.stride.to_string());
    manifest
        .meta
        .insert("classes".into(), dataset.num_classes.to_string());
    manifest
        .meta
        .insert("channels".into(), dataset.channels().to_string());
    for scene in &dataset.scenes {
        let img = &scene.image;
        let gt_path = PathBuf::from(format!("{}.gt.txt", img.id));
        let prop_path = PathBuf::from(format!("{}.proposals.txt", img.id));
        let feat_path = PathBuf::from(format!("{}.features.bin", img.id));
        let gts: Vec<BoxRecord> = img
            .gts
            .iter()
            .map(|g| BoxRecord {
                bbox: g.bbox,
                label: Some(g.class),
                score: None,
            })
            .collect();
        let props: Vec<BoxRecord> = img.proposals.iter().map(|&b| BoxRecord::plain(b)).collect();
        boxfile::write(&dir.join(&gt_path), &gts)?;
        boxfile::write(&dir.join(&prop_path), &props)?;
        scene.features.to_tensor().write(&dir.join(&feat_path))?;
        manifest.entries.push(ManifestEntry {
            id: img.id.clone(),
            width: img.width,
            height: img.height,
            gt_path,
            proposal_path: prop_path,
            feature_path: Some(feat_path),
        });
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest.format()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parse_format() {
        let text = "# stride = 16\n# note without equals\nimg0\t320\t240\ta.gt\ta.p\nimg1\t100\t50\tb.gt\tb.p\tb.bin\n";
        let m = Manifest::parse(text, "m").unwrap();
        assert_eq!(m.meta.get("stride").map(String::as_str), Some("16"));
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].feature_path, None);
        assert_eq!(m.entries[1].feature_path, Some(PathBuf::from("b.bin")));
        assert_eq!(Manifest::parse(&m.format(), "m").unwrap(), m);
        assert!(Manifest::parse("a\t1\t2\n", "m").is_err());
        assert!(Manifest::parse("a\tx\t2\tg\tp\n", "m").is_err());
    }
}
